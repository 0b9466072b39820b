import numpy as np
import pytest
from scipy.spatial.distance import pdist

from onlinedet.kernels import (
    ConstantScorer,
    IdentityDeltaRegressor,
    KernelHyperParams,
    NystromKernelClassifier,
    RidgeScalarRegressor,
    fit_delta_regressors,
    gaussian_kernel,
    gaussian_kernel_matrix,
    load_model,
    predict_deltas,
    save_model,
)


def dense_solve(X, y, centers, sigma, lam):
    """Independent oracle: direct dense solve of the regularized system."""
    n = X.shape[0]
    k_nm = gaussian_kernel_matrix(X, centers, sigma)
    k_mm = gaussian_kernel_matrix(centers, centers, sigma)
    return np.linalg.solve(k_nm.T @ k_nm / n + lam * k_mm, k_nm.T @ y / n)


def well_posed_problem(seed):
    """Random classification data with sigma tied to the minimum point
    spacing, keeping both solution paths numerically well conditioned."""
    r = np.random.default_rng(seed)
    n = int(r.integers(50, 300))
    d = int(r.integers(2, 11))
    X = r.standard_normal((n, d))
    y = np.where(r.random(n) > 0.5, 1.0, -1.0)
    if abs(y.sum()) == n:
        y[0] = -y[0]
    sigma = float(pdist(X).min() * r.uniform(1.0, 2.0))
    lam = float(10 ** r.uniform(-4, -2))
    return X, y, sigma, lam


class TestGaussianKernel:
    def test_self_similarity(self, rng):
        x = rng.standard_normal(6)
        assert gaussian_kernel(x, x, sigma=1.3) == 1.0

    def test_known_exponent(self):
        x = np.zeros(4)
        z = np.zeros(4)
        z[0] = 2.0  # ||x-z||^2 = 4 = 2 sigma^2 for sigma = sqrt(2)
        assert gaussian_kernel(x, z, sigma=np.sqrt(2)) == pytest.approx(np.exp(-1), abs=1e-12)

    def test_symmetry(self, rng):
        for _ in range(20):
            x, z = rng.standard_normal((2, 5))
            assert gaussian_kernel(x, z, 0.8) == gaussian_kernel(z, x, 0.8)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_kernel(np.zeros(3), np.zeros(4), 1.0)

    def test_matrix_psd(self, rng):
        X = rng.standard_normal((40, 6))
        k = gaussian_kernel_matrix(X, X, sigma=1.1)
        eigvals = np.linalg.eigvalsh(k)
        assert eigvals.min() >= -1e-8

    def test_range(self, rng):
        X = rng.standard_normal((30, 4))
        Z = rng.standard_normal((20, 4))
        k = gaussian_kernel_matrix(X, Z, sigma=0.9)
        assert k.min() > 0 and k.max() <= 1.0


class TestNystromClassifier:
    def test_separable_blobs_full_accuracy(self, rng):
        pos = rng.standard_normal((50, 2)) + 5
        neg = rng.standard_normal((50, 2)) - 5
        X = np.vstack([pos, neg])
        y = np.r_[np.ones(50), -np.ones(50)]
        clf = NystromKernelClassifier(sigma=2.0, lam=1e-6, m_centers=100, seed=0).fit(X, y)
        assert (clf.predict(X) == y).mean() == 1.0
        # the exact-KRR oracle agrees with the trained model on the data
        oracle_alpha = dense_solve(X, y, clf.centers_, 2.0, 1e-6)
        oracle_scores = gaussian_kernel_matrix(X, clf.centers_, 2.0) @ oracle_alpha
        assert np.all(np.sign(oracle_scores) == y)

    def test_cg_matches_dense_solve(self):
        for seed in range(10):
            X, y, sigma, lam = well_posed_problem(seed)
            clf = NystromKernelClassifier(
                sigma=sigma, lam=lam, m_centers=X.shape[0], seed=seed
            ).fit(X, y)
            oracle = dense_solve(X, y, clf.centers_, sigma, lam)
            err = np.linalg.norm(clf.alpha_ - oracle) / np.linalg.norm(oracle)
            assert err < 1e-6

    def test_duplicated_training_set_same_function(self, rng):
        pos = rng.standard_normal((50, 2)) + 5
        neg = rng.standard_normal((50, 2)) - 5
        X = np.vstack([pos, neg])
        y = np.r_[np.ones(50), -np.ones(50)]
        base = NystromKernelClassifier(sigma=2.0, lam=1e-3, m_centers=100, seed=0).fit(X, y)
        doubled = NystromKernelClassifier(sigma=2.0, lam=1e-3, m_centers=200, seed=0).fit(
            np.vstack([X, X]), np.r_[y, y]
        )
        probe = rng.standard_normal((50, 2)) * 4
        diff = np.abs(base.decision_function(probe) - doubled.decision_function(probe))
        assert diff.max() < 1e-6
        # both agree with the dense-solve oracle as functions on the probe
        oracle = dense_solve(X, y, base.centers_, 2.0, 1e-3)
        oracle_scores = gaussian_kernel_matrix(probe, base.centers_, 2.0) @ oracle
        assert np.abs(base.decision_function(probe) - oracle_scores).max() < 1e-6

    def test_single_class_rejected(self, rng):
        X = rng.standard_normal((10, 3))
        with pytest.raises(ValueError, match="single class"):
            NystromKernelClassifier(seed=0).fit(X, np.ones(10))

    def test_nonfinite_rejected(self):
        X = np.ones((4, 2))
        X[0, 0] = np.inf
        with pytest.raises(ValueError):
            NystromKernelClassifier(seed=0).fit(X, np.array([1, -1, 1, -1.0]))

    def test_seeded_determinism(self, rng):
        X = rng.standard_normal((80, 4))
        y = np.where(rng.random(80) > 0.5, 1.0, -1.0)
        a = NystromKernelClassifier(sigma=1.0, lam=1e-3, m_centers=40, seed=7).fit(X, y)
        b = NystromKernelClassifier(sigma=1.0, lam=1e-3, m_centers=40, seed=7).fit(X, y)
        np.testing.assert_array_equal(a.centers_, b.centers_)
        np.testing.assert_array_equal(a.alpha_, b.alpha_)

    def test_predict_scores_contract(self, rng):
        X = rng.standard_normal((30, 3))
        y = np.where(rng.random(30) > 0.5, 1.0, -1.0)
        if abs(y.sum()) == 30:
            y[0] = -y[0]
        clf = NystromKernelClassifier(sigma=1.0, lam=1e-3, seed=0).fit(X, y)
        assert clf.decision_function(np.empty((0, 3))).shape == (0,)
        with pytest.raises(ValueError):
            clf.decision_function(np.zeros((2, 5)))
        # permutation of rows permutes outputs identically
        probe = rng.standard_normal((12, 3))
        perm = rng.permutation(12)
        np.testing.assert_array_equal(
            clf.decision_function(probe)[perm], clf.decision_function(probe[perm])
        )

    def test_one_center_model_scores_are_kernel_values(self, rng):
        clf = NystromKernelClassifier(sigma=1.5)
        clf.centers_ = rng.standard_normal((1, 4))
        clf.alpha_ = np.array([1.0])
        probe = rng.standard_normal((9, 4))
        expected = [gaussian_kernel(p, clf.centers_[0], 1.5) for p in probe]
        np.testing.assert_allclose(clf.decision_function(probe), expected, atol=1e-12)

    def test_score_continuity(self, rng):
        """Finite-difference gradient matches the analytic kernel gradient."""
        X = rng.standard_normal((40, 3))
        y = np.where(rng.random(40) > 0.5, 1.0, -1.0)
        if abs(y.sum()) == 40:
            y[0] = -y[0]
        sigma = 1.2
        clf = NystromKernelClassifier(sigma=sigma, lam=1e-3, seed=1).fit(X, y)
        x0 = rng.standard_normal(3)
        k = gaussian_kernel_matrix(x0[None], clf.centers_, sigma).reshape(-1)
        analytic = ((clf.centers_ - x0) / sigma**2 * (clf.alpha_ * k)[:, None]).sum(axis=0)
        eps = 1e-6
        numeric = np.empty(3)
        for i in range(3):
            up, down = x0.copy(), x0.copy()
            up[i] += eps
            down[i] -= eps
            numeric[i] = (
                clf.decision_function(up[None])[0] - clf.decision_function(down[None])[0]
            ) / (2 * eps)
        np.testing.assert_allclose(numeric, analytic, atol=1e-5)

    def test_pos_weight_shifts_boundary(self, rng):
        X = np.vstack([rng.standard_normal((30, 2)) + 1.2, rng.standard_normal((90, 2)) - 1.2])
        y = np.r_[np.ones(30), -np.ones(90)]
        plain = NystromKernelClassifier(sigma=1.5, lam=1e-2, seed=0).fit(X, y)
        weighted = NystromKernelClassifier(sigma=1.5, lam=1e-2, pos_weight=3.0, seed=0).fit(X, y)
        assert weighted.decision_function(X[:30]).mean() > plain.decision_function(X[:30]).mean()


class TestRidgeRegressor:
    def test_zero_targets(self, rng):
        X = rng.standard_normal((30, 4))
        reg = RidgeScalarRegressor(lam=1e-3).fit(X, np.zeros(30))
        np.testing.assert_allclose(reg.weights_, 0, atol=1e-10)
        assert reg.bias_ == pytest.approx(0, abs=1e-12)

    def test_recovers_exact_linear_map(self, rng):
        # normal-equation oracle on noiseless data
        X = rng.standard_normal((60, 5))
        w_true = rng.standard_normal(5)
        t = X @ w_true
        reg = RidgeScalarRegressor(lam=1e-8).fit(X, t)
        np.testing.assert_allclose(reg.weights_, w_true, atol=1e-6)
        assert abs(reg.bias_) < 1e-6

    def test_infinite_regularization_limit(self, rng):
        X = rng.standard_normal((40, 3))
        t = rng.standard_normal(40) + 2.0
        reg = RidgeScalarRegressor(lam=1e12).fit(X, t)
        np.testing.assert_allclose(reg.weights_, 0, atol=1e-6)
        assert reg.bias_ == pytest.approx(t.mean(), abs=1e-6)

    def test_bias_is_unregularized(self, rng):
        X = rng.standard_normal((50, 2))
        t = np.full(50, 7.0)
        reg = RidgeScalarRegressor(lam=1e6).fit(X, t)
        assert reg.bias_ == pytest.approx(7.0, abs=1e-9)

    def test_nonfinite_rejected(self, rng):
        X = rng.standard_normal((5, 2))
        with pytest.raises(ValueError):
            RidgeScalarRegressor().fit(X, np.array([1, 2, np.nan, 4, 5.0]))


class TestDeltaRegressors:
    def test_zero_weight_models_return_biases(self, rng):
        X = rng.standard_normal((30, 4))
        deltas = np.tile([0.1, -0.2, 0.05, 0.3], (30, 1))
        regs = fit_delta_regressors(X, deltas, lam=1e9)
        out = predict_deltas(regs, rng.standard_normal((3, 4)))
        np.testing.assert_allclose(out, np.tile([0.1, -0.2, 0.05, 0.3], (3, 1)), atol=1e-6)

    def test_linearity(self, rng):
        X = rng.standard_normal((50, 6))
        deltas = rng.standard_normal((50, 4))
        regs = fit_delta_regressors(X, deltas, lam=1e-3)
        x = rng.standard_normal((1, 6))
        d2 = predict_deltas(regs, 2 * x)
        d1 = predict_deltas(regs, x)
        d0 = predict_deltas(regs, np.zeros((1, 6)))
        np.testing.assert_allclose(d2 - d1, d1 - d0, atol=1e-9)

    def test_closed_loop_with_geometry(self, rng):
        """Refiners trained on encoded anchor->gt offsets reproduce the gt."""
        from onlinedet.geometry import decode_deltas, encode_deltas

        anchors = np.stack(
            [
                rng.uniform(0, 100, 200),
                rng.uniform(0, 100, 200),
                np.zeros(200),
                np.zeros(200),
            ],
            axis=1,
        )
        anchors[:, 2] = anchors[:, 0] + rng.uniform(10, 40, 200)
        anchors[:, 3] = anchors[:, 1] + rng.uniform(10, 40, 200)
        shift = rng.uniform(-3, 3, (200, 4))
        gt = anchors + shift
        deltas = encode_deltas(anchors, gt)
        # features rich enough to determine the offsets linearly
        feats = np.hstack([deltas @ rng.standard_normal((4, 6)), rng.standard_normal((200, 3))])
        regs = fit_delta_regressors(feats, deltas, lam=1e-8)
        decoded = decode_deltas(anchors, predict_deltas(regs, feats))
        assert np.max(np.abs(decoded - gt)) < 0.5

    def test_wrong_count_rejected(self):
        with pytest.raises(ValueError):
            predict_deltas([RidgeScalarRegressor()] * 3, np.zeros((1, 2)))


class TestSerialization:
    def test_classifier_roundtrip(self, tmp_path, rng):
        X = rng.standard_normal((40, 3))
        y = np.where(rng.random(40) > 0.5, 1.0, -1.0)
        if abs(y.sum()) == 40:
            y[0] = -y[0]
        clf = NystromKernelClassifier(sigma=1.1, lam=1e-3, m_centers=20, seed=3).fit(X, y)
        path = tmp_path / "clf.okrr"
        save_model(path, clf)
        loaded = load_model(path)
        probe = rng.standard_normal((7, 3))
        np.testing.assert_array_equal(
            clf.decision_function(probe), loaded.decision_function(probe)
        )

    def test_ridge_roundtrip(self, tmp_path, rng):
        X = rng.standard_normal((30, 4))
        reg = RidgeScalarRegressor(lam=0.5).fit(X, rng.standard_normal(30))
        path = tmp_path / "reg.okrr"
        save_model(path, reg)
        loaded = load_model(path)
        probe = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(reg.predict(probe), loaded.predict(probe))

    def test_constant_and_identity_roundtrip(self, tmp_path):
        save_model(tmp_path / "c.okrr", ConstantScorer(-2.5))
        c = load_model(tmp_path / "c.okrr")
        assert c.decision_function(np.zeros((3, 2))).tolist() == [-2.5] * 3
        save_model(tmp_path / "i.okrr", IdentityDeltaRegressor())
        i = load_model(tmp_path / "i.okrr")
        assert i.predict(np.zeros((2, 4))).tolist() == [0.0, 0.0]

    def test_magic_is_checked(self, tmp_path):
        path = tmp_path / "bad.okrr"
        path.write_bytes(b"NOTOK" + b"\x00" * 20)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)


def test_hyper_params_validation():
    with pytest.raises(ValueError):
        KernelHyperParams(sigma=0.0)
    with pytest.raises(ValueError):
        KernelHyperParams(lam=-1.0)
    hp = KernelHyperParams(sigma=2.0, lam=1e-3)
    clf = hp.make_classifier(seed=5)
    assert clf.sigma == 2.0 and clf.seed == 5
