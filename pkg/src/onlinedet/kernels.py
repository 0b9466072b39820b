"""Trainable components: Gaussian-kernel Nyström classifiers and RLS refiners.

The classifier solves the Nyström-regularized least-squares problem

    (K_nm^T W K_nm / n + lam * K_mm) alpha = K_nm^T W y / n

by conjugate gradient, preconditioned with two triangular factors of the
center kernel matrix: T = chol(K_mm + jitter I) and
A = chol(T T^T / M + lam I). With B = T^-1 A^-1 the CG runs on the
symmetrized system B^T H B beta = B^T rhs and alpha = B beta. W is the
identity unless a positive-class weight is requested.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from .validation import check_finite_2d

__all__ = [
    "KernelHyperParams",
    "gaussian_kernel",
    "gaussian_kernel_matrix",
    "NystromKernelClassifier",
    "ConstantScorer",
    "RidgeScalarRegressor",
    "IdentityDeltaRegressor",
    "fit_delta_regressors",
    "predict_deltas",
    "save_model",
    "load_model",
]

MODEL_MAGIC = b"OKRR1"


@dataclass
class KernelHyperParams:
    """Hyper-parameters shared by the kernel classifiers of one stage.

    ``m_centers=None`` means "all training rows, capped at 2000".
    """

    sigma: float = 1.0
    lam: float = 1e-4
    m_centers: int | None = None
    cg_max_iter: int = 500
    cg_tol: float = 1e-11
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.m_centers is not None and self.m_centers < 1:
            raise ValueError("m_centers must be >= 1")

    def make_classifier(self, seed=None) -> "NystromKernelClassifier":
        return NystromKernelClassifier(
            sigma=self.sigma,
            lam=self.lam,
            m_centers=self.m_centers,
            cg_max_iter=self.cg_max_iter,
            cg_tol=self.cg_tol,
            pos_weight=self.pos_weight,
            seed=seed,
        )


def gaussian_kernel(x, z, sigma: float) -> float:
    """exp(-||x - z||^2 / (2 sigma^2)) for two vectors."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if x.shape != z.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {z.shape}")
    d2 = float(np.sum((x - z) ** 2))
    return float(np.exp(-d2 / (2.0 * sigma * sigma)))


def gaussian_kernel_matrix(X, Z, sigma: float) -> np.ndarray:
    """Pairwise Gaussian kernel between the rows of X (n, d) and Z (m, d)."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if X.shape[1] != Z.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Z.shape[1]}")
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(Z * Z, axis=1)[None, :]
        - 2.0 * (X @ Z.T)
    )
    np.clip(d2, 0.0, None, out=d2)
    return np.exp(d2 / (-2.0 * sigma * sigma))


class NystromKernelClassifier(BaseEstimator, ClassifierMixin):
    """Binary least-squares kernel classifier on a Nyström center subset.

    Labels are +-1 and the decision threshold is 0. Centers are a uniform
    random subsample of the training rows, drawn without replacement with
    the given seed.

    Attributes after fit: ``centers_`` (M, d), ``alpha_`` (M,),
    ``cg_iters_`` and ``cg_residual_`` from the solver.
    """

    def __init__(self, sigma=1.0, lam=1e-4, m_centers=None,
                 cg_max_iter=500, cg_tol=1e-11, pos_weight=1.0, seed=None):
        self.sigma = sigma
        self.lam = lam
        self.m_centers = m_centers
        self.cg_max_iter = cg_max_iter
        self.cg_tol = cg_tol
        self.pos_weight = pos_weight
        self.seed = seed

    def fit(self, X, y):
        X = check_finite_2d(X, "X")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        n = X.shape[0]
        if n < 2 or y.shape[0] != n:
            raise ValueError("need at least two aligned samples")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if np.all(y == y[0]):
            raise ValueError("training data contains a single class")

        cap = min(n, 2000) if self.m_centers is None else min(self.m_centers, n)
        rng = np.random.default_rng(self.seed)
        idx = rng.choice(n, size=cap, replace=False)
        centers = X[idx]
        m = centers.shape[0]

        k_mm = gaussian_kernel_matrix(centers, centers, self.sigma)
        k_nm = gaussian_kernel_matrix(X, centers, self.sigma)
        weights = np.where(y > 0, self.pos_weight, 1.0)

        t_fac = _jittered_cholesky(k_mm)
        a_inner = t_fac @ t_fac.T / m + self.lam * np.eye(m)
        a_fac = scipy.linalg.cholesky(a_inner, lower=False)

        def apply_b(v):
            return scipy.linalg.solve_triangular(
                t_fac, scipy.linalg.solve_triangular(a_fac, v, lower=False), lower=False
            )

        def apply_bt(v):
            return scipy.linalg.solve_triangular(
                a_fac,
                scipy.linalg.solve_triangular(t_fac, v, trans=1, lower=False),
                trans=1,
                lower=False,
            )

        def matvec(v):
            c = apply_b(v)
            z = k_nm.T @ (weights * (k_nm @ c)) / n + self.lam * (k_mm @ c)
            return apply_bt(z)

        rhs = apply_bt(k_nm.T @ (weights * y) / n)
        beta, iters, residual = _conjugate_gradient(matvec, rhs, self.cg_tol, self.cg_max_iter)

        self.centers_ = centers
        self.alpha_ = apply_b(beta)
        self.cg_iters_ = iters
        self.cg_residual_ = residual
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        X = check_finite_2d(X, "X")
        if X.shape[1] != self.centers_.shape[1]:
            raise ValueError(
                f"dimension mismatch: model expects {self.centers_.shape[1]}, got {X.shape[1]}"
            )
        if X.shape[0] == 0:
            return np.empty(0)
        return gaussian_kernel_matrix(X, self.centers_, self.sigma) @ self.alpha_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) > 0, 1, -1)


class ConstantScorer:
    """Stand-in classifier scoring every input with a fixed value.

    Used for anchors or classes that never saw a positive sample; the
    default score keeps every input below the 0 decision threshold.
    """

    def __init__(self, score: float = -1.0):
        self.score = float(score)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X)
        return np.full(X.shape[0], self.score)

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) > 0, 1, -1)


def _jittered_cholesky(k_mm: np.ndarray) -> np.ndarray:
    """Upper-triangular factor of K_mm plus a small diagonal jitter.

    The jitter starts at 1e-9 * trace / M and grows until the factorization
    both succeeds and is well enough conditioned to precondition with;
    duplicate or near-duplicate centers otherwise poison the triangular
    solves. The solved system itself never carries the jitter.
    """
    m = k_mm.shape[0]
    jitter = 1e-9 * np.trace(k_mm) / m
    fac = None
    for _ in range(8):
        try:
            fac = scipy.linalg.cholesky(k_mm + jitter * np.eye(m), lower=False)
        except scipy.linalg.LinAlgError:
            jitter *= 100.0
            continue
        diag = np.diag(fac)
        if diag.min() >= 1e-2 * diag.max():
            return fac
        jitter *= 100.0
    if fac is None:
        raise np.linalg.LinAlgError("center kernel matrix is not factorizable")
    return fac


def _conjugate_gradient(matvec, rhs, tol, max_iter):
    """Plain CG on an SPD operator; stops at relative residual <= tol."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return x, 0, 0.0
    rr = float(r @ r)
    iters = 0
    for iters in range(1, max_iter + 1):
        ap = matvec(p)
        denom = float(p @ ap)
        if denom <= 0:
            break
        step = rr / denom
        x += step * p
        r -= step * ap
        rr_next = float(r @ r)
        if np.sqrt(rr_next) / rhs_norm <= tol:
            rr = rr_next
            break
        p = r + (rr_next / rr) * p
        rr = rr_next
    return x, iters, float(np.sqrt(rr) / rhs_norm)


class RidgeScalarRegressor(BaseEstimator, RegressorMixin):
    """Ridge regression with an unregularized intercept, via normal equations."""

    def __init__(self, lam=1e-3):
        self.lam = lam

    def fit(self, X, t):
        X = check_finite_2d(X, "X")
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if X.shape[0] != t.shape[0] or X.shape[0] < 1:
            raise ValueError("need aligned, nonempty X and t")
        if not np.all(np.isfinite(t)):
            raise ValueError("targets contain non-finite values")
        x_mean = X.mean(axis=0)
        t_mean = t.mean()
        xc = X - x_mean
        gram = xc.T @ xc + self.lam * np.eye(X.shape[1])
        self.weights_ = np.linalg.solve(gram, xc.T @ (t - t_mean))
        self.bias_ = float(t_mean - x_mean @ self.weights_)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        X = check_finite_2d(X, "X")
        if X.shape[1] != self.weights_.shape[0]:
            raise ValueError("dimension mismatch")
        return X @ self.weights_ + self.bias_


def fit_delta_regressors(X, deltas, lam: float) -> list[RidgeScalarRegressor]:
    """One ridge regressor per offset component (tx, ty, tw, th)."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    return [RidgeScalarRegressor(lam=lam).fit(X, deltas[:, k]) for k in range(4)]


def predict_deltas(regressors, X) -> np.ndarray:
    """Stack the four per-component predictions into (N, 4) offsets."""
    if len(regressors) != 4:
        raise ValueError("expected exactly four component regressors")
    return np.stack([reg.predict(X) for reg in regressors], axis=1)


class IdentityDeltaRegressor:
    """Predicts zero offsets; the refiner used when no positives exist."""

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X)
        return np.zeros(X.shape[0])


def save_model(path, model) -> None:
    """Serialize a fitted kernel model to the versioned binary blob format.

    Layout: magic "OKRR1", a kind byte (0 classifier, 1 ridge regressor,
    2 constant scorer), little-endian u32 dimensions, then little-endian
    f64 payloads (hyper-parameters, centers/alpha or weights/bias).
    """
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        if isinstance(model, NystromKernelClassifier):
            m, d = model.centers_.shape
            fh.write(struct.pack("<BII", 0, m, d))
            fh.write(struct.pack("<dd", model.sigma, model.lam))
            fh.write(model.centers_.astype("<f8").tobytes())
            fh.write(model.alpha_.astype("<f8").tobytes())
        elif isinstance(model, RidgeScalarRegressor):
            d = model.weights_.shape[0]
            fh.write(struct.pack("<BI", 1, d))
            fh.write(struct.pack("<d", model.lam))
            fh.write(model.weights_.astype("<f8").tobytes())
            fh.write(struct.pack("<d", model.bias_))
        elif isinstance(model, (ConstantScorer, IdentityDeltaRegressor)):
            score = model.score if isinstance(model, ConstantScorer) else 0.0
            kind = 2 if isinstance(model, ConstantScorer) else 3
            fh.write(struct.pack("<Bd", kind, score))
        else:
            raise TypeError(f"cannot serialize {type(model).__name__}")


def load_model(path):
    """Inverse of save_model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MODEL_MAGIC:
        raise ValueError(f"bad model magic {blob[:5]!r}")
    kind = blob[5]
    off = 6
    if kind == 0:
        m, d = struct.unpack_from("<II", blob, off)
        off += 8
        sigma, lam = struct.unpack_from("<dd", blob, off)
        off += 16
        centers = np.frombuffer(blob, dtype="<f8", count=m * d, offset=off).reshape(m, d)
        off += 8 * m * d
        alpha = np.frombuffer(blob, dtype="<f8", count=m, offset=off)
        model = NystromKernelClassifier(sigma=sigma, lam=lam, m_centers=m)
        model.centers_ = centers.copy()
        model.alpha_ = alpha.copy()
        model.n_features_in_ = d
        return model
    if kind == 1:
        (d,) = struct.unpack_from("<I", blob, off)
        off += 4
        (lam,) = struct.unpack_from("<d", blob, off)
        off += 8
        weights = np.frombuffer(blob, dtype="<f8", count=d, offset=off)
        off += 8 * d
        (bias,) = struct.unpack_from("<d", blob, off)
        model = RidgeScalarRegressor(lam=lam)
        model.weights_ = weights.copy()
        model.bias_ = bias
        model.n_features_in_ = d
        return model
    if kind == 2:
        (score,) = struct.unpack_from("<d", blob, off)
        return ConstantScorer(score)
    if kind == 3:
        return IdentityDeltaRegressor()
    raise ValueError(f"unknown model kind {kind}")
