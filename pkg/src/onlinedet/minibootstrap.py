"""Approximated hard-negative mining over a bounded random subset of negatives.

Negatives are visited in n_batches disjoint random batches of batch_size
rows each. The first batch seeds the hard-negative set; every later batch
is scored by the classifier fitted on positives plus the current hard set,
and rows at or above hard_threshold join the set. Rows outside the chosen
batches are never read from the pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelHyperParams

__all__ = [
    "MinibootstrapConfig",
    "MinibootstrapState",
    "ArrayPool",
    "partition_negatives",
    "run_minibootstrap",
]


@dataclass
class MinibootstrapConfig:
    """Loop parameters: batch count/size, hardness threshold, set capacity."""

    n_batches: int = 10
    batch_size: int = 2000
    hard_threshold: float = 0.0
    max_hard_set: int | None = None  # defaults to n_batches * batch_size
    seed: int | None = None

    def __post_init__(self):
        if self.n_batches < 1 or self.batch_size < 1:
            raise ValueError("n_batches and batch_size must be positive")
        if self.max_hard_set is not None and self.max_hard_set < 1:
            raise ValueError("max_hard_set must be positive")

    @property
    def hard_capacity(self) -> int:
        return self.max_hard_set if self.max_hard_set is not None else self.n_batches * self.batch_size


@dataclass
class MinibootstrapState:
    """What the loop accumulated: visited batches, hard rows, per-row audit."""

    batches: list
    hard_set: np.ndarray
    hard_sources: np.ndarray  # batch index each hard row came from
    hard_admission_scores: np.ndarray  # score at admission; NaN for batch-0 seeds
    iterations: int
    trace: list = field(default_factory=list)


class ArrayPool:
    """Negative pool backed by an in-memory (n, d) matrix."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def take(self, indices) -> np.ndarray:
        return self.rows[np.asarray(indices, dtype=np.intp)]


def partition_negatives(n_negatives: int, cfg: MinibootstrapConfig) -> list[np.ndarray]:
    """Split a random permutation of 0..n-1 into at most n_batches batches.

    Batches are disjoint and have batch_size rows except possibly the last;
    when the pool is smaller than n_batches * batch_size the batch list
    shrinks or the final batch is short.
    """
    if n_negatives < 1:
        raise ValueError("need at least one negative")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n_negatives)
    batches = []
    for start in range(0, n_negatives, cfg.batch_size):
        if len(batches) == cfg.n_batches:
            break
        batches.append(perm[start:start + cfg.batch_size])
    return batches


def run_minibootstrap(positives, pool, cfg: MinibootstrapConfig,
                      hyper: KernelHyperParams, trace_path=None):
    """Train a classifier on positives vs mined hard negatives.

    ``pool`` exposes ``__len__`` and ``take(indices) -> (k, d) rows``; only
    rows inside the selected batches are ever taken. Returns the final
    fitted classifier and the loop state.
    """
    positives = np.asarray(positives, dtype=np.float64)
    if positives.ndim != 2 or positives.shape[0] < 1:
        raise ValueError("positives must be a nonempty (P, d) matrix")
    if len(pool) < 1:
        raise ValueError("need at least one negative")

    rng = np.random.default_rng(cfg.seed)
    batches = partition_negatives(len(pool), cfg)
    capacity = cfg.hard_capacity

    seed_idx = batches[0]
    if seed_idx.size > capacity:
        seed_idx = seed_idx[np.sort(rng.choice(seed_idx.size, size=capacity, replace=False))]
    hard = pool.take(seed_idx)
    sources = np.zeros(hard.shape[0], dtype=np.intp)
    admission = np.full(hard.shape[0], np.nan)
    trace = []

    def fit(neg_rows):
        x = np.concatenate([positives, neg_rows], axis=0)
        y = np.concatenate([np.ones(positives.shape[0]), -np.ones(neg_rows.shape[0])])
        clf = hyper.make_classifier(seed=_derive_seed(cfg.seed, len(trace)))
        return clf.fit(x, y)

    model = None
    for t in range(1, len(batches)):
        model = fit(hard)
        batch_rows = pool.take(batches[t])
        scores = model.decision_function(batch_rows)
        admit = scores >= cfg.hard_threshold
        added = int(admit.sum())
        hard = np.concatenate([hard, batch_rows[admit]], axis=0)
        sources = np.concatenate([sources, np.full(added, t, dtype=np.intp)])
        admission = np.concatenate([admission, scores[admit]])

        evicted = 0
        if hard.shape[0] > capacity:
            # Keep the hardest rows under the current model; easiest go first.
            current = model.decision_function(hard)
            order = np.argsort(-current, kind="stable")[:capacity]
            order = np.sort(order)  # preserve admission order among survivors
            evicted = hard.shape[0] - capacity
            hard = hard[order]
            sources = sources[order]
            admission = admission[order]
        trace.append(
            {
                "batch": t,
                "additions": added,
                "evictions": evicted,
                "fit_residual": model.cg_residual_,
            }
        )

    if hard.shape[0] == 0:
        hard = pool.take(batches[0])
        sources = np.zeros(hard.shape[0], dtype=np.intp)
        admission = np.full(hard.shape[0], np.nan)
    model = fit(hard)
    trace.append(
        {"batch": -1, "additions": 0, "evictions": 0, "fit_residual": model.cg_residual_}
    )  # batch -1 marks the final fit on the accumulated hard set

    state = MinibootstrapState(
        batches=batches,
        hard_set=hard,
        hard_sources=sources,
        hard_admission_scores=admission,
        iterations=len(batches),
        trace=trace,
    )
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for row in trace:
                fh.write(
                    f"{row['batch']} {row['additions']} {row['evictions']} {row['fit_residual']:.6e}\n"
                )
    return model, state


def _derive_seed(seed, offset: int):
    if seed is None:
        return None
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(offset,)).generate_state(1)[0])
