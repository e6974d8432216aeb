"""Matrix exports and the shot-count sweep."""

from __future__ import annotations

import numpy as np

from .encoder import embed
from .episodes import Dataset, sample_classes, sample_items
from .errors import ContractError
from .io import write_csv, write_matrix_csv
from .numerics import STREAM_EVAL, Rng
from .prototypes import init_prototype, measure_batch
from .training import TrainConfig, evaluate, train

SWEEP_VARIANTS = ("hypersphere", "vanilla")


def minmax_normalize(m) -> np.ndarray:
    """Whole-matrix min-max scaling to [0, 1]; a constant matrix maps to zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def _sample_grouped(encoder, ds: Dataset, n_classes: int, n_per_class: int, rng: Rng):
    classes = sample_classes(ds, n_classes, rng)
    idx = [sample_items(ds, c, n_per_class, rng) for c in classes]
    emb = [embed(encoder, ds.features[i]) for i in idx]
    return classes, emb


def distance_matrix(encoder, ds: Dataset, n_classes: int, n_per_class: int, rng: Rng, variant: str = "hypersphere"):
    """Rows: sampled instances grouped by class. Columns: the classes'
    closed-form prototypes. Entries: normalized measurement values."""
    _, emb = _sample_grouped(encoder, ds, n_classes, n_per_class, rng)
    protos = [init_prototype(variant, e) for e in emb]
    centers = np.stack([p.center for p in protos])
    scales = np.array([p.scale for p in protos], dtype=np.float64)
    m = measure_batch(variant, np.concatenate(emb), centers, scales, with_grads=False).value
    return minmax_normalize(m)


def similarity_matrix(encoder, ds: Dataset, n_classes: int, n_per_class: int, rng: Rng):
    """Cosine similarity between all sampled instance embeddings, grouped by class."""
    _, emb = _sample_grouped(encoder, ds, n_classes, n_per_class, rng)
    f = np.concatenate(emb)
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0.0):
        raise ContractError("cosine similarity undefined for a zero embedding")
    u = f / norms[:, None]
    return u @ u.T


def export_distance_matrix(encoder, ds, n_classes, n_per_class, rng, path, variant="hypersphere"):
    m = distance_matrix(encoder, ds, n_classes, n_per_class, rng, variant)
    write_matrix_csv(path, m)
    return m


def export_similarity_matrix(encoder, ds, n_classes, n_per_class, rng, path):
    m = similarity_matrix(encoder, ds, n_classes, n_per_class, rng)
    write_matrix_csv(path, m)
    return m


def shot_sweep(config: TrainConfig, train_ds: Dataset, test_ds: Dataset, shots, rng: Rng, path=None, jobs: int = 1):
    """Train and evaluate each (variant, shot) pair from the same seed stream.

    Returns a list of ``(variant, shot, Metrics)``.
    """
    shots = [int(s) for s in shots]
    if not shots or min(shots) < 1:
        raise ContractError("shots must be a non-empty list of positive integers")
    rows = []
    for variant in SWEEP_VARIANTS:
        for shot in shots:
            cfg = config.replace(variant=variant, k_shot=shot)
            state, _ = train(cfg, train_ds, rng)
            rows.append((variant, shot, evaluate(state.encoder, test_ds, cfg, rng.fork(STREAM_EVAL), jobs)))
    if path is not None:
        write_csv(
            path,
            ["variant", "shot", "accuracy", "ci95_halfwidth", "f1", "f1_ci95_halfwidth", "n"],
            [(v, s, m.accuracy, m.accuracy_ci, m.f1, m.f1_ci, m.n_episodes) for v, s, m in rows],
        )
    return rows
