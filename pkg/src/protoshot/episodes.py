"""Datasets, synthetic Gaussian mixtures and few-shot episode samplers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SamplingError, SamplingTimeoutError
from .numerics import Rng

DEFAULT_MAX_ATTEMPTS = 10**6


@dataclass
class Dataset:
    """Labelled feature vectors. Labels are contiguous ints 0..n_classes-1."""

    features: np.ndarray
    labels: np.ndarray
    true_spread: dict | None = None
    source_classes: np.ndarray | None = None
    class_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        classes = np.unique(self.labels)
        if classes.size and not np.array_equal(classes, np.arange(classes.size)):
            raise ContractError("labels must be contiguous integers starting at 0")
        self.class_index = {int(c): np.flatnonzero(self.labels == c) for c in classes}

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_index)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Episode:
    """One N-way task: K support and K' query items per class.

    ``classes`` is sorted ascending, so position in it doubles as the
    tie-breaking order. ``*_idx`` are item indices into the source dataset.
    """

    classes: np.ndarray
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def support(self) -> list:
        return list(zip(self.support_x, self.support_y.tolist()))

    @property
    def query(self) -> list:
        return list(zip(self.query_x, self.query_y.tolist()))

    def support_of(self, cls: int) -> np.ndarray:
        return self.support_x[self.support_y == cls]


@dataclass
class MixtureSpec:
    n_classes: int = 25
    dim: int = 16
    samples_per_class: int = 100
    mean_scale: float = 10.0
    spread_lo: float = 0.5
    spread_hi: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ContractError("mixture sizes must be positive")
        if not self.spread_lo > 0 or self.spread_hi < self.spread_lo:
            raise ContractError("need 0 < spread_lo <= spread_hi")


def make_gaussian_mixture(spec: MixtureSpec) -> Dataset:
    root = Rng(spec.seed)
    means = root.fork(0).uniform(-spec.mean_scale, spec.mean_scale, (spec.n_classes, spec.dim))
    spreads = root.fork(1).uniform(spec.spread_lo, spec.spread_hi, spec.n_classes)
    noise = root.fork(2).normal((spec.n_classes, spec.samples_per_class, spec.dim))
    x = means[:, None, :] + spreads[:, None, None] * noise
    y = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    return Dataset(
        x.reshape(-1, spec.dim), y, {c: float(s) for c, s in enumerate(spreads)}
    )


def sample_classes(ds: Dataset, n_way: int, rng: Rng, include: int | None = None) -> np.ndarray:
    if n_way < 1:
        raise ContractError("n_way must be >= 1")
    if n_way > ds.n_classes:
        raise SamplingError(f"need {n_way} classes, dataset has {ds.n_classes}")
    if include is None:
        return np.sort(rng.sample_without_replacement(ds.n_classes, n_way))
    if include not in ds.class_index:
        raise ContractError(f"class {include} is not in the dataset")
    others = [c for c in range(ds.n_classes) if c != include]
    picked = rng.sample_without_replacement(len(others), n_way - 1)
    return np.sort(np.array([include] + [others[i] for i in picked], dtype=np.int64))


def sample_items(ds: Dataset, cls: int, k: int, rng: Rng) -> np.ndarray:
    pool = ds.class_index[int(cls)]
    if len(pool) < k:
        raise SamplingError(f"class {cls} has {len(pool)} items, needs {k}")
    return pool[rng.sample_without_replacement(len(pool), k)]


def episode_from_classes(ds: Dataset, classes, k_shot: int, k_query: int, rng: Rng) -> Episode:
    classes = np.asarray(classes, dtype=np.int64)
    s_idx, q_idx = [], []
    for c in classes:
        picked = sample_items(ds, c, k_shot + k_query, rng)
        s_idx.append(picked[:k_shot])
        q_idx.append(picked[k_shot:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    return Episode(
        classes,
        ds.features[s_idx],
        ds.labels[s_idx],
        ds.features[q_idx],
        ds.labels[q_idx],
        s_idx,
        q_idx,
    )


def sample_episode(ds: Dataset, n_way: int, k_shot: int, k_query: int, rng: Rng) -> Episode:
    if k_shot < 0 or k_query < 0 or k_shot + k_query < 1:
        raise ContractError("shot counts must be non-negative and not both zero")
    classes = sample_classes(ds, n_way, rng)
    return episode_from_classes(ds, classes, k_shot, k_query, rng)


def split_train_test_classes(ds: Dataset, n_test_classes: int, rng: Rng):
    """Class-disjoint split. Both halves are relabelled to 0..n-1 in ascending
    original-id order; ``source_classes`` on each half maps back."""
    if not 0 < n_test_classes < ds.n_classes:
        raise ContractError(
            f"n_test_classes must be in [1, {ds.n_classes - 1}], got {n_test_classes}"
        )
    test = np.sort(rng.sample_without_replacement(ds.n_classes, n_test_classes))
    train = np.setdiff1d(np.arange(ds.n_classes), test)
    return subset_classes(ds, train), subset_classes(ds, test)


def subset_classes(ds: Dataset, classes) -> Dataset:
    classes = np.asarray(classes, dtype=np.int64)
    remap = {int(c): i for i, c in enumerate(classes)}
    idx = np.concatenate([ds.class_index[int(c)] for c in classes])
    idx.sort()
    labels = np.array([remap[int(y)] for y in ds.labels[idx]], dtype=np.int64)
    spread = None
    if ds.true_spread is not None:
        spread = {remap[int(c)]: ds.true_spread[int(c)] for c in classes}
    return Dataset(ds.features[idx], labels, spread, classes)


# -- multi-label greedy sampler ------------------------------------------------


@dataclass
class MultiLabelDataset:
    """Items carrying a multiset of labels, e.g. sentences with entity mentions."""

    ids: list
    labels: list  # one {class: count} dict per item

    def __post_init__(self):
        if len(self.ids) != len(self.labels):
            raise ContractError("ids and labels differ in length")
        for lab in self.labels:
            if any(int(n) < 1 for n in lab.values()):
                raise ContractError("label counts must be >= 1")

    def __len__(self):
        return len(self.ids)


def greedy_sample_k2k(
    ds: MultiLabelDataset, n_way: int, k_shot: int, rng: Rng, max_attempts: int = DEFAULT_MAX_ATTEMPTS
):
    """Greedy N-way K~2K-shot sampling over multi-label items.

    An item is accepted only if, with all of its labels added, the number of
    distinct classes stays <= N and no class count exceeds 2K. Stops once N
    classes each have >= K. Returns ``(item ids, sorted class list)``.
    """
    if n_way < 1 or k_shot < 1:
        raise ContractError("n_way and k_shot must be >= 1")
    if len(ds) == 0:
        raise SamplingError("empty dataset")
    count: dict = {}
    chosen: list = []
    taken = set()
    for _ in range(max_attempts):
        i = int(rng.integers(len(ds)))
        lab = ds.labels[i]
        if i in taken or not lab:
            continue
        trial = dict(count)
        for c, n in lab.items():
            trial[c] = trial.get(c, 0) + int(n)
        if len(trial) > n_way or any(n > 2 * k_shot for n in trial.values()):
            continue
        count = trial
        taken.add(i)
        chosen.append(ds.ids[i])
        if len(count) == n_way and all(n >= k_shot for n in count.values()):
            return chosen, sorted(count)
    raise SamplingTimeoutError(
        f"no {n_way}-way {k_shot}~{2 * k_shot}-shot sample after {max_attempts} draws"
    )
