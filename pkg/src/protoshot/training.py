"""Episodic training with persistent prototypes, and episodic evaluation.

Training keeps one prototype per training class (center + scale) in a
:class:`PrototypeStore`. Each step samples N classes and K' queries per class,
scores the queries against those N prototypes only, and updates the encoder
and the touched prototypes with separate optimizers. Evaluation never trains
prototypes: they are estimated in closed form from each episode's support.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .encoder import EncoderGrads, IdentityEncoder, embed, encoder_from_dict, init_mlp
from .episodes import Dataset, Episode, episode_from_classes, sample_classes, sample_episode, sample_items
from .errors import ContractError
from .numerics import STREAM_EPISODES, STREAM_INIT, Rng, log_sum_exp_neg, softmax_of_negated
from .optim import make_optimizer, optimizer_from_state
from .prototypes import VARIANTS, cone_disjointness, init_prototype, make_prototype, measure_batch

MODES = ("persistent", "episodic-reinit")
OPTIMIZERS = ("sgd", "adam")
Z95 = 1.96


@dataclass
class TrainConfig:
    n_way: int = 5
    k_shot: int = 5
    k_query: int = 15
    steps: int = 2000
    lr_encoder: float = 1e-3
    lr_scale: float = 1e-1
    lr_center: float | None = None  # None: same as lr_scale
    variant: str = "hypersphere"
    mode: str = "persistent"
    encoder_optimizer: str = "sgd"
    scale_optimizer: str = "adam"
    encoder_dims: list | None = None  # None: identity encoder
    activation: str = "relu"
    seed: int = 0
    eval_episodes: int = 1000

    def __post_init__(self):
        if self.variant == "vanilla-baseline":
            self.variant = "vanilla"
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        for name in ("encoder_optimizer", "scale_optimizer"):
            if getattr(self, name) not in OPTIMIZERS:
                raise ContractError(f"unknown {name} {getattr(self, name)!r}")
        for name in ("n_way", "k_shot", "k_query", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        for name in ("lr_encoder", "lr_scale", "lr_center"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ContractError(f"{name} must be >= 0")

    @property
    def center_lr(self) -> float:
        return self.lr_scale if self.lr_center is None else self.lr_center

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in fields(cls)}


def make_encoder(config: TrainConfig, in_dim: int, rng: Rng):
    if config.encoder_dims is None:
        return IdentityEncoder(in_dim)
    dims = list(config.encoder_dims)
    if dims[0] != in_dim:
        raise ContractError(f"encoder input dim {dims[0]} does not match data dim {in_dim}")
    return init_mlp(dims, config.activation, rng)


# -- prototype store -----------------------------------------------------------


@dataclass
class PrototypeStore:
    """Per-class prototype parameters for every training class."""

    variant: str
    centers: np.ndarray  # (C, D)
    scales: np.ndarray  # (C,)
    center_opt: object = None
    scale_opt: object = None

    def __len__(self):
        return self.centers.shape[0]

    def proto(self, cls: int):
        return make_prototype(self.variant, self.centers[cls].copy(), self.scales[cls])

    def protos(self, classes) -> list:
        return [self.proto(int(c)) for c in classes]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "centers": self.centers.tolist(),
            "scales": self.scales.tolist(),
            "center_opt": self.center_opt.state_dict() if self.center_opt else None,
            "scale_opt": self.scale_opt.state_dict() if self.scale_opt else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeStore":
        return cls(
            d["variant"],
            np.array(d["centers"], dtype=np.float64),
            np.array(d["scales"], dtype=np.float64),
            optimizer_from_state(d["center_opt"]) if d.get("center_opt") else None,
            optimizer_from_state(d["scale_opt"]) if d.get("scale_opt") else None,
        )


def init_prototype_store(ds: Dataset, encoder, k_shot: int, variant: str, rng: Rng) -> PrototypeStore:
    centers, scales = [], []
    for c in range(ds.n_classes):
        idx = sample_items(ds, c, k_shot, rng)
        p = init_prototype(variant, embed(encoder, ds.features[idx]))
        centers.append(p.center)
        scales.append(p.scale)
    return PrototypeStore(variant, np.array(centers), np.array(scales, dtype=np.float64))


# -- loss ----------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    cls_loss: float
    dis_loss: float
    encoder_grads: EncoderGrads
    center_grads: np.ndarray  # (N, D), one row per episode class
    scale_grads: np.ndarray  # (N,)
    probs: np.ndarray  # (Q, N)


def _targets(classes, query_y) -> np.ndarray:
    pos = {int(c): i for i, c in enumerate(classes)}
    try:
        return np.array([pos[int(y)] for y in query_y], dtype=np.int64)
    except KeyError as e:
        raise ContractError(f"query label {e.args[0]} is not an episode class") from None


def _loss_core(encoder, centers, scales, classes, query_x, query_y, variant):
    target = _targets(classes, query_y)
    q = target.size
    if q == 0:
        raise ContractError("empty query set")
    emb, tape = encoder.forward(np.atleast_2d(np.asarray(query_x, dtype=np.float64)))
    bm = measure_batch(variant, emb, centers, scales)
    rows = np.arange(q)
    # log-sum-exp form: M_target + log sum_n exp(-M_n)
    per_query = bm.value[rows, target] + log_sum_exp_neg(bm.value)
    cls_loss = float(per_query.mean())
    probs = softmax_of_negated(bm.value)
    # dL/dM_n = 1[n = target] - p_n
    dm = -probs
    dm[rows, target] += 1.0
    dm /= q
    g_emb = np.einsum("qn,qnd->qd", dm, bm.grad_embedding)
    g_center = np.einsum("qn,qnd->nd", dm, bm.grad_center)
    g_scale = (dm * bm.grad_scale).sum(axis=0)
    enc_grads = encoder.backward(tape, g_emb)
    dis_loss = 0.0
    if variant == "cone" and len(classes) >= 2:
        protos = [make_prototype("cone", z, s) for z, s in zip(centers, scales)]
        dis_loss, gc, ga = cone_disjointness(protos)
        g_center = g_center + np.stack(gc)
        g_scale = g_scale + ga
    if variant == "vanilla":
        g_scale = np.zeros_like(g_scale)
    return LossResult(cls_loss + dis_loss, cls_loss, dis_loss, enc_grads, g_center, g_scale, probs)


def episode_loss(encoder, protos, classes, query_x, query_y, variant: str) -> LossResult:
    """Mean query cross-entropy over the episode's prototypes (plus the cone
    overlap penalty for the cone variant), with gradients for the encoder,
    every prototype center and every prototype scale."""
    if len(protos) != len(classes):
        raise ContractError("need exactly one prototype per episode class")
    centers = np.stack([np.asarray(p.center, dtype=np.float64) for p in protos])
    scales = np.array([p.scale for p in protos], dtype=np.float64)
    return _loss_core(encoder, centers, scales, classes, query_x, query_y, variant)


def episode_loss_reinit(encoder, scales, episode: Episode, variant: str) -> LossResult:
    """Loss with centers re-estimated as support means; center gradients flow
    back into the encoder through the support embeddings."""
    sx = np.atleast_2d(episode.support_x)
    s_emb, s_tape = encoder.forward(sx)
    pos = _targets(episode.classes, episode.support_y)
    n = len(episode.classes)
    counts = np.bincount(pos, minlength=n).astype(np.float64)
    if np.any(counts == 0):
        raise ContractError("every episode class needs at least one support item")
    centers = np.zeros((n, s_emb.shape[1]))
    np.add.at(centers, pos, s_emb)
    centers /= counts[:, None]
    res = _loss_core(encoder, centers, scales, episode.classes, episode.query_x, episode.query_y, variant)
    g_support = res.center_grads[pos] / counts[pos][:, None]
    sg = encoder.backward(s_tape, g_support)
    res.encoder_grads = EncoderGrads(
        [a + b for a, b in zip(res.encoder_grads.weights, sg.weights)],
        [a + b for a, b in zip(res.encoder_grads.biases, sg.biases)],
        res.encoder_grads.input_grad,
    )
    return res


def vanilla_cross_entropy(embeddings, centers, targets) -> float:
    """Plain prototypical-network loss on squared distances; used as an oracle."""
    f = np.asarray(embeddings, dtype=np.float64)
    z = np.asarray(centers, dtype=np.float64)
    d = ((f[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    logits = -d
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(targets)), targets].mean())


# -- training loop -------------------------------------------------------------


@dataclass
class TrainState:
    encoder: object
    store: PrototypeStore
    encoder_opt: object
    step: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "encoder": self.encoder.to_dict(),
            "encoder_opt": self.encoder_opt.state_dict(),
            "store": self.store.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(
            encoder_from_dict(d["encoder"]),
            PrototypeStore.from_dict(d["store"]),
            optimizer_from_state(d["encoder_opt"]),
            int(d["step"]),
        )


@dataclass
class TrainEpisode:
    classes: np.ndarray
    query_idx: np.ndarray
    support_idx: np.ndarray | None = None


def make_train_state(config: TrainConfig, ds: Dataset, rng: Rng) -> TrainState:
    encoder = make_encoder(config, ds.dim, rng.fork(0))
    store = init_prototype_store(ds, encoder, config.k_shot, config.variant, rng.fork(1))
    store.center_opt = make_optimizer(config.scale_optimizer, config.center_lr)
    store.scale_opt = make_optimizer(config.scale_optimizer, config.lr_scale)
    return TrainState(encoder, store, make_optimizer(config.encoder_optimizer, config.lr_encoder))


def draw_training_episode(ds: Dataset, config: TrainConfig, rng: Rng, anchor: int | None = None) -> TrainEpisode:
    classes = sample_classes(ds, config.n_way, rng, include=anchor)
    if config.mode == "persistent":
        q = np.concatenate([sample_items(ds, c, config.k_query, rng) for c in classes])
        return TrainEpisode(classes, q)
    ep = episode_from_classes(ds, classes, config.k_shot, config.k_query, rng)
    return TrainEpisode(classes, ep.query_idx, ep.support_idx)


def compute_loss(state: TrainState, ds: Dataset, config: TrainConfig, te: TrainEpisode) -> LossResult:
    store = state.store
    scales = store.scales[te.classes]
    if te.support_idx is None:
        return _loss_core(
            state.encoder,
            store.centers[te.classes],
            scales,
            te.classes,
            ds.features[te.query_idx],
            ds.labels[te.query_idx],
            config.variant,
        )
    ep = Episode(
        te.classes,
        ds.features[te.support_idx],
        ds.labels[te.support_idx],
        ds.features[te.query_idx],
        ds.labels[te.query_idx],
        te.support_idx,
        te.query_idx,
    )
    return episode_loss_reinit(state.encoder, scales, ep, config.variant)


def apply_episode(state: TrainState, ds: Dataset, config: TrainConfig, te: TrainEpisode) -> LossResult:
    res = compute_loss(state, ds, config, te)
    enc = state.encoder
    if config.lr_encoder > 0 and enc.params():
        g = res.encoder_grads
        state.encoder_opt.step(enc.params(), g.weights + g.biases)
        enc.mark_updated()
    store = state.store
    rows = np.asarray(te.classes)
    if te.support_idx is None and config.center_lr > 0:
        gc = np.zeros_like(store.centers)
        gc[rows] = res.center_grads
        store.center_opt.step([store.centers], [gc], rows)
    if config.variant != "vanilla" and config.lr_scale > 0:
        gs = np.zeros_like(store.scales)
        gs[rows] = res.scale_grads
        store.scale_opt.step([store.scales], [gs], rows)
    state.step += 1
    return res


def train_step(state: TrainState, ds: Dataset, config: TrainConfig, rng: Rng) -> LossResult:
    return apply_episode(state, ds, config, draw_training_episode(ds, config, rng))


def train(config: TrainConfig, ds: Dataset, rng: Rng | None = None):
    """Run ``config.steps`` training steps. Returns ``(state, losses)``."""
    rng = rng or Rng(config.seed)
    state = make_train_state(config, ds, rng.fork(STREAM_INIT))
    ep_rng = rng.fork(STREAM_EPISODES)
    losses = []
    for _ in range(config.steps):
        losses.append(train_step(state, ds, config, ep_rng).loss)
    return state, np.array(losses)


# -- evaluation ----------------------------------------------------------------


@dataclass
class EpisodeResult:
    accuracy: float
    confusion: np.ndarray  # (N, N): rows true position, columns predicted position
    classes: np.ndarray
    predictions: np.ndarray


def predict(encoder, episode: Episode, variant: str) -> np.ndarray:
    """Predicted class id per query; ties go to the lowest class id."""
    s_emb = embed(encoder, episode.support_x)
    q_emb = embed(encoder, episode.query_x)
    protos = [init_prototype(variant, s_emb[episode.support_y == c]) for c in episode.classes]
    centers = np.stack([p.center for p in protos])
    scales = np.array([p.scale for p in protos], dtype=np.float64)
    m = measure_batch(variant, q_emb, centers, scales, with_grads=False).value
    return np.asarray(episode.classes)[np.argmin(m, axis=1)]


def evaluate_episode(encoder, episode: Episode, variant: str) -> EpisodeResult:
    pred = predict(encoder, episode, variant)
    n = episode.n_way
    t = _targets(episode.classes, episode.query_y)
    p = _targets(episode.classes, pred)
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    return EpisodeResult(float(np.mean(pred == episode.query_y)), conf, np.asarray(episode.classes), pred)


def half_width(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


def _prf(conf: np.ndarray):
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0)
    true_tot = conf.sum(axis=1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    return prec, rec, f1


@dataclass
class Metrics:
    """Episode-averaged scores. Precision/recall/F1 are macro over an
    episode's classes, then averaged over episodes; ``per_class`` averages
    each class's scores over the episodes it appeared in."""

    n_episodes: int
    accuracy: float
    accuracy_ci: float
    precision: float
    precision_ci: float
    recall: float
    recall_ci: float
    f1: float
    f1_ci: float
    per_class: dict = field(default_factory=dict)  # class -> {"precision": (mean, ci, n), ...}

    def rows(self) -> list:
        """``(name, value, ci, n)`` tuples in a fixed order."""
        out = [
            ("accuracy", self.accuracy, self.accuracy_ci, self.n_episodes),
            ("precision", self.precision, self.precision_ci, self.n_episodes),
            ("recall", self.recall, self.recall_ci, self.n_episodes),
            ("f1", self.f1, self.f1_ci, self.n_episodes),
        ]
        for c in sorted(self.per_class):
            for name in ("precision", "recall", "f1"):
                v, ci, n = self.per_class[c][name]
                out.append((f"class_{c}_{name}", v, ci, n))
        return out


def aggregate(results: list) -> Metrics:
    if not results:
        raise ContractError("no episodes to aggregate")
    acc = [r.accuracy for r in results]
    macro = {"precision": [], "recall": [], "f1": []}
    per: dict = {}
    for r in results:
        p, rc, f = _prf(r.confusion)
        for name, v in zip(("precision", "recall", "f1"), (p, rc, f)):
            macro[name].append(float(v.mean()))
        for i, c in enumerate(r.classes):
            d = per.setdefault(int(c), {"precision": [], "recall": [], "f1": []})
            d["precision"].append(p[i])
            d["recall"].append(rc[i])
            d["f1"].append(f[i])
    per_class = {
        c: {k: (float(np.mean(v)), half_width(v), len(v)) for k, v in d.items()} for c, d in per.items()
    }
    return Metrics(
        len(results),
        float(np.mean(acc)),
        half_width(acc),
        float(np.mean(macro["precision"])),
        half_width(macro["precision"]),
        float(np.mean(macro["recall"])),
        half_width(macro["recall"]),
        float(np.mean(macro["f1"])),
        half_width(macro["f1"]),
        per_class,
    )


def evaluate(encoder, ds: Dataset, config: TrainConfig, rng: Rng | None = None, jobs: int = 1) -> Metrics:
    """``config.eval_episodes`` independent episodes, each on its own forked stream."""
    rng = rng or Rng(config.seed)

    def one(i):
        ep = sample_episode(ds, config.n_way, config.k_shot, config.k_query, rng.fork(i))
        return evaluate_episode(encoder, ep, config.variant)

    n = config.eval_episodes
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    return aggregate(results)


# -- radius dynamics -----------------------------------------------------------


@dataclass
class RadiusTrace:
    steps: list = field(default_factory=list)
    mean_distance: list = field(default_factory=list)
    radius: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def append(self, step, dist, radius, acc):
        if self.steps and step <= self.steps[-1]:
            raise ContractError("trace steps must be strictly increasing")
        self.steps.append(int(step))
        self.mean_distance.append(float(dist))
        self.radius.append(float(radius))
        self.accuracy.append(float(acc))


def anchor_stats(state: TrainState, ds: Dataset, config: TrainConfig, te: TrainEpisode, anchor: int):
    """Anchor-class query accuracy under the stored prototypes, and the mean
    squared distance of anchor query embeddings to the anchor center."""
    qi = te.query_idx[ds.labels[te.query_idx] == anchor]
    emb = embed(state.encoder, ds.features[qi])
    store = state.store
    m = measure_batch(config.variant, emb, store.centers[te.classes], store.scales[te.classes], with_grads=False)
    pred = np.asarray(te.classes)[np.argmin(m.value, axis=1)]
    d = emb - store.centers[anchor]
    return float(np.mean(pred == anchor)), float(np.einsum("qd,qd->q", d, d).mean())


def radius_dynamics_run(
    config: TrainConfig,
    ds: Dataset,
    anchor: int = 0,
    warmup: int = 500,
    total: int = 2000,
    log_every: int = 50,
    max_retries: int = 200,
    rng: Rng | None = None,
) -> RadiusTrace:
    """Track one anchor class's radius against the spread of its episodes.

    Every episode contains the anchor. After ``warmup`` steps, blocks of
    ``log_every`` steps alternate between "good" episodes (anchor accuracy
    above the last logged value) and "bad" ones (below), chosen by rejection
    sampling with at most ``max_retries`` tries before taking an unconditional
    draw. The last step of each block is logged.
    """
    if config.mode != "persistent" or config.variant != "hypersphere":
        raise ContractError("radius dynamics needs the persistent hypersphere setting")
    if anchor not in ds.class_index:
        raise ContractError(f"anchor class {anchor} is not in the dataset")
    if not 0 <= warmup <= total or log_every < 1:
        raise ContractError("need 0 <= warmup <= total and log_every >= 1")
    rng = rng or Rng(config.seed)
    state = make_train_state(config, ds, rng.fork(STREAM_INIT))
    ep_rng = rng.fork(STREAM_EPISODES)
    trace = RadiusTrace()
    last_acc = None
    for step in range(1, total + 1):
        te = draw_training_episode(ds, config, ep_rng, anchor)
        acc, dist = anchor_stats(state, ds, config, te, anchor)
        if step > warmup and last_acc is not None:
            good = ((step - warmup - 1) // log_every) % 2 == 0
            for _ in range(max_retries):
                if (acc > last_acc) if good else (acc < last_acc):
                    break
                te = draw_training_episode(ds, config, ep_rng, anchor)
                acc, dist = anchor_stats(state, ds, config, te, anchor)
        apply_episode(state, ds, config, te)
        if step == warmup:
            last_acc = acc
        elif step > warmup and (step - warmup) % log_every == 0:
            trace.append(step, dist, state.store.scales[anchor], acc)
            last_acc = acc
        if warmup == 0 and last_acc is None:
            last_acc = acc
    return trace


__all__ = [
    "LossResult",
    "Metrics",
    "PrototypeStore",
    "RadiusTrace",
    "TrainConfig",
    "TrainState",
    "apply_episode",
    "episode_loss",
    "episode_loss_reinit",
    "evaluate",
    "evaluate_episode",
    "init_prototype_store",
    "radius_dynamics_run",
    "train",
    "train_step",
]
