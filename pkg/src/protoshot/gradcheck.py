"""Randomized finite-difference checks of every hand-derived gradient.

Each ``check_*`` function draws ``n`` random small configurations and returns
the worst relative error seen (see :func:`protoshot.numerics.finite_diff_check`).
Configurations are kept at unit scale so softmax probabilities do not
saturate. Configurations within ``KINK_MARGIN`` of a non-differentiable point
(cone boundary theta = |angle|, a ReLU pre-activation at 0) are redrawn, as
are cone configurations with an embedding of norm below ``NORM_MARGIN``:
cosine is singular at the origin and difference error grows like (h/|f|)^2.

Central differences carry roundoff of about 1e-16 * |f| / h ~ 1e-11, which
the relative-error floor of 1e-8 turns into ~1e-3 wherever the true gradient
is exactly zero. Configurations are therefore drawn where that does not
happen generically: cone centers live in >= 3 dimensions (in 2-d a center
between two overlapping neighbours has an exactly flat coordinate). The one
structural zero, the last-layer bias under support-mean centers, is asserted
to vanish analytically instead. The MLP check is held to the tighter 1e-6
bound, so its reference function is evaluated in extended precision (see
:func:`_mlp_dot_ext`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import init_mlp
from .numerics import Rng, finite_diff_check, safe_arccos
from .prototypes import (
    ConeProto,
    GaussianProto,
    HypersphereProto,
    cone_disjointness,
    measure_cone,
    measure_gaussian,
    measure_hypersphere,
)
from .training import _loss_core, episode_loss_reinit
from .episodes import Episode

H = 1e-5
KINK_MARGIN = 1e-3
STRUCTURAL_ZERO = 1e-12
NORM_MARGIN = 0.1
MEASURE_TOL = 1e-6
MLP_TOL = 1e-6
LOSS_TOL = 1e-5


@dataclass
class CheckResult:
    case: str
    max_rel_error: float
    n_configs: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _measure_case(measure, make, f, center, scale, h):
    res = measure(f, make(center, scale))
    errs = [
        finite_diff_check(lambda x: measure(x, make(center, scale)).value, f, res.grad_embedding, h),
        finite_diff_check(lambda z: measure(f, make(z, scale)).value, center, res.grad_center, h),
        finite_diff_check(lambda s: measure(f, make(center, s[0])).value, [scale], [res.grad_scale], h),
    ]
    return max(errs)


def check_hypersphere(n: int, rng: Rng, h: float = H) -> float:
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 8))
        f, z = rng.normal(d), rng.normal(d)
        worst = max(worst, _measure_case(measure_hypersphere, HypersphereProto, f, z, float(rng.normal()), h))
    return worst


def _cone_near_boundary(f, z, eps) -> bool:
    theta = safe_arccos(float(f @ z) / (np.linalg.norm(f) * np.linalg.norm(z)))
    return abs(theta - abs(eps)) < KINK_MARGIN


def check_cone(n: int, rng: Rng, h: float = H) -> float:
    worst = 0.0
    done = 0
    while done < n:
        d = int(rng.integers(2, 8))
        f, z = rng.normal(d), rng.normal(d)
        eps = float(rng.uniform(-1.5, 1.5))
        if _cone_near_boundary(f, z, eps) or abs(eps) < KINK_MARGIN:
            continue
        worst = max(worst, _measure_case(measure_cone, ConeProto, f, z, eps, h))
        done += 1
    return worst


def check_gaussian(n: int, rng: Rng, h: float = H) -> float:
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(1, 8))
        f, mu = rng.normal(d), rng.normal(d)
        worst = max(worst, _measure_case(measure_gaussian, GaussianProto, f, mu, float(rng.uniform(-0.5, 0.5)), h))
    return worst


def check_disjointness(n: int, rng: Rng, h: float = H) -> float:
    worst = 0.0
    done = 0
    while done < n:
        k, d = int(rng.integers(2, 5)), int(rng.integers(3, 6))
        z = rng.normal((k, d))
        eps = rng.uniform(0.05, 1.2, k) * rng.gen.choice([-1.0, 1.0], k)
        gaps = [
            abs(abs(eps[i]) + abs(eps[j]) - safe_arccos(z[i] @ z[j] / (np.linalg.norm(z[i]) * np.linalg.norm(z[j]))))
            for i in range(k)
            for j in range(i + 1, k)
        ]
        if min(gaps) < KINK_MARGIN:
            continue

        def value(zz, ee):
            return cone_disjointness([ConeProto(zz[i], ee[i]) for i in range(k)])[0]

        _, gz, ge = cone_disjointness([ConeProto(z[i], eps[i]) for i in range(k)])
        worst = max(
            worst,
            finite_diff_check(lambda x: value(x.reshape(k, d), eps), z, np.stack(gz), h),
            finite_diff_check(lambda e: value(z, e), eps, ge, h),
        )
        done += 1
    return worst


def _mlp_dot_ext(weights, biases, activation, x, g_out):
    """g_out . f(x) evaluated in extended precision.

    The network has only O(1) outputs, so float64 roundoff in the difference
    quotient is ~1e-11 absolute, which is the same order as the smaller
    weight gradients (e.g. a weight fed by a near-zero input). Where numpy's
    longdouble is wider than float64 (x86-64) this lowers that floor ~1000x;
    the analytic gradient under test is still the float64 backward pass.
    """
    ext = np.longdouble
    hid = np.asarray(x, dtype=ext)
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        hid = hid @ np.asarray(w, dtype=ext) + np.asarray(b, dtype=ext)
        if i != last:
            hid = np.maximum(hid, ext(0)) if activation == "relu" else np.tanh(hid)
    return hid @ np.asarray(g_out, dtype=ext)


def check_mlp(n: int, rng: Rng, activation: str = "relu", h: float = H) -> float:
    """Backward of a random 3-layer net against differences of grad_out . f(x)."""
    worst = 0.0
    done = 0
    while done < n:
        dims = [int(v) for v in rng.integers(1, 6, size=4)]
        enc = init_mlp(dims, activation, rng)
        for b in enc.biases:
            b[...] = 0.5 * rng.normal(b.shape)
        x = rng.normal(dims[0])
        _, tape = enc.forward(x)
        if activation == "relu" and min(np.abs(a).min() for a in tape.pre[:-1]) < KINK_MARGIN:
            continue
        done += 1
        g_out = rng.normal(dims[-1])
        grads = enc.backward(tape, g_out)
        n_layers = len(enc.weights)
        sizes = [p.size for p in enc.params()]

        def f_params(p):
            parts = np.split(p, np.cumsum(sizes)[:-1])
            ws = [q.reshape(w.shape) for q, w in zip(parts[:n_layers], enc.weights)]
            return _mlp_dot_ext(ws, parts[n_layers:], activation, x, g_out)

        worst = max(
            worst,
            finite_diff_check(f_params, enc.flat_params(), grads.flat(), h),
            finite_diff_check(lambda xx: _mlp_dot_ext(enc.weights, enc.biases, activation, xx, g_out), x, grads.input_grad, h),
        )
    return worst


def _random_loss_setup(rng: Rng, variant: str):
    n_way = int(rng.integers(2, 5))
    q_per = int(rng.integers(1, 4))
    dims = [int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 5))]
    enc = init_mlp(dims, "tanh", rng)
    classes = np.sort(rng.sample_without_replacement(20, n_way))
    qx = rng.normal((n_way * q_per, dims[0]))
    qy = np.repeat(classes, q_per)
    centers = 0.5 * rng.normal((n_way, dims[-1]))
    if variant == "cone":
        scales = rng.uniform(0.05, 0.6, n_way)
    elif variant == "gaussian":
        scales = rng.uniform(-0.5, 0.5, n_way)
    else:
        scales = 0.3 * rng.normal(n_way)
    return enc, classes, qx, qy, centers, scales


def _cone_loss_ok(enc, classes, qx, centers, scales) -> bool:
    emb = enc.forward(qx)[0]
    if np.linalg.norm(emb, axis=1).min() < NORM_MARGIN or np.linalg.norm(centers, axis=1).min() < NORM_MARGIN:
        return False
    for f in emb:
        for z, e in zip(centers, scales):
            if _cone_near_boundary(f, z, e):
                return False
    k = len(centers)
    for i in range(k):
        for j in range(i + 1, k):
            t = safe_arccos(centers[i] @ centers[j] / (np.linalg.norm(centers[i]) * np.linalg.norm(centers[j])))
            if abs(abs(scales[i]) + abs(scales[j]) - t) < KINK_MARGIN:
                return False
    return True


def check_episode_loss(n: int, rng: Rng, variant: str, h: float = H) -> float:
    """Persistent-prototype loss: encoder parameters, centers and scales."""
    worst = 0.0
    done = 0
    while done < n:
        enc, classes, qx, qy, centers, scales = _random_loss_setup(rng, variant)
        if variant == "cone" and not _cone_loss_ok(enc, classes, qx, centers, scales):
            continue
        res = _loss_core(enc, centers, scales, classes, qx, qy, variant)
        probe = enc.copy()

        def f_params(p):
            probe.set_flat_params(p)
            return _loss_core(probe, centers, scales, classes, qx, qy, variant).loss

        shape = centers.shape
        worst = max(
            worst,
            finite_diff_check(f_params, enc.flat_params(), res.encoder_grads.flat(), h),
            finite_diff_check(
                lambda c: _loss_core(enc, c.reshape(shape), scales, classes, qx, qy, variant).loss,
                centers,
                res.center_grads,
                h,
            ),
        )
        if variant != "vanilla":
            worst = max(
                worst,
                finite_diff_check(
                    lambda s: _loss_core(enc, centers, s, classes, qx, qy, variant).loss, scales, res.scale_grads, h
                ),
            )
        done += 1
    return worst


def check_reinit_loss(n: int, rng: Rng, variant: str = "hypersphere", h: float = H) -> float:
    """Loss with support-mean centers: gradients flow through support embeddings."""
    worst = 0.0
    for _ in range(n):
        enc, classes, qx, qy, _, scales = _random_loss_setup(rng, variant)
        k = int(rng.integers(1, 4))
        sx = rng.normal((len(classes) * k, qx.shape[1]))
        sy = np.repeat(classes, k)
        ep = Episode(classes, sx, sy, qx, qy, np.arange(len(sy)), np.arange(len(qy)))
        res = episode_loss_reinit(enc, scales, ep, variant)
        probe = enc.copy()

        def f_params(p):
            probe.set_flat_params(p)
            return episode_loss_reinit(probe, scales, ep, variant).loss

        flat = res.encoder_grads.flat()
        # shifting every embedding by the same vector moves queries and
        # support-mean centers together, so the last bias has zero gradient
        n_last = res.encoder_grads.biases[-1].size
        if np.abs(flat[-n_last:]).max() > STRUCTURAL_ZERO:
            return float("inf")
        keep = flat.size - n_last
        p0 = enc.flat_params()

        def f_rest(p):
            return f_params(np.concatenate([p, p0[keep:]]))

        worst = max(worst, finite_diff_check(f_rest, p0[:keep], flat[:keep], h))
    return worst


def run_suite(n: int = 100, seed: int = 0, h: float = H) -> list:
    root = Rng(seed)
    cases = [
        ("measure_hypersphere", lambda r: check_hypersphere(n, r, h), MEASURE_TOL),
        ("measure_cone", lambda r: check_cone(n, r, h), MEASURE_TOL),
        ("measure_gaussian", lambda r: check_gaussian(n, r, h), MEASURE_TOL),
        ("cone_disjointness", lambda r: check_disjointness(n, r, h), LOSS_TOL),
        ("mlp_backward_relu", lambda r: check_mlp(n, r, "relu", h), MLP_TOL),
        ("mlp_backward_tanh", lambda r: check_mlp(n, r, "tanh", h), MLP_TOL),
        ("episode_loss_hypersphere", lambda r: check_episode_loss(n, r, "hypersphere", h), LOSS_TOL),
        ("episode_loss_vanilla", lambda r: check_episode_loss(n, r, "vanilla", h), LOSS_TOL),
        ("episode_loss_cone", lambda r: check_episode_loss(n, r, "cone", h), LOSS_TOL),
        ("episode_loss_gaussian", lambda r: check_episode_loss(n, r, "gaussian", h), LOSS_TOL),
        ("episode_loss_reinit", lambda r: check_reinit_loss(n, r, "hypersphere", h), LOSS_TOL),
    ]
    return [CheckResult(name, fn(root.fork(i)), n, tol) for i, (name, fn, tol) in enumerate(cases)]
