"""Class prototypes: hypersphere, cone-like and isotropic Gaussian.

Every prototype is a center vector plus one scalar "scale":

* hypersphere: radius in squared-distance units, M = |f - z|^2 - radius
* cone: half-angle in radians, M = -cos(theta - angle) outside the cone, -1 inside
* gaussian: log sigma, M = negative log density of N(mean, sigma^2 I)

Single-vector ``measure_*`` functions return a :class:`MeasureResult`.
:func:`measure_batch` evaluates Q embeddings against N prototypes at once and
is what the training loop uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateSupportError
from .numerics import as_vec, safe_arccos, safe_arccos_grad, sq_euclidean

SIGMA2_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)

VARIANTS = ("hypersphere", "cone", "gaussian", "vanilla")


@dataclass
class HypersphereProto:
    center: np.ndarray
    radius: float

    @property
    def scale(self) -> float:
        return self.radius


@dataclass
class ConeProto:
    center: np.ndarray
    angle: float

    @property
    def scale(self) -> float:
        return self.angle


@dataclass
class GaussianProto:
    mean: np.ndarray
    log_sigma: float

    @property
    def center(self) -> np.ndarray:
        return self.mean

    @property
    def scale(self) -> float:
        return self.log_sigma

    @property
    def sigma2(self) -> float:
        return math.exp(2.0 * self.log_sigma)


@dataclass
class MeasureResult:
    value: float
    grad_embedding: np.ndarray
    grad_center: np.ndarray
    grad_scale: float


def _support(embeddings) -> np.ndarray:
    f = np.asarray(embeddings, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0 or f.shape[1] == 0:
        raise ContractError(f"support must be a non-empty (K, D) array, got shape {f.shape}")
    return f


def _pair(f, center):
    f = as_vec(f, "embedding")
    z = as_vec(center, "center")
    if f.shape != z.shape:
        raise ContractError(f"dimension mismatch: embedding {f.size} vs center {z.size}")
    return f, z


# -- hypersphere -------------------------------------------------------------


def init_hypersphere(support_embeddings) -> HypersphereProto:
    f = _support(support_embeddings)
    z = f.mean(axis=0)
    d = f - z
    return HypersphereProto(z, float(np.einsum("kd,kd->k", d, d).mean()))


def measure_hypersphere(f, p: HypersphereProto) -> MeasureResult:
    f, z = _pair(f, p.center)
    diff = f - z
    return MeasureResult(sq_euclidean(f, z) - p.radius, 2.0 * diff, -2.0 * diff, -1.0)


# -- cone ----------------------------------------------------------------------


def _angle(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("angle undefined for a zero vector")
    return safe_arccos(float(a @ b) / (na * nb))


def init_cone(support_embeddings) -> ConeProto:
    f = _support(support_embeddings)
    z = f.mean(axis=0)
    if np.linalg.norm(z) == 0.0:
        raise DegenerateSupportError("support embeddings average to the zero vector")
    angles = [_angle(fi, z) for fi in f]
    if len(angles) == 1:
        # the clamp would otherwise leave ~1.4e-6 for an exactly aligned pair
        return ConeProto(z, 0.0)
    return ConeProto(z, float(np.mean(angles)))


def _cos_and_grads(f, z):
    """cos of the angle between f and z, and its gradients w.r.t. f and z."""
    nf, nz = np.linalg.norm(f), np.linalg.norm(z)
    if nf == 0.0 or nz == 0.0:
        raise ContractError("cone measurement undefined for a zero vector")
    u = float(f @ z) / (nf * nz)
    du_df = z / (nf * nz) - u * f / (nf * nf)
    du_dz = f / (nf * nz) - u * z / (nz * nz)
    return u, du_df, du_dz


def measure_cone(f, p: ConeProto) -> MeasureResult:
    f, z = _pair(f, p.center)
    u, du_df, du_dz = _cos_and_grads(f, z)
    theta = safe_arccos(u)
    eps = p.angle
    if theta < abs(eps):
        zero = np.zeros_like(f)
        return MeasureResult(-1.0, zero, zero.copy(), 0.0)
    dm_dtheta = math.sin(theta - eps)
    dtheta_du = float(safe_arccos_grad(u))
    return MeasureResult(
        -math.cos(theta - eps),
        dm_dtheta * dtheta_du * du_df,
        dm_dtheta * dtheta_du * du_dz,
        -dm_dtheta,
    )


def cone_disjointness(protos):
    """Penalty for overlapping cones, summed over unordered pairs and divided by N.

    Returns ``(value, center_grads, angle_grads)`` with one gradient entry per
    prototype.
    """
    protos = list(protos)
    n = len(protos)
    if n < 2:
        raise ContractError("disjointness needs at least two prototypes")
    centers = [as_vec(p.center, "center") for p in protos]
    g_center = [np.zeros_like(c) for c in centers]
    g_angle = np.zeros(n)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            u, du_di, du_dj = _cos_and_grads(centers[i], centers[j])
            gap = abs(protos[i].angle) + abs(protos[j].angle) - safe_arccos(u)
            if gap <= 0.0:
                continue
            total += gap
            g_angle[i] += np.sign(protos[i].angle)
            g_angle[j] += np.sign(protos[j].angle)
            dtheta_du = float(safe_arccos_grad(u))
            g_center[i] -= dtheta_du * du_di
            g_center[j] -= dtheta_du * du_dj
    return total / n, [g / n for g in g_center], g_angle / n


# -- gaussian ----------------------------------------------------------------


def init_gaussian(support_embeddings) -> GaussianProto:
    f = _support(support_embeddings)
    k, d = f.shape
    mu = f.mean(axis=0)
    diff = f - mu
    sigma2 = max(SIGMA2_FLOOR, float(np.einsum("kd,kd->", diff, diff)) / (k * d))
    return GaussianProto(mu, 0.5 * math.log(sigma2))


def measure_gaussian(f, p: GaussianProto) -> MeasureResult:
    f, mu = _pair(f, p.mean)
    d = f.size
    s2 = p.sigma2
    diff = f - mu
    sq = float(diff @ diff)
    value = sq / (2.0 * s2) + d * p.log_sigma + 0.5 * d * LOG_2PI
    return MeasureResult(value, diff / s2, -diff / s2, -sq / s2 + d)


# -- variant dispatch ----------------------------------------------------------


def init_prototype(variant: str, support_embeddings):
    if variant == "hypersphere":
        return init_hypersphere(support_embeddings)
    if variant == "vanilla":
        return HypersphereProto(_support(support_embeddings).mean(axis=0), 0.0)
    if variant == "cone":
        return init_cone(support_embeddings)
    if variant == "gaussian":
        return init_gaussian(support_embeddings)
    raise ContractError(f"unknown variant {variant!r}")


def make_prototype(variant: str, center, scale: float):
    center = np.asarray(center, dtype=np.float64)
    if variant in ("hypersphere", "vanilla"):
        return HypersphereProto(center, float(scale))
    if variant == "cone":
        return ConeProto(center, float(scale))
    if variant == "gaussian":
        return GaussianProto(center, float(scale))
    raise ContractError(f"unknown variant {variant!r}")


def measure(variant: str, f, p) -> MeasureResult:
    if variant in ("hypersphere", "vanilla"):
        return measure_hypersphere(f, p)
    if variant == "cone":
        return measure_cone(f, p)
    if variant == "gaussian":
        return measure_gaussian(f, p)
    raise ContractError(f"unknown variant {variant!r}")


@dataclass
class BatchMeasure:
    """Measurements of Q embeddings against N prototypes.

    ``value`` and ``grad_scale`` have shape (Q, N); ``grad_embedding`` and
    ``grad_center`` have shape (Q, N, D).
    """

    value: np.ndarray
    grad_embedding: np.ndarray
    grad_center: np.ndarray
    grad_scale: np.ndarray


def measure_batch(variant: str, embeddings, centers, scales, with_grads: bool = True) -> BatchMeasure:
    f = np.asarray(embeddings, dtype=np.float64)
    z = np.asarray(centers, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    if f.ndim != 2 or z.ndim != 2 or f.shape[1] != z.shape[1] or s.shape != (z.shape[0],):
        raise ContractError(
            f"shape mismatch: embeddings {f.shape}, centers {z.shape}, scales {s.shape}"
        )
    if variant in ("hypersphere", "vanilla", "gaussian"):
        diff = f[:, None, :] - z[None, :, :]
        sq = np.einsum("qnd,qnd->qn", diff, diff)
        if variant == "gaussian":
            d = f.shape[1]
            s2 = np.exp(2.0 * s)
            value = sq / (2.0 * s2) + d * s + 0.5 * d * LOG_2PI
            if not with_grads:
                return BatchMeasure(value, None, None, None)
            ge = diff / s2[None, :, None]
            return BatchMeasure(value, ge, -ge, -sq / s2 + d)
        value = sq - s
        if not with_grads:
            return BatchMeasure(value, None, None, None)
        ge = 2.0 * diff
        return BatchMeasure(value, ge, -ge, -np.ones_like(value))
    if variant == "cone":
        return _cone_batch(f, z, s, with_grads)
    raise ContractError(f"unknown variant {variant!r}")


def _cone_batch(f, z, eps, with_grads):
    nf = np.linalg.norm(f, axis=1)
    nz = np.linalg.norm(z, axis=1)
    if np.any(nf == 0.0) or np.any(nz == 0.0):
        raise ContractError("cone measurement undefined for a zero vector")
    u = (f @ z.T) / (nf[:, None] * nz[None, :])
    theta = safe_arccos(u)
    theta = np.atleast_2d(theta)
    outside = theta >= np.abs(eps)[None, :]
    shifted = theta - eps[None, :]
    value = np.where(outside, -np.cos(shifted), -1.0)
    if not with_grads:
        return BatchMeasure(value, None, None, None)
    coef = np.where(outside, np.sin(shifted) * safe_arccos_grad(u), 0.0)
    du_df = z[None, :, :] / (nf[:, None, None] * nz[None, :, None]) - u[:, :, None] * (
        f[:, None, :] / (nf * nf)[:, None, None]
    )
    du_dz = f[:, None, :] / (nf[:, None, None] * nz[None, :, None]) - u[:, :, None] * (
        z[None, :, :] / (nz * nz)[None, :, None]
    )
    grad_scale = np.where(outside, -np.sin(shifted), 0.0)
    return BatchMeasure(value, coef[:, :, None] * du_df, coef[:, :, None] * du_dz, grad_scale)


def proto_to_dict(variant: str, p) -> dict:
    return {"variant": variant, "center": np.asarray(p.center).tolist(), "scale": float(p.scale)}


def proto_from_dict(d: dict):
    return make_prototype(d["variant"], d["center"], d["scale"])
