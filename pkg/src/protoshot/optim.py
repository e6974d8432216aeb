"""SGD and Adam over lists of numpy arrays, updated in place.

Both accept an optional ``rows`` index so a prototype table can be updated
only for the classes present in an episode. Adam keeps a step counter per
element, which makes those sparse updates behave like independent Adam
instances per row.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def _check(params, grads):
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ContractError(f"parameter shape {np.shape(p)} vs gradient {np.shape(g)}")


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads, rows=None):
        _check(params, grads)
        for p, g in zip(params, grads):
            if rows is None:
                p -= self.lr * g
            else:
                p[rows] -= self.lr * g[rows]

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr}

    def load_state_dict(self, d: dict):
        self.lr = d["lr"]


class Adam:
    kind = "adam"

    def __init__(self, lr: float, beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: list = []
        self.v: list = []
        self.t: list = []

    def _ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
            self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
            self.t = [np.zeros(np.shape(p), dtype=np.int64) for p in params]
        elif len(self.m) != len(params) or any(m.shape != np.shape(p) for m, p in zip(self.m, params)):
            raise ContractError("optimizer state does not match parameters")

    def step(self, params, grads, rows=None):
        _check(params, grads)
        self._ensure(params)
        sel = ... if rows is None else rows
        for p, g, m, v, t in zip(params, grads, self.m, self.v, self.t):
            g = np.asarray(g)[sel]
            t[sel] += 1
            tt = t[sel]
            m[sel] = self.beta1 * m[sel] + (1.0 - self.beta1) * g
            v[sel] = self.beta2 * v[sel] + (1.0 - self.beta2) * g * g
            m_hat = m[sel] / (1.0 - self.beta1**tt)
            v_hat = v[sel] / (1.0 - self.beta2**tt)
            p[sel] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
            "t": [a.tolist() for a in self.t],
        }

    def load_state_dict(self, d: dict):
        self.lr = d["lr"]
        self.m = [np.array(a, dtype=np.float64) for a in d.get("m", [])]
        self.v = [np.array(a, dtype=np.float64) for a in d.get("v", [])]
        self.t = [np.array(a, dtype=np.int64) for a in d.get("t", [])]


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ContractError(f"unknown optimizer {kind!r}")


def optimizer_from_state(d: dict):
    opt = make_optimizer(d["kind"], d["lr"])
    opt.load_state_dict(d)
    return opt


def optimizer_step(params, grads, state, kind: str, lr: float):
    """Functional form: returns ``(new_params, new_state)`` without touching the inputs.

    ``state`` is ``None`` or a dict from a previous call.
    """
    new = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    opt = make_optimizer(kind, lr)
    if state:
        opt.load_state_dict(state)
        opt.lr = lr
    opt.step(new, grads)
    return new, opt.state_dict()
