"""Training objective, AdamW and the one-cycle schedule.

total = mse + beta * load_balance + lambda * ||B||^2
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidShape, ScheduleExhausted


@dataclass
class LossBreakdown:
    l_rec: float
    r_lb: float
    l2_B: float
    total: float
    beta: float
    lam: float

    def as_dict(self):
        return {"l_rec": self.l_rec, "r_lb": self.r_lb, "l2_B": self.l2_B,
                "total": self.total, "beta": self.beta, "lambda": self.lam}


def mse_loss(pred, target):
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidShape(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def load_balance(U, selected, k):
    """Switch-style balance term ``E * sum_e f_e * P_e``.

    ``P_e`` is the mean of the row-normalised pre-sparse scores, ``f_e`` the
    fraction of the ``N*K`` slots assigned to expert ``e``. The gradient only
    flows through ``P``; it is returned w.r.t. the unnormalised ``U``.
    """
    U = np.asarray(U, dtype=np.float64)
    N, E = U.shape
    selected = np.asarray(selected).reshape(N, -1)
    counts = np.bincount(selected.ravel(), minlength=E).astype(np.float64)
    f = counts / (N * k)
    rowsum = U.sum(axis=1, keepdims=True)
    Uh = U / rowsum
    P = Uh.mean(axis=0)
    r = E * float(f @ P)
    dUh = np.broadcast_to(E * f / N, U.shape)
    dU = (dUh - np.sum(dUh * Uh, axis=1, keepdims=True)) / rowsum
    return r, dU


def total_loss(pred, target, U, selected, B, beta, lam, k):
    """Assemble the composite loss.

    Returns ``(LossBreakdown, dpred, dU, dB)``.
    """
    l_rec, dpred = mse_loss(pred, target)
    if beta != 0.0:
        r_lb, dU = load_balance(U, selected, k)
        dU = beta * dU
    else:
        r_lb, _ = load_balance(U, selected, k)
        dU = None
    l2 = float(np.sum(B * B))
    total = l_rec + beta * r_lb + lam * l2
    return LossBreakdown(l_rec, r_lb, l2, total, beta, lam), dpred, dU, 2.0 * lam * B


@dataclass
class OptimState:
    peak_lr: float = 3e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1000
    warmup: float = 0.3
    div: float = 25.0
    final_div: float = 1e4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def onecycle_lr(step, o):
    """Linear warm-up from ``peak/div`` to ``peak``, then cosine down to
    ``peak/final_div`` at the last step."""
    if step >= o.total_steps:
        raise ScheduleExhausted(f"step {step} >= total_steps {o.total_steps}")
    lo = o.peak_lr / o.div
    hi = o.peak_lr
    end = o.peak_lr / o.final_div
    warm = int(round(o.warmup * o.total_steps))
    if step < warm:
        return lo + (hi - lo) * step / warm
    span = o.total_steps - 1 - warm
    if span <= 0:
        return hi
    frac = (step - warm) / span
    return end + (hi - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params, grads, o, lr=None):
    """One in-place AdamW update over the dicts ``params``/``grads``.

    Uses the scheduled rate for ``o.step`` unless ``lr`` is given.
    """
    if lr is None:
        lr = onecycle_lr(o.step, o)
    o.step += 1
    t = o.step
    bc1 = 1.0 - o.beta1 ** t if o.beta1 > 0 else 1.0
    bc2 = 1.0 - o.beta2 ** t if o.beta2 > 0 else 1.0
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise InvalidShape(f"{key}: grad {g.shape} vs param {p.shape}")
        if key not in o.m:
            o.m[key] = np.zeros_like(p)
            o.v[key] = np.zeros_like(p)
        m, v = o.m[key], o.v[key]
        m *= o.beta1
        m += (1.0 - o.beta1) * g
        v *= o.beta2
        v += (1.0 - o.beta2) * g * g
        if o.weight_decay:
            p -= lr * o.weight_decay * p
        denom = np.sqrt(v / bc2) + o.eps
        upd = np.divide(m / bc1, denom, out=np.zeros_like(p), where=denom > 0)
        p -= lr * upd
    return params


def clip_grad_norm(grads, max_norm):
    """Scale all gradients in place so their global L2 norm is <= ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
