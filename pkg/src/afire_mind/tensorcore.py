"""Dense numerical primitives, parameter storage and gradient checking.

Everything is float64. Row-wise variants (``softmax_rows`` etc.) are the
batched forms used by the models; the vector forms mirror the per-token
formulas and double as readable references in tests.
"""

import math
from collections import OrderedDict

import numpy as np

from .errors import InvalidShape, NonDeterministic, NonFiniteInput

GELU_C = math.sqrt(2.0 / math.pi)


def make_rng(seed, *keys):
    """Return a seeded ``numpy.random.Generator``.

    Extra integer ``keys`` derive independent child streams, e.g.
    ``make_rng(seed, 3)`` for the fourth expert.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def _check_finite(x, name="input"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidShape("softmax expects a non-empty vector")
    _check_finite(v)
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(V):
    """Row-wise softmax of a 2-D array."""
    e = np.exp(V - V.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, dp):
    """Gradient w.r.t. logits given softmax output ``p`` and upstream ``dp``.

    Works on vectors or row-stacked 2-D arrays.
    """
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def affine(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise InvalidShape(
            f"affine: W {W.shape}, x {x.shape}, b {b.shape} are inconsistent"
        )
    return W @ x + b


def gelu(x):
    """GELU, tanh approximation."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    return gelu_tanh(x)[0]


def gelu_tanh(x):
    """Unchecked GELU that also returns the tanh term for the backward pass."""
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), t


def gelu_grad(x, t=None):
    x2 = x * x
    if t is None:
        t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x2))
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


# public alias
activation = gelu


class ParamStore:
    """Named float64 parameters, each paired with a same-shape gradient buffer.

    Insertion order is the canonical order used for checkpoints and for the
    optimizer state.
    """

    def __init__(self):
        self.params = OrderedDict()
        self.grads = OrderedDict()

    def add(self, key, value):
        if key in self.params:
            raise KeyError(f"duplicate parameter {key!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[key] = arr
        self.grads[key] = np.zeros_like(arr)
        return arr

    def __getitem__(self, key):
        return self.params[key]

    def __contains__(self, key):
        return key in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def keys(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_entries(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v)
        return out

    def load_from(self, other):
        """Copy values in place so external references stay valid."""
        for k in self.params:
            if other[k].shape != self.params[k].shape:
                raise InvalidShape(f"{k}: {other[k].shape} != {self.params[k].shape}")
            self.params[k][...] = other[k]

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))


def grad_check(loss_fn, params, eps=1e-5, keys=None, return_groups=False):
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return the scalar loss and leave the analytic
    gradient in ``params.grads`` (it is responsible for zeroing them first).
    Returns the maximum over entries of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``; with
    ``return_groups`` a dict of per-key maxima is returned as well.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    keys = list(params.keys()) if keys is None else list(keys)

    f0 = loss_fn(params)
    analytic = {k: params.grads[k].copy() for k in keys}
    if loss_fn(params) != f0:
        raise NonDeterministic("loss_fn returned different values for identical input")

    groups = {}
    for k in keys:
        p = params[k]
        flat = p.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn(params)
            flat[i] = orig - eps
            fm = loss_fn(params)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        a = analytic[k].reshape(-1)
        rel = np.abs(a - num) / np.maximum(1e-8, np.abs(a) + np.abs(num))
        groups[k] = float(rel.max()) if rel.size else 0.0

    # restore analytic gradients at the unperturbed point
    loss_fn(params)
    worst = max(groups.values()) if groups else 0.0
    if return_groups:
        return worst, groups
    return worst
