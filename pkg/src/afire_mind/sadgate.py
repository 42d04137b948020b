"""Subject-aware dynamic gating.

A token router (softmax over ``W_r (z + e_subj[s]) + b_r``) and a subject
prior router (softmax over ``alpha + B[s]``) are multiplied elementwise,
the K largest products are kept and divided by their sum.

Backward treats the selected index set as constant; both softmaxes and the
renormalisation are differentiated exactly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGate, InvalidShape, StaleCache, UnknownSubject
from .tensorcore import softmax, softmax_backward, softmax_rows

ROUTERS = ("both", "token", "prior", "token-subj")


@dataclass
class RouterParams:
    W_r: np.ndarray  # [E, D]
    b_r: np.ndarray  # [E]
    e_subj: np.ndarray  # [S, D]
    alpha: np.ndarray  # [E]
    B: np.ndarray  # [S, E]

    @property
    def n_experts(self):
        return self.W_r.shape[0]

    @property
    def n_subjects(self):
        return self.e_subj.shape[0]

    @classmethod
    def init(cls, d, n_experts, n_subjects, rng, scale=0.02):
        return cls(
            W_r=rng.normal(0.0, scale, (n_experts, d)),
            b_r=np.zeros(n_experts),
            e_subj=rng.normal(0.0, scale, (n_subjects, d)),
            alpha=np.zeros(n_experts),
            B=np.zeros((n_subjects, n_experts)),
        )


@dataclass
class GateOutput:
    p_t: np.ndarray
    pi_s: np.ndarray
    u_t: np.ndarray
    w_hat: np.ndarray
    selected: np.ndarray  # indices, in selection order


def _check_subject(s, rp):
    s = np.asarray(s)
    if np.any(s < 0) or np.any(s >= rp.n_subjects):
        raise UnknownSubject(f"subject id out of range [0, {rp.n_subjects})")


def token_route(z_t, s, rp):
    _check_subject(s, rp)
    return softmax(rp.W_r @ (np.asarray(z_t, dtype=np.float64) + rp.e_subj[s]) + rp.b_r)


def prior_route(s, rp):
    _check_subject(s, rp)
    return softmax(rp.alpha + rp.B[s])


def topk_indices(U, k):
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    return np.argsort(-U, axis=-1, kind="stable")[..., :k]


def combine_topk(p_t, pi_s, k):
    p_t = np.asarray(p_t, dtype=np.float64)
    pi_s = np.asarray(pi_s, dtype=np.float64)
    E = p_t.shape[0]
    if pi_s.shape != p_t.shape:
        raise InvalidShape("p_t and pi_s must have the same length")
    if not 1 <= k <= E:
        raise ValueError(f"K must lie in [1, {E}]")
    u = p_t * pi_s
    sel = topk_indices(u, k)
    total = u[sel].sum()
    if not total > 0.0:
        raise DegenerateGate("all selected routing scores are zero")
    w = np.zeros(E)
    w[sel] = u[sel] / total
    return GateOutput(p_t, pi_s, u, w, sel)


def topk_margin(U, k):
    """Gap between the K-th and (K+1)-th largest score per row (inf if K=E)."""
    if k >= U.shape[-1]:
        return np.full(U.shape[:-1], np.inf)
    srt = -np.sort(-U, axis=-1)
    return srt[..., k - 1] - srt[..., k]


class SADGate:
    """Batched gate over tokens of mixed subjects.

    ``forward`` caches what ``backward`` needs; ``backward`` consumes it.
    ``router`` selects the ablation arm: ``both`` (u = p * pi), ``prior``
    (u = pi), ``token`` (u = p computed without the subject embedding, so
    no subject information reaches the gate) or ``token-subj`` (u = p with
    the embedding; as expressive as ``both`` since W_r e_s can absorb any
    per-subject logit offset).
    """

    def __init__(self, params, k, router="both"):
        if router not in ROUTERS:
            raise ValueError(f"router must be one of {ROUTERS}")
        if not 1 <= k <= params.n_experts:
            raise ValueError(f"K must lie in [1, {params.n_experts}]")
        self.params = params
        self.k = k
        self.router = router
        self._cache = None

    def forward(self, Z, subj):
        rp = self.params
        subj = np.asarray(subj, dtype=np.int64)
        _check_subject(subj, rp)
        N, E = Z.shape[0], rp.n_experts
        Zt = Z if self.router == "token" else Z + rp.e_subj[subj]
        P = softmax_rows(Zt @ rp.W_r.T + rp.b_r)
        PI = softmax_rows(rp.alpha + rp.B[subj])
        if self.router == "both":
            U = P * PI
        elif self.router == "prior":
            U = PI
        else:
            U = P
        sel = topk_indices(U, self.k)
        rows = np.arange(N)[:, None]
        mask = np.zeros((N, E), dtype=bool)
        mask[rows, sel] = True
        Um = np.where(mask, U, 0.0)
        total = Um.sum(axis=1, keepdims=True)
        if np.any(total <= 0.0):
            raise DegenerateGate("all selected routing scores are zero")
        W = Um / total
        self._cache = (Z, Zt, subj, P, PI, U, mask, total, W)
        return W, sel, U

    def output(self, i):
        """``GateOutput`` for cached token ``i``."""
        if self._cache is None:
            raise StaleCache("no forward pass cached")
        _, _, _, P, PI, U, mask, _, W = self._cache
        order = topk_indices(U[i], self.k)
        return GateOutput(P[i], PI[i], U[i], W[i], order)

    def backward(self, dW, dU_extra=None):
        """Backprop ``dL/dw_hat`` (plus optional direct ``dL/du``).

        Returns ``(dZ, grads)`` with ``grads`` keyed like ``RouterParams``.
        """
        if self._cache is None:
            raise StaleCache("gate backward called without a cached forward")
        Z, Zt, subj, P, PI, U, mask, total, W = self._cache
        self._cache = None
        rp = self.params
        dU = np.where(mask, (dW - np.sum(dW * W, axis=1, keepdims=True)) / total, 0.0)
        if dU_extra is not None:
            dU = dU + dU_extra

        grads = {
            "W_r": np.zeros_like(rp.W_r), "b_r": np.zeros_like(rp.b_r),
            "e_subj": np.zeros_like(rp.e_subj), "alpha": np.zeros_like(rp.alpha),
            "B": np.zeros_like(rp.B),
        }
        dZ = np.zeros_like(Z)
        if self.router != "prior":
            dP = dU * PI if self.router == "both" else dU
            dG = softmax_backward(P, dP)
            grads["W_r"] = dG.T @ Zt
            grads["b_r"] = dG.sum(axis=0)
            dZ = dG @ rp.W_r
            if self.router != "token":
                np.add.at(grads["e_subj"], subj, dZ)
        if self.router in ("both", "prior"):
            dPI = dU * P if self.router == "both" else dU
            dL = softmax_backward(PI, dPI)
            grads["alpha"] = dL.sum(axis=0)
            np.add.at(grads["B"], subj, dL)
        return dZ, grads
