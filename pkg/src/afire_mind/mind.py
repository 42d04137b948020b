"""Mixture-of-experts decoder with subject-aware sparse late fusion.

``MINDNetwork`` bundles the optional AFIRE encoder, the gate and the expert
bank into one parameter store and provides batched forward/backward passes.
Only the experts selected for a token are evaluated on it; ``last_calls``
records how many expert evaluations each token received.
"""

from dataclasses import dataclass

import numpy as np

from .afire import AfireParams, afire_backward, afire_forward, sinusoidal_table
from .errors import InvalidShape, StaleCache, UnknownExpert
from .sadgate import SADGate, RouterParams, combine_topk, prior_route, token_route
from .tensorcore import ParamStore, gelu, gelu_grad, gelu_tanh, make_rng, softmax


@dataclass
class ExpertBank:
    W1: np.ndarray  # [E, H, D]
    b1: np.ndarray  # [E, H]
    W2: np.ndarray  # [E, O, H]
    b2: np.ndarray  # [E, O]

    @property
    def n_experts(self):
        return self.W1.shape[0]

    @classmethod
    def init(cls, d, h, o, n_experts, seed):
        W1 = np.empty((n_experts, h, d))
        W2 = np.empty((n_experts, o, h))
        for e in range(n_experts):
            rng = make_rng(seed, 1000 + e)
            W1[e] = rng.normal(0.0, np.sqrt(2.0 / d), (h, d))
            W2[e] = rng.normal(0.0, np.sqrt(2.0 / h), (o, h))
        return cls(W1, np.zeros((n_experts, h)), W2, np.zeros((n_experts, o)))


def expert_forward(z_t, e, bank):
    if not 0 <= e < bank.n_experts:
        raise UnknownExpert(f"expert {e} not in [0, {bank.n_experts})")
    return bank.W2[e] @ gelu(bank.W1[e] @ z_t + bank.b1[e]) + bank.b2[e]


def decode(z_t, s, rp, bank, k, router="both"):
    """Single-token prediction; evaluates only the selected experts."""
    z_t = np.asarray(z_t, dtype=np.float64)
    if router == "token":
        p = softmax(rp.W_r @ z_t + rp.b_r)
    else:
        p = token_route(z_t, s, rp)
    pi = prior_route(s, rp)
    gate = combine_topk(np.ones_like(p) if router == "prior" else p,
                        pi if router in ("both", "prior") else np.ones_like(pi), k)
    gate.p_t, gate.pi_s = p, pi
    y = np.zeros(bank.b2.shape[1])
    for e in gate.selected:
        y += gate.w_hat[e] * expert_forward(z_t, int(e), bank)
    return y, gate


AFIRE_KEYS = ("W_p", "b_p", "W_a", "b_a", "W_b", "b_b", "ln_g", "ln_b")
ROUTER_KEYS = ("W_r", "b_r", "e_subj", "alpha", "B")
EXPERT_KEYS = ("W1", "b1", "W2", "b2")


class MINDNetwork:
    """AFIRE encoder (optional) + SADGate + expert bank.

    Parameters live in ``self.store`` under ``afire.*``, ``router.*`` and
    ``experts.*`` keys; the ``afire``, ``router`` and ``bank`` attributes are
    views onto the same arrays.
    """

    def __init__(self, d_in, d, h, o, n_experts, k, n_subjects, w_max=100,
                 router="both", use_afire=True, seed=0):
        if not use_afire and d_in != d:
            raise InvalidShape("without AFIRE the input width must equal d")
        self.dims = dict(d_in=d_in, d=d, h=h, o=o, n_experts=n_experts, k=k,
                         n_subjects=n_subjects, w_max=w_max)
        self.router_mode = router
        self.use_afire = use_afire
        self.seed = seed
        self.store = ParamStore()
        s = self.store
        if use_afire:
            rng = make_rng(seed, 1)
            s.add("afire.W_p", rng.normal(0.0, np.sqrt(1.0 / d_in), (d, d_in)))
            s.add("afire.b_p", np.zeros(d))
            s.add("afire.W_a", rng.normal(0.0, np.sqrt(1.0 / d), (d, d)))
            s.add("afire.b_a", np.zeros(d))
            s.add("afire.W_b", rng.normal(0.0, 0.02, (d, d)))
            s.add("afire.b_b", np.zeros(d))
            s.add("afire.ln_g", np.ones(d))
            s.add("afire.ln_b", np.zeros(d))
        rp = RouterParams.init(d, n_experts, n_subjects, make_rng(seed, 2))
        for key in ROUTER_KEYS:
            s.add("router." + key, getattr(rp, key))
        bank = ExpertBank.init(d, h, o, n_experts, seed)
        for key in EXPERT_KEYS:
            s.add("experts." + key, getattr(bank, key))
        self._pos = sinusoidal_table(w_max, d)
        self._bind_views()
        self.last_calls = None
        self.last_selected = None
        self._cache = None

    def _bind_views(self):
        s = self.store
        if self.use_afire:
            self.afire = AfireParams(**{k: s["afire." + k] for k in AFIRE_KEYS}, pos=self._pos)
        else:
            self.afire = None
        self.router = RouterParams(**{k: s["router." + k] for k in ROUTER_KEYS})
        self.bank = ExpertBank(**{k: s["experts." + k] for k in EXPERT_KEYS})
        self.gate = SADGate(self.router, self.dims["k"], self.router_mode)

    @property
    def n_experts(self):
        return self.dims["n_experts"]

    @property
    def k(self):
        return self.dims["k"]

    def encode(self, X, pos_idx):
        if not self.use_afire:
            return X, None
        if np.any(pos_idx >= self._pos.shape[0]):
            raise InvalidShape("position index exceeds w_max")
        return afire_forward(X, pos_idx, self.afire)

    def forward(self, X, pos_idx, subj):
        """Predict responses for stacked frames.

        Returns ``(Y, W_hat, U)``: predictions [N, O], sparse gate weights
        [N, E] and the pre-sparse combined scores [N, E].
        """
        X = np.asarray(X, dtype=np.float64)
        pos_idx = np.asarray(pos_idx, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != self.dims["d_in"]:
            raise InvalidShape(f"expected [N, {self.dims['d_in']}] input, got {X.shape}")
        Z, enc_cache = self.encode(X, pos_idx)
        W, sel, U = self.gate.forward(Z, subj)
        bank = self.bank
        N = Z.shape[0]
        Y = np.zeros((N, self.dims["o"]))
        calls = np.zeros(N, dtype=np.int64)
        experts = []
        for e in range(self.n_experts):
            idx = np.flatnonzero(np.any(sel == e, axis=1))
            if idx.size == 0:
                experts.append(None)
                continue
            Ze = Z[idx]
            Hpre = Ze @ bank.W1[e].T + bank.b1[e]
            A, tanh = gelu_tanh(Hpre)
            F = A @ bank.W2[e].T + bank.b2[e]
            Y[idx] += W[idx, e, None] * F
            calls[idx] += 1
            experts.append((idx, Ze, Hpre, tanh, A, F))
        self.last_calls = calls
        self.last_selected = sel
        self._cache = (Z, enc_cache, W, experts)
        return Y, W, U

    def backward(self, dY, dU_extra=None):
        """Accumulate parameter gradients into ``self.store.grads``."""
        if self._cache is None:
            raise StaleCache("backward called without a cached forward")
        Z, enc_cache, W, experts = self._cache
        self._cache = None
        g = self.store.grads
        bank = self.bank
        dW = np.zeros_like(W)
        dZ = np.zeros_like(Z)
        for e, item in enumerate(experts):
            if item is None:
                continue
            idx, Ze, Hpre, tanh, A, F = item
            dYe = dY[idx]
            dW[idx, e] = np.sum(dYe * F, axis=1)
            dF = W[idx, e, None] * dYe
            g["experts.W2"][e] += dF.T @ A
            g["experts.b2"][e] += dF.sum(axis=0)
            dH = (dF @ bank.W2[e]) * gelu_grad(Hpre, tanh)
            g["experts.W1"][e] += dH.T @ Ze
            g["experts.b1"][e] += dH.sum(axis=0)
            dZ[idx] += dH @ bank.W1[e]
        dZg, rgrads = self.gate.backward(dW, dU_extra)
        dZ += dZg
        for key, val in rgrads.items():
            g["router." + key] += val
        if self.use_afire:
            for key, val in afire_backward(dZ, enc_cache, self.afire).items():
                g["afire." + key] += val

    def config(self):
        return dict(self.dims, router=self.router_mode, use_afire=self.use_afire,
                    seed=self.seed)

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        return cls(cfg.pop("d_in"), cfg.pop("d"), cfg.pop("h"), cfg.pop("o"),
                   cfg.pop("n_experts"), cfg.pop("k"), cfg.pop("n_subjects"),
                   **cfg)
