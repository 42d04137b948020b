"""Fusion-agnostic post-fusion interface.

Upstream features (any backbone, any rate) are averaged into TR bins,
projected into the shared token space and passed through one residual
temporal-MLP block with sinusoidal positions and layer norm. The module also
owns windowing and the stratified train/val split.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import (
    EmptyBin,
    EmptySequence,
    InsufficientFrames,
    InvalidShape,
    NonFiniteInput,
    WindowTooLong,
)
from .tensorcore import gelu_grad, gelu_tanh

LN_EPS = 1e-5


@dataclass
class FeatureSequence:
    episode_id: str
    subject_id: int
    rate_hz: float
    frames: np.ndarray  # [T_raw, D_in]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise InvalidShape(f"frames must be a non-empty 2-D array, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise NonFiniteInput("frames contain NaN or Inf")


@dataclass
class TokenSequence:
    episode_id: str
    subject_id: int
    tokens: np.ndarray  # [T, D]
    tr_seconds: float = 1.0


@dataclass
class ResponseSequence:
    episode_id: str
    subject_id: int
    responses: np.ndarray  # [T, O]


@dataclass
class Sample:
    subject_id: int
    tokens: np.ndarray  # [W, D_in]
    responses: np.ndarray  # [W, O]
    episode_id: str
    start: int

    @property
    def key(self):
        return (self.subject_id, self.episode_id, self.start)


def bin_to_tr(f, tr_seconds, n_tr):
    """Average frames into TR bins ``[k*tr, (k+1)*tr)`` by frame timestamp."""
    if tr_seconds <= 0 or f.rate_hz <= 0:
        raise ValueError("tr_seconds and rate_hz must be positive")
    n_frames = f.frames.shape[0]
    span = n_frames / f.rate_hz
    if n_tr * tr_seconds > span + 1e-9 * max(1.0, span):
        raise InsufficientFrames(
            f"{n_tr} TRs of {tr_seconds}s need {n_tr * tr_seconds}s, have {span}s"
        )
    stamps = np.arange(n_frames) / f.rate_hz
    bins = np.floor(stamps / tr_seconds).astype(np.int64)
    # floor of a rounded ratio can land one bin off either way
    bins += (bins + 1) * tr_seconds <= stamps
    bins -= bins * tr_seconds > stamps
    keep = bins < n_tr
    counts = np.bincount(bins[keep], minlength=n_tr)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyBin(int(empty[0]))
    out = np.zeros((n_tr, f.frames.shape[1]))
    np.add.at(out, bins[keep], f.frames[keep])
    return out / counts[:, None]


class TRBinner(BaseEstimator, TransformerMixin):
    """Transformer wrapper around :func:`bin_to_tr` for pipeline use.

    ``transform`` takes a ``FeatureSequence`` (or a raw frame array sampled
    at ``rate_hz``) and returns the TR-aligned matrix. With ``n_tr=None`` all
    complete bins are kept.
    """

    def __init__(self, tr_seconds=1.5, rate_hz=2.0, n_tr=None):
        self.tr_seconds = tr_seconds
        self.rate_hz = rate_hz
        self.n_tr = n_tr

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if not isinstance(X, FeatureSequence):
            X = FeatureSequence("", 0, self.rate_hz, X)
        n_tr = self.n_tr
        if n_tr is None:
            n_tr = int(math.floor(X.frames.shape[0] / X.rate_hz / self.tr_seconds + 1e-9))
        return bin_to_tr(X, self.tr_seconds, n_tr)


def sinusoidal_table(n_pos, dim):
    pos = np.arange(n_pos)[:, None]
    i = np.arange(dim)[None, :]
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


@dataclass
class AfireParams:
    """Projector, temporal-MLP block, layer norm and the position table."""

    W_p: np.ndarray  # [D, D_in]
    b_p: np.ndarray  # [D]
    W_a: np.ndarray  # [D, D]
    b_a: np.ndarray
    W_b: np.ndarray  # [D, D]
    b_b: np.ndarray
    ln_g: np.ndarray
    ln_b: np.ndarray
    pos: np.ndarray = field(repr=False)  # [W_max, D]

    @classmethod
    def zeros(cls, d_in, d, w_max):
        return cls(
            W_p=np.zeros((d, d_in)), b_p=np.zeros(d),
            W_a=np.zeros((d, d)), b_a=np.zeros(d),
            W_b=np.zeros((d, d)), b_b=np.zeros(d),
            ln_g=np.ones(d), ln_b=np.zeros(d),
            pos=sinusoidal_table(w_max, d),
        )


def afire_forward(X, pos_idx, p):
    """Batched encoder forward. Rows of ``X`` are frames, ``pos_idx`` their
    position inside their window. Returns ``(Z, cache)``."""
    H = X @ p.W_p.T + p.b_p
    A = H + p.pos[pos_idx]
    M1 = A @ p.W_a.T + p.b_a
    G1, T1 = gelu_tanh(M1)
    R = A + G1 @ p.W_b.T + p.b_b
    mu = R.mean(axis=1, keepdims=True)
    Rc = R - mu
    inv = 1.0 / np.sqrt(np.mean(Rc * Rc, axis=1, keepdims=True) + LN_EPS)
    Nrm = Rc * inv
    Z = Nrm * p.ln_g + p.ln_b
    return Z, (X, A, M1, T1, G1, Nrm, inv)


def afire_backward(dZ, cache, p):
    """Return a dict of gradients named like the ``AfireParams`` fields."""
    X, A, M1, T1, G1, Nrm, inv = cache
    g = {"ln_g": np.sum(dZ * Nrm, axis=0), "ln_b": dZ.sum(axis=0)}
    dN = dZ * p.ln_g
    dR = inv * (dN - dN.mean(axis=1, keepdims=True)
                - Nrm * np.mean(dN * Nrm, axis=1, keepdims=True))
    g["W_b"] = dR.T @ G1
    g["b_b"] = dR.sum(axis=0)
    dM1 = (dR @ p.W_b) * gelu_grad(M1, T1)
    g["W_a"] = dM1.T @ A
    g["b_a"] = dM1.sum(axis=0)
    dA = dR + dM1 @ p.W_a
    g["W_p"] = dA.T @ X
    g["b_p"] = dA.sum(axis=0)
    return g


def project_and_encode(x, p, episode_id="", subject_id=0, tr_seconds=1.0):
    """Encode one window ``x`` [T, D_in] into a ``TokenSequence``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.W_p.shape[1]:
        raise InvalidShape(f"expected [T, {p.W_p.shape[1]}], got {x.shape}")
    if x.shape[0] > p.pos.shape[0]:
        raise WindowTooLong(f"T={x.shape[0]} exceeds W_max={p.pos.shape[0]}")
    Z, _ = afire_forward(x, np.arange(x.shape[0]), p)
    return TokenSequence(episode_id, subject_id, Z, tr_seconds)


def window_starts(T, win, stride):
    if T == 0:
        raise EmptySequence("cannot window an empty sequence")
    if win < 1 or stride < 1:
        raise ValueError("win and stride must be >= 1")
    if T < win:
        return [0]
    starts = list(range(0, T - win + 1, stride))
    if starts[-1] != T - win:
        starts.append(T - win)
    return starts


def make_windows(tokens, resp, win, stride):
    """Cut paired token/response sequences into aligned windows.

    Accepts ``TokenSequence``/``ResponseSequence`` pairs or raw arrays.
    """
    Z = tokens.tokens if isinstance(tokens, TokenSequence) else np.asarray(tokens)
    Y = resp.responses if isinstance(resp, ResponseSequence) else np.asarray(resp)
    if Z.shape[0] != Y.shape[0]:
        raise InvalidShape(f"token T={Z.shape[0]} != response T={Y.shape[0]}")
    subj = getattr(tokens, "subject_id", 0)
    ep = getattr(tokens, "episode_id", "")
    out = []
    for s in window_starts(Z.shape[0], win, stride):
        out.append(Sample(subj, Z[s:s + win], Y[s:s + win], ep, s))
    return out


def split_train_val(samples, ratio, rng):
    """Stratified split within each (subject, episode) group.

    ``floor(ratio * n)`` samples go to train, clamped so train keeps at
    least one and, for groups of two or more, val keeps at least one.
    Group order follows first appearance; within a group the order is
    shuffled by ``rng``.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    groups = {}
    for smp in samples:
        groups.setdefault((smp.subject_id, smp.episode_id), []).append(smp)
    train, val = [], []
    for key in groups:
        g = groups[key]
        n = len(g)
        n_train = int(math.floor(ratio * n + 1e-12))
        n_train = max(n_train, 1)
        if n >= 2:
            n_train = min(n_train, n - 1)
        order = rng.permutation(n)
        train.extend(g[i] for i in order[:n_train])
        val.extend(g[i] for i in order[n_train:])
    return train, val
