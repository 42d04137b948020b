"""scikit-learn style estimator around the AFIRE encoder + MIND decoder."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .afire import ResponseSequence, Sample, TokenSequence, make_windows, split_train_val
from .errors import InvalidShape, UnknownSubject
from .mind import MINDNetwork
from .tensorcore import make_rng
from .training import (
    TrainConfig,
    evaluate_samples,
    merge_by_tr,
    predict_samples,
    train_network,
)


def _as_episodes(X, y=None, subjects=None, episodes=None):
    """Normalise single arrays or lists of arrays into parallel lists."""
    single = isinstance(X, np.ndarray) and X.ndim == 2
    Xs = [X] if single else list(X)
    Xs = [check_array(x, dtype=np.float64) for x in Xs]
    ys = None
    if y is not None:
        ys = [y] if single else list(y)
        ys = [check_array(v, dtype=np.float64) for v in ys]
        if len(ys) != len(Xs):
            raise InvalidShape("X and y hold different numbers of episodes")
        for a, b in zip(Xs, ys):
            if a.shape[0] != b.shape[0]:
                raise InvalidShape(f"episode length mismatch {a.shape[0]} vs {b.shape[0]}")
    if subjects is None:
        subjects = [0] * len(Xs)
    elif np.isscalar(subjects):
        subjects = [int(subjects)] * len(Xs)
    subjects = [int(s) for s in subjects]
    if len(subjects) != len(Xs):
        raise InvalidShape("one subject id per episode is required")
    if episodes is None:
        episodes = [f"ep{i:03d}" for i in range(len(Xs))]
    episodes = [str(e) for e in episodes]
    return single, Xs, ys, subjects, episodes


def build_samples(Xs, ys, subjects, episodes, win, stride):
    out = []
    for x, y, s, e in zip(Xs, ys, subjects, episodes):
        out.extend(make_windows(TokenSequence(e, s, x), ResponseSequence(e, s, y), win, stride))
    return out


def purge_overlaps(train, val):
    """Drop training windows that share a TR with any validation window of
    the same episode."""
    spans = {}
    for v in val:
        spans.setdefault((v.subject_id, v.episode_id), []).append(
            (v.start, v.start + v.tokens.shape[0]))
    keep = []
    for t in train:
        lo, hi = t.start, t.start + t.tokens.shape[0]
        if not any(lo < b and a < hi for a, b in spans.get((t.subject_id, t.episode_id), ())):
            keep.append(t)
    return keep


def route_episode(net, x, subject, win, stride):
    """Sparse gate weights ``[T, E]`` for one episode.

    The episode is windowed like training data; where windows overlap the
    first one wins, so every row comes from a real forward pass.
    """
    W = np.full((x.shape[0], net.n_experts), np.nan)
    zeros = np.zeros((x.shape[0], 0))
    for smp in make_windows(TokenSequence("", subject, x), ResponseSequence("", subject, zeros),
                            win, stride):
        n = smp.tokens.shape[0]
        _, Wh, _ = net.forward(smp.tokens, np.arange(n), np.full(n, subject))
        net._cache = None
        rows = np.arange(smp.start, smp.start + n)
        fresh = np.isnan(W[rows, 0])
        W[rows[fresh]] = Wh[fresh]
    return W


class MINDRegressor(BaseEstimator, RegressorMixin):
    """Subject-aware sparse mixture-of-experts encoding model.

    ``fit`` takes per-episode feature matrices (TR-aligned, ``[T, D_in]``),
    matching response matrices (``[T, O]``) and one subject id per episode.
    Episodes are cut into windows, split 90/10 within each (subject,
    episode), and the encoder, gate and experts are trained end to end.

    Parameters
    ----------
    n_experts, top_k : int
        Expert count E and number of experts kept per token K.
    d_model : int or None
        Token width D after projection; defaults to the input width.
    hidden : int or None
        Expert hidden width; defaults to ``2 * d_model``.
    router : {"both", "token", "prior"}
        Gate variant; the single-router forms exist for ablations.
    use_afire : bool
        Disable to feed inputs straight to the gate and experts (requires
        ``d_model`` equal to the input width).
    win, stride : int
        Window length and stride in TRs.
    split_ratio : float
        Fraction of windows per (subject, episode) used for training.
    purge_overlap : bool
        Remove training windows that overlap validation windows.
    beta, lam : float
        Load-balance weight and L2 weight on the subject-expert bias.
    """

    def __init__(self, n_experts=8, top_k=2, d_model=None, hidden=None, router="both",
                 use_afire=True, n_subjects=None, win=100, stride=50, split_ratio=0.9,
                 purge_overlap=True, epochs=30, batch_size=8, peak_lr=3e-3,
                 weight_decay=1e-4, div=25.0, final_div=1e4, warmup=0.3, beta=0.01,
                 lam=1e-4, clip=1.0, select_best=True, random_state=0):
        self.n_experts = n_experts
        self.top_k = top_k
        self.d_model = d_model
        self.hidden = hidden
        self.router = router
        self.use_afire = use_afire
        self.n_subjects = n_subjects
        self.win = win
        self.stride = stride
        self.split_ratio = split_ratio
        self.purge_overlap = purge_overlap
        self.epochs = epochs
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.weight_decay = weight_decay
        self.div = div
        self.final_div = final_div
        self.warmup = warmup
        self.beta = beta
        self.lam = lam
        self.clip = clip
        self.select_best = select_best
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           peak_lr=self.peak_lr, weight_decay=self.weight_decay,
                           div=self.div, final_div=self.final_div, warmup=self.warmup,
                           beta=self.beta, lam=self.lam, clip=self.clip,
                           seed=self.random_state)

    def _build(self, d_in, o, n_subjects):
        d = self.d_model or d_in
        return MINDNetwork(d_in, d, self.hidden or 2 * d, o, self.n_experts, self.top_k,
                           n_subjects, w_max=self.win, router=self.router,
                           use_afire=self.use_afire, seed=self.random_state)

    def split(self, X, y, subjects=None, episodes=None):
        """Window and split the data exactly as ``fit`` would."""
        _, Xs, ys, subjects, episodes = _as_episodes(X, y, subjects, episodes)
        samples = build_samples(Xs, ys, subjects, episodes, self.win, self.stride)
        train, val = split_train_val(samples, self.split_ratio, make_rng(self.random_state, 3))
        if self.purge_overlap:
            train = purge_overlaps(train, val)
        return train, val

    def fit(self, X, y, subjects=None, episodes=None):
        train, val = self.split(X, y, subjects, episodes)
        n_subj = self.n_subjects or (max(s.subject_id for s in train + val) + 1)
        return self.fit_samples(train, val, n_subjects=n_subj)

    def fit_samples(self, train, val, n_subjects=None):
        """Train on pre-built windows (used by the leave-one-subject-out harness)."""
        if not train:
            raise ValueError("no training windows")
        d_in = train[0].tokens.shape[1]
        o = train[0].responses.shape[1]
        n_subjects = n_subjects or self.n_subjects or (
            max(s.subject_id for s in train + val) + 1)
        self.n_features_in_ = d_in
        self.n_outputs_ = o
        self.net_ = self._build(d_in, o, n_subjects)
        self.train_samples_ = train
        self.val_samples_ = val
        self.history_ = train_network(self.net_, train, val, self._train_config(),
                                      select_best=self.select_best)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("MINDRegressor is not fitted yet")

    def _episode_samples(self, Xs, subjects, episodes, ys=None):
        n_subj = self.net_.dims["n_subjects"]
        for s in subjects:
            if not 0 <= s < n_subj:
                raise UnknownSubject(f"subject {s} not in [0, {n_subj})")
        if ys is None:
            ys = [np.zeros((x.shape[0], self.n_outputs_)) for x in Xs]
        return build_samples(Xs, ys, subjects, episodes, self.win, self.stride)

    def predict(self, X, subjects=None):
        """Predict responses per episode; overlapping windows are averaged."""
        self._check_fitted()
        single, Xs, _, subjects, episodes = _as_episodes(X, None, subjects)
        samples = self._episode_samples(Xs, subjects, episodes)
        merged = merge_by_tr(samples, predict_samples(self.net_, samples))
        preds = [merged[(s, e)][0] for s, e in zip(subjects, episodes)]
        return preds[0] if single else preds

    def route(self, X, subjects=None):
        """Sparse gate weights ``[T, E]`` per episode (first window wins on
        overlaps so every row comes from a real forward pass)."""
        self._check_fitted()
        single, Xs, _, subjects, episodes = _as_episodes(X, None, subjects)
        n_subj = self.net_.dims["n_subjects"]
        for s in subjects:
            if not 0 <= s < n_subj:
                raise UnknownSubject(f"subject {s} not in [0, {n_subj})")
        out = [route_episode(self.net_, x, s, self.win, self.stride)
               for x, s in zip(Xs, subjects)]
        return out[0] if single else out

    def evaluate(self, X, y, subjects=None, episodes=None, metadata=None):
        """Full metrics report on whole episodes."""
        self._check_fitted()
        _, Xs, ys, subjects, episodes = _as_episodes(X, y, subjects, episodes)
        samples = self._episode_samples(Xs, subjects, episodes, ys)
        return evaluate_samples(self.net_, samples, metadata=metadata)

    def score(self, X, y, subjects=None):
        """Mean parcel-wise Pearson r (not R^2, unlike the sklearn default)."""
        return self.evaluate(X, y, subjects).global_means["r"]

    def set_fallback_subject(self, subject, trained_subjects):
        """Route an unseen subject with the mean trained embedding and a zero bias row."""
        self._check_fitted()
        rp = self.net_.router
        rp.e_subj[subject] = rp.e_subj[list(trained_subjects)].mean(axis=0)
        rp.B[subject] = 0.0
