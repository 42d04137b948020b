"""Planted-teacher synthetic data.

A teacher ``MINDNetwork`` (no encoder, so it reads tokens directly) maps
Gaussian tokens to responses; Gaussian noise is added on top. Because the
teacher is an ordinary network of the student family, loading its weights
into a student reproduces the clean signal exactly.

Heterogeneity modes:

``shared``
    every subject uses the same sparse expert mixture (support of size K).
``disjoint``
    subject ``s`` uses expert ``s mod E`` alone.
``mixed``
    dense subject-specific priors plus a token-dependent gate.
``token-modulated``
    a common uniform prior and a strong token-dependent gate.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .afire import ResponseSequence, TokenSequence, make_windows
from .errors import InvalidSpec
from .formats import load_checkpoint, read_aft, save_checkpoint, write_aft
from .metrics import _columns_pearson, pearson
from .mind import MINDNetwork
from .tensorcore import gelu, make_rng, softmax_rows

MODES = ("shared", "disjoint", "mixed", "token-modulated")
OFF_LOGIT = -50.0


@dataclass
class Episode:
    subject_id: int
    episode_id: str
    tokens: np.ndarray
    responses: np.ndarray
    clean: np.ndarray

    def windows(self, win, stride):
        return make_windows(
            TokenSequence(self.episode_id, self.subject_id, self.tokens),
            ResponseSequence(self.episode_id, self.subject_id, self.responses),
            win, stride)


@dataclass
class PlantedTeacher:
    net: MINDNetwork
    mixtures: np.ndarray  # [S, E*], the teacher prior per subject
    sigma: float
    mode: str

    def predict(self, tokens, subject):
        n = tokens.shape[0]
        y, _, _ = self.net.forward(tokens, np.zeros(n, dtype=np.int64), np.full(n, subject))
        self.net._cache = None
        return y


@dataclass
class PlantedDataset:
    episodes: list
    teacher: PlantedTeacher
    seed: int
    spec: dict = field(default_factory=dict)

    @property
    def subjects(self):
        return sorted({ep.subject_id for ep in self.episodes})

    def samples(self, win=100, stride=50):
        out = []
        for ep in self.episodes:
            out.extend(ep.windows(win, stride))
        return out

    def arrays(self):
        """``(X, y, subjects, episodes)`` lists for the estimator API."""
        return ([ep.tokens for ep in self.episodes], [ep.responses for ep in self.episodes],
                [ep.subject_id for ep in self.episodes], [ep.episode_id for ep in self.episodes])


def _normalise_experts(net, rng, n_probe=4096):
    """Rescale every teacher expert to zero-mean, unit-variance parcels."""
    bank = net.bank
    Z = rng.standard_normal((n_probe, net.dims["d"]))
    for e in range(bank.n_experts):
        F = gelu(Z @ bank.W1[e].T + bank.b1[e]) @ bank.W2[e].T + bank.b2[e]
        mu, sd = F.mean(axis=0), F.std(axis=0)
        bank.W2[e] /= sd[:, None]
        bank.b2[e] = (bank.b2[e] - mu) / sd


def build_teacher(d, o, n_experts, n_subjects, mode, k=2, hidden=None, seed=0,
                  prior_scale=1.5, token_scale=2.0):
    if mode not in MODES:
        raise InvalidSpec(f"mode must be one of {MODES}, got {mode!r}")
    k = min(k, n_experts)
    hidden = hidden or d
    net = MINDNetwork(d, d, hidden, o, n_experts, k, n_subjects, w_max=1,
                      router="both", use_afire=False, seed=seed)
    rng = make_rng(seed, 20)
    _normalise_experts(net, make_rng(seed, 21))
    rp = net.router
    rp.W_r[...] = 0.0
    rp.e_subj[...] = 0.0
    rp.alpha[...] = 0.0
    B = np.full((n_subjects, n_experts), OFF_LOGIT)
    if mode == "shared":
        support = np.sort(rng.choice(n_experts, size=k, replace=False))
        w = rng.dirichlet(np.full(k, 2.0))
        B[:, support] = np.log(w)
    elif mode == "disjoint":
        for s in range(n_subjects):
            B[s, s % n_experts] = 0.0
    else:
        if mode == "mixed":
            B = rng.normal(0.0, prior_scale, (n_subjects, n_experts))
        else:
            B = np.zeros((n_subjects, n_experts))
        rp.W_r[...] = rng.normal(0.0, token_scale / np.sqrt(d), (n_experts, d))
    rp.B[...] = B
    return net, softmax_rows(B)


def generate(d=16, o=32, n_experts=4, n_subjects=4, n_episodes=4, n_tr=500,
             mode="shared", k=2, sigma=None, target_ceiling=0.6, hidden=None,
             ar_coef=0.0, seed=0, prior_scale=1.5, token_scale=2.0):
    """Draw a planted multi-subject dataset.

    Noise is ``sigma`` if given, otherwise chosen so the teacher-vs-target
    correlation is about ``target_ceiling``. ``ar_coef > 0`` makes tokens
    an AR(1) process with unit marginal variance instead of i.i.d.
    """
    if mode not in MODES:
        raise InvalidSpec(f"mode must be one of {MODES}, got {mode!r}")
    if min(d, o, n_experts, n_subjects, n_episodes, n_tr) < 1:
        raise InvalidSpec("all dimensions must be positive")
    if sigma is not None and sigma < 0:
        raise InvalidSpec("sigma must be non-negative")
    if not 0.0 <= ar_coef < 1.0:
        raise InvalidSpec("ar_coef must lie in [0, 1)")
    net, mixtures = build_teacher(d, o, n_experts, n_subjects, mode, k=k, hidden=hidden,
                                  seed=seed, prior_scale=prior_scale, token_scale=token_scale)
    teacher = PlantedTeacher(net, mixtures, 0.0, mode)

    episodes = []
    for s in range(n_subjects):
        for e in range(n_episodes):
            rng = make_rng(seed, 30, s, e)
            Z = rng.standard_normal((n_tr, d))
            if ar_coef > 0:
                scale = np.sqrt(1.0 - ar_coef**2)
                for t in range(1, n_tr):
                    Z[t] = ar_coef * Z[t - 1] + scale * Z[t]
            clean = teacher.predict(Z, s)
            noise = make_rng(seed, 31, s, e).standard_normal(clean.shape)
            episodes.append(Episode(s, f"ep{e:03d}", Z, noise, clean))

    if sigma is None:
        if not 0.0 < target_ceiling <= 1.0:
            raise InvalidSpec("target_ceiling must lie in (0, 1]")
        signal_var = np.mean([ep.clean.var(axis=0).mean() for ep in episodes])
        sigma = float(np.sqrt(signal_var * (1.0 / target_ceiling**2 - 1.0)))
    for ep in episodes:
        ep.responses = ep.clean + sigma * ep.responses
    teacher.sigma = sigma
    spec = dict(d=d, o=o, n_experts=n_experts, n_subjects=n_subjects, n_episodes=n_episodes,
                n_tr=n_tr, mode=mode, k=k, sigma=sigma, hidden=hidden or d, ar_coef=ar_coef,
                seed=seed, prior_scale=prior_scale, token_scale=token_scale)
    return PlantedDataset(episodes, teacher, seed, spec)


def oracle_ceiling(ds):
    """Per-parcel Pearson r between clean teacher output and noisy targets,
    pooled over every TR of every episode."""
    clean = np.concatenate([ep.clean for ep in ds.episodes])
    noisy = np.concatenate([ep.responses for ep in ds.episodes])
    r, _ = _columns_pearson(clean, noisy)
    return r


def _expert_outputs(net, Z, pos):
    Zs, _ = net.encode(Z, pos)
    bank = net.bank
    return np.stack([gelu(Zs @ bank.W1[e].T + bank.b1[e]) @ bank.W2[e].T + bank.b2[e]
                     for e in range(bank.n_experts)])


def match_experts(student, teacher_net, n_probe=2000, seed=0):
    """Hungarian matching of student to teacher experts by output correlation.

    Returns ``(student_idx, teacher_idx, similarity)``.
    """
    rng = make_rng(seed, 40)
    Z = rng.standard_normal((n_probe, teacher_net.dims["d"]))
    w_max = student.dims["w_max"]
    pos = np.arange(n_probe) % w_max
    Fs = _expert_outputs(student, Z, pos)
    Ft = _expert_outputs(teacher_net, Z, np.zeros(n_probe, dtype=np.int64))
    Fs = (Fs - Fs.mean(axis=1, keepdims=True)).reshape(Fs.shape[0], -1)
    Ft = (Ft - Ft.mean(axis=1, keepdims=True)).reshape(Ft.shape[0], -1)
    ns = np.linalg.norm(Fs, axis=1)
    nt = np.linalg.norm(Ft, axis=1)
    sim = (Fs @ Ft.T) / np.maximum(np.outer(ns, nt), 1e-300)
    rows, cols = linear_sum_assignment(-sim)
    return rows, cols, sim


def learned_prior(net):
    return softmax_rows(net.router.alpha + net.router.B)


def recovery_score(student, ds, n_probe=2000, seed=0):
    """Mean over subjects of corr(learned prior, teacher mixture) after
    matching student experts to teacher experts."""
    teacher = ds.teacher if isinstance(ds, PlantedDataset) else ds
    rows, cols, _ = match_experts(student, teacher.net, n_probe, seed)
    order = np.argsort(cols)
    rows, cols = rows[order], cols[order]
    pi = learned_prior(student)
    scores = []
    for s in range(teacher.mixtures.shape[0]):
        scores.append(pearson(pi[s, rows], teacher.mixtures[s, cols]))
    return float(np.mean(scores))


def write_dataset(ds, out_dir, rate_hz=2.0, tr_seconds=1.5, dtype="f64"):
    """Write features (frames at ``rate_hz``), responses, teacher and index.

    Each TR's token is repeated over the frames of its bin so averaging the
    frames back to the TR grid recovers the token.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "responses").mkdir(parents=True, exist_ok=True)
    entries = []
    for ep in ds.episodes:
        n_tr = ep.tokens.shape[0]
        n_frames = int(np.ceil(n_tr * tr_seconds * rate_hz - 1e-9))
        stamps = np.arange(n_frames) / rate_hz
        bins = np.minimum((stamps / tr_seconds).astype(np.int64), n_tr - 1)
        name = f"s{ep.subject_id:02d}_{ep.episode_id}.aft"
        write_aft(out / "features" / name, ep.tokens[bins], rate_hz, ep.subject_id,
                  ep.episode_id, dtype=dtype)
        write_aft(out / "responses" / name, ep.responses, 1.0 / tr_seconds, ep.subject_id,
                  ep.episode_id, dtype="f64")
        entries.append({"subject": ep.subject_id, "episode": ep.episode_id, "n_tr": n_tr,
                        "features": f"features/{name}", "responses": f"responses/{name}"})
    save_checkpoint(out / "teacher.ckpt", ds.teacher.net)
    manifest = {
        "spec": ds.spec,
        "seed": ds.seed,
        "tr_seconds": tr_seconds,
        "rate_hz": rate_hz,
        "mixtures": ds.teacher.mixtures.tolist(),
        "sigma": ds.teacher.sigma,
        "teacher_checkpoint": "teacher.ckpt",
    }
    (out / "teacher.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "dataset.json").write_text(json.dumps(
        {"tr_seconds": tr_seconds, "episodes": entries}, indent=2, sort_keys=True))
    return out


def read_teacher(out_dir):
    out = Path(out_dir)
    meta = json.loads((out / "teacher.json").read_text())
    net, _ = load_checkpoint(out / meta["teacher_checkpoint"])
    return PlantedTeacher(net, np.asarray(meta["mixtures"]), meta["sigma"], meta["spec"]["mode"]), meta
