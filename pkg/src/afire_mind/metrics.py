"""Parcel-wise evaluation metrics and report aggregation."""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateTarget, EmptyReport, InvalidShape

VAR_FLOOR = 1e-12


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidShape(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise InvalidShape("need at least two observations")
    return a, b


def pearson(a, b, return_flag=False):
    """Sample Pearson correlation; 0 (flagged degenerate) for constant input."""
    a, b = _pair(a, b)
    ac = a - a.mean()
    bc = b - b.mean()
    saa = ac @ ac
    sbb = bc @ bc
    n = a.size
    if saa / n < VAR_FLOOR or sbb / n < VAR_FLOOR:
        return (0.0, True) if return_flag else 0.0
    r = float(np.clip((ac @ bc) / np.sqrt(saa * sbb), -1.0, 1.0))
    return (r, False) if return_flag else r


def spearman(a, b, return_flag=False):
    a, b = _pair(a, b)
    return pearson(rankdata(a), rankdata(b), return_flag=return_flag)


def r_squared(pred, target):
    pred, target = _pair(pred, target)
    tc = target - target.mean()
    ss_tot = tc @ tc
    if ss_tot / target.size < VAR_FLOOR:
        raise DegenerateTarget("target is constant")
    res = target - pred
    return float(1.0 - (res @ res) / ss_tot)


def _columns_pearson(P, T):
    """Vectorised per-column Pearson with the degeneracy rule."""
    Pc = P - P.mean(axis=0)
    Tc = T - T.mean(axis=0)
    spp = np.sum(Pc * Pc, axis=0)
    stt = np.sum(Tc * Tc, axis=0)
    n = P.shape[0]
    degenerate = (spp / n < VAR_FLOOR) | (stt / n < VAR_FLOOR)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sum(Pc * Tc, axis=0) / np.sqrt(spp * stt)
    r = np.where(degenerate, 0.0, np.clip(r, -1.0, 1.0))
    return r, degenerate


def parcel_metrics(pred, target, with_rank=True):
    """Per-parcel r, rho and R^2 for one (subject, episode) block.

    Degenerate parcels (constant prediction or target) get NaN entries and
    are excluded from the means.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise InvalidShape(f"pred {pred.shape} vs target {target.shape}")
    r, deg = _columns_pearson(pred, target)
    out = {"r": np.where(deg, np.nan, r)}
    if with_rank:
        rho, deg_rho = _columns_pearson(rankdata(pred, axis=0), rankdata(target, axis=0))
        out["rho"] = np.where(deg | deg_rho, np.nan, rho)
        tc = target - target.mean(axis=0)
        ss_tot = np.sum(tc * tc, axis=0)
        ss_res = np.sum((target - pred) ** 2, axis=0)
        const_t = ss_tot / target.shape[0] < VAR_FLOOR
        with np.errstate(invalid="ignore", divide="ignore"):
            r2 = 1.0 - ss_res / ss_tot
        out["r2"] = np.where(const_t | deg, np.nan, r2)
    return out


def _nanmean(x):
    x = np.asarray(x, dtype=np.float64)
    ok = np.isfinite(x)
    return float(x[ok].mean()) if ok.any() else float("nan")


@dataclass
class MetricsReport:
    """Nested per-block metrics with subject- and global-level means."""

    blocks: list  # dicts: subject, episode, r, rho, r2 (per-parcel lists), means
    subject_means: dict
    global_means: dict
    n_degenerate: int
    isg: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metadata": self.metadata,
            "global": self.global_means,
            "subjects": {str(k): v for k, v in sorted(self.subject_means.items())},
            "blocks": self.blocks,
            "n_degenerate_parcels": self.n_degenerate,
            "isg": {str(k): v for k, v in sorted(self.isg.items())},
        }

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def aggregate(blocks, metadata=None, metric_names=("r", "rho", "r2")):
    """Average parcels within a block, blocks within a subject, then subjects.

    ``blocks`` is an iterable of ``(subject, episode, per_parcel_dict)``.
    """
    blocks = list(blocks)
    if not blocks:
        raise EmptyReport("no blocks to aggregate")
    rows = []
    per_subject = {}
    n_deg = 0
    for subject, episode, pm in blocks:
        means = {}
        for name in metric_names:
            if name in pm:
                means[name] = _nanmean(pm[name])
        n_deg += int(np.sum(~np.isfinite(pm["r"])))
        rows.append({"subject": int(subject), "episode": str(episode),
                     **{name: np.asarray(pm[name]) for name in metric_names if name in pm},
                     "means": means})
        per_subject.setdefault(int(subject), []).append(means)
    subject_means = {}
    for s, lst in per_subject.items():
        subject_means[s] = {name: _nanmean([m[name] for m in lst]) for name in lst[0]}
    names = next(iter(subject_means.values())).keys()
    global_means = {name: _nanmean([m[name] for m in subject_means.values()]) for name in names}
    if not np.isfinite(global_means.get("r", np.nan)):
        raise EmptyReport("every parcel is degenerate")
    return MetricsReport(rows, subject_means, global_means, n_deg, metadata=dict(metadata or {}))


def load_entropy(counts):
    """Shannon entropy (nats) of an expert-assignment count vector."""
    c = np.asarray(counts, dtype=np.float64)
    p = c / c.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def isg_evaluate(X, y, subjects, episodes=None, estimator=None):
    """Leave-one-subject-out generalisation.

    A reference model is trained on every subject's training windows and
    scored on each subject's validation windows (within-subject r). Then,
    for each subject, a fresh model is trained without that subject and
    scored on the same held-out validation windows, with the unseen subject
    routed through the fallback (mean trained embedding, zero bias row).

    Returns a dict with per-subject ``within`` and ``isg`` r plus their means.
    """
    from sklearn.base import clone

    from .errors import NeedMultipleSubjects
    from .estimator import MINDRegressor
    from .training import evaluate_samples

    est = estimator if estimator is not None else MINDRegressor()
    subj_ids = sorted(set(int(s) for s in subjects))
    if len(subj_ids) < 2:
        raise NeedMultipleSubjects("ISG needs at least two subjects")
    n_subjects = est.n_subjects or (max(subj_ids) + 1)
    train, val = est.split(X, y, subjects, episodes)

    ref = clone(est).fit_samples(train, val, n_subjects=n_subjects)
    within, isg = {}, {}
    for s in subj_ids:
        held = [v for v in val if v.subject_id == s]
        within[s] = evaluate_samples(ref.net_, held, with_rank=False).global_means["r"]
        model = clone(est).fit_samples(
            [t for t in train if t.subject_id != s],
            [v for v in val if v.subject_id != s],
            n_subjects=n_subjects,
        )
        model.set_fallback_subject(s, [o for o in subj_ids if o != s])
        isg[s] = evaluate_samples(model.net_, held, with_rank=False).global_means["r"]
    return {
        "within": within,
        "isg": isg,
        "mean_within": float(np.mean(list(within.values()))),
        "mean_isg": float(np.mean(list(isg.values()))),
    }
