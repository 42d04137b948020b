"""End-to-end training loop and window-level evaluation."""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .metrics import aggregate, load_entropy, parcel_metrics
from .objective import OptimState, adamw_step, clip_grad_norm, onecycle_lr, total_loss
from .tensorcore import make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 3e-3
    weight_decay: float = 1e-4
    div: float = 25.0
    final_div: float = 1e4
    warmup: float = 0.3
    beta: float = 0.01
    lam: float = 1e-4
    clip: float = 1.0
    seed: int = 0


def stack_samples(samples):
    """Concatenate windows into flat arrays ``(X, pos, subj, Y)``."""
    X = np.concatenate([s.tokens for s in samples])
    Y = np.concatenate([s.responses for s in samples])
    pos = np.concatenate([np.arange(s.tokens.shape[0]) for s in samples])
    subj = np.concatenate([np.full(s.tokens.shape[0], s.subject_id) for s in samples])
    return X, pos, subj, Y


def batch_loss(net, samples, cfg, backward=True):
    """Forward (and optionally backward) one batch; returns the breakdown and
    per-expert selection counts."""
    X, pos, subj, Y = stack_samples(samples)
    pred, W, U = net.forward(X, pos, subj)
    sel = net.last_selected
    lb, dpred, dU, dB = total_loss(pred, Y, U, sel, net.router.B, cfg.beta, cfg.lam, net.k)
    if backward:
        net.backward(dpred, dU)
        net.store.grads["router.B"] += dB
    counts = np.bincount(sel.ravel(), minlength=net.n_experts)
    return lb, counts, net.last_calls


def predict_samples(net, samples, chunk=4096):
    """Per-window predictions, evaluated in bounded chunks."""
    out = []
    batch = []
    size = 0
    for s in samples:
        batch.append(s)
        size += s.tokens.shape[0]
        if size >= chunk:
            out.extend(_predict_batch(net, batch))
            batch, size = [], 0
    if batch:
        out.extend(_predict_batch(net, batch))
    return out


def _predict_batch(net, batch):
    X, pos, subj, _ = stack_samples(batch)
    pred, _, _ = net.forward(X, pos, subj)
    net._cache = None
    splits = np.cumsum([s.tokens.shape[0] for s in batch])[:-1]
    return np.split(pred, splits)


def merge_by_tr(samples, preds):
    """Group windows by (subject, episode) and average overlapping TRs.

    Returns ``{(subject, episode): (pred, target)}`` in first-seen order.
    """
    groups = {}
    for s, p in zip(samples, preds):
        groups.setdefault((s.subject_id, s.episode_id), []).append((s, p))
    out = {}
    for key, items in groups.items():
        n = max(s.start + p.shape[0] for s, p in items)
        P = np.zeros((n, items[0][1].shape[1]))
        T = np.zeros_like(P)
        cnt = np.zeros(n)
        for s, p in items:
            sl = slice(s.start, s.start + p.shape[0])
            P[sl] += p
            T[sl] = s.responses
            cnt[sl] += 1
        seen = cnt > 0
        out[key] = (P[seen] / cnt[seen, None], T[seen])
    return out


def evaluate_samples(net, samples, with_rank=True, metadata=None):
    preds = predict_samples(net, samples)
    blocks = []
    for (subject, episode), (P, T) in merge_by_tr(samples, preds).items():
        if P.shape[0] < 2:
            continue
        blocks.append((subject, episode, parcel_metrics(P, T, with_rank=with_rank)))
    names = ("r", "rho", "r2") if with_rank else ("r",)
    return aggregate(blocks, metadata=metadata, metric_names=names)


def train_network(net, train, val, cfg, select_best=True):
    """Optimise ``net`` in place on ``train`` windows.

    Each epoch shuffles the windows, runs batches of ``cfg.batch_size``
    windows through the composite loss, clips, and steps AdamW on the
    one-cycle schedule. When ``select_best`` and ``val`` is non-empty the
    parameters of the epoch with the best validation r are restored at the
    end. Returns the per-epoch history.
    """
    rng = make_rng(cfg.seed, 7)
    n_batches = max(1, int(np.ceil(len(train) / cfg.batch_size)))
    opt = OptimState(peak_lr=cfg.peak_lr, weight_decay=cfg.weight_decay,
                     total_steps=cfg.epochs * n_batches, warmup=cfg.warmup,
                     div=cfg.div, final_div=cfg.final_div)
    store = net.store
    history = []
    best_r, best_params = -np.inf, None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        sums = np.zeros(4)
        load = np.zeros(net.n_experts)
        calls_min, calls_max = np.inf, -np.inf
        entropies = []
        for b in range(n_batches):
            batch = [train[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            store.zero_grad()
            lb, counts, calls = batch_loss(net, batch, cfg)
            clip_grad_norm(store.grads, cfg.clip)
            lr = onecycle_lr(opt.step, opt)
            adamw_step(store.params, store.grads, opt, lr=lr)
            sums += (lb.l_rec, lb.r_lb, lb.l2_B, lb.total)
            load += counts
            entropies.append(load_entropy(counts))
            calls_min = min(calls_min, int(calls.min()))
            calls_max = max(calls_max, int(calls.max()))
        rec = {
            "epoch": epoch,
            "l_rec": sums[0] / n_batches,
            "r_lb": sums[1] / n_batches,
            "l2_B": sums[2] / n_batches,
            "total": sums[3] / n_batches,
            "lr": lr,
            "load": load.tolist(),
            "load_entropy": float(np.mean(entropies)),
            "expert_calls_min": int(calls_min),
            "expert_calls_max": int(calls_max),
        }
        if val:
            rec["val_r"] = evaluate_samples(net, val, with_rank=False).global_means["r"]
            if select_best and rec["val_r"] > best_r:
                best_r = rec["val_r"]
                best_params = {k: v.copy() for k, v in store.params.items()}
        log.info("epoch %d %s", epoch, {k: rec[k] for k in ("total", "l_rec", "r_lb")})
        history.append(rec)
    if best_params is not None:
        for k, v in best_params.items():
            store.params[k][...] = v
    return history


def config_dict(cfg):
    return asdict(cfg)
