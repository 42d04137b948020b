"""``afire-mind`` command-line interface.

Subcommands: synth, train, eval, isg, routes, gradcheck. Every command
takes ``--config``, ``--seed`` and ``--out``; any config key may also be set
through an ``AFIRE_MIND_<KEY>`` environment variable. Package errors map to
exit status 1 (2 for usage errors), success to 0.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .afire import FeatureSequence, bin_to_tr
from .config import load_config
from .errors import ConfigMismatch, FormatError, IoError, MindError, UnknownSubject
from .estimator import MINDRegressor, route_episode
from .formats import config_hash, load_checkpoint, read_aft, save_checkpoint
from .metrics import _jsonable, isg_evaluate
from .mind import MINDNetwork
from .objective import total_loss
from .sadgate import topk_margin
from .synthgen import generate, oracle_ceiling, write_dataset
from .tensorcore import grad_check, make_rng
from .training import evaluate_samples

log = logging.getLogger("afire_mind")

GRADCHECK_DEFAULTS = dict(d=4, n_experts=3, k=2, h=5, o=3, n_subjects=2)
GRADCHECK_LIMITS = dict(d=8, n_experts=4, o=6, h=8)
GRADCHECK_TOL = 1e-4
GRADCHECK_TOKENS = 8
TIE_MARGIN = 1e-6
MAX_ATTEMPTS = 5


def _dump(path, obj):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- data


def load_dataset(data_dir, tr_seconds=None):
    """Read a dataset directory written by ``synth`` (or laid out alike).

    Features are AFT frame files binned onto the TR grid; responses are AFT
    files already on that grid. Returns ``(X, Y, subjects, episodes)`` lists.
    """
    root = Path(data_dir)
    index = root / "dataset.json"
    if not index.is_file():
        raise IoError(f"{root}: no dataset.json")
    try:
        meta = json.loads(index.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{index}: {exc}") from exc
    tr = float(tr_seconds if tr_seconds is not None else meta.get("tr_seconds", 1.5))
    X, Y, subjects, episodes = [], [], [], []
    for entry in meta["episodes"]:
        try:
            frames, rate, subj, ep = read_aft(root / entry["features"])
            resp, _, rsubj, rep = read_aft(root / entry["responses"])
        except OSError as exc:
            raise IoError(str(exc)) from exc
        if (subj, ep) != (rsubj, rep):
            raise FormatError(f"feature/response headers disagree for {entry['features']}")
        X.append(bin_to_tr(FeatureSequence(ep, subj, rate, frames), tr, resp.shape[0]))
        Y.append(resp)
        subjects.append(int(subj))
        episodes.append(ep)
    return X, Y, subjects, episodes


def _data_dir(args, cfg):
    path = args.data or cfg.data_dir
    if not path:
        raise IoError("no dataset given (use --data or the data_dir config key)")
    return path


def _tr_seconds(cfg):
    return cfg.tr_seconds if "tr_seconds" in cfg.explicit else None


def _estimator(cfg, d_in):
    return MINDRegressor(
        n_experts=cfg.n_experts, top_k=cfg.k, d_model=cfg.d or d_in, hidden=cfg.h or None,
        router=cfg.router, use_afire=cfg.use_afire, n_subjects=cfg.n_subjects or None,
        win=cfg.win, stride=cfg.stride, split_ratio=cfg.split_ratio,
        purge_overlap=cfg.purge_overlap, epochs=cfg.epochs, batch_size=cfg.batch_size,
        peak_lr=cfg.peak_lr, weight_decay=cfg.weight_decay, div=cfg.div,
        final_div=cfg.final_div, warmup=cfg.warmup, beta=cfg.beta, lam=cfg.lam,
        clip=cfg.clip, random_state=cfg.seed)


def _check_data_dims(cfg, X, Y, subjects):
    d_in, o = X[0].shape[1], Y[0].shape[1]
    if cfg.d_in and cfg.d_in != d_in:
        raise ConfigMismatch(f"config d_in={cfg.d_in} but data has {d_in} features")
    if cfg.o and cfg.o != o:
        raise ConfigMismatch(f"config o={cfg.o} but data has {o} parcels")
    if cfg.n_subjects and max(subjects) >= cfg.n_subjects:
        raise ConfigMismatch(f"data has subject {max(subjects)} but n_subjects={cfg.n_subjects}")
    if not cfg.use_afire and (cfg.d or d_in) != d_in:
        raise ConfigMismatch("without the encoder d must equal the feature width")
    return d_in


# ------------------------------------------------------------ commands


def cmd_synth(cfg, out):
    ds = generate(d=cfg.synth_d, o=cfg.synth_o, n_experts=cfg.synth_experts,
                  n_subjects=cfg.synth_subjects, n_episodes=cfg.synth_episodes,
                  n_tr=cfg.synth_n_tr, mode=cfg.synth_mode, k=cfg.synth_k,
                  sigma=None if cfg.synth_sigma < 0 else cfg.synth_sigma,
                  target_ceiling=cfg.synth_ceiling, seed=cfg.seed)
    try:
        write_dataset(ds, out, rate_hz=cfg.synth_rate_hz, tr_seconds=cfg.tr_seconds,
                      dtype=cfg.synth_dtype)
    except OSError as exc:
        raise IoError(f"cannot write dataset to {out}: {exc}") from exc
    r = oracle_ceiling(ds)
    summary = {"mode": cfg.synth_mode, "sigma": ds.teacher.sigma,
               "oracle_ceiling": {"mean": float(np.nanmean(r)), "min": float(np.nanmin(r)),
                                  "max": float(np.nanmax(r))}}
    _dump(Path(out) / "oracle.json", summary)
    print(f"oracle ceiling r: mean {summary['oracle_ceiling']['mean']:.4f} "
          f"(min {summary['oracle_ceiling']['min']:.4f}, "
          f"max {summary['oracle_ceiling']['max']:.4f}), sigma {ds.teacher.sigma:.4f}")
    return summary


def cmd_train(cfg, data_dir, out):
    X, Y, subjects, episodes = load_dataset(data_dir, _tr_seconds(cfg))
    d_in = _check_data_dims(cfg, X, Y, subjects)
    est = _estimator(cfg, d_in)
    train, val = est.split(X, Y, subjects, episodes)
    n_subjects = cfg.n_subjects or max(subjects) + 1
    est.fit_samples(train, val, n_subjects=n_subjects)
    out = Path(out)
    run = cfg.to_dict()
    meta = {"config_hash": config_hash(run), "seed": cfg.seed,
            "n_train_windows": len(train), "n_val_windows": len(val)}
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", est.net_, extra={"run": run})
    except OSError as exc:
        raise IoError(f"cannot write checkpoint to {out}: {exc}") from exc
    _dump(out / "train_log.json", {"metadata": meta, "config": run, "history": est.history_})
    report = evaluate_samples(est.net_, val, metadata=dict(meta, split="val")) if val else None
    if report is not None:
        _dump(out / "report.json", report.to_dict())
        print(f"val r {report.global_means['r']:.4f}")
    return est, report


def _eval_split(net, manifest, cfg, data_dir, split):
    run = manifest.get("extra", {}).get("run", {})
    X, Y, subjects, episodes = load_dataset(data_dir, _tr_seconds(cfg))
    dims = net.dims
    if X[0].shape[1] != dims["d_in"] or Y[0].shape[1] != dims["o"]:
        raise ConfigMismatch(
            f"checkpoint expects d_in={dims['d_in']}, o={dims['o']}; data has "
            f"{X[0].shape[1]}, {Y[0].shape[1]}")
    if max(subjects) >= dims["n_subjects"]:
        raise ConfigMismatch(f"checkpoint knows {dims['n_subjects']} subjects, data has more")
    est = MINDRegressor(win=run.get("win", cfg.win), stride=run.get("stride", cfg.stride),
                        split_ratio=run.get("split_ratio", cfg.split_ratio),
                        purge_overlap=run.get("purge_overlap", cfg.purge_overlap),
                        random_state=run.get("seed", cfg.seed))
    if est.win > dims["w_max"] and net.use_afire:
        raise ConfigMismatch(f"window {est.win} exceeds the checkpoint's W_max {dims['w_max']}")
    train, val = est.split(X, Y, subjects, episodes)
    return val if split == "val" else train + val


def cmd_eval(cfg, checkpoint, data_dir, out, split="val"):
    net, manifest = load_checkpoint(checkpoint)
    samples = _eval_split(net, manifest, cfg, data_dir, split)
    meta = {"config_hash": manifest["config_hash"], "split": split}
    report = evaluate_samples(net, samples, metadata=meta)
    if out:
        _dump(Path(out) / "report.json", report.to_dict())
    print(f"{split} r {report.global_means['r']:.4f}  rho {report.global_means['rho']:.4f}  "
          f"R2 {report.global_means['r2']:.4f}")
    return report


def cmd_isg(cfg, data_dir, out):
    X, Y, subjects, episodes = load_dataset(data_dir, _tr_seconds(cfg))
    d_in = _check_data_dims(cfg, X, Y, subjects)
    est = _estimator(cfg, d_in)
    res = isg_evaluate(X, Y, subjects, episodes, estimator=est)
    res["metadata"] = {"config_hash": config_hash(cfg.to_dict()), "seed": cfg.seed}
    if out:
        _dump(Path(out) / "isg.json", res)
    for s in sorted(res["isg"]):
        print(f"subject {s}: within r {res['within'][s]:.4f}  isg r {res['isg'][s]:.4f}")
    print(f"mean within {res['mean_within']:.4f}  mean isg {res['mean_isg']:.4f}")
    return res


def cmd_routes(cfg, checkpoint, data_dir, subjects, first_n_tr, out):
    net, manifest = load_checkpoint(checkpoint)
    run = manifest.get("extra", {}).get("run", {})
    win, stride = run.get("win", cfg.win), run.get("stride", cfg.stride)
    X, _, subj_ids, episodes = load_dataset(data_dir, _tr_seconds(cfg))
    if X[0].shape[1] != net.dims["d_in"]:
        raise ConfigMismatch("checkpoint and data feature widths differ")
    wanted = sorted(set(subj_ids)) if subjects is None else list(subjects)
    for s in wanted:
        if not 0 <= s < net.dims["n_subjects"] or s not in subj_ids:
            raise UnknownSubject(f"subject {s} is not in the checkpoint and data")
    E = net.n_experts
    rows = []
    for s in wanted:
        for x, si, ep in zip(X, subj_ids, episodes):
            if si != s:
                continue
            n = x.shape[0] if first_n_tr is None else min(first_n_tr, x.shape[0])
            W = route_episode(net, x[:n], s, win, stride)
            for t in range(n):
                rows.append([s, ep, t, *W[t]])
    header = ["subject", "episode", "tr"] + [f"expert_{e}" for e in range(E)]
    path = Path(out) / "routes.csv" if out else None
    fh = sys.stdout
    try:
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            fh = open(path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row[:3] + [repr(float(v)) for v in row[3:]])
    except OSError as exc:
        raise IoError(f"cannot write routes: {exc}") from exc
    finally:
        if path is not None and fh is not sys.stdout:
            fh.close()
    return header, rows


def gradcheck_dims(cfg):
    dims = {}
    for key, default in GRADCHECK_DEFAULTS.items():
        dims[key] = getattr(cfg, key) if key in cfg.explicit else default
    for key, limit in GRADCHECK_LIMITS.items():
        if dims[key] > limit:
            raise ConfigMismatch(f"gradcheck needs {key} <= {limit}, got {dims[key]}")
    if not 1 <= dims["k"] <= dims["n_experts"]:
        raise ConfigMismatch("gradcheck needs 1 <= k <= n_experts")
    return dims


def run_gradcheck(cfg, corrupt=None, eps=1e-5):
    """Finite-difference check of the full training objective at small dims.

    ``corrupt`` names a parameter group whose analytic gradient is scaled by
    1.1 (a planted bug used to test the checker itself).
    """
    dims = gradcheck_dims(cfg)
    d, k = dims["d"], dims["k"]
    n = GRADCHECK_TOKENS
    for attempt in range(MAX_ATTEMPTS):
        rng = make_rng(cfg.seed, 50, attempt)
        net = MINDNetwork(d, d, dims["h"], dims["o"], dims["n_experts"], k,
                          dims["n_subjects"], w_max=n, router=cfg.router,
                          use_afire=cfg.use_afire, seed=cfg.seed + attempt)
        # move off the symmetric initial point so every path carries gradient
        for arr in net.store.params.values():
            arr += rng.normal(0.0, 0.3, arr.shape)
        X = rng.standard_normal((n, d))
        Y = rng.standard_normal((n, dims["o"]))
        pos = np.arange(n)
        subj = np.arange(n) % dims["n_subjects"]
        _, _, U = net.forward(X, pos, subj)
        net._cache = None
        if np.min(topk_margin(U, k)) >= TIE_MARGIN:
            break
    else:
        raise MindError(f"Top-K margin below {TIE_MARGIN} after {MAX_ATTEMPTS} attempts")

    # weights large enough that every loss term moves the check
    beta = cfg.beta if "beta" in cfg.explicit else 0.1
    lam = cfg.lam if "lam" in cfg.explicit else 0.1

    def loss_fn(store):
        store.zero_grad()
        pred, _, U = net.forward(X, pos, subj)
        lb, dpred, dU, dB = total_loss(pred, Y, U, net.last_selected, net.router.B,
                                       beta, lam, k)
        net.backward(dpred, dU)
        store.grads["router.B"] += dB
        if corrupt is not None:
            store.grads[corrupt] *= 1.1
        return lb.total

    if corrupt is not None and corrupt not in net.store:
        raise ConfigMismatch(f"unknown parameter group {corrupt!r}")
    t0 = time.perf_counter()
    worst, groups = grad_check(loss_fn, net.store, eps=eps, return_groups=True)
    elapsed = time.perf_counter() - t0
    failed = sorted(g for g, v in groups.items() if v > GRADCHECK_TOL)
    return {"pass": not failed, "max_rel_error": worst, "groups": groups, "failed": failed,
            "attempts": attempt + 1, "dims": dims, "router": cfg.router,
            "use_afire": cfg.use_afire, "eps": eps, "seconds": elapsed}


def cmd_gradcheck(cfg, out, corrupt=None):
    res = run_gradcheck(cfg, corrupt=corrupt)
    for g, v in res["groups"].items():
        print(f"{g:20s} {v:.3e} {'ok' if v <= GRADCHECK_TOL else 'FAIL'}")
    print(f"{'PASS' if res['pass'] else 'FAIL'} max relative error {res['max_rel_error']:.3e}")
    if out:
        _dump(Path(out) / "gradcheck.json", {k: v for k, v in res.items() if k != "seconds"})
    return res


# ---------------------------------------------------------------- main


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML config file")
    common.add_argument("--seed", type=int, help="overrides the seed config key")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="afire-mind", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a planted synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    p.add_argument("--data", help="dataset directory")
    p = sub.add_parser("eval", parents=[common], help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("val", "all"), default="val")
    p = sub.add_parser("isg", parents=[common], help="leave-one-subject-out evaluation")
    p.add_argument("--data")
    p = sub.add_parser("routes", parents=[common], help="dump routing weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--subjects", help="comma-separated subject ids (default: all)")
    p.add_argument("--first-n-tr", type=int, default=100)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, seed=args.seed)
        if args.command == "synth":
            if not args.out:
                raise IoError("synth needs --out")
            cmd_synth(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, _data_dir(args, cfg), args.out or "run")
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, _data_dir(args, cfg), args.out, args.split)
        elif args.command == "isg":
            cmd_isg(cfg, _data_dir(args, cfg), args.out)
        elif args.command == "routes":
            subjects = None
            if args.subjects:
                try:
                    subjects = [int(s) for s in args.subjects.split(",")]
                except ValueError:
                    raise UnknownSubject(f"bad subject list {args.subjects!r}") from None
            cmd_routes(cfg, args.checkpoint, _data_dir(args, cfg), subjects,
                       args.first_n_tr, args.out)
        elif args.command == "gradcheck":
            if not cmd_gradcheck(cfg, args.out, corrupt=args.corrupt)["pass"]:
                return 1
    except MindError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
