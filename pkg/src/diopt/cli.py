"""Command-line entry point: ``diopt <command> ...``.

Every command resolves a run configuration from ``--preset`` and/or
``--config`` plus repeated ``--set key=value`` overrides, writes its
outputs under ``--out-dir`` (default ``$DIOPT_OUT`` or ``./runs``), and
appends a block to ``manifest.txt`` there.  ``DIOPT_THREADS`` caps the
numba thread pool.
"""

import argparse
import csv
import hashlib
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from ._accel import USE_NUMBA, set_threads
from .baselines import dc3_train, mbd_solve, mlp_train
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig, load_config, parse_kv, preset
from .diffusion import NoiseModel
from .errors import ChecksumError, ConfigError, DioptError
from .evaluation import (aggregate_seeds, metrics, theorem1_mc, write_results_csv)
from .oracles import label_dataset
from .problems import (Dataset, generate_family, generate_instances, load_dataset,
                       save_dataset)
from .trainer import evaluate_model, split_indices, train, write_epoch_log

METHODS = ("diopt", "diffusion", "dc3", "mlp")
ABLATE_AXES = {"T": "T", "r_s": "r_s", "K_t": "K_t", "K": "K", "eta": "eta"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def out_dir(args):
    d = args.out_dir or os.environ.get("DIOPT_OUT") or "runs"
    os.makedirs(d, exist_ok=True)
    return d


def resolve_config(args, base=None):
    if args.preset and args.config:
        raise UsageError("give either --preset or --config, not both")
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        cfg = base or RunConfig()
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        over.update(parse_kv(item))
    if over:
        cfg = RunConfig.from_dict({**parse_kv(cfg.to_text()), **over})
    return cfg.validate()


def _sha(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, argv, cfg, outputs):
    lines = [
        f"[run {time.strftime('%Y-%m-%dT%H:%M:%S')}]",
        f"command = diopt {' '.join(argv)}",
        f"version = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"numba = {'on' if USE_NUMBA else 'off'}",
        f"threads = {os.environ.get('DIOPT_THREADS', 'default')}",
    ]
    if cfg is not None:
        lines += [f"config_hash = {cfg.hash()}", f"seed = {cfg.seed}"]
    for p in outputs:
        lines.append(f"output = {p} sha256:{_sha(p)}")
    with open(os.path.join(directory, "manifest.txt"), "a") as fh:
        fh.write("\n".join(lines) + "\n\n")


def _parse_list(text, conv=float):
    vals = [v for v in (s.strip() for s in text.split(",")) if v]
    if not vals:
        raise UsageError("value list is empty")
    return [conv(v) for v in vals]


def _parse_dims(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out += list(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise UsageError("dimension list is empty")
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    cfg = resolve_config(args)
    if args.kind:
        cfg = cfg.replace(kind=args.kind.upper())
    kw = {k: getattr(args, k) for k in ("n", "n_eq", "n_ineq", "count", "seed")
          if getattr(args, k) is not None}
    if "seed" in kw:
        kw["data_seed"] = kw.pop("seed")
    cfg = cfg.replace(**kw)
    fam = generate_family(cfg.kind, cfg.n, cfg.n_eq, cfg.n_ineq, seed=cfg.data_seed, alpha=cfg.alpha)
    X = generate_instances(fam, cfg.count, cfg.data_seed + 1)
    ds = Dataset(fam, X, meta={"config_hash": cfg.hash()})
    d = out_dir(args)
    path = args.output or os.path.join(d, f"{cfg.kind.lower()}.ds")
    save_dataset(path, ds)
    print(fam.summary())
    print(f"wrote {len(ds)} instances to {path}")
    write_manifest(d, args.argv, cfg, [path])
    return 0


def cmd_label(args):
    ds = load_dataset(args.dataset)
    labeled, failures = label_dataset(ds, tol=args.tol, starts=args.starts, seed=args.seed)
    for i, msg in failures:
        print(f"instance {i}: {msg}", file=sys.stderr)
    path = args.output or args.dataset
    save_dataset(path, labeled)
    print(f"labelled {len(ds) - len(failures)}/{len(ds)} instances -> {path}")
    write_manifest(out_dir(args), args.argv, None, [path])
    return 1 if failures else 0


def _train_one(method, ds, cfg, d, tag=None):
    """Train ``method`` and write checkpoint, epoch log and config.  Returns paths."""
    tag = tag or method
    if method == "diffusion":
        cfg = cfg.replace(r_s=1.0)
    ckpt_paths = []
    if method in ("diopt", "diffusion"):
        def on_epoch(epoch, model, rec):
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                p = os.path.join(d, f"{tag}_e{epoch + 1}.ckpt")
                save_checkpoint(p, model, cfg, method, {"epoch": epoch + 1})
                ckpt_paths.append(p)
        res = train(ds, cfg, on_epoch=on_epoch)
        model, log = res.model, res.log
    else:
        if method == "mlp" and not ds.labeled:
            raise ConfigError("mlp needs a labelled dataset")
        model = (dc3_train if method == "dc3" else mlp_train)(ds, cfg)
        log = model.log
    ckpt = os.path.join(d, f"{tag}.ckpt")
    save_checkpoint(ckpt, model, cfg, method, {"epochs": len(log)})
    logp = os.path.join(d, f"{tag}_epochs.csv")
    write_epoch_log(logp, log)
    cfgp = os.path.join(d, f"{tag}.cfg")
    with open(cfgp, "w") as fh:
        fh.write(cfg.to_text())
    return cfg, model, [ckpt, logp, cfgp] + ckpt_paths


def cmd_train(args):
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {METHODS}")
    cfg = resolve_config(args)
    ds = load_dataset(args.dataset)
    if args.method in ("diopt", "diffusion", "mlp") and not ds.labeled:
        raise ConfigError(f"{args.method} needs a labelled dataset (run `diopt label` first)")
    d = out_dir(args)
    cfg, _, paths = _train_one(args.method, ds, cfg, d)
    print(f"trained {args.method}; config hash {cfg.hash()}")
    for p in paths:
        print(f"  {p}")
    write_manifest(d, args.argv, cfg, paths)
    return 0


def _eval_rows(method, model, ds, idx, cfg, K, eta, seeds, completion=True):
    fam = ds.family
    F = ds.F[idx] if ds.labeled else None
    recs = []
    for s in seeds:
        rng = np.random.default_rng([int(s), 100])
        if method == "mbd":
            Y = mbd_solve(fam, ds.X[idx], cfg.mbd_steps, cfg.mbd_samples, cfg.mbd_lambda_h,
                          cfg.mbd_lambda_g, completion, cfg.mbd_tau, cfg.mbd_weighting,
                          cfg.mbd_schedule, rng)
            recs.append(metrics(fam, ds.X[idx], Y, F, cfg.eps))
        elif isinstance(model, NoiseModel):
            recs.append(evaluate_model(model, ds, idx, K, eta, rng, cfg.eps))
        else:
            recs.append(metrics(fam, ds.X[idx], model.predict(fam, ds.X[idx]), F, cfg.eps))
    label = method if completion or method != "mbd" else "mbd(no-completion)"
    rows = [({"method": label, "K": K, "eta": eta, "seed": s, "instances": len(idx)}, r.summary)
            for s, r in zip(seeds, recs)]
    rows.append(({"method": label, "K": K, "eta": eta, "seed": "all", "instances": len(idx)},
                 aggregate_seeds(recs)))
    return rows


def _split(ds, cfg, which):
    if which == "all":
        return np.arange(len(ds))
    return split_indices(len(ds), cfg.val_count)[1]


def cmd_eval(args):
    ds = load_dataset(args.dataset)
    explicit = bool(args.preset or args.config or args.set)
    model = None
    method = args.method
    if method == "mbd":
        cfg = resolve_config(args)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint unless --method mbd")
        model, meta = load_checkpoint(args.checkpoint)
        stored = RunConfig.from_text(meta["config"])
        cfg = resolve_config(args, base=stored) if explicit else stored
        if explicit and cfg.hash() != meta["config_hash"]:
            raise ChecksumError(f"config hash {cfg.hash()} does not match checkpoint "
                                f"{meta['config_hash']}; evaluate with the training config")
        method = method or meta["method"]
    K = args.K if args.K is not None else cfg.K
    eta = args.eta if args.eta is not None else cfg.eta
    seeds = _parse_list(args.seeds, int)
    idx = _split(ds, cfg, args.split)
    rows = _eval_rows(method, model, ds, idx, cfg, K, eta, seeds, not args.no_completion)
    d = out_dir(args)
    path = args.output or os.path.join(d, f"results_{method}.csv")
    write_results_csv(path, rows)
    summ = rows[-1][1]
    print(f"{method}: Gap% {summ['Gap%'][0]:.3f}  Feasibility% {summ['Feasibility%'][0]:.2f}"
          f"  Ineq Num Viol {summ['Ineq Num Viol'][0]:.3f} -> {path}")
    write_manifest(d, args.argv, cfg, [path])
    return 0


def cmd_ablate(args):
    if args.axis not in ABLATE_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {sorted(ABLATE_AXES)}")
    conv = int if args.axis in ("T", "K_t", "K") else float
    values = _parse_list(args.values, conv)
    if args.method not in ("diopt", "diffusion"):
        raise UsageError("ablations are defined for diopt and diffusion")
    base = resolve_config(args)
    ds = load_dataset(args.dataset)
    d = out_dir(args)
    seeds = _parse_list(args.seeds, int)
    idx = _split(ds, base, args.split)
    rows, outputs = [], []
    trained = None
    for v in values:
        key = ABLATE_AXES[args.axis]
        cfg = base.replace(**{key: v}) if args.axis != "K" else base
        if args.axis != "K" or trained is None:
            cfg, trained, paths = _train_one(args.method, ds, cfg, d, f"{args.method}_{args.axis}{v}")
            outputs += paths
        K = v if args.axis == "K" else cfg.K
        eta = cfg.eta
        for labels, summ in _eval_rows(args.method, trained, ds, idx, cfg, K, eta, seeds):
            if labels["seed"] == "all":
                rows.append(({"axis": args.axis, "value": v, **labels}, summ))
    path = args.output or os.path.join(d, f"ablate_{args.axis}.csv")
    write_results_csv(path, rows)
    print(f"sweep over {args.axis} = {values} -> {path}")
    write_manifest(d, args.argv, base, outputs + [path])
    return 0


def cmd_verify_theorem1(args):
    dims = _parse_dims(args.d)
    d = out_dir(args)
    path = args.output or os.path.join(d, "theorem1.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "estimate", "stderr", "target", "z", "within_4se"])
        for dim in dims:
            e = theorem1_mc(dim, n_planes=args.planes, n_points=args.points, seed=args.seed)
            ok = abs(e.z_score) <= 4
            w.writerow([dim, repr(e.estimate), repr(e.stderr), repr(e.target),
                        f"{e.z_score:.4f}", ok])
            print(f"d={dim}: {e.estimate:.6f} +- {e.stderr:.6f} (2^-d = {e.target:.6f}, "
                  f"z = {e.z_score:+.2f})")
    write_manifest(d, args.argv, None, [path])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="diopt", description="Diffusion-based constrained optimisation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out-dir", help="output directory (default $DIOPT_OUT or ./runs)")
        sp.add_argument("-o", "--output", help="explicit output file path")
        if config:
            sp.add_argument("--preset", choices=sorted(PRESETS))
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config key (repeatable)")

    g = sub.add_parser("generate", help="draw a problem family and instances")
    common(g)
    g.add_argument("--kind", choices=["toy2d", "qp", "qpsr", "cqp", "TOY2D", "QP", "QPSR", "CQP"])
    g.add_argument("--n", type=int)
    g.add_argument("--n-eq", dest="n_eq", type=int)
    g.add_argument("--n-ineq", dest="n_ineq", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    lab = sub.add_parser("label", help="solve every instance with the reference oracle")
    common(lab, config=False)
    lab.add_argument("dataset")
    lab.add_argument("--tol", type=float, default=1e-6)
    lab.add_argument("--starts", type=int, default=16)
    lab.add_argument("--seed", type=int, default=0)
    lab.set_defaults(func=cmd_label)

    t = sub.add_parser("train", help="train diopt, diffusion, dc3 or mlp")
    common(t)
    t.add_argument("--method", required=True)
    t.add_argument("dataset")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or mbd) into a results CSV")
    common(e)
    e.add_argument("dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--method", choices=list(METHODS) + ["mbd"])
    e.add_argument("--K", type=int)
    e.add_argument("--eta", type=float)
    e.add_argument("--seeds", default="0")
    e.add_argument("--split", choices=["all", "val"], default="all")
    e.add_argument("--no-completion", action="store_true", help="mbd only: sample all variables")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train+eval sweep over one hyperparameter")
    common(a)
    a.add_argument("dataset")
    a.add_argument("--axis", required=True)
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--method", default="diopt")
    a.add_argument("--seeds", default="0")
    a.add_argument("--split", choices=["all", "val"], default="all")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify-theorem1", help="Monte Carlo vertex-cone probability vs 2^-d")
    common(v, config=False)
    v.add_argument("--d", default="1-8", help="dimensions, e.g. 1-8 or 2,4,6")
    v.add_argument("--points", type=int, default=10**6)
    v.add_argument("--planes", type=int, default=None)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_theorem1)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    set_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"diopt: configuration error: {exc}", file=sys.stderr)
        return 2
    except ChecksumError as exc:
        print(f"diopt: {exc}", file=sys.stderr)
        return 3
    except DioptError as exc:
        print(f"diopt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
