"""Command-line driver: fsd eval, summary build, cl run, influence run, fidelity run,
memcost table.

Exit codes: 0 success, 1 input error (bad flags, missing or malformed files),
2 numeric error (divergence, non-finite values).
"""
import argparse
import csv
import io
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .container import load_params, save_params
from .continual import (CLRunConfig, average_accuracy, backward_transfer, generate_tasks,
                        train_sequential)
from .datasets import load_bundled_digits, read_csv_table
from .errors import InputError, NumericError
from .estimators import ESTIMATORS, METRICS, estimate, estimate_fisher_diag
from .fidelity import FIDELITY_ESTIMATORS, FidelityConfig, run_fidelity_study
from .influence import BACKENDS, mislabel_study, regression_study, synthetic_regression
from .memcost import DEFAULT_BASELINE, METHODS, TABLE_GRID, back_solve_params, reduction_table
from .rng import substream
from .summaries import SUMMARY_KINDS, build_summary, load_summary, save_summary


def fmt(v):
    """Full-precision float text so reruns and golden files compare byte for byte."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def version_string():
    """`git describe` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path, allowed):
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def _section(cfg, key, allowed):
    sub = cfg.get(key, {})
    if not isinstance(sub, dict):
        raise InputError(f"config section {key!r} must be an object")
    unknown = set(sub) - set(allowed)
    if unknown:
        raise InputError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return dict(sub)


def prepare_out(out, kind, resolved, seed):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", resolved)
    write_json(out / "run.json", {"kind": kind, "seed": seed, "version": version_string()})
    return out


def threads_from(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("FSDKIT_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise InputError(f"FSDKIT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise InputError("thread count must be at least 1")
    return n


def load_data(args):
    """(x, y) from --data CSV or the bundled digits."""
    if getattr(args, "data", None):
        x, y, _ = read_csv_table(args.data)
        return x, y
    if getattr(args, "digits", False):
        return load_bundled_digits()
    raise InputError("no data given; pass --data FILE.csv or --digits")


# fsd eval -----------------------------------------------------------------

def cmd_fsd_eval(args):
    theta1 = load_params(args.theta1)
    x = None
    if args.summary:
        summary = load_summary(args.summary)
        if args.theta0:
            theta0 = load_params(args.theta0)
            if not np.array_equal(theta0.flat(), summary.theta0.flat()):
                raise InputError("--theta0 differs from the parameters stored in the summary")
    else:
        if not args.theta0:
            raise InputError("pass --summary or --theta0 with --data")
        theta0 = load_params(args.theta0)
        x, y = load_data(args)
        x = x.reshape((-1,) + theta0.input_shape)
        if args.estimator == "ewc":
            likelihood = "gaussian" if theta0.head_spec.fan_out == 1 else "categorical"
            fisher = estimate_fisher_diag(theta0, x, rng=substream(args.seed, "fisher"),
                                          likelihood=likelihood)
            summary = build_summary(theta0, x, kind="fisher", fisher=fisher)
        elif args.classwise:
            summary = build_summary(theta0, x, y.astype(int), kind="classwise")
        else:
            summary = build_summary(theta0, x, kind="moments")
    if args.classwise and summary.kind != "classwise":
        raise InputError("--classwise needs a classwise summary")
    if summary.kind == "classwise" and not args.classwise:
        raise InputError("summary is classwise; pass --classwise")
    est, _ = estimate(args.estimator, summary, theta1, metric=args.metric,
                      n_samples=args.samples, seed=args.seed, mode=args.mode, inputs=x)
    if not np.isfinite(est.value):
        raise NumericError("FSD estimate is not finite")
    result = {"value": est.value, "estimator": est.estimator, "metric": est.metric,
              "samples": est.samples_used, "seed": args.seed}
    text = json.dumps(result, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


# summary build ------------------------------------------------------------

def cmd_summary_build(args):
    params = load_params(args.params)
    x, y = load_data(args)
    x = x.reshape((-1,) + params.input_shape)
    fisher = None
    if args.kind == "fisher":
        likelihood = "gaussian" if params.head_spec.fan_out == 1 else "categorical"
        fisher = estimate_fisher_diag(params, x, rng=substream(args.seed, "fisher"),
                                      likelihood=likelihood)
    summary = build_summary(params, x, y.astype(int) if args.kind == "classwise" else None,
                            kind=args.kind, mode=args.mode, coreset_size=args.coreset_size,
                            rng=substream(args.seed, "coreset"), fisher=fisher,
                            coreset_stats=args.coreset_stats)
    save_summary(args.out, summary)
    print(json.dumps({"kind": summary.kind, "out": str(args.out)}))
    return 0


# cl run -------------------------------------------------------------------

_TASK_KEYS = ("kind", "n_tasks", "classes_per_task", "test_fraction", "source", "image_path",
              "label_path", "size", "n_per_task", "n_classes", "dim", "per_class", "spread",
              "noise")


def resolve_cl(cfg):
    seed = int(cfg.get("seed", 0))
    tasks = _section(cfg, "tasks", _TASK_KEYS)
    tasks.setdefault("kind", "split_digits")
    run = _section(cfg, "run", [f for f in CLRunConfig.__dataclass_fields__ if f != "seed"])
    run_cfg = CLRunConfig.from_dict({**run, "seed": seed})
    resolved = {"experiment": "cl", "seed": seed, "tasks": tasks,
                "run": {k: v for k, v in run_cfg.to_dict().items() if k != "seed"}}
    return resolved, tasks, run_cfg


def cmd_cl_run(args):
    cfg = load_config(args.config, ("experiment", "seed", "tasks", "run"))
    resolved, tasks, run_cfg = resolve_cl(cfg)
    stream = generate_tasks(seed=run_cfg.seed, **tasks)
    out = prepare_out(args.out, "cl", resolved, run_cfg.seed)
    (out / "summaries").mkdir(exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)

    def on_task_end(t, params, summary):
        save_params(out / "checkpoints" / f"task_{t}.fsdk", params)
        save_summary(out / "summaries" / f"task_{t}.fsum", summary)

    result = train_sequential(stream, run_cfg, on_task_end)
    R = result.matrix.R
    write_csv(out / "accuracy_matrix.csv", ["after_task"] + [f"task_{j}" for j in range(len(R))],
              [[i] + ["" if np.isnan(v) else fmt(v) for v in row] for i, row in enumerate(R)])
    metrics = {"metric": result.matrix.metric, "average_accuracy": average_accuracy(R)}
    metrics["backward_transfer"] = backward_transfer(R) if len(R) > 1 else None
    write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


# influence run ------------------------------------------------------------

_INFLUENCE_KEYS = ("experiment", "seed", "study", "backends", "remove_count", "data", "model",
                   "pbrf", "fraction")
_PBRF_DEFAULTS = {"lam": 1e-3, "epochs": 20, "lr": 0.01, "batch_size": 100}


def resolve_influence(cfg, args):
    seed = int(cfg.get("seed", 0))
    study = cfg.get("study", "regression")
    if study not in ("regression", "mislabel"):
        raise InputError(f"unknown influence study {study!r}")
    backends = [b.replace("-", "_") for b in (args.backend or cfg.get("backends", ["bgln_d"]))]
    for b in backends:
        if b not in BACKENDS:
            raise InputError(f"unknown backend {b!r}; expected one of {BACKENDS}")
    remove = args.remove_count if args.remove_count is not None else cfg.get("remove_count", 50)
    data = _section(cfg, "data", ("csv", "n", "dim"))
    model = _section(cfg, "model", ("hidden", "base_epochs", "base_lr"))
    pbrf = {**_PBRF_DEFAULTS, **_section(cfg, "pbrf", tuple(_PBRF_DEFAULTS))}
    model.setdefault("hidden", [64])
    resolved = {"experiment": "influence", "seed": seed, "study": study, "backends": backends,
                "remove_count": int(remove), "data": data, "model": model, "pbrf": pbrf}
    if study == "mislabel":
        resolved["fraction"] = float(cfg.get("fraction", 0.1))
    return resolved


def cmd_influence_run(args):
    cfg = load_config(args.config, _INFLUENCE_KEYS)
    r = resolve_influence(cfg, args)
    out = prepare_out(args.out, "influence", r, r["seed"])
    threads = threads_from(args)
    model = {k: (tuple(v) if k == "hidden" else v) for k, v in r["model"].items()}
    if r["study"] == "regression":
        data = None
        if "csv" in r["data"]:
            x, y, _ = read_csv_table(r["data"]["csv"])
            data = (x, y[:, None])
        elif r["data"]:
            data = synthetic_regression(r["seed"], r["data"].get("n", 500), r["data"].get("dim", 8))
        backends = list(dict.fromkeys(["direct"] + r["backends"]))
        report = regression_study(backends, r["seed"], remove_count=r["remove_count"],
                                  settings=r["pbrf"], threads=threads, data=data, **model)
    else:
        report = mislabel_study(r["backends"], r["seed"], r["data"].get("n", 400),
                                r["fraction"], settings=r["pbrf"], threads=threads, **model)
    rows = [[int(pid), b, report.scores[b][k]] for b in report.scores
            for k, pid in enumerate(report.point_ids)]
    write_csv(out / "scores.csv", ["point_id", "backend", "score"], rows)
    corr = {b: dict(zip(("pearson", "spearman", "kendall"), c))
            for b, c in report.correlations.items()}
    write_json(out / "correlations.json", corr)
    curve_rows = [[b, f, v] for b, (fr, found) in report.curves.items() for f, v in zip(fr, found)]
    write_csv(out / "detection_curve.csv", ["backend", "fraction", "found"], curve_rows)
    print(json.dumps(corr, sort_keys=True))
    return 0


# fidelity run -------------------------------------------------------------

def cmd_fidelity_run(args):
    fields_ = list(FidelityConfig.__dataclass_fields__)
    cfg = load_config(args.config, ["experiment"] + fields_)
    cfg.pop("experiment", None)
    fcfg = FidelityConfig.from_dict(cfg)
    resolved = {"experiment": "fidelity", **fcfg.to_dict()}
    out = prepare_out(args.out, "fidelity", resolved, fcfg.seed)
    report = run_fidelity_study(fcfg)
    head = ["depth", "lr0", "iters0", "lr1", "iters1", *FIDELITY_ESTIMATORS]
    write_csv(out / "scatter.csv", head, [[r[h] for h in head] for r in report.rows])
    write_json(out / "correlations.json", {str(d): c for d, c in report.correlations.items()})
    write_json(out / "failed.json", report.failed)
    print(json.dumps({str(d): {e: v and v["spearman"] for e, v in c.items()}
                      for d, c in report.correlations.items()}, sort_keys=True))
    return 0


# memcost table ------------------------------------------------------------

def parse_grid(text):
    """"C=10,20,50;d=1000,2000;N=200,250" -> dict of int tuples (missing keys default)."""
    grid = dict(TABLE_GRID)
    if not text:
        return grid
    for part in text.split(";"):
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in grid:
            raise InputError(f"bad grid entry {part!r}; expected C=..;d=..;N=..")
        try:
            grid[key] = tuple(int(v) for v in values.split(","))
        except ValueError:
            raise InputError(f"grid values must be integers: {part!r}") from None
        if not grid[key]:
            raise InputError(f"empty grid axis {key}")
    return grid


def cmd_memcost_table(args):
    grid = parse_grid(args.grid)
    methods = tuple(args.methods.split(","))
    for m in methods + (args.baseline,):
        if m not in METHODS:
            raise InputError(f"unknown method {m!r}; expected one of {METHODS}")
    P = args.P
    if args.anchor is not None:
        C, N, d = args.anchor_cell
        P = back_solve_params(args.anchor, methods[0], args.baseline, args.A, d, N, C)
    if P is None:
        raise InputError("pass --P or --anchor")
    rows = reduction_table(P, args.A, methods, args.baseline, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["C", "N", "d", *methods])
    for r in rows:
        w.writerow([r["C"], r["N"], r["d"], *(fmt(r[m]) for m in methods)])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    if args.anchor is not None:
        print(f"# back-solved P = {fmt(P)}", file=sys.stderr)
    return 0


# parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="fsdkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (default: $FSDKIT_THREADS or 1)")
    groups = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    fsd = groups.add_parser("fsd").add_subparsers(dest="action", required=True,
                                                  parser_class=_Parser)
    ev = fsd.add_parser("eval", help="estimate the FSD between two parameter files")
    ev.add_argument("--estimator", choices=ESTIMATORS, default="bgln-d")
    ev.add_argument("--classwise", action="store_true")
    ev.add_argument("--theta0")
    ev.add_argument("--theta1", required=True)
    ev.add_argument("--summary")
    ev.add_argument("--data", help="CSV (last column target) when no summary is given")
    ev.add_argument("--digits", action="store_true", help="use the bundled 8x8 digits")
    ev.add_argument("--metric", choices=METRICS, default="sq_euclid_logits")
    ev.add_argument("--samples", type=int, default=64)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--mode", default="verbatim", help="BGLN-D mode")
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_fsd_eval)

    summ = groups.add_parser("summary").add_subparsers(dest="action", required=True,
                                                       parser_class=_Parser)
    sb = summ.add_parser("build", help="summarize a dataset under trained parameters")
    sb.add_argument("--params", required=True)
    sb.add_argument("--data")
    sb.add_argument("--digits", action="store_true")
    sb.add_argument("--kind", choices=SUMMARY_KINDS, default="moments")
    sb.add_argument("--mode", default="auto", help="covariance mode: auto, full or diagonal")
    sb.add_argument("--coreset-size", type=int, default=40)
    sb.add_argument("--coreset-stats", action="store_true")
    sb.add_argument("--seed", type=int, default=0)
    sb.add_argument("--out", required=True)
    sb.set_defaults(fn=cmd_summary_build)

    for name, fn, extra in (("cl", cmd_cl_run, False), ("influence", cmd_influence_run, True),
                            ("fidelity", cmd_fidelity_run, False)):
        sub = groups.add_parser(name).add_subparsers(dest="action", required=True,
                                                     parser_class=_Parser)
        run = sub.add_parser("run")
        run.add_argument("--config", required=True)
        run.add_argument("--out", required=True)
        if extra:
            run.add_argument("--backend", action="append",
                             choices=["direct", "ewc", "bgln-d", "bgln_d"])
            run.add_argument("--remove-count", type=int)
        run.set_defaults(fn=fn)

    mem = groups.add_parser("memcost").add_subparsers(dest="action", required=True,
                                                      parser_class=_Parser)
    tb = mem.add_parser("table", help="percent memory reduction over the C x N x d grid")
    tb.add_argument("--P", type=int)
    tb.add_argument("--A", type=int, default=0)
    tb.add_argument("--grid", help='e.g. "C=10,20,50;d=1000,2000,3000;N=200,250"')
    tb.add_argument("--methods", default="laftr,laftr-coreset")
    tb.add_argument("--baseline", default=DEFAULT_BASELINE)
    tb.add_argument("--anchor", type=float,
                    help="observed reduction of the first method at --anchor-cell; solves P")
    tb.add_argument("--anchor-cell", type=int, nargs=3, default=(10, 200, 1000),
                    metavar=("C", "N", "D"))
    tb.add_argument("--out")
    tb.set_defaults(fn=cmd_memcost_table)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except NumericError as exc:
        print(f"fsdkit: numeric error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"fsdkit: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"fsdkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
