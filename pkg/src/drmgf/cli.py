"""Command line: ``drmgf {toy,gen-data,train,diagnose,report}``.

Exit codes: 0 success, 2 configuration/contract error, 3 numeric failure,
4 I/O failure. The default output root comes from ``DRMGF_OUTPUT_ROOT``
(falling back to ``./runs``).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import DatasetSpec, ModelSpec, RunConfig, load_config
from .data import gen_synthetic, save_csv
from .diagnostics import write_table
from .numcore import ContractError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per RunConfig field (``--model.width``, ``--data.noise`` ...)."""
    grp = parser.add_argument_group("configuration overrides (beat the config file)")
    for f in dataclasses.fields(RunConfig):
        if f.name in ("model", "data"):
            sub = ModelSpec if f.name == "model" else DatasetSpec
            for g in dataclasses.fields(sub):
                grp.add_argument(f"--{f.name}.{g.name}", dest=f"ov:{f.name}.{g.name}", metavar="V")
        else:
            grp.add_argument(f"--{f.name.replace('_', '-')}", dest=f"ov:{f.name}", metavar="V")
    grp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="generic override, repeatable")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ContractError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for k, v in vars(args).items():
        if k.startswith("ov:") and v is not None:
            out[k[3:]] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drmgf", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("toy", help="two-task conflict landscape, all methods from one start")
    t.add_argument("--methods", default="dr-mgf,sgd-joint,pcgrad")
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps-per-epoch", type=int, default=5)
    t.add_argument("--out", help="output directory (default: <root>/toy-<digest>)")
    t.add_argument("--root")

    g = sub.add_parser("gen-data", help="write a synthetic cluster dataset as CSV")
    for name in ("size", "dim", "classes", "tasks"):
        g.add_argument(f"--{name}", type=int, default=getattr(DatasetSpec, name))
    g.add_argument("--mode", default=DatasetSpec.mode, choices=("multi-exit", "multi-task"))
    g.add_argument("--noise", type=float, default=DatasetSpec.noise)
    g.add_argument("--separation", type=float, default=DatasetSpec.separation)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    r = sub.add_parser("train", help="train one configuration and persist the run")
    r.add_argument("--config", help="flat key = value file with [model] / [data] sections")
    r.add_argument("--root", help="output root (default: $DRMGF_OUTPUT_ROOT or ./runs)")
    _config_flags(r)

    d = sub.add_parser("diagnose", help="pruning / similarity / conflict studies on a run")
    d.add_argument("run_dir")
    d.add_argument("--studies", default=",".join(bench.STUDIES))
    d.add_argument("--checkpoint")
    d.add_argument("--epochs", type=int, help="epochs of the conflict study (default: the run's)")

    rp = sub.add_parser("report", help="summary tables over finished runs")
    rp.add_argument("run_dirs", nargs="+")
    rp.add_argument("--out", help="output directory (default: <root>/report)")
    rp.add_argument("--root")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_toy(args) -> int:
    from .toy import toy_problem

    methods = tuple(m for m in args.methods.split(",") if m)
    res = toy_problem(methods, args.epochs, args.seed, args.steps_per_epoch)
    key = json.dumps([methods, args.epochs, args.seed, args.steps_per_epoch]).encode()
    out = Path(args.out) if args.out else bench.output_root(args.root) / f"toy-{hashlib.sha256(key).hexdigest()[:16]}"
    rows, final = [], []
    for name, run in sorted(res.runs.items()):
        for e, (w, pts, loss) in enumerate(zip(run.trajectory, run.task_points, run.losses)):
            rows.append({"method": name, "epoch": e, "w1": w[0], "w2": w[1],
                         "task0_w1": pts[0][0], "task0_w2": pts[0][1], "task1_w1": pts[1][0], "task1_w2": pts[1][1],
                         "loss_0": loss[0], "loss_1": loss[1], "optimum_loss_0": res.optima[0],
                         "optimum_loss_1": res.optima[1]})
        for k in range(2):
            final.append({"method": name, "task": k, "final_loss": run.final_losses[k], "optimum": res.optima[k],
                          "gap": run.final_losses[k] - res.optima[k], "diverged": run.diverged})
    for k, ind in enumerate(res.independent):
        for e, w in enumerate(ind.trajectory):
            rows.append({"method": f"independent-{k}", "epoch": e, "w1": w[0], "w2": w[1],
                         f"loss_{k}": ind.losses[e][0]})
    cols = list(dict.fromkeys(c for r in rows for c in r))
    try:
        write_table(out / "toy_trajectories.csv", rows, cols)
        write_table(out / "toy_final.csv", final)
    except OSError as exc:
        raise bench.IOFailure(f"cannot write toy tables under {out}: {exc}") from exc
    for r in final:
        print(f"{r['method']:10s} task {r['task']}: final {r['final_loss']:.3e}  optimum {r['optimum']:.3e}"
              f"{'  (diverged)' if r['diverged'] else ''}")
    print(out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(kind="synthetic-clusters", size=args.size, dim=args.dim, classes=args.classes,
                       tasks=args.tasks, mode=args.mode, noise=args.noise, separation=args.separation)
    ds = gen_synthetic(spec, args.seed)
    X = np.concatenate([ds.X_train, ds.X_test])
    Y = np.concatenate([ds.Y_train, ds.Y_test])
    if args.mode == "multi-exit":
        Y = Y[:, :1]
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_csv(args.out, X, Y)
    except OSError as exc:
        raise bench.IOFailure(f"cannot write {args.out}: {exc}") from exc
    print(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    rec, run_dir = bench.run_experiment(cfg, args.root)
    print(run_dir)
    for k in range(rec.K):
        te = rec.final["test_acc"][k] if rec.final["test_acc"] else None
        tr = rec.final["train_acc"][k]
        print(f"task {k}: train loss {rec.final['train_loss'][k]:.4f}"
              + (f"  train acc {tr:.4f}" if tr is not None else "")
              + (f"  test acc {te:.4f}" if te is not None else ""))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    studies = tuple(s for s in args.studies.split(",") if s)
    summary = bench.diagnose(args.run_dir, studies, args.checkpoint, args.epochs)
    print(json.dumps(summary, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else bench.output_root(args.root) / "report"
    for name, path in sorted(bench.emit_report(args.run_dirs, out).items()):
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {"toy": cmd_toy, "gen-data": cmd_gen_data, "train": cmd_train, "diagnose": cmd_diagnose,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError, OverflowError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
