"""Experiment harness: run directories, run records, diagnostics and reports.

A run lives in ``<root>/<method>-<config digest>/``::

    config.copy            flat key/value copy of the run configuration
    runlog.jsonl           one JSON line per event (start, epoch, done/aborted)
    record.json            the RunRecord (schema-versioned, hash-checked)
    metrics/*.csv          per-epoch and final tables
    checkpoints/epoch-*.bin
    run.lock               present while a process owns the directory
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .config import RunConfig, format_config, load_config
from .data import Dataset, gen_synthetic, load_csv
from .metagf import EpochReport, RunResult, run_method
from .model import (
    ImportanceSet,
    MultiOutputModel,
    dump_checkpoint,
    load_checkpoint,
    multi_exit_mlp,
    multi_task_mlp,
)
from .numcore import ContractError, NormFloorWarning, Rng

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
ENV_OUTPUT_ROOT = "DRMGF_OUTPUT_ROOT"


class IOFailure(OSError):
    """The run directory could not be written (or is owned by another process)."""


def output_root(root: str | Path | None = None) -> Path:
    return Path(root or os.environ.get(ENV_OUTPUT_ROOT) or "runs")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def build_data(cfg: RunConfig):
    spec = cfg.data
    if spec.kind == "toy2d":
        from .toy import ToyData

        return ToyData()
    if spec.kind == "csv":
        return load_csv(spec.path, spec, cfg.seed)
    return gen_synthetic(spec, cfg.seed)


def build_model(cfg: RunConfig, data) -> MultiOutputModel:
    """Initial model for ``cfg``; weights depend on the seed only."""
    if cfg.data.kind == "toy2d":
        from .toy import ToyModel

        return ToyModel()
    rng = Rng(cfg.seed).spawn(7)
    m = cfg.model
    dim = data.X_train.shape[1]
    if cfg.data.mode == "multi-task":
        return multi_task_mlp(rng, dim, data.classes, m.width, m.depth, m.filter_size)
    if data.K != m.depth:
        raise ContractError(f"a multi-exit model of depth {m.depth} has {m.depth} exits, data has {data.K} tasks")
    return multi_exit_mlp(rng, dim, max(data.classes), m.width, m.depth, m.filter_size)


def run_dir_for(cfg: RunConfig, root: str | Path | None = None) -> Path:
    return output_root(root) / f"{cfg.method}-{cfg.digest()}"


class RunLock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise IOFailure(f"{self.path} exists: another process owns this run directory") from None
        except OSError as exc:
            raise IOFailure(f"cannot create {self.path}: {exc}") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    config_hash: str
    epochs: list[dict]
    final: dict
    artifacts: dict = field(default_factory=dict)
    schema: str = SCHEMA_VERSION

    @property
    def K(self) -> int:
        return len(self.final["train_acc"])

    @property
    def method(self) -> str:
        return self.config["method"]

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def metrics(self) -> dict:
        """Everything that must be reproducible (no timings, no paths)."""
        return {"epochs": self.epochs, "final": self.final, "artifacts": self.artifacts}

    def to_json(self) -> str:
        return json.dumps({"schema": self.schema, "config_hash": self.config_hash, "config": self.config,
                           "epochs": self.epochs, "final": self.final, "artifacts": self.artifacts},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        schema = str(d.get("schema", ""))
        if schema.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
            raise ContractError(f"unsupported run record schema {schema!r}")
        rec = cls(d["config"], d["config_hash"], d["epochs"], d["final"], d.get("artifacts", {}), schema)
        if rec.run_config().digest() != rec.config_hash:
            raise ContractError("run record config hash does not match its config")
        return rec

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        path = Path(run_dir) / "record.json"
        try:
            text = path.read_text()
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc}") from exc
        return cls.from_json(text)


def _epoch_row(rep: EpochReport) -> dict:
    d = rep.to_dict()
    d.pop("wall_time")
    return d


# ---------------------------------------------------------------------------
# diagnostics attached to a finished run
# ---------------------------------------------------------------------------

def probe_set(cfg: RunConfig, data: Dataset):
    n = cfg.probe_batch or len(data.X_train)
    return data.X_train[:n], data.Y_train[:n]


def epoch_conflict(cfg: RunConfig, result: RunResult, probe) -> float:
    """Mean pairwise conflict on the shared filters at the end of an epoch.

    Routed methods take each task's gradient at its own effective weights;
    methods that fuse by importance weight every task's per-filter gradient
    by its fusion share.
    """
    weighted = result.importances is not None and cfg.method in ("dr-mgf", "meta-gf-only")
    return dg.conflict_probe(result.model, probe, result.importances, routed=result.routed, weighted=weighted)


def importance_profile(cfg: RunConfig, model: MultiOutputModel, importances: ImportanceSet | None,
                       data: Dataset) -> dg.ImportanceProfile:
    """Learned importance where the method has it, otherwise accumulated
    gradient norms of the final model over one pass of the training data."""
    if importances is not None:
        return dg.learned_profile(model, importances)
    return dg.gradient_importance(model, data.batches(0, cfg.seed, cfg.batch_size))


def structure_artifacts(cfg: RunConfig, model, importances, data: Dataset) -> dict:
    routed = cfg.method in ("dr-mgf", "dr-avgf")
    profile = importance_profile(cfg, model, importances, data)
    D = dg.prune_and_measure(model, profile, data.X_test, data.Y_test, importances, routed)
    out = {"profile": profile.provenance, "degradation": D.values.tolist(), "pruned": D.pruned,
           "degradation_base_acc": D.base_acc.tolist()}
    with np.errstate(invalid="ignore"):
        S = dg.similarity_matrix(model, profile)
    out["similarity"] = [[None if not np.isfinite(x) else float(x) for x in row] for row in S]
    return out


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def run_experiment(cfg: RunConfig, root: str | Path | None = None) -> tuple[RunRecord, Path]:
    """Train per ``cfg`` and persist everything under a content-addressed directory."""
    cfg.validate()
    run_dir = Path(cfg.out_dir) if cfg.out_dir else run_dir_for(cfg, root)
    try:
        (run_dir / "metrics").mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create run directory {run_dir}: {exc}") from exc
    with RunLock(run_dir / "run.lock"):
        for stale in list((run_dir / "checkpoints").glob("epoch-*.bin")) + [run_dir / "record.json"]:
            stale.unlink(missing_ok=True)
        _write(run_dir / "config.copy", format_config(cfg))
        runlog = _open(run_dir / "runlog.jsonl", "w")
        try:
            runlog.write(json.dumps({"event": "start", "config_hash": cfg.digest(), "method": cfg.method}) + "\n")
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", NormFloorWarning)
                record = _train(cfg, run_dir, runlog)
            floors = sum(issubclass(w.category, NormFloorWarning) for w in caught)
            for w in caught:
                if not issubclass(w.category, NormFloorWarning):
                    warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
            if floors:
                log.warning("%d zero-norm filter normalizations hit the norm floor", floors)
                runlog.write(json.dumps({"event": "norm_floor", "count": floors}) + "\n")
            _write(run_dir / "record.json", record.to_json())
            runlog.write(json.dumps({"event": "done"}) + "\n")
        except BaseException as exc:
            runlog.write(json.dumps({"event": "aborted", "error": f"{type(exc).__name__}: {exc}"}) + "\n")
            raise
        finally:
            runlog.close()
    return record, run_dir


def _train(cfg: RunConfig, run_dir: Path, runlog) -> RunRecord:
    data = build_data(cfg)
    model = build_model(cfg, data)
    toy = cfg.data.kind == "toy2d"
    probe = None if toy or not cfg.probe_conflict else probe_set(cfg, data)
    conflict, traj = [], []

    def on_epoch(result: RunResult, rep: EpochReport):
        if probe is not None:
            rep.extra["conflict"] = epoch_conflict(cfg, result, probe)
            conflict.append(rep.extra["conflict"])
        if toy:
            from .toy import _effective_point

            traj.append({"w": result.model.shared[0].w.ravel().tolist(),
                         "task_points": [_effective_point(result, k).tolist() for k in range(2)]})
        every = cfg.checkpoint_every
        if every and (rep.epoch + 1) % every == 0 and rep.epoch + 1 < cfg.max_iter:
            _save_checkpoint(run_dir, cfg, result, rep.epoch + 1)
        runlog.write(json.dumps({"event": "epoch", **rep.to_dict()}) + "\n")

    result = run_method(cfg, data, model, on_epoch=on_epoch)
    _save_checkpoint(run_dir, cfg, result, cfg.max_iter)

    last = result.reports[-1] if result.reports else None
    final = {"train_acc": last.train_acc if last else [], "test_acc": last.test_acc if last else [],
             "train_loss": last.train_loss if last else []}
    artifacts: dict = {}
    if conflict:
        artifacts["conflict"] = conflict
    if toy:
        from .toy import TOY_MINIMIZERS, train_independent

        ind = [train_independent(k, cfg.max_iter, lr=cfg.lr, momentum=cfg.momentum) for k in range(2)]
        artifacts["toy"] = {"trajectory": traj, "optima": [r.final_losses[0] for r in ind],
                            "optimum_points": TOY_MINIMIZERS.tolist(),
                            "independent": [r.trajectory for r in ind]}
    elif cfg.max_iter and data.X_test is not None and len(data.X_test):
        artifacts.update(structure_artifacts(cfg, result.model, result.importances, data))
    record = RunRecord(cfg.to_dict(), cfg.digest(), [_epoch_row(r) for r in result.reports], final, artifacts)
    write_run_tables(run_dir, record)
    return record


def _save_checkpoint(run_dir: Path, cfg: RunConfig, result: RunResult, epoch: int) -> None:
    blob = dump_checkpoint(result.model, result.importances,
                           {"config_hash": cfg.digest(), "epoch": epoch, "method": cfg.method})
    path = run_dir / "checkpoints" / f"epoch-{epoch:04d}.bin"
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def latest_checkpoint(run_dir: str | Path) -> Path:
    found = sorted((Path(run_dir) / "checkpoints").glob("epoch-*.bin"))
    if not found:
        raise IOFailure(f"no checkpoints under {run_dir}")
    return found[-1]


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def _open(path: Path, mode: str):
    try:
        return open(path, mode, buffering=1)
    except OSError as exc:
        raise IOFailure(f"cannot open {path}: {exc}") from exc


def write_run_tables(run_dir: Path, rec: RunRecord) -> None:
    mdir = run_dir / "metrics"
    rows = []
    for e in rec.epochs:
        row = {"epoch": e["epoch"], "lr": e["lr"], "joint_loss": e["joint_loss"], "meta_steps": e["meta_steps"],
               "fallbacks": e["fallbacks"], "conflict": e["extra"].get("conflict", "")}
        for k in range(len(e["train_loss"])):
            row[f"train_loss_{k}"] = e["train_loss"][k]
            row[f"train_acc_{k}"] = "" if e["train_acc"][k] is None else e["train_acc"][k]
            if e["test_acc"]:
                row[f"test_acc_{k}"] = e["test_acc"][k]
        rows.append(row)
    cols = sorted({c for r in rows for c in r}, key=lambda c: (c != "epoch", c))
    try:
        dg.write_table(mdir / "epochs.csv", rows, cols)
        dg.write_table(mdir / "final.csv", _final_rows(rec))
        if "degradation" in rec.artifacts:
            dg.write_table(mdir / "degradation.csv", dg.matrix_rows(np.array(rec.artifacts["degradation"]), "pruned_task"))
            S = np.array([[np.nan if x is None else x for x in r] for r in rec.artifacts["similarity"]])
            dg.write_table(mdir / "similarity.csv", dg.matrix_rows(S, "task"))
        if "toy" in rec.artifacts:
            dg.write_table(mdir / "toy_trajectory.csv", _toy_rows(rec))
    except OSError as exc:
        raise IOFailure(f"cannot write metric tables under {mdir}: {exc}") from exc


def _final_rows(rec: RunRecord) -> list[dict]:
    f = rec.final
    return [{"task": k, "train_acc": f["train_acc"][k], "test_acc": f["test_acc"][k] if f["test_acc"] else "",
             "train_loss": f["train_loss"][k]} for k in range(len(f["train_loss"]))]


def _toy_rows(rec: RunRecord) -> list[dict]:
    toy = rec.artifacts["toy"]
    rows = []
    for e, (step, ep) in enumerate(zip(toy["trajectory"], rec.epochs)):
        row = {"epoch": e, "w1": step["w"][0], "w2": step["w"][1]}
        for k in range(2):
            row[f"task{k}_w1"], row[f"task{k}_w2"] = step["task_points"][k]
            row[f"loss_{k}"] = ep["train_loss"][k]
            row[f"optimum_loss_{k}"] = toy["optima"][k]
            row[f"optimum_w1_{k}"], row[f"optimum_w2_{k}"] = toy["optimum_points"][k]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# diagnose a finished run
# ---------------------------------------------------------------------------

STUDIES = ("prune", "similarity", "conflict")


def diagnose(run_dir: str | Path, studies=STUDIES, checkpoint: str | Path | None = None,
             epochs: int | None = None) -> dict:
    """Pruning, similarity and conflict studies on a run's checkpoint.

    The conflict study replays joint SGD from the run's initial weights and
    samples conflict and gain at every step.
    """
    run_dir = Path(run_dir)
    bad = [s for s in studies if s not in STUDIES]
    if bad:
        raise ContractError(f"unknown studies {bad}; choose from {STUDIES}")
    rec = RunRecord.load(run_dir)
    cfg = rec.run_config()
    if cfg.data.kind == "toy2d":
        raise ContractError("diagnostics need a dataset-backed run")
    data = build_data(cfg)
    ck = Path(checkpoint) if checkpoint else latest_checkpoint(run_dir)
    try:
        model, importances, _ = load_checkpoint(ck.read_bytes())
    except OSError as exc:
        raise IOFailure(f"cannot read {ck}: {exc}") from exc
    out_dir = run_dir / "diagnostics"
    summary: dict = {"checkpoint": ck.name}
    try:
        out_dir.mkdir(exist_ok=True)
        if "prune" in studies or "similarity" in studies:
            art = structure_artifacts(cfg, model, importances, data)
            if "prune" in studies:
                D = np.array(art["degradation"])
                dg.write_table(out_dir / "degradation.csv", dg.matrix_rows(D, "pruned_task"))
                summary["degradation"] = art["degradation"]
                summary["diagonal_max_rows"] = dg.DegradationMatrix(D, art["pruned"], np.array(
                    art["degradation_base_acc"])).diagonal_max_rows()
            if "similarity" in studies:
                S = np.array([[np.nan if x is None else x for x in r] for r in art["similarity"]])
                dg.write_table(out_dir / "similarity.csv", dg.matrix_rows(S, "task"))
                summary["similarity"] = art["similarity"]
        if "conflict" in studies:
            study = dg.conflict_gain_study(build_model(cfg, data), data, epochs or cfg.max_iter, cfg.lr,
                                           cfg.momentum, cfg.weight_decay, cfg.batch_size, cfg.seed)
            dg.write_table(out_dir / "conflict_gain.csv", study.rows())
            summary.update(samples=len(study.samples), dropped=study.dropped, pearson=study.pearson())
        (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    except OSError as exc:
        raise IOFailure(f"cannot write diagnostics under {out_dir}: {exc}") from exc
    return summary


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _run_key(rec: RunRecord) -> tuple:
    return rec.method, rec.config["seed"], rec.config_hash


def emit_report(run_dirs, out_dir: str | Path) -> dict[str, Path]:
    """Summary tables over one or more finished runs (sorted by method, seed, hash).

    Always: exits (final per-task metrics), curves, delta_m. When present:
    degradation, similarity, toy_trajectories, and conflict_gain (scatter data
    written by :func:`diagnose`).
    """
    loaded = sorted(((RunRecord.load(d), Path(d)) for d in run_dirs), key=lambda x: _run_key(x[0]))
    recs = [r for r, _ in loaded]
    if not recs:
        raise ContractError("no runs to report")
    if len({r.K for r in recs}) > 1:
        raise ContractError(f"runs disagree on the task count: {sorted({r.K for r in recs})}")
    out = Path(out_dir)
    tables: dict[str, list[dict]] = {"exits": [], "curves": [], "delta_m": []}
    for r, run_dir in loaded:
        rid = f"{r.method}-{r.config_hash}"
        for row in _final_rows(r):
            tables["exits"].append({"run": rid, "method": r.method, "seed": r.config["seed"], **row})
        for e in r.epochs:
            tables["curves"].append({"run": rid, "method": r.method, "epoch": e["epoch"], "joint_loss": e["joint_loss"],
                                     "mean_train_acc": _mean(e["train_acc"]), "mean_test_acc": _mean(e["test_acc"]),
                                     "conflict": e["extra"].get("conflict", "")})
        if "degradation" in r.artifacts:
            for row in dg.matrix_rows(np.array(r.artifacts["degradation"]), "pruned_task"):
                tables.setdefault("degradation", []).append({"run": rid, **row})
            for i, srow in enumerate(r.artifacts["similarity"]):
                tables.setdefault("similarity", []).append(
                    {"run": rid, "task": i, **{f"c{j}": "" if x is None else x for j, x in enumerate(srow)}})
        if "toy" in r.artifacts:
            for row in _toy_rows(r):
                tables.setdefault("toy_trajectories", []).append({"run": rid, "method": r.method, **row})
        scatter = run_dir / "diagnostics" / "conflict_gain.csv"
        if scatter.exists():
            for row in dg.read_table(scatter):
                tables.setdefault("conflict_gain", []).append({"run": rid, "method": r.method, **row})
        base = _baseline_for(r, recs)
        metric = "test_acc" if r.final["test_acc"] else "train_loss"
        tables["delta_m"].append({"run": rid, "method": r.method, "baseline": f"{base.method}-{base.config_hash}",
                                  "metric": metric,
                                  "delta_m": _delta_m(r.final[metric], base.final[metric], metric == "test_acc")})
    written = {}
    for name, rows in tables.items():
        cols = list(dict.fromkeys(c for row in rows for c in row))
        try:
            written[name] = dg.write_table(out / f"{name}.csv", rows, cols)
        except OSError as exc:
            raise IOFailure(f"cannot write report table {name}: {exc}") from exc
    return written


def _baseline_for(rec: RunRecord, recs: list[RunRecord]) -> RunRecord:
    """Joint SGD with the same seed when present, else the first run."""
    for r in recs:
        if r.method == "sgd-joint" and r.config["seed"] == rec.config["seed"]:
            return r
    return recs[0]


def _delta_m(m, m0, higher_better: bool):
    try:
        return dg.delta_m(m, m0, higher_better)
    except ContractError:
        return ""


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else ""


def epochs_to_threshold(rec: RunRecord, threshold: float, key: str = "train_acc") -> int:
    """First epoch (1-based) whose mean accuracy across tasks reaches ``threshold``;
    ``max_iter + 1`` when never reached."""
    for e in rec.epochs:
        if _mean(e[key]) != "" and _mean(e[key]) >= threshold:
            return e["epoch"] + 1
    return len(rec.epochs) + 1
