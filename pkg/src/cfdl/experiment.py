"""Run configuration and the train / ablation drivers behind the CLI.

A run configuration is a JSON object with these sections; unknown keys are
rejected everywhere::

    {
      "data":  {"synth": {...SynthConfig fields...}}
               | {"path": "dataset.cfdl"}
               | {"csv": {"modalities": ["m1.csv", ...], "labels": "y.csv"}},
      "model": {"dim": 32, "dropout": 0.5,
                "flags": {"dis_ps": true, "moe": true, "ling": true}},
      "train": {...TrainConfig fields...},
      "eval":  {"folds": 3, "val_fraction": 0.2, "select": "best"},
      "out":   "runs/example"
    }

``folds >= 2`` runs stratified k-fold cross-validation; ``folds`` of 0 or 1
uses one stratified hold-out split of ``val_fraction``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis
from .config import AblationFlags, ConfigError, ModelConfig
from .metrics import MetricsReport, mean_std
from .synthdata import (SynthConfig, SynthDataset, generate, holdout_split, kfold_split, load,
                        load_csv)
from .train import (HISTORY_FIELDS, FitResult, TrainConfig, evaluate, fit, model_from_checkpoint,
                    save_checkpoint)

log = logging.getLogger(__name__)

_TOP_KEYS = {"data", "model", "train", "eval", "out"}
_MODEL_KEYS = {"dim", "dropout", "flags", "num_modalities", "in_dim", "num_cls"}
_EVAL_KEYS = {"folds", "val_fraction", "select"}


def _reject_unknown(section: str, given: dict, allowed) -> None:
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


@dataclass
class EvalConfig:
    folds: int = 3
    val_fraction: float = 0.2
    select: str = "best"

    def __post_init__(self):
        if self.folds < 0:
            raise ConfigError("folds must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.select not in ("best", "final"):
            raise ConfigError("select must be 'best' or 'final'")


@dataclass
class RunConfig:
    data: dict
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs/default"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run configuration must be a JSON object")
        _reject_unknown("config", raw, _TOP_KEYS)
        if "data" not in raw:
            raise ConfigError("config needs a 'data' section")
        data = raw["data"]
        if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synth", "path", "csv"):
            raise ConfigError("data must have exactly one of 'synth', 'path', 'csv'")
        if "synth" in data:
            _reject_unknown("data.synth", data["synth"], {f.name for f in fields(SynthConfig)})
            SynthConfig(**data["synth"])
        if "csv" in data:
            _reject_unknown("data.csv", data["csv"], {"modalities", "labels", "num_cls"})
        model = dict(raw.get("model", {}))
        _reject_unknown("model", model, _MODEL_KEYS)
        if "flags" in model:
            fl = model["flags"]
            if isinstance(fl, str):
                model["flags"] = asdict(AblationFlags.parse(fl))
            else:
                _reject_unknown("model.flags", fl, {"dis_ps", "moe", "ling"})
        tr = raw.get("train", {})
        _reject_unknown("train", tr, {f.name for f in fields(TrainConfig)})
        ev = raw.get("eval", {})
        _reject_unknown("eval", ev, _EVAL_KEYS)
        try:
            return cls(data=copy.deepcopy(data), model=model, train=TrainConfig(**tr),
                       eval=EvalConfig(**ev), out=str(raw.get("out", "runs/default")))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {"data": self.data, "model": self.model, "train": asdict(self.train),
                "eval": asdict(self.eval), "out": self.out}

    def with_overrides(self, seed: int | None = None, out: str | None = None, folds: int | None = None,
                       flags: AblationFlags | None = None) -> "RunConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["train"]["seed"] = seed
            if "synth" in raw["data"]:
                raw["data"]["synth"]["seed"] = seed
        if out is not None:
            raw["out"] = out
        if folds is not None:
            raw["eval"]["folds"] = folds
        if flags is not None:
            raw["model"]["flags"] = asdict(flags)
        return RunConfig.from_dict(raw)

    def flags(self) -> AblationFlags:
        fl = self.model.get("flags")
        return AblationFlags(**fl) if fl else AblationFlags()


def load_data(cfg: RunConfig) -> SynthDataset:
    d = cfg.data
    if "synth" in d:
        return generate(SynthConfig(**d["synth"]))
    if "path" in d:
        return load(d["path"])
    c = d["csv"]
    return load_csv(c["modalities"], c["labels"], c.get("num_cls"))


def model_config_for(cfg: RunConfig, data: SynthDataset) -> ModelConfig:
    m = dict(cfg.model)
    for key, actual in (("num_modalities", data.M), ("in_dim", data.in_dim), ("num_cls", data.num_cls)):
        if key in m and m[key] != actual:
            raise ConfigError(f"model.{key}={m[key]} but the dataset has {actual}")
        m[key] = actual
    m["flags"] = cfg.flags()
    return ModelConfig(**m)


def splits_for(cfg: RunConfig, y: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg.eval.folds >= 2:
        try:
            return kfold_split(y, cfg.eval.folds, cfg.train.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return [holdout_split(y, cfg.eval.val_fraction, cfg.train.seed)]


# --- writers --------------------------------------------------------------


def write_history(path, history: list[dict]) -> None:
    keys = list(HISTORY_FIELDS)
    for row in history:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def summary_rows(stats: dict[str, tuple[float, float]]) -> list[dict]:
    return [{"metric": k, "mean": m, "std": s, "mean_pm_std": f"{m:.4f}±{s:.4f}"} for k, (m, s) in stats.items()]


def write_summary_csv(path, stats: dict[str, tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "mean", "std", "mean_pm_std"], lineterminator="\n")
        w.writeheader()
        for row in summary_rows(stats):
            w.writerow({**row, "mean": repr(row["mean"]), "std": repr(row["std"])})


# --- train ----------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    fit: FitResult
    report: MetricsReport
    gates: np.ndarray | None
    structure: analysis.StructureSummary
    val_idx: np.ndarray


@dataclass
class TrainOutcome:
    out_dir: Path
    folds: list[FoldOutcome]
    stats: dict[str, tuple[float, float]]
    simplex_violations: int


def run_train(cfg: RunConfig, data: SynthDataset | None = None, write: bool = True) -> TrainOutcome:
    data = load_data(cfg) if data is None else data
    mc = model_config_for(cfg, data)
    out = Path(cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg.to_dict())
    outcomes = []
    violations = 0
    for k, (tr, va) in enumerate(splits_for(cfg, data.y)):
        log.info("fold %d: %d train / %d val, %s", k, tr.size, va.size, mc.flags.label())
        res = fit(data, tr, va, mc, cfg.train)
        chosen = res.best if cfg.eval.select == "best" else res.final
        model = model_from_checkpoint(chosen)
        x_val = [xj[va] for xj in data.x]
        ev = evaluate(model, x_val, data.y[va], cfg.train.eval_batch_size)
        if ev.report is None:
            raise ConfigError(f"fold {k}: validation metrics undefined ({ev.error})")
        violations += res.simplex_violations + ev.simplex_violations
        dump = analysis.collect_features(model, x_val, cfg.train.eval_batch_size)
        structure = analysis.structure_summary(dump, model)
        outcomes.append(FoldOutcome(k, res, ev.report, ev.gates, structure, va))
        if write:
            fdir = out / f"fold_{k}"
            fdir.mkdir(exist_ok=True)
            save_checkpoint(res.best, fdir / "best.ckpt")
            save_checkpoint(res.final, fdir / "final.ckpt")
            write_history(fdir / "history.csv", res.history)
            write_json(fdir / "metrics.json", {**ev.report.flat(), "best_epoch": res.best_epoch,
                                               "simplex_violations": res.simplex_violations + ev.simplex_violations,
                                               "structure": asdict(structure)})
            if ev.gates is not None:
                analysis.write_gates_csv(fdir / "gates.csv", model.lattice.final_names(), ev.gates, va)
            analysis.write_matrix_csv(fdir / "similarity.csv", dump.names, analysis.similarity_matrix(dump))
            analysis.write_features_csv(fdir / "features.csv", dump, data.y[va])
    stats = mean_std([o.report for o in outcomes])
    if write:
        aggregate = {}
        if "SEN" in stats:
            # the mean of per-run G-means is not the G-mean of the mean rates
            aggregate = {"G_mean_mean_of_runs": stats["G_mean"][0],
                         "G_mean_of_mean_rates": float(np.sqrt(stats["SEN"][0] * stats["SPE"][0]))}
        write_json(out / "metrics.json", {
            "aggregate": aggregate,
            "flags": asdict(mc.flags),
            "folds": [{**o.report.flat(), "fold": o.fold, "best_epoch": o.fit.best_epoch} for o in outcomes],
            "mean": {k: m for k, (m, _) in stats.items()},
            "std": {k: s for k, (_, s) in stats.items()},
            "simplex_violations": violations,
        })
        write_summary_csv(out / "summary.csv", stats)
    return TrainOutcome(out, outcomes, stats, violations)


# --- ablation ---------------------------------------------------------------


def ablation_grid(M: int) -> list[AblationFlags]:
    rows = []
    for dis_ps in ((False, True) if M >= 3 else (False,)):
        rows.append(AblationFlags(dis_ps, False, False))
        rows.append(AblationFlags(dis_ps, True, False))
        rows.append(AblationFlags(dis_ps, True, True))
    return rows


@dataclass
class AblationOutcome:
    rows: list[tuple[AblationFlags, TrainOutcome]]
    notice: str | None


def _flag_cell(on: bool) -> str:
    return "on" if on else "off"


def run_ablation(cfg: RunConfig, write: bool = True) -> AblationOutcome:
    data = load_data(cfg)
    notice = None
    if data.M < 3:
        notice = f"M={data.M}: no partial-shared subsets, dis_ps rows collapse to 3"
        log.warning(notice)
    rows = []
    base = Path(cfg.out)
    for flags in ablation_grid(data.M):
        tag = f"dis_ps-{_flag_cell(flags.dis_ps)}_moe-{_flag_cell(flags.moe)}_ling-" + (
            _flag_cell(flags.ling) if flags.moe else "na")
        sub = cfg.with_overrides(out=str(base / tag), flags=flags)
        rows.append((flags, run_train(sub, data=data, write=write)))
    if write:
        base.mkdir(parents=True, exist_ok=True)
        metric_names = list(rows[0][1].stats)
        with open(base / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dis_ps", "MoE", "LinG", *metric_names])
            for flags, res in rows:
                ling = _flag_cell(flags.ling) if flags.moe else "-"
                w.writerow([_flag_cell(flags.dis_ps) if data.M >= 3 else "-", _flag_cell(flags.moe), ling,
                            *(f"{res.stats[m][0]:.4f}±{res.stats[m][1]:.4f}" for m in metric_names)])
        if notice:
            (base / "NOTICE.txt").write_text(notice + "\n")
    return AblationOutcome(rows, notice)
