"""Training protocol: Adam with L2 weight decay, linear warmup, stepped decay,
mini-batching, best-by-validation-AUC tracking and bit-exact checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .config import ConfigError, ModelConfig
from .dmf import CfdlModel, forward_variant, objective
from .gradcore import Matrix
from .metrics import MetricError, MetricsReport, evaluate_probs
from .synthdata import SynthDataset, atomic_write_bytes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CFDC1"
CKPT_VERSION = 1


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 5e-4
    epochs: int = 100
    batch_size: int = 32
    warmup_epochs: int = 5
    decay_factor: float = 0.8
    decay_every: int = 5
    weight_decay: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    warmup_per_step: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_factor <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and decay_factor must be positive, weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs, batch_size, decay_every and eval_batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")


def lr_at(epoch: int, config: TrainConfig, step: int = 0, steps_per_epoch: int = 1) -> float:
    """Learning rate for ``epoch`` (0-based).

    Warmup rises linearly from zero so that epoch ``warmup_epochs - 1`` reaches
    ``base_lr``; afterwards the rate is multiplied by ``decay_factor`` at
    epochs warmup, warmup + decay_every, ...
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    w = config.warmup_epochs
    if epoch < w:
        if config.warmup_per_step:
            return config.base_lr * (epoch * steps_per_epoch + step + 1) / (w * steps_per_epoch)
        return config.base_lr * (epoch + 1) / w
    return config.base_lr * config.decay_factor ** (1 + (epoch - w) // config.decay_every)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict[str, Matrix]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Matrix], state: AdamState, lr: float, weight_decay: float) -> None:
    """One Adam update with the L2 term added to the gradient first."""
    for k, p in params.items():
        if p.grad is None:
            raise gc.GradError(f"missing gradient for parameter {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- checkpoints ----------------------------------------------------------


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    blob = json.dumps({"model": model_config.to_dict(), "train": asdict(train_config)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState | None
    epoch: int  # completed epochs
    rng_state: dict | None
    config_hash: str
    model_config: dict
    train_config: dict
    meta: dict = field(default_factory=dict)
    extra_arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in self.params.items()]
        if self.adam is not None:
            arrays += [(f"adam.m/{k}", v) for k, v in self.adam.m.items()]
            arrays += [(f"adam.v/{k}", v) for k, v in self.adam.v.items()]
        arrays += [(f"extra/{k}", v) for k, v in self.extra_arrays.items()]
        header = {
            "version": CKPT_VERSION,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "adam": None if self.adam is None else {
                "step": self.adam.step, "beta1": self.adam.beta1,
                "beta2": self.adam.beta2, "eps": self.adam.eps},
            "model_config": self.model_config,
            "train_config": self.train_config,
            "meta": self.meta,
            "arrays": [[name, list(a.shape)] for name, a in arrays],
        }
        hbytes = json.dumps(header, sort_keys=True).encode()
        body = b"".join([CKPT_MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
                        + [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays])
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:5] != CKPT_MAGIC:
            raise CheckpointError("not a CFDC1 checkpoint (bad magic)")
        if len(buf) < 5 + 8 + 32:
            raise CheckpointError("checkpoint truncated")
        body, digest = buf[:-32], buf[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch (file corrupted or tampered)")
        (hlen,) = struct.unpack("<Q", body[5:13])
        header = json.loads(body[13:13 + hlen])
        if header.get("version") != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        pos = 13 + hlen
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam.m": {}, "adam.v": {}, "extra": {}}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            group, key = name.split("/", 1)
            groups[group][key] = a
        if pos != len(body):
            raise CheckpointError("checkpoint length does not match its manifest")
        adam = None
        if header["adam"] is not None:
            adam = AdamState(m=groups["adam.m"], v=groups["adam.v"], **header["adam"])
        return cls(params=groups["param"], adam=adam, epoch=header["epoch"],
                   rng_state=header["rng_state"], config_hash=header["config_hash"],
                   model_config=header["model_config"], train_config=header["train_config"],
                   meta=header["meta"], extra_arrays=groups["extra"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint) -> CfdlModel:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = CfdlModel(cfg, np.random.default_rng(0))
    model.load_arrays(ckpt.params)
    return model


# --- evaluation -----------------------------------------------------------


@dataclass
class EvalResult:
    report: MetricsReport | None
    probs: np.ndarray
    gates: np.ndarray | None  # n x K, or None without experts
    simplex_violations: int
    error: str | None = None


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def count_simplex_violations(weights: np.ndarray, tol: float = 1e-8) -> int:
    bad = (np.any(weights < 0, axis=1)) | (np.abs(weights.sum(axis=1) - 1.0) > tol)
    return int(bad.sum())


def batches(x: Sequence[np.ndarray], idx: np.ndarray, size: int):
    for lo in range(0, idx.size, size):
        sel = idx[lo:lo + size]
        yield sel, [Matrix(xj[sel]) for xj in x]


def evaluate(model: CfdlModel, x: Sequence[np.ndarray], y: np.ndarray,
             batch_size: int = 256) -> EvalResult:
    """Eval-mode forward over all samples; metrics, probabilities and gate weights."""
    idx = np.arange(y.shape[0])
    probs, gates = [], []
    violations = 0
    for _, xb in batches(x, idx, batch_size):
        logits, trace, _ = forward_variant(xb, model, train=False)
        probs.append(_softmax_np(logits.data))
        if trace.weights is not None:
            violations += count_simplex_violations(trace.weights.data)
            gates.append(trace.weights.data)
    probs_all = np.vstack(probs)
    report, err = None, None
    try:
        report = evaluate_probs(probs_all, y)
    except MetricError as exc:
        err = str(exc)
    return EvalResult(report, probs_all, np.vstack(gates) if gates else None, violations, err)


# --- fitting --------------------------------------------------------------

HISTORY_FIELDS = ["epoch", "lr", "train_loss", "cls_loss", "sh_loss", "ps_loss", "diff_loss",
                  "simplex_violations"]


@dataclass
class FitResult:
    model: CfdlModel
    history: list[dict]
    final: Checkpoint
    best: Checkpoint
    best_epoch: int
    best_auc: float
    simplex_violations: int


def _selection_score(ev: EvalResult) -> float:
    if ev.report is None or ev.report.AUC is None or not np.isfinite(ev.report.AUC):
        return -np.inf
    return float(ev.report.AUC)


def fit(data: SynthDataset, train_idx: np.ndarray, val_idx: np.ndarray,
        model_config: ModelConfig, train_config: TrainConfig,
        resume: Checkpoint | None = None, stop_after: int | None = None) -> FitResult:
    """Train on ``train_idx`` and validate on ``val_idx`` after every epoch.

    ``stop_after`` ends the run early after that many completed epochs (used
    to produce resumable checkpoints); ``resume`` continues such a run.
    """
    if data.M != model_config.num_modalities or data.in_dim != model_config.in_dim:
        raise ConfigError(f"dataset has M={data.M}, in_dim={data.in_dim}; model expects "
                          f"M={model_config.num_modalities}, in_dim={model_config.in_dim}")
    if data.num_cls != model_config.num_cls:
        raise ConfigError(f"dataset has {data.num_cls} classes, model expects {model_config.num_cls}")
    tc = train_config
    chash = config_hash(model_config, tc)
    rng = np.random.default_rng(tc.seed)
    model = CfdlModel(model_config, rng)
    params = model.named_parameters()
    adam = AdamState.zeros(params)
    history: list[dict] = []
    best_arrays = model.state_arrays()
    best_epoch, best_auc = -1, -np.inf
    start = 0
    if resume is not None:
        if resume.config_hash != chash:
            raise CheckpointError("checkpoint config hash does not match this run's configuration")
        model.load_arrays(resume.params)
        params = model.named_parameters()
        adam = copy.deepcopy(resume.adam)
        rng.bit_generator.state = resume.rng_state
        history = copy.deepcopy(resume.meta["history"])
        best_epoch, best_auc = resume.meta["best_epoch"], _meta_best_auc(resume)
        best_arrays = {k[len("best/"):]: v for k, v in resume.extra_arrays.items() if k.startswith("best/")}
        start = resume.epoch

    x_tr = [xj[train_idx] for xj in data.x]
    y_tr = data.y[train_idx]
    x_val = [xj[val_idx] for xj in data.x]
    y_val = data.y[val_idx]
    n_tr = y_tr.shape[0]
    steps_per_epoch = -(-n_tr // tc.batch_size)
    total_violations = sum(int(h["simplex_violations"]) for h in history)
    end = tc.epochs if stop_after is None else min(tc.epochs, stop_after)

    for epoch in range(start, end):
        order = rng.permutation(n_tr)
        sums = dict.fromkeys(["train_loss", "cls_loss", "sh_loss", "ps_loss", "diff_loss"], 0.0)
        lr = lr_at(epoch, tc)
        for b, (sel, xb) in enumerate(batches(x_tr, order, tc.batch_size)):
            lr = lr_at(epoch, tc, b, steps_per_epoch)
            gc.zero_grads(params.values())
            try:
                loss, comp, *_ = objective(model, xb, y_tr[sel], tc.alpha, tc.beta, train=True, rng=rng)
                if not np.isfinite(loss.item()):
                    raise gc.NonFiniteError(f"loss={loss.item()}")
                gc.backward(loss)
                adam_step(params, adam, lr, tc.weight_decay)
            except gc.NonFiniteError as exc:
                raise DivergenceError(epoch, b, str(exc)) from exc
            w = sel.size / n_tr
            sums["train_loss"] += w * loss.item()
            for k in ("cls", "sh", "ps", "diff"):
                sums[f"{k}_loss"] += w * comp[k]
            for p in params.values():
                if not np.all(np.isfinite(p.data)):
                    raise DivergenceError(epoch, b, "non-finite parameter after update")

        ev = evaluate(model, x_val, y_val, tc.eval_batch_size)
        total_violations += ev.simplex_violations
        row = {"epoch": epoch, "lr": lr, **sums, "simplex_violations": ev.simplex_violations}
        if ev.report is not None:
            row.update({f"val_{k}": v for k, v in ev.report.scalar_metrics().items()})
        history.append(row)
        score = _selection_score(ev)
        if score > best_auc or best_epoch < 0:
            best_auc, best_epoch = score, epoch
            best_arrays = model.state_arrays()
        log.debug("epoch %d lr %.3g loss %.4f val %s", epoch, lr, sums["train_loss"],
                  None if ev.report is None else round(ev.report.ACC, 4))

    done = end
    meta = {"history": history, "best_epoch": best_epoch,
            "best_auc": float(best_auc) if np.isfinite(best_auc) else None}
    common = dict(config_hash=chash, model_config=model_config.to_dict(), train_config=asdict(tc))
    final = Checkpoint(params=model.state_arrays(), adam=copy.deepcopy(adam), epoch=done,
                       rng_state=rng.bit_generator.state, meta=meta,
                       extra_arrays={f"best/{k}": v for k, v in best_arrays.items()}, **common)
    best = Checkpoint(params=best_arrays, adam=None, epoch=best_epoch + 1, rng_state=None,
                      meta={"best_epoch": best_epoch, "best_auc": meta["best_auc"]}, **common)
    return FitResult(model=model, history=history, final=final, best=best, best_epoch=best_epoch,
                     best_auc=float(best_auc), simplex_violations=total_violations)


def _meta_best_auc(ckpt: Checkpoint) -> float:
    v = ckpt.meta.get("best_auc")
    return -np.inf if v is None else float(v)


__all__ = [
    "TrainConfig", "AdamState", "Checkpoint", "CheckpointError", "DivergenceError", "EvalResult",
    "FitResult", "HISTORY_FIELDS", "adam_step", "config_hash", "evaluate", "fit", "load_checkpoint",
    "lr_at", "model_from_checkpoint", "save_checkpoint",
]
