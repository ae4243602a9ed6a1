"""Synthetic multimodal features with planted subset-shared latent factors.

For every nonempty subset ``S`` of the modalities a Gaussian factor ``z_S``
is drawn per sample. Modality ``j`` sees every factor whose subset contains
``j`` through a fixed random linear map ``A[j, S]``, plus isotropic noise.
Labels are the argmax of a random linear readout of the factors belonging to
``informative_subsets``, with per-class offsets calibrated so class
frequencies follow ``class_weights``. ``map_alignment`` in [0, 1] blends every member's map of
a subset toward a common per-subset map, so that shared content can appear in
the same coordinates across modalities (0 = independent maps).

Also holds the binary ``CFDL1`` dataset file format, a CSV import path for
externally extracted features, and stratified k-fold splitting.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cfd import Subset, enumerate_subsets
from .config import ConfigError

MAGIC = b"CFDL1"
_HEADER = struct.Struct("<5sQQQQB")  # magic, M, n, in_dim, num_cls, has_provenance
_PROV_HEADER = struct.Struct("<QQ")  # subset count, factor_dim


class DatasetFileError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFileError):
    pass


class TruncatedFileError(DatasetFileError):
    pass


class LabelRangeError(DatasetFileError):
    pass


@dataclass
class SynthConfig:
    num_modalities: int = 3
    n: int = 600
    in_dim: int = 512
    factor_dim: int = 8
    num_cls: int = 2
    noise_sigma: float = 0.1
    informative_subsets: list[list[int]] = field(default_factory=lambda: [[1, 2, 3]])
    class_weights: list[float] | None = None
    map_alignment: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.informative_subsets = [sorted(int(j) for j in s) for s in self.informative_subsets]
        self.validate()

    def validate(self) -> None:
        M = self.num_modalities
        if M < 2:
            raise ConfigError("num_modalities must be >= 2")
        if self.num_cls < 2 or self.n < self.num_cls:
            raise ConfigError("need num_cls >= 2 and n >= num_cls")
        if self.in_dim < 1 or self.factor_dim < 1:
            raise ConfigError("in_dim and factor_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.map_alignment <= 1.0:
            raise ConfigError("map_alignment must be in [0, 1]")
        if not self.informative_subsets:
            raise ConfigError("informative_subsets must name at least one subset")
        for s in self.informative_subsets:
            if not s or len(set(s)) != len(s) or min(s) < 1 or max(s) > M:
                raise ConfigError(f"informative subset {s} is not a subset of modalities 1..{M}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (self.num_cls,) or np.any(w <= 0):
                raise ConfigError("class_weights must have num_cls positive entries")

    def subsets(self) -> tuple[Subset, ...]:
        return enumerate_subsets(self.num_modalities).all_subsets()

    def informative(self) -> list[Subset]:
        return [tuple(s) for s in self.informative_subsets]


@dataclass
class SynthDataset:
    x: list[np.ndarray]  # M arrays, n x in_dim
    y: np.ndarray  # n int64 labels
    num_cls: int
    factors: dict[Subset, np.ndarray] = field(default_factory=dict)  # z_S, n x factor_dim
    maps: dict[tuple[int, Subset], np.ndarray] = field(default_factory=dict)  # A[j,S], factor_dim x in_dim

    @property
    def M(self) -> int:
        return len(self.x)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.x[0].shape[1])

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx)
        return SynthDataset(
            x=[xj[idx] for xj in self.x],
            y=self.y[idx],
            num_cls=self.num_cls,
            factors={s: z[idx] for s, z in self.factors.items()},
            maps=dict(self.maps),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_cls)


def _calibrate_offsets(logits: np.ndarray, target: np.ndarray, iters: int = 500) -> np.ndarray:
    """Per-class offsets so that argmax frequencies approach ``target``."""
    n, C = logits.shape
    b = np.zeros(C)
    for _ in range(iters):
        counts = np.bincount(np.argmax(logits + b, axis=1), minlength=C)
        freq = (counts + 0.5) / (n + 0.5 * C)
        if np.all(np.abs(counts - target * n) <= 1.0):
            break
        b += 0.5 * (np.log(target) - np.log(freq))
    return b


def labels_from_factors(factors: dict[Subset, np.ndarray], informative: Sequence[Subset],
                        readout: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = np.hstack([factors[s] for s in informative])
    logits = z @ readout
    return np.argmax(logits + _calibrate_offsets(logits, target), axis=1).astype(np.int64)


def mix(factors: dict[Subset, np.ndarray], maps: dict[tuple[int, Subset], np.ndarray], M: int,
        noise: np.ndarray | None = None, sigma: float = 0.0) -> list[np.ndarray]:
    """x_j = sum over subsets S containing j of z_S @ A[j,S], plus sigma * noise[j]."""
    xs = []
    for j in range(1, M + 1):
        xj = sum(factors[s] @ maps[(j, s)] for s in factors if j in s)
        if noise is not None and sigma > 0:
            xj = xj + sigma * noise[j - 1]
        xs.append(np.asarray(xj, dtype=np.float64))
    return xs


def generate(config: SynthConfig) -> SynthDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    M, n, d, fd = config.num_modalities, config.n, config.in_dim, config.factor_dim
    subsets = config.subsets()
    # draw order is fixed: maps, readout, factors, noise
    maps = {(j, s): rng.normal(0.0, 1.0 / np.sqrt(fd), size=(fd, d)) for s in subsets for j in s}
    if config.map_alignment > 0:
        # blend each member's map with a per-subset common map (variance preserved)
        rho = config.map_alignment
        common = {s: rng.normal(0.0, 1.0 / np.sqrt(fd), size=(fd, d)) for s in subsets}
        maps = {(j, s): np.sqrt(rho) * common[s] + np.sqrt(1.0 - rho) * a for (j, s), a in maps.items()}
    informative = config.informative()
    readout = rng.normal(size=(fd * len(informative), config.num_cls))
    factors = {s: rng.normal(size=(n, fd)) for s in subsets}
    noise = rng.normal(size=(M, n, d))
    if config.class_weights is None:
        target = np.full(config.num_cls, 1.0 / config.num_cls)
    else:
        w = np.asarray(config.class_weights, dtype=float)
        target = w / w.sum()
    y = labels_from_factors(factors, informative, readout, target)
    x = mix(factors, maps, M, noise, config.noise_sigma)
    return SynthDataset(x=x, y=y, num_cls=config.num_cls, factors=factors, maps=maps)


# --- CFDL1 binary format --------------------------------------------------


def _subset_mask(s: Subset) -> int:
    return sum(1 << (j - 1) for j in s)


def _mask_subset(mask: int) -> Subset:
    return tuple(j + 1 for j in range(64) if mask >> j & 1)


def to_bytes(d: SynthDataset, include_provenance: bool = True) -> bytes:
    has_prov = include_provenance and bool(d.factors)
    parts = [_HEADER.pack(MAGIC, d.M, d.n, d.in_dim, d.num_cls, int(has_prov))]
    parts += [np.ascontiguousarray(xj, dtype="<f8").tobytes() for xj in d.x]
    parts.append(np.ascontiguousarray(d.y, dtype="<i8").tobytes())
    if has_prov:
        subsets = sorted(d.factors, key=lambda s: (len(s), s))
        fd = d.factors[subsets[0]].shape[1]
        parts.append(_PROV_HEADER.pack(len(subsets), fd))
        for s in subsets:
            parts.append(struct.pack("<Q", _subset_mask(s)))
            parts.append(np.ascontiguousarray(d.factors[s], dtype="<f8").tobytes())
            for j in s:
                parts.append(np.ascontiguousarray(d.maps[(j, s)], dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes: int, what: str) -> bytes:
        if self.pos + nbytes > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what}")
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def array(self, shape: tuple[int, ...], dtype: str, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * 8, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype[1:], copy=True)


def from_bytes(buf: bytes) -> SynthDataset:
    if buf[:len(MAGIC)] != MAGIC[:len(buf)]:
        raise BadMagicError("not a CFDL1 dataset file (bad magic)")
    r = _Reader(buf)
    _, M, n, in_dim, num_cls, has_prov = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if M < 2 or num_cls < 2:
        raise DatasetFileError(f"invalid header: M={M}, num_cls={num_cls}")
    x = [r.array((n, in_dim), "<f8", f"modality {j + 1}") for j in range(M)]
    y = r.array((n,), "<i8", "labels")
    if y.size and (y.min() < 0 or y.max() >= num_cls):
        raise LabelRangeError(f"labels must lie in [0, {num_cls}), found [{y.min()}, {y.max()}]")
    factors: dict[Subset, np.ndarray] = {}
    maps: dict[tuple[int, Subset], np.ndarray] = {}
    if has_prov:
        count, fd = _PROV_HEADER.unpack(r.take(_PROV_HEADER.size, "provenance header"))
        for _ in range(count):
            (mask,) = struct.unpack("<Q", r.take(8, "subset mask"))
            s = _mask_subset(mask)
            factors[s] = r.array((n, fd), "<f8", f"factor {s}")
            for j in s:
                maps[(j, s)] = r.array((fd, in_dim), "<f8", f"map {j},{s}")
    if r.pos != len(buf):
        raise DatasetFileError(f"{len(buf) - r.pos} trailing bytes after dataset")
    return SynthDataset(x=x, y=y, num_cls=int(num_cls), factors=factors, maps=maps)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(d: SynthDataset, path, include_provenance: bool = True) -> None:
    atomic_write_bytes(path, to_bytes(d, include_provenance))


def load(path) -> SynthDataset:
    return from_bytes(Path(path).read_bytes())


def load_csv(modality_paths: Sequence[str | os.PathLike], labels_path: str | os.PathLike,
             num_cls: int | None = None) -> SynthDataset:
    """Read externally extracted features.

    One headerless CSV of numbers per modality (one row per sample), and a
    labels CSV whose last column is the integer class index. A non-numeric
    first row in any file is treated as a header and skipped.
    """
    def read(path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        try:
            [float(v) for v in rows[0]]
        except ValueError:
            rows = rows[1:]
        return rows

    x = [np.array(read(p), dtype=np.float64) for p in modality_paths]
    y = np.array([int(float(r[-1])) for r in read(labels_path)], dtype=np.int64)
    if len(x) < 2:
        raise DatasetFileError("need at least two modality files")
    for j, xj in enumerate(x):
        if xj.ndim != 2 or xj.shape != x[0].shape:
            raise DatasetFileError(f"modality {j + 1} has shape {xj.shape}, expected {x[0].shape}")
        if xj.shape[0] != y.shape[0]:
            raise DatasetFileError(f"modality {j + 1} has {xj.shape[0]} rows for {y.shape[0]} labels")
    num_cls = int(num_cls if num_cls is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= num_cls:
        raise LabelRangeError(f"labels must lie in [0, {num_cls})")
    return SynthDataset(x=x, y=y, num_cls=num_cls)


# --- splitting ------------------------------------------------------------


def kfold_split(y: np.ndarray | SynthDataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold: each class is shuffled then dealt round-robin to folds."""
    labels = y.y if isinstance(y, SynthDataset) else np.asarray(y)
    n = labels.shape[0]
    if k < 2 or n < k:
        raise ValueError(f"need k >= 2 and n >= k, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise ValueError(f"class {c} has {members.size} samples, fewer than k={k}")
        members = rng.permutation(members)
        # rotate start so fold sizes stay balanced across classes
        fold_of[members] = (np.arange(members.size) + offset) % k
        offset = (offset + members.size) % k
    folds = []
    for f in range(k):
        val = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, val))
    return folds


def holdout_split(y: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified single train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    val = []
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        take = max(1, int(round(val_fraction * members.size)))
        val.extend(members[:take].tolist())
    val = np.sort(np.asarray(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val
