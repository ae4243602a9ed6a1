"""Post-training analysis exports: gate weights, feature similarity, feature dumps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .cfd import pairwise_cosine_matrix, subset_tag
from .dmf import CfdlModel, forward_variant
from .train import batches


@dataclass
class FeatureDump:
    names: list[str]  # raw names followed by aggregate names (F, G_S)
    features: list[np.ndarray]  # each n x dim, same order as names
    final_names: list[str]
    gates: np.ndarray | None


def collect_features(model: CfdlModel, x: Sequence[np.ndarray], batch_size: int = 256) -> FeatureDump:
    """Eval-mode features for every sample: raw, then aggregated final features."""
    lat = model.lattice
    n = x[0].shape[0]
    raw_names = lat.raw_names()
    agg_names = ["F"] + [name for name in lat.final_names() if name.startswith("G_")]
    chunks: dict[str, list[np.ndarray]] = {k: [] for k in raw_names + agg_names}
    gates = []
    for _, xb in batches(x, np.arange(n), batch_size):
        _, trace, feats = forward_variant(xb, model, train=False)
        for name, f in zip(raw_names, feats.raw_flat()):
            chunks[name].append(f.data)
        chunks["F"].append(feats.F.data)
        for s in lat.partials:
            chunks[f"G_{subset_tag(s)}"].append(feats.G[s].data)
        if trace.weights is not None:
            gates.append(trace.weights.data)
    names = raw_names + agg_names
    return FeatureDump(
        names=names,
        features=[np.vstack(chunks[k]) for k in names],
        final_names=lat.final_names(),
        gates=np.vstack(gates) if gates else None,
    )


def similarity_matrix(dump: FeatureDump) -> np.ndarray:
    return pairwise_cosine_matrix(dump.features)


def final_feature_arrays(dump: FeatureDump) -> list[np.ndarray]:
    lookup = dict(zip(dump.names, dump.features))
    return [lookup[name] for name in dump.final_names]


@dataclass
class StructureSummary:
    shared_cs: float  # mean CS over pairs of per-modality shared features
    partial_cs: float  # mean CS within partial-shared groups (nan if none)
    final_abs_cs: float  # mean |CS| over pairs of distinct final features


def structure_summary(dump: FeatureDump, model: CfdlModel) -> StructureSummary:
    lookup = dict(zip(dump.names, dump.features))
    lat = model.lattice
    shared = [lookup[f"F_{j}"] for j in range(1, lat.M + 1)]
    cs = pairwise_cosine_matrix(shared)
    shared_cs = float(np.mean([cs[i, j] for i, j in combinations(range(lat.M), 2)]))
    within = []
    for s in lat.partials:
        group = [lookup[f"G_{subset_tag(s)}^{j}"] for j in s]
        g = pairwise_cosine_matrix(group)
        within += [g[i, j] for i, j in combinations(range(len(group)), 2)]
    fin = pairwise_cosine_matrix(final_feature_arrays(dump))
    K = fin.shape[0]
    iu = np.triu_indices(K, 1)
    return StructureSummary(
        shared_cs=shared_cs,
        partial_cs=float(np.mean(within)) if within else float("nan"),
        final_abs_cs=float(np.mean(np.abs(fin[iu]))),
    )


# --- writers --------------------------------------------------------------


def write_matrix_csv(path, names: list[str], mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", *names])
        for name, row in zip(names, mat):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return names, mat


def write_gates_csv(path, names: list[str], gates: np.ndarray, sample_ids: np.ndarray | None = None) -> None:
    """One row per sample plus a final ``mean`` row."""
    if sample_ids is None:
        sample_ids = np.arange(gates.shape[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", *names])
        for sid, row in zip(sample_ids, gates):
            w.writerow([int(sid), *(repr(float(v)) for v in row)])
        w.writerow(["mean", *(repr(float(v)) for v in gates.mean(axis=0))])


def read_gates_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Returns (names, per-sample rows, mean row)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    body = [r for r in rows[1:] if r[0] != "mean"]
    mean = [r for r in rows[1:] if r[0] == "mean"][0]
    return names, np.array([[float(v) for v in r[1:]] for r in body]), np.array([float(v) for v in mean[1:]])


def write_features_csv(path, dump: FeatureDump, labels: np.ndarray | None = None) -> None:
    """Long format for external embedding: feature name, sample, label, values."""
    dim = dump.features[0].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "sample", "label", *(f"d{k}" for k in range(dim))])
        for name, arr in zip(dump.names, dump.features):
            for i, row in enumerate(arr):
                lab = "" if labels is None else int(labels[i])
                w.writerow([name, i, lab, *(repr(float(v)) for v in row)])
