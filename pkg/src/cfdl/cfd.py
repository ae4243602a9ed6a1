"""Completed feature disentanglement.

Each modality's input vector is split into a shared part (one encoder reused
across all modalities), a specific part (one encoder per modality) and one
partial-shared part per proper subset of two or more modalities (one encoder
per subset, reused by its members). Aggregation averages the shared parts over
all modalities and each partial-shared group over its members.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Matrix

Subset = tuple[int, ...]  # 1-based member indices, ascending


@dataclass(frozen=True)
class SubsetLattice:
    M: int
    specifics: tuple[Subset, ...]
    partials: tuple[Subset, ...]
    full: Subset

    @property
    def final_count(self) -> int:
        return 1 + len(self.specifics) + len(self.partials)

    @property
    def raw_count(self) -> int:
        # F_j for every modality, P_j for every modality, G_S^j for j in S
        return 2 * self.M + sum(len(s) for s in self.partials)

    def all_subsets(self) -> tuple[Subset, ...]:
        """Every nonempty subset: singletons, partials, then the full set."""
        return self.specifics + self.partials + (self.full,)

    def final_names(self) -> list[str]:
        return ["F"] + [f"P_{j}" for (j,) in self.specifics] + [f"G_{subset_tag(s)}" for s in self.partials]

    def raw_names(self) -> list[str]:
        names = [f"F_{j}" for j in range(1, self.M + 1)]
        names += [f"P_{j}" for j in range(1, self.M + 1)]
        for s in self.partials:
            names += [f"G_{subset_tag(s)}^{j}" for j in s]
        return names


def subset_tag(s: Subset) -> str:
    if max(s) < 10:
        return "".join(str(j) for j in s)
    return "-".join(str(j) for j in s)


def enumerate_subsets(M: int, with_partials: bool = True) -> SubsetLattice:
    """Canonical lattice: partials by ascending size, then lexicographically.

    ``with_partials=False`` gives the lattice used when partial-shared
    decoupling is ablated away.
    """
    if M < 2:
        raise ValueError(f"need at least 2 modalities, got M={M}")
    members = range(1, M + 1)
    partials: list[Subset] = []
    if with_partials:
        for size in range(2, M):
            partials.extend(combinations(members, size))
    return SubsetLattice(
        M=M,
        specifics=tuple((j,) for j in members),
        partials=tuple(partials),
        full=tuple(members),
    )


@dataclass
class Linear:
    W: Matrix
    b: Matrix

    @classmethod
    def glorot(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "Linear":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        return cls(Matrix(W, requires_grad=True), Matrix(np.zeros((1, fan_out)), requires_grad=True))

    def __call__(self, x: Matrix) -> Matrix:
        return gc.linear(x, self.W, self.b)

    @property
    def in_dim(self) -> int:
        return self.W.rows

    @property
    def out_dim(self) -> int:
        return self.W.cols

    def num_parameters(self) -> int:
        return self.W.data.size + self.b.data.size


@dataclass
class CfdEncoders:
    lattice: SubsetLattice
    shared: Linear
    specific: list[Linear]
    partial: dict[Subset, Linear]

    @classmethod
    def init(cls, lattice: SubsetLattice, in_dim: int, dim: int, rng: np.random.Generator) -> "CfdEncoders":
        shared = Linear.glorot(in_dim, dim, rng)
        specific = [Linear.glorot(in_dim, dim, rng) for _ in lattice.specifics]
        partial = {s: Linear.glorot(in_dim, dim, rng) for s in lattice.partials}
        return cls(lattice, shared, specific, partial)

    def named_layers(self) -> list[tuple[str, Linear]]:
        out = [("enc.sh", self.shared)]
        out += [(f"enc.sp.{j + 1}", lin) for j, lin in enumerate(self.specific)]
        out += [(f"enc.ps.{subset_tag(s)}", self.partial[s]) for s in self.lattice.partials]
        return out

    def count(self) -> int:
        return 1 + len(self.specific) + len(self.partial)


@dataclass
class DecoupledFeatureSet:
    lattice: SubsetLattice
    F: Matrix
    P: list[Matrix]
    G: dict[Subset, Matrix]
    raw_shared: list[Matrix]
    raw_partial: dict[Subset, list[Matrix]] = field(default_factory=dict)

    def flat(self) -> list[Matrix]:
        """Final features in canonical order: F, P_1..P_M, G_S for each partial S."""
        return [self.F, *self.P, *(self.G[s] for s in self.lattice.partials)]

    def names(self) -> list[str]:
        return self.lattice.final_names()

    def raw_flat(self) -> list[Matrix]:
        out = list(self.raw_shared) + list(self.P)
        for s in self.lattice.partials:
            out.extend(self.raw_partial[s])
        return out


def decouple(x: Sequence[Matrix], enc: CfdEncoders) -> DecoupledFeatureSet:
    lat = enc.lattice
    if len(x) != lat.M:
        raise ValueError(f"expected {lat.M} modality matrices, got {len(x)}")
    shape = x[0].shape
    for j, xj in enumerate(x):
        if xj.shape != shape:
            raise gc.ShapeError(f"modality {j + 1} has shape {xj.shape}, modality 1 has {shape}")
    if shape[1] != enc.shared.in_dim:
        raise gc.ShapeError(f"inputs have width {shape[1]}, encoders expect {enc.shared.in_dim}")

    raw_shared = [enc.shared(xj) for xj in x]
    P = [enc.specific[j](x[j]) for j in range(lat.M)]
    raw_partial = {s: [enc.partial[s](x[j - 1]) for j in s] for s in lat.partials}
    return DecoupledFeatureSet(
        lattice=lat,
        F=gc.mean_rows(raw_shared),
        P=P,
        G={s: gc.mean_rows(raw_partial[s]) for s in lat.partials},
        raw_shared=raw_shared,
        raw_partial=raw_partial,
    )


def _pairwise_mse(feats: Sequence[Matrix]) -> list[Matrix]:
    return [gc.mse(a, b) for a, b in combinations(feats, 2)]


def loss_sh(raw_shared: Sequence[Matrix]) -> Matrix:
    """Sum of MSE over all unordered pairs of per-modality shared features."""
    if len(raw_shared) < 2:
        raise ValueError("loss_sh needs at least two shared features")
    return gc.add_n(_pairwise_mse(raw_shared))


def loss_ps(raw_partial: dict[Subset, list[Matrix]]) -> Matrix:
    """Sum over partial groups of the pairwise MSE between the group's members."""
    terms: list[Matrix] = []
    for s, feats in raw_partial.items():
        if len(feats) != len(s):
            raise ValueError(f"group {subset_tag(s)} has {len(feats)} features, expected {len(s)}")
        terms.extend(_pairwise_mse(feats))
    if not terms:
        return Matrix(np.zeros((1, 1)))
    return gc.add_n(terms)


def loss_diff(final: DecoupledFeatureSet | Sequence[Matrix]) -> Matrix:
    """Sum of raw (signed) cosine similarity over all pairs of final features."""
    feats = final.flat() if isinstance(final, DecoupledFeatureSet) else list(final)
    if len(feats) < 2:
        raise ValueError("loss_diff needs at least two features")
    return gc.add_n([gc.cosine_similarity(a, b) for a, b in combinations(feats, 2)])


def pairwise_cosine_matrix(feats: Sequence[Matrix | np.ndarray]) -> np.ndarray:
    """K x K matrix of batch-averaged row-wise cosine similarities (no graph)."""
    arrs = [f.data if isinstance(f, Matrix) else np.asarray(f, dtype=np.float64) for f in feats]
    stacked = np.stack(arrs, axis=0)  # K x batch x dim
    norms = np.linalg.norm(stacked, axis=2) + gc.COSINE_EPS
    unit = stacked / norms[:, :, None]
    return np.einsum("ibd,jbd->ijb", unit, unit).mean(axis=2)
