"""Dynamic mixture-of-experts fusion, the classifier head and the full model.

One expert (a single linear layer) per final decoupled feature. The gate
combines a global view (a linear map of the ReLU'd concatenation of all
features) with the local features themselves: per sample the logit of expert
``k`` is the inner product of feature ``k`` with the global feature. The
weighted expert outputs are concatenated and classified by a small MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .cfd import (
    CfdEncoders,
    DecoupledFeatureSet,
    Linear,
    decouple,
    enumerate_subsets,
    loss_diff,
    loss_ps,
    loss_sh,
)
from .config import AblationFlags, ConfigError, ModelConfig
from .gradcore import Matrix


@dataclass
class DmfParams:
    experts: list[Linear] | None
    gate_fc: Linear | None  # local-global gate: (K*dim) -> dim
    gate_lin: Linear | None  # plain gate: (K*dim) -> K
    hidden: list[Linear]
    out: Linear

    @classmethod
    def init(cls, K: int, cfg: ModelConfig, rng: np.random.Generator) -> "DmfParams":
        dim, flags = cfg.dim, cfg.flags
        experts = gate_fc = gate_lin = None
        if flags.moe:
            experts = [Linear.glorot(dim, dim, rng) for _ in range(K)]
            if flags.ling:
                gate_fc = Linear.glorot(K * dim, dim, rng)
            else:
                gate_lin = Linear.glorot(K * dim, K, rng)
        hidden = [Linear.glorot(K * dim, dim, rng), Linear.glorot(dim, dim, rng)]
        out = Linear.glorot(dim, cfg.num_cls, rng)
        return cls(experts, gate_fc, gate_lin, hidden, out)

    def named_layers(self) -> list[tuple[str, Linear]]:
        out: list[tuple[str, Linear]] = []
        if self.experts is not None:
            out += [(f"expert.{k}", e) for k, e in enumerate(self.experts)]
        if self.gate_fc is not None:
            out.append(("gate.fc", self.gate_fc))
        if self.gate_lin is not None:
            out.append(("gate.lin", self.gate_lin))
        out += [(f"cls.{i}", lin) for i, lin in enumerate(self.hidden)]
        out.append(("cls.out", self.out))
        return out


@dataclass
class FusionTrace:
    g: Matrix | None
    weights: Matrix | None  # batch x K gate weights
    fused: Matrix


class CfdlModel:
    """Encoders plus fusion head for a given configuration."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.lattice = enumerate_subsets(config.num_modalities, with_partials=config.flags.dis_ps)
        self.encoders = CfdEncoders.init(self.lattice, config.in_dim, config.dim, rng)
        self.head = DmfParams.init(self.lattice.final_count, config, rng)

    @property
    def K(self) -> int:
        return self.lattice.final_count

    def named_layers(self) -> list[tuple[str, Linear]]:
        return self.encoders.named_layers() + self.head.named_layers()

    def named_parameters(self) -> dict[str, Matrix]:
        params: dict[str, Matrix] = {}
        for name, lin in self.named_layers():
            params[f"{name}.W"] = lin.W
            params[f"{name}.b"] = lin.b
        return params

    def parameters(self) -> list[Matrix]:
        return list(self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ConfigError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ConfigError(f"{k}: shape {a.shape} != {p.data.shape}")
            p.data = a.copy()
            p.grad = None

    def num_parameters(self) -> int:
        return sum(lin.num_parameters() for _, lin in self.named_layers())


# --- fusion pieces ------------------------------------------------------


def _flat(final: DecoupledFeatureSet | Sequence[Matrix]) -> list[Matrix]:
    return final.flat() if isinstance(final, DecoupledFeatureSet) else list(final)


def global_feature(final, gate_fc: Linear) -> Matrix:
    feats = _flat(final)
    cat = gc.concat_cols(feats)
    if cat.cols != gate_fc.in_dim:
        raise gc.ShapeError(f"gate_fc expects width {gate_fc.in_dim}, got {cat.cols}")
    return gate_fc(gc.relu(cat))


def gate_weights(final, g: Matrix) -> Matrix:
    """batch x K softmax weights; logit k is <S_k, g> row by row."""
    feats = _flat(final)
    for f in feats:
        if f.shape != g.shape:
            raise gc.ShapeError(f"feature {f.shape} vs global feature {g.shape}")
    logits = gc.concat_cols([gc.row_dot(f, g) for f in feats])
    return gc.softmax_rows(logits)


def gate_weights_single(final, g: Matrix, row: int) -> Matrix:
    """Single-sample gate: softmax(O x g) with O the K x dim stack. Returns K x 1."""
    feats = _flat(final)
    O = gc.stack_rows([Matrix(f.data[row:row + 1]) for f in feats])
    return gc.softmax(gc.matmul(O, Matrix(g.data[row:row + 1].T)))


def linear_gate_weights(final, gate_lin: Linear) -> Matrix:
    return gc.softmax_rows(gate_lin(gc.concat_cols(_flat(final))))


def fuse(final, weights: Matrix, experts: Sequence[Linear]) -> Matrix:
    feats = _flat(final)
    if weights.cols != len(feats) or len(experts) != len(feats):
        raise gc.ShapeError(
            f"{len(feats)} features, {len(experts)} experts, {weights.cols} weight columns")
    blocks = [gc.scale_rows(ex(f), gc.column(weights, k)) for k, (f, ex) in enumerate(zip(feats, experts))]
    return gc.concat_cols(blocks)


def classify(fused: Matrix, head: DmfParams, train: bool = False,
             rng: np.random.Generator | None = None, p: float = 0.5) -> Matrix:
    h = fused
    if h.cols != head.hidden[0].in_dim:
        raise gc.ShapeError(f"classifier expects width {head.hidden[0].in_dim}, got {h.cols}")
    for layer in head.hidden:
        h = gc.dropout(gc.relu(layer(h)), p, train, rng)
    return head.out(h)


def total_loss(logits: Matrix, labels, losses: dict[str, Matrix | None],
               alpha: float, beta: float) -> Matrix:
    """Cross-entropy plus alpha*(shared + partial) plus beta*diff."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    terms = [gc.cross_entropy(logits, labels)]
    if alpha > 0:
        terms.append(gc.scale(gc.add(losses["sh"], losses["ps"]), alpha))
    if beta > 0:
        terms.append(gc.scale(losses["diff"], beta))
    return terms[0] if len(terms) == 1 else gc.add_n(terms)


# --- whole model --------------------------------------------------------


def forward_variant(x: Sequence[Matrix], model: CfdlModel, flags: AblationFlags | None = None,
                    train: bool = False, rng: np.random.Generator | None = None
                    ) -> tuple[Matrix, FusionTrace, DecoupledFeatureSet]:
    """Run encoders, fusion and classifier according to the model's flags."""
    if flags is not None and flags != model.config.flags:
        K = enumerate_subsets(model.config.num_modalities, with_partials=flags.dis_ps).final_count
        raise ConfigError(
            f"model built for {model.config.flags.label()} (classifier width "
            f"{model.head.hidden[0].in_dim}) cannot run {flags.label()} (width {K * model.config.dim})")
    flags = model.config.flags
    feats = decouple(x, model.encoders)
    head = model.head
    g = weights = None
    if flags.moe:
        if flags.ling:
            g = global_feature(feats, head.gate_fc)
            weights = gate_weights(feats, g)
        else:
            weights = linear_gate_weights(feats, head.gate_lin)
        fused = fuse(feats, weights, head.experts)
    else:
        fused = gc.concat_cols(feats.flat())
    logits = classify(fused, head, train=train, rng=rng, p=model.config.dropout)
    return logits, FusionTrace(g=g, weights=weights, fused=fused), feats


def objective(model: CfdlModel, x: Sequence[Matrix], labels, alpha: float, beta: float,
              train: bool = False, rng: np.random.Generator | None = None):
    """Forward pass plus the weighted training loss.

    Disentanglement terms whose weight is zero are not computed and are
    reported as 0.0. Returns ``(loss, components, logits, trace, feats)``.
    """
    logits, trace, feats = forward_variant(x, model, train=train, rng=rng)
    losses: dict[str, Matrix | None] = {"sh": None, "ps": None, "diff": None}
    if alpha > 0:
        losses["sh"] = loss_sh(feats.raw_shared)
        losses["ps"] = loss_ps(feats.raw_partial)
    if beta > 0:
        losses["diff"] = loss_diff(feats)
    loss = total_loss(logits, labels, losses, alpha, beta)
    components = {"cls": gc.cross_entropy(logits.detach(), labels).item()}
    components.update({k: (v.item() if v is not None else 0.0) for k, v in losses.items()})
    return loss, components, logits, trace, feats


def count_parameters(config: ModelConfig, flags: AblationFlags | None = None) -> int:
    """Trainable parameters of encoders, fusion and classifier (no backbone)."""
    if flags is not None:
        config = ModelConfig.from_dict({**config.to_dict(), "flags": flags})
    return CfdlModel(config, np.random.default_rng(0)).num_parameters()
