"""Model-level configuration shared by the cfd, dmf and train modules."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class AblationFlags:
    """Which parts of the method are active.

    ``dis_ps`` decouples partial-shared features, ``moe`` fuses through
    weighted experts instead of plain concatenation, and ``ling`` selects the
    local-global gate over a linear gate on the concatenated features.
    """

    dis_ps: bool = True
    moe: bool = True
    ling: bool = True

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        """Parse ``"on,on,off"`` / ``"1,1,0"`` style strings (dis_ps,moe,ling)."""
        parts = [p.strip().lower() for p in text.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"--flags needs three comma-separated values, got {text!r}")
        truthy = {"1", "on", "true", "yes", "y"}
        falsy = {"0", "off", "false", "no", "n", "-"}
        vals = []
        for p in parts:
            if p in truthy:
                vals.append(True)
            elif p in falsy:
                vals.append(False)
            else:
                raise ConfigError(f"unrecognised flag value {p!r}")
        return cls(*vals)

    def label(self) -> str:
        ling = ("on" if self.ling else "off") if self.moe else "-"
        return f"dis_ps={'on' if self.dis_ps else 'off'},moe={'on' if self.moe else 'off'},ling={ling}"


@dataclass(frozen=True)
class ModelConfig:
    num_modalities: int = 3
    in_dim: int = 512
    dim: int = 32
    num_cls: int = 2
    dropout: float = 0.5
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.num_modalities < 2:
            raise ConfigError("num_modalities must be >= 2")
        if self.in_dim < 1 or self.dim < 1:
            raise ConfigError("in_dim and dim must be positive")
        if self.num_cls < 2:
            raise ConfigError("num_cls must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        flags = d.pop("flags", None)
        if isinstance(flags, dict):
            flags = AblationFlags(**flags)
        elif flags is None:
            flags = AblationFlags()
        return cls(flags=flags, **d)
