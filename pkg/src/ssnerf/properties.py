"""Declarative descriptions of the renderable scene properties."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping

__all__ = ["Kind", "Branch", "LossKind", "PropertySpec", "DEFAULT_WEIGHTS", "make_specs", "ConfigError"]


class ConfigError(ValueError):
    """Inconsistent model or property configuration."""


class Kind(str, Enum):
    RGB = "rgb"
    SL = "sl"  # semantic labels
    SN = "sn"  # surface normal
    SH = "sh"  # shading
    KP = "kp"  # keypoints
    ED = "ed"  # edges


class Branch(str, Enum):
    VIEW = "view"
    NO_VIEW = "no_view"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"
    L1 = "l1"


# lambda weights of the weighted total; RGB is the unweighted photometric term
DEFAULT_WEIGHTS = {Kind.RGB: 1.0, Kind.SN: 1.0, Kind.SL: 0.04, Kind.SH: 0.1, Kind.KP: 2.0, Kind.ED: 0.4}

_DEFAULTS = {
    Kind.RGB: (3, Branch.VIEW, LossKind.MSE),
    Kind.SL: (None, Branch.NO_VIEW, LossKind.CROSS_ENTROPY),
    Kind.SN: (3, Branch.NO_VIEW, LossKind.MSE),
    Kind.SH: (1, Branch.VIEW, LossKind.L1),
    Kind.KP: (1, Branch.VIEW, LossKind.L1),
    Kind.ED: (1, Branch.VIEW, LossKind.L1),
}


@dataclass(frozen=True)
class PropertySpec:
    kind: Kind
    channels: int
    branch: Branch
    loss: LossKind
    weight: float

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"{self.kind.value}: channels must be positive")
        if self.weight < 0:
            raise ConfigError(f"{self.kind.value}: loss weight must be >= 0")

    @property
    def bounded(self) -> bool:
        """Head output squashed to [0, 1] by a sigmoid.

        Only colour is.  The L1-trained scalar maps (SH, KP, ED) emit raw
        values and are clamped at readout instead: their targets are zero on
        most rays, and early in training L1 drives a sigmoid into saturation,
        after which the head stays at zero for good.
        """
        return self.kind is Kind.RGB

    @property
    def uses_pose(self) -> bool:
        return self.kind is Kind.SN


def make_specs(kinds: Iterable[str | Kind], n_classes: int = 3,
               branches: Mapping[str | Kind, str | Branch] | None = None,
               weights: Mapping[str | Kind, float] | None = None) -> list[PropertySpec]:
    """Build specs in canonical order; RGB is always included."""
    wanted = {Kind(k) for k in kinds} | {Kind.RGB}
    branches = {Kind(k): Branch(v) for k, v in (branches or {}).items()}
    weights = {Kind(k): float(v) for k, v in (weights or {}).items()}
    specs = []
    for kind in Kind:
        if kind not in wanted:
            continue
        channels, branch, loss = _DEFAULTS[kind]
        if kind is Kind.SL:
            if n_classes < 2:
                raise ConfigError("semantic labels need at least 2 classes")
            channels = n_classes
        specs.append(PropertySpec(kind, channels, branches.get(kind, branch), loss,
                                  weights.get(kind, DEFAULT_WEIGHTS[kind])))
    return specs


def with_weight(specs: list[PropertySpec], kind: Kind, weight: float) -> list[PropertySpec]:
    return [replace(s, weight=weight) if s.kind is kind else s for s in specs]
