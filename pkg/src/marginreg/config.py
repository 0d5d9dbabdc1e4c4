from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

MODES = ("rigid", "similarity", "deform-cavity", "deform-combined")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Registration settings. Elastic defaults are the published cadaver-study values."""

    k_control_points: int = 45
    radial_scale_m: float = 0.01
    strain_reg_weight_per_Pa2: float = 1e-11
    poisson_ratio: float = 0.45
    young_modulus_Pa: float = 2100.0
    mode: str = "deform-combined"
    max_outer_iterations: int = 20
    max_inner_iterations: int = 10
    tolerance_m2: float = 1e-6
    gate_distance_m: float = 0.010
    max_surface_samples: int = 2000
    fiducial_weight: float = 1.0
    surface_weight: float = 1.0
    scale_init: str = "similarity"
    rng_seed: int = 0

    def __post_init__(self):
        if self.k_control_points < 1:
            raise ConfigError("k_control_points must be >= 1")
        if not self.radial_scale_m > 0:
            raise ConfigError("radial_scale_m must be > 0")
        if not 0 < self.poisson_ratio < 0.5:
            raise ConfigError("poisson_ratio must lie in (0, 0.5)")
        if not self.young_modulus_Pa > 0:
            raise ConfigError("young_modulus_Pa must be > 0")
        if self.strain_reg_weight_per_Pa2 < 0:
            raise ConfigError("strain_reg_weight_per_Pa2 must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise ConfigError("iteration limits must be >= 1")
        if self.tolerance_m2 < 0 or not self.gate_distance_m > 0:
            raise ConfigError("tolerance must be >= 0 and gate distance > 0")
        if self.scale_init not in ("unit", "similarity"):
            raise ConfigError("scale_init must be 'unit' or 'similarity'")
        if self.max_surface_samples < 1:
            raise ConfigError("max_surface_samples must be >= 1")

    def with_mode(self, mode: str) -> "PipelineConfig":
        return replace(self, mode=mode)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
