"""Two-phase fluid description and Corey relative permeability."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class FluidProperties:
    viscosity_water: float = 0.5e-3  # Pa*s
    viscosity_oil: float = 2.0e-3  # Pa*s
    compressibility: float = 2.0e-9  # total, 1/Pa
    n_w: float = 2.0
    n_o: float = 2.0
    s_wr: float = 0.1
    s_or: float = 0.1
    k0_w: float = 0.6
    k0_o: float = 0.9
    ref_pressure: float = 2.0e7  # Pa, pressure at which porosity is quoted

    def validate(self) -> None:
        if self.viscosity_water <= 0 or self.viscosity_oil <= 0:
            raise ValueError("viscosities must be positive")
        if self.compressibility <= 0:
            raise ValueError("total compressibility must be positive")
        if self.n_w < 1 or self.n_o < 1:
            raise ValueError("Corey exponents must be >= 1")
        if not (0 <= self.s_wr and 0 <= self.s_or and self.s_wr + self.s_or < 1):
            raise ValueError("residual saturations must satisfy 0 <= s_wr + s_or < 1")
        if not (0 < self.k0_w <= 1 and 0 < self.k0_o <= 1):
            raise ValueError("endpoint relative permeabilities must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FluidProperties":
        return cls(**d)


def effective_saturation(s_w, fluid: FluidProperties):
    return np.clip((s_w - fluid.s_wr) / (1.0 - fluid.s_wr - fluid.s_or), 0.0, 1.0)


def relative_permeability(s_w, fluid: FluidProperties):
    """Corey curves; returns ``(kr_w, kr_o)``."""
    se = effective_saturation(np.asarray(s_w, dtype=np.float64), fluid)
    return fluid.k0_w * se ** fluid.n_w, fluid.k0_o * (1.0 - se) ** fluid.n_o


def mobilities(s_w, fluid: FluidProperties):
    krw, kro = relative_permeability(s_w, fluid)
    return krw / fluid.viscosity_water, kro / fluid.viscosity_oil


def fractional_flow_slope_max(fluid: FluidProperties, n: int = 2001) -> float:
    """max |d f_w / d s_w| over [0, 1], sampled."""
    s = np.linspace(0.0, 1.0, n)
    lw, lo = mobilities(s, fluid)
    fw = lw / np.maximum(lw + lo, 1e-300)
    return float(np.max(np.abs(np.gradient(fw, s))))
