"""Peng-Robinson cubic equation of state baseline.

Provides the same residual-set + pressure interface as the Helmholtz engine
from (tc, pc, omega) alone.  Plain 1976 formulation: no volume translation,
no modern alpha-function variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import KPA_PER_MPA, R_GAS, CriticalParameters, ResidualSet

# Exact solutions of the critical triple-root conditions; the 1976 paper
# prints them rounded to 0.45724 and 0.07780.
OMEGA_A = 0.4572355289213822
OMEGA_B = 0.07779607390388846
PR_ZC = 0.3074013086987038

SQRT2 = float(np.sqrt(2.0))


class CovolumeExceeded(ValueError):
    """Density at or above the covolume packing limit 1/b."""


class MissingCriticalConstant(ValueError):
    """PR construction needs tc, pc, and omega."""


def _kappa(omega: float) -> float:
    # Original 1976 correlation, built to honor the acentric-factor definition.
    return 0.37464 + 1.54226 * omega - 0.26992 * omega * omega


@dataclass(frozen=True)
class PrModel:
    tc: float       # K
    pc: float       # MPa
    omega: float
    b: float = field(init=False)     # covolume, L/mol
    a_c: float = field(init=False)   # attraction at tc, MPa L^2 / mol^2
    kappa: float = field(init=False)

    def __post_init__(self):
        if self.tc <= 0.0 or self.pc <= 0.0:
            raise MissingCriticalConstant(f"tc and pc must be positive, got tc={self.tc}, pc={self.pc}")
        # R T / p with p in MPa and rho in mol/L carries a 1/KPA_PER_MPA.
        rt_over_p = R_GAS * self.tc / (self.pc * KPA_PER_MPA)
        object.__setattr__(self, "b", OMEGA_B * rt_over_p)
        object.__setattr__(self, "a_c", OMEGA_A * (R_GAS * self.tc / KPA_PER_MPA) ** 2 / self.pc)
        object.__setattr__(self, "kappa", _kappa(self.omega))

    @classmethod
    def from_crit(cls, crit: CriticalParameters, fluid_id: str = "?") -> "PrModel":
        if crit.pc is None or crit.omega is None:
            raise MissingCriticalConstant(
                f"{fluid_id}: PR baseline requires pc and omega; registry record lacks "
                f"{'pc' if crit.pc is None else 'omega'}"
            )
        return cls(tc=crit.tc, pc=crit.pc, omega=crit.omega)

    def alpha_t(self, t):
        root = 1.0 + self.kappa * (1.0 - np.sqrt(np.asarray(t, dtype=float) / self.tc))
        return root * root

    def a_of_t(self, t):
        return self.a_c * self.alpha_t(t)

    def da_dt(self, t):
        t = np.asarray(t, dtype=float)
        root = 1.0 + self.kappa * (1.0 - np.sqrt(t / self.tc))
        return -self.a_c * self.kappa * root / np.sqrt(t * self.tc)


def pr_residual_set(model: PrModel, t, rho) -> ResidualSet:
    """Residual set at (T in K, rho in mol/L), valid below covolume packing."""
    t = np.asarray(t, dtype=float)
    rho = np.asarray(rho, dtype=float)
    brho = model.b * rho
    if np.any(1.0 - brho <= 0.0):
        raise CovolumeExceeded(f"rho={rho} exceeds packing limit 1/b={1.0/model.b:.4f} mol/L")

    rt = R_GAS * t / KPA_PER_MPA   # MPa L / mol
    a = model.a_of_t(t)
    da = model.da_dt(t)
    # ln[(1+(1+sqrt2) b rho)/(1+(1-sqrt2) b rho)], the PR density integral
    span = np.log((1.0 + (1.0 + SQRT2) * brho) / (1.0 + (1.0 - SQRT2) * brho))

    alpha_r = -np.log(1.0 - brho) - a * span / (2.0 * SQRT2 * model.b * rt)
    z_r = brho / (1.0 - brho) - (a * rho / rt) / (1.0 + 2.0 * brho - brho * brho)
    u_r = (t * da - a) * span / (2.0 * SQRT2 * model.b * rt)
    if alpha_r.ndim == 0:
        alpha_r, z_r, u_r = float(alpha_r), float(z_r), float(u_r)
    return ResidualSet(alpha_r=alpha_r, z_r=z_r, u_r=u_r)


def pr_pressure(model: PrModel, t, rho):
    """Pressure in MPa."""
    rs = pr_residual_set(model, t, rho)
    return np.asarray(rho, dtype=float) * R_GAS * np.asarray(t, dtype=float) * (1.0 + rs.z_r) / KPA_PER_MPA


def pr_dp_drho(model: PrModel, t, rho):
    """(dp/drho)_T in MPa/(mol/L), analytic."""
    t = np.asarray(t, dtype=float)
    rho = np.asarray(rho, dtype=float)
    b = model.b
    brho = b * rho
    rt = R_GAS * t / KPA_PER_MPA
    a = model.a_of_t(t)
    denom = 1.0 + 2.0 * brho - brho * brho
    d_denom = 2.0 * b - 2.0 * b * b * rho
    return rt / (1.0 - brho) ** 2 - a * (2.0 * rho * denom - rho * rho * d_denom) / (denom * denom)


def pr_cubic_z_roots(model: PrModel, t: float, p: float) -> np.ndarray:
    """Real compressibility roots of the PR cubic at (T, P), ascending."""
    rt = R_GAS * t / KPA_PER_MPA
    big_a = model.a_of_t(t) * p / (rt * rt)
    big_b = model.b * p / rt
    coeffs = [1.0,
              -(1.0 - big_b),
              big_a - 3.0 * big_b * big_b - 2.0 * big_b,
              -(big_a * big_b - big_b * big_b - big_b ** 3)]
    roots = np.roots(coeffs)
    real = np.sort(roots[np.abs(roots.imag) < 1e-9].real)
    return real[real > big_b]  # physical roots only (v > b)


class PrPropertyModel:
    """Property-model adapter; bracket scaling uses the PR-consistent
    critical density pc/(Zc_PR R tc), where the cubic's own surface is flat."""

    def __init__(self, model: PrModel, fluid_id: str = "?"):
        self.model = model
        self.fluid_id = fluid_id
        self.tc = model.tc
        self.rhoc = model.pc * KPA_PER_MPA / (PR_ZC * R_GAS * model.tc)
        self.rho_max = (1.0 - 1e-9) / model.b  # covolume packing limit

    def pressure(self, t, rho):
        return pr_pressure(self.model, t, rho)

    def residual_set(self, t, rho) -> ResidualSet:
        return pr_residual_set(self.model, t, rho)

    def psat_guess(self, t: float) -> float:
        # acentric-anchor closed form: exact at tr = 0.7 by definition of omega
        m = self.model
        return m.pc * 10.0 ** (-(7.0 / 3.0) * (1.0 + m.omega) * (m.tc / t - 1.0))


def pr_critical_compressibility(model: Optional[PrModel] = None) -> float:
    """Compressibility at (tc, pc); the PR universal critical value."""
    model = model or PrModel(tc=300.0, pc=3.0, omega=0.2)
    roots = pr_cubic_z_roots(model, model.tc, model.pc)
    # near-triple root at the critical point; the mean of the cluster is the
    # best-conditioned estimate
    return float(np.mean(roots))
