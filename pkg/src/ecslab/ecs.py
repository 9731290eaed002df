"""Extended-corresponding-states property mapping.

Composes a reference Helmholtz surface with a shape-factor model into a
property model for a target fluid: temperature/density scaling factors with
their logarithmic-derivative factors, the mapped reference state, and the
residual-property transformation.

Density maps as rho_o = rho_j * h with h = (rhoc_o/rhoc_j) * phi (the
classical volume convention); under it the transformation coefficients
(1 + H_rho) and -Z_o H_T are the exact chain-rule derivatives of the composed
Helmholtz surface, and theta = phi = 1 reduces to simple corresponding
states: equal reduced coordinates on both fluids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import KPA_PER_MPA, R_GAS, Fluid, ResidualSet
from .helmholtz import HelmholtzModel
from .shapefactor import ShapeFactorEval


@dataclass(frozen=True)
class Reference:
    """Reference fluid bundle: its truth surface plus registry identity."""

    model: HelmholtzModel
    fluid: Fluid

    def __post_init__(self):
        tc_off = abs(self.fluid.crit.tc - self.model.tc) / self.model.tc
        rhoc_off = abs(self.fluid.crit.rhoc - self.model.rhoc) / self.model.rhoc
        if tc_off > 1e-6 or rhoc_off > 1e-6:
            raise ValueError(
                f"{self.fluid.id}: registry critical point differs from the EOS "
                f"reducing parameters (dT={tc_off:.2e}, drho={rhoc_off:.2e})"
            )


@dataclass(frozen=True)
class ScalingFactors:
    f: object
    h: object
    f_t: object
    f_rho: object
    h_t: object
    h_rho: object
    big_f_t: object      # (T_j/f) df/dT_j
    big_f_rho: object    # (rho_j/f) df/drho_j
    big_h_t: object      # (T_j/h) dh/dT_j
    big_h_rho: object    # (rho_j/h) dh/drho_j

    def __post_init__(self):
        if not (np.all(np.asarray(self.f) > 0.0) and np.all(np.asarray(self.h) > 0.0)):
            raise ValueError(f"scaling factors must be positive: f={self.f}, h={self.h}")


class EcsModel:
    """Property model for `target` built on `reference` through `shape`."""

    def __init__(self, reference: Reference, target: Fluid, shape):
        self.reference = reference
        self.target = target
        self.shape = shape
        self.fluid_id = target.id
        self.tc = target.crit.tc
        self.rhoc = target.crit.rhoc

    # PropertyModel protocol
    def pressure(self, t, rho):
        return ecs_pressure(self, t, rho)

    def residual_set(self, t, rho) -> ResidualSet:
        return ecs_residual_set(self, t, rho)

    def psat_guess(self, t: float):
        sf = scaling_factors(self, t, self.rhoc)  # rhor = 1 anchor
        f = float(np.asarray(sf.f).reshape(-1)[0])
        h = float(np.asarray(sf.h).reshape(-1)[0])
        mapped_t = t / f
        if mapped_t >= self.reference.model.tc * 0.9995:
            mapped_t = self.reference.model.tc * 0.9995
        from .equilibrium import interp_psat
        psat_ref = interp_psat(self.reference.model.saturation_table(), mapped_t)
        return (f / h) * psat_ref


def scaling_factors(model: EcsModel, t_j, rho_j) -> ScalingFactors:
    """Temperature and density scaling factors with Eq.-style log-derivative
    coefficients, chained through the target's reduced coordinates."""
    crit_j = model.target.crit
    tc_o = model.reference.model.tc
    rhoc_o = model.reference.model.rhoc

    tr = np.asarray(t_j, dtype=float) / crit_j.tc
    rhor = np.asarray(rho_j, dtype=float) / crit_j.rhoc
    ev: ShapeFactorEval = model.shape.evaluate(model.target, tr, rhor)

    f = (crit_j.tc / tc_o) * np.asarray(ev.theta)
    h = (rhoc_o / crit_j.rhoc) * np.asarray(ev.phi)
    f_t = np.asarray(ev.d_theta_d_tr) / tc_o
    f_rho = (crit_j.tc / tc_o) * np.asarray(ev.d_theta_d_rhor) / crit_j.rhoc
    h_t = (rhoc_o / crit_j.rhoc) * np.asarray(ev.d_phi_d_tr) / crit_j.tc
    h_rho = (rhoc_o / crit_j.rhoc) * np.asarray(ev.d_phi_d_rhor) / crit_j.rhoc

    theta = np.asarray(ev.theta)
    phi = np.asarray(ev.phi)
    return ScalingFactors(
        f=f, h=h, f_t=f_t, f_rho=f_rho, h_t=h_t, h_rho=h_rho,
        big_f_t=tr * np.asarray(ev.d_theta_d_tr) / theta,
        big_f_rho=rhor * np.asarray(ev.d_theta_d_rhor) / theta,
        big_h_t=tr * np.asarray(ev.d_phi_d_tr) / phi,
        big_h_rho=rhor * np.asarray(ev.d_phi_d_rhor) / phi,
    )


def map_state(t_j, rho_j, sf: ScalingFactors):
    """Reference-state image of a target state: t_o = t_j/f, rho_o = rho_j*h."""
    return np.asarray(t_j, dtype=float) / np.asarray(sf.f), \
        np.asarray(rho_j, dtype=float) * np.asarray(sf.h)


def transform_residuals(ref: ResidualSet, sf: ScalingFactors) -> ResidualSet:
    """Target residual set from reference residuals and scaling factors."""
    z_j = ref.u_r * sf.big_f_rho + ref.z_r * (1.0 + sf.big_h_rho)
    u_j = ref.u_r * (1.0 - sf.big_f_t) - ref.z_r * sf.big_h_t
    return ResidualSet(alpha_r=ref.alpha_r, z_r=z_j, u_r=u_j)


def ecs_residual_set(model: EcsModel, t_j, rho_j) -> ResidualSet:
    sf = scaling_factors(model, t_j, rho_j)
    t_o, rho_o = map_state(t_j, rho_j, sf)
    ref = model.reference.model.residual_set(t_o, rho_o)
    return transform_residuals(ref, sf)


def ecs_pressure(model: EcsModel, t_j, rho_j):
    """Pressure in MPa from the transformed residual compressibility."""
    rs = ecs_residual_set(model, t_j, rho_j)
    return np.asarray(rho_j, dtype=float) * R_GAS * np.asarray(t_j, dtype=float) \
        * (1.0 + rs.z_r) / KPA_PER_MPA
