"""Multiparameter Helmholtz-energy equation of state engine.

Evaluates the residual part of published term-bank formulations
(polynomial + exponential + Gaussian families) with analytically exact
derivatives.  These equations act as the truth property source for
reference and training fluids; the ideal-gas part is deliberately out of
scope, so only residual quantities are exposed.

Coefficient banks load from JSON data files; the repository ships the four
reference-fluid candidates.  The term evaluators are written with generic
arithmetic so they also run on dual numbers or recorded-graph nodes from
`diffengine`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import KPA_PER_MPA, R_GAS, ResidualSet
from .diffengine import exp

DATA_DIR = Path(__file__).parent / "data"


class ValidityWarning(UserWarning):
    """State outside the EOS validity range; extrapolated values returned."""


class CoefficientFileError(ValueError):
    """Malformed or unsupported coefficient file content."""


@dataclass(frozen=True)
class TermBank:
    """Residual Helmholtz term coefficients.

    poly entries are (n, t, d); exponential entries (n, t, d, l);
    Gaussian entries (n, t, d, eta, beta, gamma, epsilon).
    """

    poly: tuple
    exp: tuple
    gauss: tuple

    def __post_init__(self):
        if not (self.poly or self.exp or self.gauss):
            raise CoefficientFileError("term bank must contain at least one term")
        for n, t, d in self.poly:
            if d != int(d) or d < 1:
                raise CoefficientFileError(f"polynomial density exponent must be a positive integer, got {d}")
        for n, t, d, l in self.exp:
            if d != int(d) or d < 1:
                raise CoefficientFileError(f"exponential density exponent must be a positive integer, got {d}")
            if l != int(l) or l < 1:
                raise CoefficientFileError(f"exponential l must be a positive integer, got {l}")
        for n, t, d, eta, beta, gamma, epsilon in self.gauss:
            if d != int(d) or d < 1:
                raise CoefficientFileError(f"gaussian density exponent must be a positive integer, got {d}")


@dataclass(frozen=True)
class HelmholtzEos:
    fluid_id: str
    t_red: float      # reducing temperature, K
    rho_red: float    # reducing density, mol/L
    bank: TermBank
    tmin: float
    tmax: float
    pmax: float       # MPa
    r_gas: float = R_GAS

    def __post_init__(self):
        if self.t_red <= 0.0 or self.rho_red <= 0.0:
            raise CoefficientFileError("reducing parameters must be positive")
        if not (0.0 < self.tmin < self.tmax) or self.pmax <= 0.0:
            raise CoefficientFileError("validity range must be non-empty")


# ---------------------------------------------------------------------------
# Term evaluation
# ---------------------------------------------------------------------------

def alpha_r_parts(bank: TermBank, tau, delta):
    """(alpha_r, d alpha_r/d tau, d alpha_r/d delta) with generic arithmetic.

    Valid for tau > 0 and delta >= 0 (the safe derivative forms below keep
    the delta -> 0 limit finite).  Accepts floats, numpy arrays, DualScalar,
    or Var operands for the state variables.
    """
    val = 0.0
    d_tau = 0.0
    d_delta = 0.0

    for n, t, d in bank.poly:
        tt = n * tau ** t
        val = val + tt * delta ** d
        d_tau = d_tau + n * t * tau ** (t - 1.0) * delta ** d
        d_delta = d_delta + tt * d * delta ** (d - 1)

    for n, t, d, l in bank.exp:
        e = exp(-(delta ** l))
        tt = n * tau ** t
        val = val + tt * delta ** d * e
        d_tau = d_tau + n * t * tau ** (t - 1.0) * delta ** d * e
        d_delta = d_delta + tt * e * delta ** (d - 1) * (d - l * delta ** l)

    for n, t, d, eta, beta, gamma, epsilon in bank.gauss:
        g = exp(-eta * (delta - epsilon) ** 2 - beta * (tau - gamma) ** 2)
        radial = delta ** d * g
        val = val + n * tau ** t * radial
        d_tau = d_tau + n * (t * tau ** (t - 1.0) - 2.0 * beta * (tau - gamma) * tau ** t) * radial
        d_delta = d_delta + n * tau ** t * g * (d * delta ** (d - 1)
                                                - 2.0 * eta * (delta - epsilon) * delta ** d)

    return val, d_tau, d_delta


def alpha_r_derivs(eos: HelmholtzEos, tau, delta, order: int = 2) -> dict:
    """Residual Helmholtz energy and requested partials at (tau, delta).

    Returns {"value", "d_tau", "d_delta"} for order >= 1 plus
    {"d_delta2", "d_tau_delta"} for order == 2.  Second derivatives require
    delta > 0 (zero-density limits are only defined through first order).
    """
    tau = np.asarray(tau, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if np.any(tau <= 0.0) or np.any(delta < 0.0):
        raise ValueError("alpha_r_derivs requires tau > 0 and delta >= 0")
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1, or 2, got {order}")

    out: dict = {}
    value, d_tau, d_delta = alpha_r_parts(eos.bank, tau, delta)
    out["value"] = value
    if order >= 1:
        out["d_tau"] = d_tau
        out["d_delta"] = d_delta
    if order == 2:
        if np.any(delta == 0.0):
            raise ValueError("second derivatives are not defined at delta = 0 here")
        bank = eos.bank
        d_delta2 = np.zeros(np.broadcast(tau, delta).shape)
        d_tau_delta = np.zeros_like(d_delta2)

        for n, t, d in bank.poly:
            if d >= 2:
                d_delta2 = d_delta2 + n * d * (d - 1) * tau ** t * delta ** (d - 2)
            d_tau_delta = d_tau_delta + n * t * d * tau ** (t - 1.0) * delta ** (d - 1)

        for n, t, d, l in bank.exp:
            e = np.exp(-(delta ** l))
            piece = np.zeros_like(d_delta2)
            if d >= 2:
                piece = piece + d * (d - 1) * delta ** (d - 2)
            piece = piece - l * (2 * d + l - 1) * delta ** (d + l - 2)
            piece = piece + l * l * delta ** (d + 2 * l - 2)
            d_delta2 = d_delta2 + n * tau ** t * e * piece
            d_tau_delta = d_tau_delta + n * t * tau ** (t - 1.0) * e * delta ** (d - 1) * (d - l * delta ** l)

        for n, t, d, eta, beta, gamma, epsilon in bank.gauss:
            g = np.exp(-eta * (delta - epsilon) ** 2 - beta * (tau - gamma) ** 2)
            radial1 = d * delta ** (d - 1) - 2.0 * eta * (delta - epsilon) * delta ** d
            piece = -4.0 * eta * d * (delta - epsilon) * delta ** (d - 1) \
                - 2.0 * eta * delta ** d \
                + 4.0 * eta * eta * (delta - epsilon) ** 2 * delta ** d
            if d >= 2:
                piece = piece + d * (d - 1) * delta ** (d - 2)
            d_delta2 = d_delta2 + n * tau ** t * g * piece
            tau_factor = t * tau ** (t - 1.0) - 2.0 * beta * (tau - gamma) * tau ** t
            d_tau_delta = d_tau_delta + n * tau_factor * g * radial1

        out["d_delta2"] = d_delta2
        out["d_tau_delta"] = d_tau_delta
    return out


# ---------------------------------------------------------------------------
# Property surface
# ---------------------------------------------------------------------------

def check_validity(eos: HelmholtzEos, t, p=None) -> None:
    """Warn (never fail) when a state lies outside the stated validity range."""
    t = np.asarray(t, dtype=float)
    bad_t = np.any(t < eos.tmin) or np.any(t > eos.tmax)
    bad_p = p is not None and np.any(np.asarray(p, dtype=float) > eos.pmax)
    if bad_t or bad_p:
        warnings.warn(
            f"{eos.fluid_id}: state outside validity range "
            f"[{eos.tmin}-{eos.tmax} K, <={eos.pmax} MPa]; extrapolating",
            ValidityWarning,
            stacklevel=3,
        )


def residual_set(eos: HelmholtzEos, t, rho) -> ResidualSet:
    """Dimensionless residual property set at (T in K, rho in mol/L)."""
    t = np.asarray(t, dtype=float)
    rho = np.asarray(rho, dtype=float)
    check_validity(eos, t)
    tau = eos.t_red / t
    delta = rho / eos.rho_red
    value, d_tau, d_delta = alpha_r_parts(eos.bank, tau, delta)
    z_r = delta * d_delta
    u_r = tau * d_tau
    if value.ndim == 0:
        value, z_r, u_r = float(value), float(z_r), float(u_r)
    return ResidualSet(alpha_r=value, z_r=z_r, u_r=u_r)


def pressure(eos: HelmholtzEos, t, rho):
    """Pressure in MPa from p = rho R T (1 + Z_r)."""
    rs = residual_set(eos, t, rho)
    return rho * eos.r_gas * t * (1.0 + rs.z_r) / KPA_PER_MPA


def dp_drho(eos: HelmholtzEos, t, rho):
    """(dp/drho)_T in MPa/(mol/L), from second delta-derivatives."""
    tau = eos.t_red / np.asarray(t, dtype=float)
    delta = np.asarray(rho, dtype=float) / eos.rho_red
    derivs = alpha_r_derivs(eos, tau, delta, order=2)
    factor = 1.0 + 2.0 * delta * derivs["d_delta"] + delta ** 2 * derivs["d_delta2"]
    return eos.r_gas * np.asarray(t, dtype=float) * factor / KPA_PER_MPA


# ---------------------------------------------------------------------------
# Coefficient files
# ---------------------------------------------------------------------------

_TERM_KINDS = {"poly", "exp", "gauss"}


def load_eos(path: str | Path) -> HelmholtzEos:
    """Load a coefficient file:
    {fluid_id, t_red_K, rho_red_molL, r_gas_JmolK?, terms: {...}, range: {...}}.
    Unknown term kinds fail loudly.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        terms = raw["terms"]
        unknown = set(terms) - _TERM_KINDS
        if unknown:
            raise CoefficientFileError(
                f"{raw.get('fluid_id')}: unknown term kinds {sorted(unknown)}; "
                f"supported kinds are {sorted(_TERM_KINDS)}"
            )
        bank = TermBank(
            poly=tuple(tuple(row) for row in terms.get("poly", [])),
            exp=tuple(tuple(row) for row in terms.get("exp", [])),
            gauss=tuple(tuple(row) for row in terms.get("gauss", [])),
        )
        rng = raw["range"]
        return HelmholtzEos(
            fluid_id=raw["fluid_id"],
            t_red=float(raw["t_red_K"]),
            rho_red=float(raw["rho_red_molL"]),
            bank=bank,
            tmin=float(rng["tmin_K"]),
            tmax=float(rng["tmax_K"]),
            pmax=float(rng["pmax_MPa"]),
            r_gas=float(raw.get("r_gas_JmolK", R_GAS)),
        )
    except KeyError as err:
        raise CoefficientFileError(f"coefficient file {path} missing key {err}") from err


class HelmholtzModel:
    """Property-model adapter over a coefficient bank (truth source role).

    Caches a saturation table lazily for initial-psat-guess interpolation.
    """

    def __init__(self, eos: HelmholtzEos):
        self.eos = eos
        self.fluid_id = eos.fluid_id
        self.tc = eos.t_red
        self.rhoc = eos.rho_red
        self.pmax = eos.pmax
        self._sat_table = None
        self._building_table = False

    def pressure(self, t, rho):
        return pressure(self.eos, t, rho)

    def residual_set(self, t, rho) -> ResidualSet:
        return residual_set(self.eos, t, rho)

    def saturation_table(self):
        if self._sat_table is None:
            from . import equilibrium
            self._building_table = True
            try:
                self._sat_table = equilibrium.saturation_table(self)
            finally:
                self._building_table = False
        return self._sat_table

    def psat_guess(self, t: float):
        if self._building_table:
            return None  # mid-build: fall back to the coarse-scan guess
        from . import equilibrium
        return equilibrium.interp_psat(self.saturation_table(), t)


def builtin_eos_path(fluid_id: str) -> Path:
    """Path of a shipped coefficient file, keyed by fluid id."""
    safe = fluid_id.replace("(", "_").replace(")", "").lower()
    return DATA_DIR / f"eos_{safe}.json"


def load_builtin_eos(fluid_id: str) -> HelmholtzEos:
    path = builtin_eos_path(fluid_id)
    if not path.exists():
        raise CoefficientFileError(f"no shipped coefficient file for {fluid_id!r}")
    return load_eos(path)
