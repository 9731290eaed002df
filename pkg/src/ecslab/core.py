"""Fluid registry, state representation, and the shared residual-property
value object used by every property model.

Units are fixed project-wide: K, mol/L, MPa, dimensionless residuals.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

if TYPE_CHECKING:
    from .molgraph import MoleculeGraph

# CODATA exact value, J/(mol K).
R_GAS = 8.31446261815324

# rho[mol/L] * R[J/(mol K)] * T[K] = p[kPa]; divide by this for MPa.
KPA_PER_MPA = 1000.0

FAMILIES = ("HFO", "HFC", "HC", "PFC")

IDENTITY_TOL = 1e-12


class Phase(enum.Enum):
    LIQUID = "liquid"
    VAPOR = "vapor"
    SUPERCRITICAL = "supercritical"


class SaturationUnavailable(Exception):
    """The saturation oracle failed to converge for a subcritical query."""


class OnSaturationLine(Exception):
    """A (T, P) point sits on the saturation line within tolerance."""


class RegistryError(ValueError):
    """Malformed fluid-registry content."""


@dataclass(frozen=True)
class CriticalParameters:
    """Critical-point data; pc and omega are optional because the neural
    model needs only tc and rhoc.  Baselines that require them must fail
    fast with a descriptive error."""

    tc: float                  # K
    rhoc: float                # mol/L
    pc: Optional[float] = None    # MPa
    omega: Optional[float] = None

    def __post_init__(self):
        if self.tc <= 0.0:
            raise ValueError(f"tc must be positive, got {self.tc}")
        if self.rhoc <= 0.0:
            raise ValueError(f"rhoc must be positive, got {self.rhoc}")
        if self.pc is not None:
            if self.pc <= 0.0:
                raise ValueError(f"pc must be positive, got {self.pc}")
            zc = self.zc
            if not 0.15 < zc < 0.40:
                raise ValueError(
                    f"critical compressibility {zc:.4f} outside the (0.15, 0.40) sanity gate"
                )

    @property
    def zc(self) -> float:
        """Critical compressibility pc/(rhoc R tc), unit-consistent."""
        if self.pc is None:
            raise ValueError("zc requires a critical pressure")
        return self.pc * KPA_PER_MPA / (self.rhoc * R_GAS * self.tc)


@dataclass(frozen=True)
class Fluid:
    id: str
    family: str
    crit: CriticalParameters
    molecule: Optional["MoleculeGraph"] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class StatePoint:
    t: float      # K
    rho: float    # mol/L
    p: float      # MPa
    phase: Phase

    def __post_init__(self):
        if self.t <= 0.0 or self.rho <= 0.0 or self.p <= 0.0:
            raise ValueError(f"state point requires t, rho, p > 0, got {self}")


@dataclass(frozen=True)
class ResidualSet:
    """The five dimensionless residual properties plus residual Gibbs energy.

    Construction enforces the thermodynamic identities
    h_r = u_r + z_r, s_r = u_r - alpha_r, g_r = alpha_r + z_r.
    """

    alpha_r: float
    z_r: float
    u_r: float
    s_r: float = field(default=None)  # type: ignore[assignment]
    h_r: float = field(default=None)  # type: ignore[assignment]
    g_r: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.s_r is None:
            object.__setattr__(self, "s_r", self.u_r - self.alpha_r)
        if self.h_r is None:
            object.__setattr__(self, "h_r", self.u_r + self.z_r)
        if self.g_r is None:
            object.__setattr__(self, "g_r", self.alpha_r + self.z_r)
        for name, expected in (("s_r", self.u_r - self.alpha_r),
                               ("h_r", self.u_r + self.z_r),
                               ("g_r", self.alpha_r + self.z_r)):
            got = getattr(self, name)
            bound = IDENTITY_TOL * np.maximum(1.0, np.abs(expected))
            if not np.all(np.abs(got - expected) <= bound):
                raise ValueError(
                    f"residual identity broken: {name}={got!r} but expected {expected!r}"
                )


def reduce_state(fluid: Fluid, t: float, rho: float) -> tuple[float, float]:
    """Reduced temperature and density (t/tc, rho/rhoc)."""
    return t / fluid.crit.tc, rho / fluid.crit.rhoc


def classify_phase(fluid: Fluid, t: float, p: float,
                   saturation_oracle: Callable[[float], float],
                   tie_tol: float = 1e-9) -> Phase:
    """Phase of a (T, P) point.

    Supercritical is defined as t >= tc regardless of pressure (matching the
    grid partition used for data generation).  Below tc the point is liquid
    above the saturation line and vapor below; points on the line within
    `tie_tol` relative are an error, never silently assigned.
    """
    if t >= fluid.crit.tc:
        return Phase.SUPERCRITICAL
    psat = saturation_oracle(t)
    if abs(p - psat) / psat < tie_tol:
        raise OnSaturationLine(
            f"{fluid.id}: p={p} MPa within {tie_tol:g} relative of psat({t} K)={psat} MPa"
        )
    return Phase.LIQUID if p > psat else Phase.VAPOR


# ---------------------------------------------------------------------------
# Fluid registry file
# ---------------------------------------------------------------------------

_REGISTRY_KEYS = {"id", "family", "smiles", "tc_K", "rhoc_molL", "pc_MPa", "omega"}


def load_registry(path: str | Path, parse_molecules: bool = True) -> dict[str, Fluid]:
    """Load a fluid registry: JSON array of records
    {id, family, smiles, tc_K, rhoc_molL, pc_MPa?, omega?}.

    Unknown keys are rejected; ids must be unique.
    """
    from .molgraph import parse_molecule

    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise RegistryError("registry must be a JSON array of fluid records")

    fluids: dict[str, Fluid] = {}
    for rec in records:
        unknown = set(rec) - _REGISTRY_KEYS
        if unknown:
            raise RegistryError(f"unknown registry keys {sorted(unknown)} in record {rec.get('id')!r}")
        for required in ("id", "family", "tc_K", "rhoc_molL"):
            if required not in rec:
                raise RegistryError(f"registry record missing {required!r}: {rec!r}")
        fid = rec["id"]
        if fid in fluids:
            raise RegistryError(f"duplicate fluid id {fid!r}")
        crit = CriticalParameters(tc=float(rec["tc_K"]), rhoc=float(rec["rhoc_molL"]),
                                  pc=rec.get("pc_MPa"), omega=rec.get("omega"))
        molecule = None
        if parse_molecules and rec.get("smiles"):
            molecule = parse_molecule(rec["smiles"])
        fluids[fid] = Fluid(id=fid, family=rec["family"], crit=crit, molecule=molecule)
    return fluids


def builtin_registry_path() -> Path:
    """Path of the fluid registry shipped with the package."""
    return Path(__file__).parent / "data" / "fluids.json"
