"""Training/evaluation state-point grids and dataset files.

Generates per-fluid (T, P) grids from a truth model (temperatures from
0.7 tc to 1.1 tc in 10 K steps; a fine 0.2 MPa pressure walk below pc that
hands off to 3/6 MPa liquid and 2 MPa supercritical steps), resolving each
point to density and attaching truth residual values.  Fluids without a
shipped truth surface enter through CSV ingestion instead.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import equilibrium
from .core import (Fluid, OnSaturationLine, Phase, ResidualSet, SaturationUnavailable,
                   StatePoint, classify_phase)

log = logging.getLogger(__name__)

CSV_HEADER = ["fluid_id", "T_K", "rho_molL", "P_MPa", "phase",
              "alpha_r", "Z_r", "u_r", "s_r", "h_r"]
EXPERIMENTAL_HEADER = ["fluid_id", "T_K", "P_MPa", "rho_molL_exp"]

STANDARD_GRID_MIN = 300
STANDARD_GRID_MAX = 560
ROW_IDENTITY_TOL = 1e-6


class SchemaError(ValueError):
    pass


class IdentityViolation(ValueError):
    """Row-level residual-identity failure report."""


@dataclass(frozen=True)
class DataPoint:
    state: StatePoint
    truth: ResidualSet


@dataclass(frozen=True)
class FluidDataset:
    fluid_id: str
    points: tuple
    provenance: str                       # "generated" | "ingested"
    fluid: Optional[Fluid] = None
    skipped: int = 0
    rejected_rows: tuple = ()

    def __post_init__(self):
        if self.provenance not in ("generated", "ingested"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Corpus:
    fluids: tuple

    def __post_init__(self):
        ids = [d.fluid_id for d in self.fluids]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate fluid ids in corpus: {ids}")

    def __iter__(self):
        return iter(self.fluids)

    def __len__(self) -> int:
        return len(self.fluids)

    @property
    def m(self) -> int:
        return len(self.fluids)


# ---------------------------------------------------------------------------
# Grid generation
# ---------------------------------------------------------------------------

def _pressure_walk(pc: float, t_is_supercritical: bool, pmax_model: float | None):
    """Cumulative pressure sequence of Table-3 style: 0.2 MPa steps below pc
    (one point lands just past pc), then the coarse phase-specific step."""
    if t_is_supercritical:
        cap = 5.0 * pc
        coarse = 2.0
    else:
        cap = 50.0
        coarse = 6.0
    if pmax_model is not None:
        cap = min(cap, pmax_model)
    if not t_is_supercritical:
        coarse = 6.0 if cap >= 50.0 else 3.0

    out = []
    p = 0.1
    while p <= cap + 1e-9:
        out.append(round(p, 10))
        p += 0.2 if p < pc else coarse
    return out


def generate_grid(fluid: Fluid, truth_model) -> FluidDataset:
    """Standard grid with truth residuals attached.

    Point-level solver failures are logged and skipped; the skip count is
    recorded on the dataset.
    """
    crit = fluid.crit
    if crit.pc is None:
        raise ValueError(f"{fluid.id}: grid generation needs a critical pressure")
    pmax_model = getattr(truth_model, "pmax", None)

    temps = []
    t = 0.7 * crit.tc
    while t <= 1.1 * crit.tc + 1e-9:
        temps.append(t)
        t += 10.0

    psat_cache: dict[float, float | None] = {}

    def saturation_oracle(t_query: float) -> float:
        cached = psat_cache.get(t_query)
        if cached is None:
            raise SaturationUnavailable(f"{fluid.id}: no saturation at {t_query} K")
        return cached

    points = []
    skipped = 0
    for t in temps:
        if t < crit.tc and t not in psat_cache:
            try:
                psat_cache[t] = equilibrium.saturation_solve(truth_model, t).psat
            except Exception as err:
                psat_cache[t] = None
                log.warning("%s: saturation failed at %.2f K (%s); row will be skipped",
                            fluid.id, t, err)
        for p in _pressure_walk(crit.pc, t >= crit.tc, pmax_model):
            try:
                phase = classify_phase(fluid, t, p, saturation_oracle)
                rho = equilibrium.density_solve(truth_model, t, p, phase)
                truth = truth_model.residual_set(t, rho)
                points.append(DataPoint(state=StatePoint(t=t, rho=rho, p=p, phase=phase),
                                        truth=truth))
            except (OnSaturationLine, SaturationUnavailable,
                    equilibrium.NoRootInBracket, equilibrium.MultipleRootsAmbiguous,
                    equilibrium.ConvergenceFailure) as err:
                skipped += 1
                log.debug("%s: skipped (t=%.3f K, p=%.3f MPa): %s", fluid.id, t, p, err)

    dataset = FluidDataset(fluid_id=fluid.id, points=tuple(points),
                           provenance="generated", fluid=fluid, skipped=skipped)
    if not STANDARD_GRID_MIN <= len(dataset) <= STANDARD_GRID_MAX:
        raise ValueError(
            f"{fluid.id}: standard grid produced {len(dataset)} points, outside "
            f"[{STANDARD_GRID_MIN}, {STANDARD_GRID_MAX}]"
        )
    return dataset


def near_critical_filter(dataset: FluidDataset, t_band: float, rho_band: float,
                         fluid: Fluid | None = None) -> FluidDataset:
    """Remove points with |t/tc - 1| < t_band AND |rho/rhoc - 1| < rho_band."""
    if t_band < 0.0 or rho_band < 0.0:
        raise ValueError("bands must be non-negative")
    fluid = fluid or dataset.fluid
    if fluid is None:
        raise ValueError(f"{dataset.fluid_id}: filter needs critical parameters")
    tc, rhoc = fluid.crit.tc, fluid.crit.rhoc
    kept = tuple(
        pt for pt in dataset.points
        if not (abs(pt.state.t / tc - 1.0) < t_band and abs(pt.state.rho / rhoc - 1.0) < rho_band)
    )
    return replace(dataset, points=kept)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def export_csv(dataset: FluidDataset, path: str | Path) -> None:
    """Deterministic (T-major, then P) dataset file; reruns are byte-identical."""
    points = sorted(dataset.points, key=lambda pt: (pt.state.t, pt.state.p))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for pt in points:
        st, tr = pt.state, pt.truth
        writer.writerow([dataset.fluid_id, repr(st.t), repr(st.rho), repr(st.p),
                         st.phase.value, repr(tr.alpha_r), repr(tr.z_r), repr(tr.u_r),
                         repr(tr.s_r), repr(tr.h_r)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_rows(path: str | Path, expected_header: list[str]) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{path}: empty file") from None
    if header != expected_header:
        raise SchemaError(f"{path}: header {header} != required {expected_header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(expected_header):
            raise SchemaError(f"{path}:{lineno}: expected {len(expected_header)} fields")
        rows.append(dict(zip(expected_header, row), _line=lineno))
    return rows


def ingest_csv(path: str | Path, registry: dict[str, Fluid] | None = None) -> FluidDataset:
    """Load one fluid's dataset; rows breaking h_r = u_r + Z_r beyond 1e-6 are
    rejected (reported on the dataset), the rest keep the identity-consistent
    (alpha_r, Z_r, u_r) triple."""
    rows = _parse_rows(path, CSV_HEADER)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    ids = {r["fluid_id"] for r in rows}
    if len(ids) != 1:
        raise SchemaError(f"{path}: expected a single fluid id, found {sorted(ids)}")
    fluid_id = rows[0]["fluid_id"]

    points = []
    rejected = []
    for r in rows:
        try:
            t, rho, p = float(r["T_K"]), float(r["rho_molL"]), float(r["P_MPa"])
            alpha_r, z_r, u_r = float(r["alpha_r"]), float(r["Z_r"]), float(r["u_r"])
            s_r, h_r = float(r["s_r"]), float(r["h_r"])
            phase = Phase(r["phase"])
        except ValueError as err:
            raise SchemaError(f"{path}:{r['_line']}: {err}") from None
        h_gap = abs(h_r - u_r - z_r)
        s_gap = abs(s_r - (u_r - alpha_r))
        if h_gap > ROW_IDENTITY_TOL or s_gap > ROW_IDENTITY_TOL:
            rejected.append(IdentityViolation(
                f"{path}:{r['_line']}: residual identities broken "
                f"(|h-u-Z|={h_gap:.3g}, |s-u+alpha|={s_gap:.3g})"))
            continue
        points.append(DataPoint(state=StatePoint(t=t, rho=rho, p=p, phase=phase),
                                truth=ResidualSet(alpha_r=alpha_r, z_r=z_r, u_r=u_r)))
    if rejected:
        log.warning("%s: rejected %d rows with identity violations", path, len(rejected))
    return FluidDataset(fluid_id=fluid_id, points=tuple(points), provenance="ingested",
                        fluid=(registry or {}).get(fluid_id), rejected_rows=tuple(rejected))


def ingest_corpus_dir(directory: str | Path,
                      registry: dict[str, Fluid] | None = None) -> Corpus:
    """All *.csv dataset files in a directory, sorted by name."""
    paths = sorted(Path(directory).glob("*.csv"))
    if not paths:
        raise SchemaError(f"no dataset CSVs in {directory}")
    return Corpus(fluids=tuple(ingest_csv(p, registry) for p in paths))


@dataclass(frozen=True)
class ExperimentalDensityPoint:
    fluid_id: str
    t: float
    p: float
    rho_exp: float


def ingest_experimental_csv(path: str | Path) -> list[ExperimentalDensityPoint]:
    """Density-only comparison schema for externally measured data."""
    rows = _parse_rows(path, EXPERIMENTAL_HEADER)
    out = []
    for r in rows:
        try:
            out.append(ExperimentalDensityPoint(
                fluid_id=r["fluid_id"], t=float(r["T_K"]), p=float(r["P_MPa"]),
                rho_exp=float(r["rho_molL_exp"])))
        except ValueError as err:
            raise SchemaError(f"{path}:{r['_line']}: {err}") from None
    return out


# ---------------------------------------------------------------------------
# Hashing (fold-isolation audits, checkpoint provenance)
# ---------------------------------------------------------------------------

def dataset_hash(dataset: FluidDataset) -> str:
    h = hashlib.sha256()
    h.update(dataset.fluid_id.encode())
    for pt in sorted(dataset.points, key=lambda pt: (pt.state.t, pt.state.p)):
        st, tr = pt.state, pt.truth
        h.update(repr((st.t, st.rho, st.p, st.phase.value,
                       tr.alpha_r, tr.z_r, tr.u_r)).encode())
    return h.hexdigest()


def corpus_hash(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for d in sorted(corpus.fluids, key=lambda d: d.fluid_id):
        h.update(dataset_hash(d).encode())
    return h.hexdigest()
