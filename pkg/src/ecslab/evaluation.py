"""AAD metrics, per-phase comparison tables, vapor-pressure comparisons, and
the critical-parameter sensitivity study.

Reference values come from the dataset (stored truth); candidate models are
resolved per fluid through factories so that one report can span ECS
variants, the cubic baseline, and truth-vs-truth sanity rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import equilibrium
from .core import CriticalParameters, Fluid, Phase
from .dataset import Corpus, FluidDataset, near_critical_filter

log = logging.getLogger(__name__)

REPORT_VERSION = 1

ModelFactory = Callable[[Fluid], "equilibrium.PropertyModel"]


class ZeroReferenceValue(ValueError):
    def __init__(self, indices):
        super().__init__(f"reference values below 1e-12 at indices {list(indices)}")
        self.indices = tuple(indices)


def aad(ref_values, calc_values) -> float:
    """Average absolute relative deviation in percent: (100/N) sum |(ref-calc)/ref|."""
    ref = np.asarray(ref_values, dtype=float)
    calc = np.asarray(calc_values, dtype=float)
    if ref.shape != calc.shape or ref.size < 1:
        raise ValueError(f"need equal-length non-empty arrays, got {ref.shape} vs {calc.shape}")
    bad = np.nonzero(np.abs(ref) < 1e-12)[0]
    if bad.size:
        raise ZeroReferenceValue(bad)
    return float(100.0 * np.mean(np.abs((ref - calc) / ref)))


@dataclass
class AadTable:
    """Per-(model, fluid, property, phase) rows with aggregate views."""

    rows: list = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def aggregate(self) -> list[dict]:
        """Rows keyed by (model, property, phase): mean/max of per-fluid AADs."""
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            groups.setdefault((row["model"], row["property"], row["phase"]), []).append(row)
        out = []
        for (model, prop, phase), rows in sorted(groups.items()):
            out.append({
                "model": model,
                "property": prop,
                "phase": phase,
                "mean_aad_pct": float(np.mean([r["aad_pct"] for r in rows])),
                "max_aad_pct": float(np.max([r["aad_pct"] for r in rows])),
                "count": int(sum(r["count"] for r in rows)),
                "excluded": int(sum(r.get("excluded", 0) for r in rows)),
            })
        return out

    def to_json(self) -> str:
        return json.dumps({"report_version": REPORT_VERSION, "rows": self.rows},
                          sort_keys=True)

    def render_text(self) -> str:
        headers = ["model", "fluid", "property", "phase", "aad_pct", "max_dev_pct", "count"]
        lines = ["  ".join(f"{h:>14s}" for h in headers)]
        for row in self.rows:
            cells = [str(row.get("fluid", "-")), row["property"], row["phase"]]
            lines.append("  ".join([f"{row['model']:>14s}"] + [f"{c:>14s}" for c in cells]
                                   + [f"{row['aad_pct']:14.4f}",
                                      f"{row.get('max_dev_pct', float('nan')):14.4f}",
                                      f"{row['count']:14d}"]))
        return "\n".join(lines)


@dataclass
class SensitivityReport:
    """Mean % variation per (property, phase, perturbed parameter)."""

    fluid_id: str
    perturbation: float
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"report_version": REPORT_VERSION, "fluid": self.fluid_id,
                           "perturbation": self.perturbation, "rows": self.rows},
                          sort_keys=True)

    def lookup(self, prop: str, phase: str, parameter: str) -> float:
        for row in self.rows:
            if (row["property"], row["phase"], row["parameter"]) == (prop, phase, parameter):
                return row["mean_variation_pct"]
        raise KeyError((prop, phase, parameter))


# ---------------------------------------------------------------------------
# Single-phase property comparison (Tables 7-9 shape)
# ---------------------------------------------------------------------------

def _model_point_values(model, point, energy_at: str):
    """(rho, s_r, h_r) of a model at one dataset point, or None on solver failure."""
    st = point.state
    try:
        rho_model = equilibrium.density_solve(model, st.t, st.p, st.phase)
    except (equilibrium.NoRootInBracket, equilibrium.MultipleRootsAmbiguous,
            equilibrium.ConvergenceFailure):
        return None
    rho_for_energy = st.rho if energy_at == "t_rho" else rho_model
    rs = model.residual_set(st.t, rho_for_energy)
    return float(rho_model), float(rs.s_r), float(rs.h_r)


def property_report(models: Mapping[str, ModelFactory], corpus: Corpus,
                    properties: Sequence[str] = ("density", "s_r", "h_r"),
                    energy_at: str = "t_p") -> AadTable:
    """Per-phase AAD of each model against stored truth.

    Density compares at fixed (T, P) through each model's own density solve;
    energy properties default to the same (T, P) resolution (`energy_at=
    "t_rho"` evaluates them at the stored truth density instead).
    """
    if energy_at not in ("t_p", "t_rho"):
        raise ValueError(f"energy_at must be 't_p' or 't_rho', got {energy_at!r}")
    unknown = set(properties) - {"density", "s_r", "h_r"}
    if unknown:
        raise ValueError(f"unknown properties {sorted(unknown)}")

    table = AadTable()
    for ds in corpus:
        if ds.fluid is None:
            raise ValueError(f"{ds.fluid_id}: report needs fluid identity attached")
        for model_name, factory in models.items():
            model = factory(ds.fluid)
            per_phase: dict[Phase, dict[str, list]] = {}
            excluded = 0
            for pt in ds.points:
                values = _model_point_values(model, pt, energy_at)
                if values is None:
                    excluded += 1
                    continue
                rho_model, s_model, h_model = values
                bucket = per_phase.setdefault(pt.state.phase, {
                    "density": ([], []), "s_r": ([], []), "h_r": ([], [])})
                bucket["density"][0].append(pt.state.rho)
                bucket["density"][1].append(rho_model)
                bucket["s_r"][0].append(pt.truth.s_r)
                bucket["s_r"][1].append(s_model)
                bucket["h_r"][0].append(pt.truth.h_r)
                bucket["h_r"][1].append(h_model)
            for phase, bucket in sorted(per_phase.items(), key=lambda kv: kv[0].value):
                for prop in properties:
                    ref, calc = bucket[prop]
                    ref = np.asarray(ref)
                    calc = np.asarray(calc)
                    usable = np.abs(ref) >= 1e-12
                    skipped_zero = int(np.sum(~usable))
                    if not np.any(usable):
                        continue
                    devs = 100.0 * np.abs((ref[usable] - calc[usable]) / ref[usable])
                    table.add(model=model_name, fluid=ds.fluid_id, property=prop,
                              phase=phase.value,
                              aad_pct=float(np.mean(devs)),
                              max_dev_pct=float(np.max(devs)),
                              count=int(devs.size),
                              excluded=excluded + skipped_zero)
    return table


# ---------------------------------------------------------------------------
# Vapor pressure comparison (Table 6 shape)
# ---------------------------------------------------------------------------

def vapor_pressure_report(models: Mapping[str, ModelFactory],
                          fluids: Iterable[Fluid],
                          truth_models: Mapping[str, "equilibrium.PropertyModel"],
                          tr_grid: np.ndarray | None = None) -> AadTable:
    """Per-fluid psat AAD against truth saturation over tr in [0.7, 0.95]."""
    if tr_grid is None:
        tr_grid = np.arange(0.70, 0.95 + 1e-9, 0.02)
    table = AadTable()
    for fluid in fluids:
        truth = truth_models[fluid.id]
        ref_vals, temps = [], []
        for tr in tr_grid:
            t = tr * fluid.crit.tc
            try:
                ref_vals.append(equilibrium.saturation_solve(truth, t).psat)
                temps.append(t)
            except Exception as err:
                log.warning("%s: truth saturation failed at tr=%.3f: %s", fluid.id, tr, err)
        for model_name, factory in models.items():
            model = factory(fluid)
            ref, calc = [], []
            failures = 0
            for t, p_ref in zip(temps, ref_vals):
                try:
                    calc.append(equilibrium.saturation_solve(model, t).psat)
                    ref.append(p_ref)
                except Exception:
                    failures += 1
            if not ref:
                continue
            devs = 100.0 * np.abs((np.asarray(ref) - np.asarray(calc)) / np.asarray(ref))
            table.add(model=model_name, fluid=fluid.id, property="psat", phase="saturation",
                      aad_pct=float(np.mean(devs)), max_dev_pct=float(np.max(devs)),
                      count=int(devs.size), excluded=failures)
    return table


# ---------------------------------------------------------------------------
# Critical-parameter sensitivity (Table 11 shape)
# ---------------------------------------------------------------------------

def _perturbed_fluid(fluid: Fluid, parameter: str, factor: float) -> Fluid:
    crit = fluid.crit
    if parameter == "tc":
        new_crit = CriticalParameters(tc=crit.tc * factor, rhoc=crit.rhoc,
                                      pc=crit.pc, omega=crit.omega)
    elif parameter == "rhoc":
        new_crit = CriticalParameters(tc=crit.tc, rhoc=crit.rhoc * factor,
                                      pc=crit.pc, omega=crit.omega)
    else:
        raise ValueError(f"unknown parameter {parameter!r}")
    return Fluid(id=fluid.id, family=fluid.family, crit=new_crit, molecule=fluid.molecule)


def critical_sensitivity(model_factory: ModelFactory, fluid: Fluid,
                         dataset: FluidDataset, perturbation: float,
                         t_band: float = 0.02, rho_band: float = 0.30) -> SensitivityReport:
    """Mean absolute % change of density/s_r/h_r at fixed (T, P) under
    tc (1 +- delta) and rhoc (1 +- delta), near-critical filtered."""
    if perturbation < 0.0:
        raise ValueError("perturbation must be non-negative")
    filtered = near_critical_filter(dataset, t_band, rho_band, fluid=fluid)

    base_model = model_factory(fluid)
    base_values: dict[int, tuple] = {}
    for k, pt in enumerate(filtered.points):
        values = _model_point_values(base_model, pt, "t_p")
        if values is not None:
            base_values[k] = values

    report = SensitivityReport(fluid_id=fluid.id, perturbation=perturbation)
    for parameter in ("tc", "rhoc"):
        sums = {}
        counts = {}
        excluded = 0
        for sign in (+1.0, -1.0):
            pert_model = model_factory(_perturbed_fluid(fluid, parameter,
                                                        1.0 + sign * perturbation))
            for k, pt in enumerate(filtered.points):
                if k not in base_values:
                    continue
                values = _model_point_values(pert_model, pt, "t_p")
                if values is None:
                    excluded += 1
                    continue
                for prop, base, new in zip(("density", "s_r", "h_r"), base_values[k], values):
                    if abs(base) < 1e-12:
                        continue
                    key = (prop, pt.state.phase.value)
                    sums[key] = sums.get(key, 0.0) + abs((new - base) / base) * 100.0
                    counts[key] = counts.get(key, 0) + 1
        for (prop, phase), total in sorted(sums.items()):
            report.rows.append({
                "property": prop, "phase": phase, "parameter": parameter,
                "mean_variation_pct": total / counts[(prop, phase)],
                "count": counts[(prop, phase)],
                "excluded": excluded,
            })
    return report


# ---------------------------------------------------------------------------
# LOOCV fold evaluation
# ---------------------------------------------------------------------------

def fold_rows(model, reference, test_set: FluidDataset) -> list[dict]:
    """Held-out AAD rows for the trained model and the identity-CS baseline."""
    from . import ecs
    from .shapefactor import IdentityShapeModel

    factories = {
        "nn-ecs": lambda fluid: ecs.EcsModel(reference, fluid, model),
        "identity-cs": lambda fluid: ecs.EcsModel(reference, fluid, IdentityShapeModel()),
    }
    table = property_report(factories, Corpus(fluids=(test_set,)))
    return table.rows
