"""Vapor-liquid equilibrium and density solvers.

Turns any property model (Helmholtz truth source, ECS composition, PR
baseline) into practical queries: density at (T, P) with a phase hint, and
the saturation state at T from the equality of temperature, pressure, and
Gibbs energy (g_r + ln rho matching between phases).

Density roots use bracketed derivative-free iteration on purpose: shape
factors then only ever need first state derivatives, keeping training free
of third-order terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.optimize import brentq

from .core import KPA_PER_MPA, R_GAS, Phase, ResidualSet, SaturationUnavailable

GIBBS_GAP_TOL = 1e-8
PRESSURE_RTOL = 1e-10


@runtime_checkable
class PropertyModel(Protocol):
    """Minimal surface the solvers need from a property model."""

    fluid_id: str
    tc: float
    rhoc: float

    def pressure(self, t, rho): ...
    def residual_set(self, t, rho) -> ResidualSet: ...


class NoRootInBracket(RuntimeError):
    pass


class MultipleRootsAmbiguous(RuntimeError):
    pass


class ConvergenceFailure(RuntimeError):
    def __init__(self, message: str, trace: list | None = None, best=None):
        super().__init__(message)
        self.trace = trace or []
        self.best = best


class TrivialRootCollapse(RuntimeError):
    """Liquid and vapor densities merged (too close to the critical point)."""


@dataclass(frozen=True)
class SaturationState:
    t: float           # K
    psat: float        # MPa
    rho_liq: float     # mol/L
    rho_vap: float     # mol/L
    g_residual_gap: float  # converged Eq.-criterion residual, diagnostics

    def __post_init__(self):
        if not self.rho_liq > self.rho_vap:
            raise ValueError(f"saturated liquid must be denser than vapor: {self}")
        if abs(self.g_residual_gap) > GIBBS_GAP_TOL:
            raise ValueError(f"unconverged Gibbs gap {self.g_residual_gap:.3e} in {self}")


# ---------------------------------------------------------------------------
# Density at (T, P)
# ---------------------------------------------------------------------------

def _scan(model: PropertyModel, t: float, rho_grid: np.ndarray) -> np.ndarray:
    return np.asarray(model.pressure(t, rho_grid), dtype=float)


def _refine(model: PropertyModel, t: float, p: float, lo: float, hi: float) -> float:
    f = lambda rho: float(model.pressure(t, rho)) - p
    root = brentq(f, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=200)
    # polish with secant until the relative pressure residual is at tolerance
    for _ in range(40):
        resid = float(model.pressure(t, root)) - p
        if abs(resid) <= PRESSURE_RTOL * p:
            return float(root)
        h = max(abs(root) * 1e-9, 1e-13)
        slope = (float(model.pressure(t, root + h)) - float(model.pressure(t, root - h))) / (2 * h)
        if slope == 0.0 or not np.isfinite(slope):
            break
        root = root - resid / slope
    resid = float(model.pressure(t, root)) - p
    if abs(resid) <= PRESSURE_RTOL * p:
        return float(root)
    raise ConvergenceFailure(
        f"{model.fluid_id}: density residual {resid/p:.2e} above tolerance at t={t}, p={p}"
    )


def density_solve(model: PropertyModel, t: float, p: float, phase: Phase,
                  scan_points: int = 64) -> float:
    """Density (mol/L) with |p(t, rho) - p|/p <= 1e-10.

    The phase hint selects the root: liquid above the mechanical-stability
    turn, vapor below, supercritical expects a single root.
    """
    if p <= 0.0:
        raise ValueError(f"pressure must be positive, got {p}")
    rhoc = model.rhoc
    cap = getattr(model, "rho_max", None)

    def clamp(rho):
        return rho if cap is None else min(rho, cap)

    if phase is Phase.VAPOR:
        # vapor branch: monotone from rho -> 0 up to the first pressure turn
        grid = np.concatenate([
            np.geomspace(1e-10, 0.05 * rhoc, scan_points // 2),
            np.linspace(0.05 * rhoc, 1.2 * rhoc, scan_points // 2),
        ])
        pg = _scan(model, t, grid)
        turn = np.nonzero(np.diff(pg) < 0.0)[0]
        end = int(turn[0]) + 1 if turn.size else len(grid) - 1
        below = np.nonzero(pg[:end + 1] >= p)[0]
        if not below.size and p <= pg[end] * 1.05:
            # target may sit in the sliver between the sampled and true branch
            # top (narrow near-critical loops): refine around the turn
            lo_i, hi_i = max(end - 3, 0), min(end + 3, len(grid) - 1)
            grid = np.linspace(grid[lo_i], grid[hi_i], 257)
            pg = _scan(model, t, grid)
            turn = np.nonzero(np.diff(pg) < 0.0)[0]
            end = int(turn[0]) + 1 if turn.size else len(grid) - 1
            below = np.nonzero(pg[:end + 1] >= p)[0]
        if not below.size:
            raise NoRootInBracket(
                f"{model.fluid_id}: no vapor root at t={t}, p={p} (branch tops out at {pg[end]:.6g})"
            )
        hi_idx = int(below[0])
        if hi_idx == 0:
            raise NoRootInBracket(f"{model.fluid_id}: vapor bracket degenerate at t={t}, p={p}")
        return _refine(model, t, p, float(grid[hi_idx - 1]), float(grid[hi_idx]))

    if phase is Phase.LIQUID:
        hi = clamp(4.0 * rhoc)
        for _ in range(16):
            if float(model.pressure(t, hi)) >= p:
                break
            if cap is not None and hi >= cap:
                raise NoRootInBracket(
                    f"{model.fluid_id}: no liquid root below the density cap {cap} at t={t}, p={p}")
            hi = clamp(hi * 1.3)
        else:
            raise NoRootInBracket(f"{model.fluid_id}: no liquid root below rho={hi} at t={t}, p={p}")
        # walk down until the isotherm stops decreasing (liquid spinodal side)
        grid = np.linspace(0.25 * rhoc, hi, scan_points)
        pg = _scan(model, t, grid)
        dpg = np.diff(pg)
        rising = np.nonzero(dpg <= 0.0)[0]
        start = int(rising[-1]) + 1 if rising.size else 0
        if pg[start] > p >= pg[start] * 0.95:
            # near-critical sliver below the sampled branch bottom: refine
            lo_i, hi_i = max(start - 3, 0), min(start + 3, len(grid) - 1)
            grid = np.linspace(grid[lo_i], grid[hi_i], 257)
            pg = _scan(model, t, grid)
            dpg = np.diff(pg)
            rising = np.nonzero(dpg <= 0.0)[0]
            start = int(rising[-1]) + 1 if rising.size else 0
        lo_idx = None
        for i in range(len(grid) - 1, start - 1, -1):
            if pg[i] <= p:
                lo_idx = i
                break
        if lo_idx is None or lo_idx == len(grid) - 1 and pg[-1] < p:
            lo_idx = start
        if pg[lo_idx] > p:
            raise NoRootInBracket(
                f"{model.fluid_id}: no liquid root at t={t}, p={p} (branch bottoms at {pg[start]:.6g})"
            )
        hi_rho = grid[lo_idx + 1] if lo_idx + 1 < len(grid) else hi
        return _refine(model, t, p, float(grid[lo_idx]), float(hi_rho))

    # supercritical: expect a single monotone crossing
    grid = np.concatenate([
        np.geomspace(1e-10, 0.05 * rhoc, scan_points // 2),
        np.linspace(0.05 * rhoc, clamp(4.0 * rhoc), scan_points // 2),
    ])
    pg = _scan(model, t, grid)
    crossings = np.nonzero(np.diff(np.sign(pg - p)) != 0)[0]
    if crossings.size == 0:
        raise NoRootInBracket(f"{model.fluid_id}: no supercritical root at t={t}, p={p}")
    if crossings.size > 1:
        raise MultipleRootsAmbiguous(
            f"{model.fluid_id}: {crossings.size} density roots at t={t}, p={p}; "
            "supercritical hint cannot disambiguate"
        )
    i = int(crossings[0])
    return _refine(model, t, p, float(grid[i]), float(grid[i + 1]))


# ---------------------------------------------------------------------------
# Saturation
# ---------------------------------------------------------------------------

def _gibbs_gap(model: PropertyModel, t: float, rho_l: float, rho_v: float) -> float:
    """(g_r + ln rho) vapor minus liquid; zero at equilibrium."""
    rs_l = model.residual_set(t, rho_l)
    rs_v = model.residual_set(t, rho_v)
    return (rs_v.g_r + np.log(rho_v)) - (rs_l.g_r + np.log(rho_l))


def _loop_guess(model: PropertyModel, t: float, points: int = 512) -> float:
    """Crude psat estimate from a coarse isotherm scan (guess only)."""
    rhoc = model.rhoc
    cap = getattr(model, "rho_max", None)
    top = 3.2 * rhoc if cap is None else min(3.2 * rhoc, cap)
    grid = np.concatenate([
        np.geomspace(1e-9, 0.08 * rhoc, points // 4),
        np.linspace(0.08 * rhoc, top, 3 * points // 4),
    ])
    pg = _scan(model, t, grid)
    dpg = np.diff(pg)
    falling = np.nonzero(dpg < 0.0)[0]
    if not falling.size:
        return float(model.pressure(t, rhoc))  # near-critical: loop unresolved
    imax = int(falling[0])
    stop = int(falling[-1]) + 1
    p_top = float(pg[imax])
    p_bottom = float(pg[imax:stop + 1].min())
    if p_bottom > 0.0:
        return 0.5 * (p_top + p_bottom)
    return 0.45 * p_top


def initial_psat_guess(model: PropertyModel, t: float) -> float:
    """Starting pressure for the saturation Newton iteration (guess only).

    Models may supply their own mechanism through a `psat_guess` method
    (scaled reference tables for ECS, the acentric-anchor closed form for
    PR, cached saturation tables for Helmholtz); otherwise a coarse isotherm
    scan is used.
    """
    if t >= model.tc:
        raise ValueError(f"no saturation at t={t} >= tc={model.tc}")
    hook = getattr(model, "psat_guess", None)
    if hook is not None:
        guess = hook(t)
        if guess is not None and np.isfinite(guess) and guess > 0.0:
            return float(guess)
    return _loop_guess(model, t)


def saturation_solve(model: PropertyModel, t: float, p0: float | None = None,
                     max_iter: int = 80) -> SaturationState:
    """Saturation state at T via outer Newton on ln p with inner density solves.

    The Newton slope is the analytic d(gap)/d(ln p) =
    p (1/rho_v - 1/rho_l) / (R T), unit-consistent.
    """
    if t >= model.tc:
        raise SaturationUnavailable(
            f"{model.fluid_id}: t={t} K is supercritical (tc={model.tc} K)"
        )
    p = float(p0) if p0 is not None else initial_psat_guess(model, t)
    trace: list[tuple[float, float]] = []
    best = None
    blind_retreats = 0

    lnp = np.log(p)
    for _ in range(max_iter):
        p = float(np.exp(lnp))
        try:
            rho_v = density_solve(model, t, p, Phase.VAPOR)
            rho_l = density_solve(model, t, p, Phase.LIQUID)
        except NoRootInBracket as err:
            # stepped outside the coexistence loop: retreat toward the last
            # good point, or nudge a failed initial guess back into the loop
            # (no vapor root means p too high, no liquid root means too low)
            if trace:
                lnp = 0.5 * (lnp + np.log(trace[-1][0]))
                continue
            blind_retreats += 1
            if blind_retreats > 25:
                raise ConvergenceFailure(
                    f"{model.fluid_id}: psat guess never entered the loop at t={t}",
                    trace,
                ) from err
            lnp += -0.02 * blind_retreats if "vapor" in str(err) else 0.02 * blind_retreats
            continue

        if rho_l - rho_v < 1e-8 * model.rhoc:
            raise TrivialRootCollapse(
                f"{model.fluid_id}: phase densities merged at t={t} (rho={rho_l:.6g})"
            )
        gap = _gibbs_gap(model, t, rho_l, rho_v)
        trace.append((p, gap))
        if best is None or abs(gap) < abs(best[1]):
            best = (p, gap, rho_l, rho_v)
        if abs(gap) <= 1e-10 or (abs(gap) <= GIBBS_GAP_TOL and len(trace) > 2
                                 and abs(gap) >= abs(trace[-2][1])):
            return SaturationState(t=t, psat=p, rho_liq=rho_l, rho_vap=rho_v,
                                   g_residual_gap=gap)
        slope = p * KPA_PER_MPA * (1.0 / rho_v - 1.0 / rho_l) / (R_GAS * t)
        step = -gap / slope
        lnp = lnp + float(np.clip(step, -0.7, 0.7))

    if best is not None and abs(best[1]) <= GIBBS_GAP_TOL:
        p, gap, rho_l, rho_v = best
        return SaturationState(t=t, psat=p, rho_liq=rho_l, rho_vap=rho_v, g_residual_gap=gap)
    raise ConvergenceFailure(
        f"{model.fluid_id}: saturation solve did not converge at t={t} "
        f"(best gap {best[1]:.3e})" if best else
        f"{model.fluid_id}: saturation solve made no progress at t={t}",
        trace,
        best,
    )


def saturation_table(model: PropertyModel, tr_grid: np.ndarray | None = None) -> dict:
    """Saturation curve by continuation in reduced temperature (low to high).

    Returns arrays {t, psat, rho_liq, rho_vap}; used for cached-table
    interpolation guesses.
    """
    if tr_grid is None:
        tr_grid = np.linspace(0.55, 0.995, 45)
    ts, ps, rls, rvs = [], [], [], []
    p_prev = None
    for tr in np.sort(np.asarray(tr_grid, dtype=float)):
        t = tr * model.tc
        if p_prev is not None and len(ps) >= 2:
            # Clausius-Clapeyron continuation: log-linear in 1/T
            lnp = np.log(ps[-1]) + (np.log(ps[-1]) - np.log(ps[-2])) * \
                (1.0 / t - 1.0 / ts[-1]) / (1.0 / ts[-1] - 1.0 / ts[-2])
            p0 = float(np.exp(lnp))
        else:
            p0 = None
        try:
            sat = saturation_solve(model, t, p0=p0)
        except TrivialRootCollapse:
            break
        ts.append(sat.t)
        ps.append(sat.psat)
        rls.append(sat.rho_liq)
        rvs.append(sat.rho_vap)
        p_prev = sat.psat
    if not ts:
        raise ConvergenceFailure(f"{model.fluid_id}: saturation table empty")
    return {"t": np.array(ts), "psat": np.array(ps),
            "rho_liq": np.array(rls), "rho_vap": np.array(rvs)}


def interp_psat(table: dict, t: float) -> float:
    """Log-linear interpolation of a saturation table in (1/T, ln p),
    linearly extrapolated beyond the table ends."""
    inv_t = 1.0 / np.asarray(table["t"], dtype=float)
    lnp = np.log(np.asarray(table["psat"], dtype=float))
    order = np.argsort(inv_t)
    x, y = inv_t[order], lnp[order]
    xi = 1.0 / t
    if xi <= x[0]:
        i = 0
    elif xi >= x[-1]:
        i = len(x) - 2
    else:
        i = int(np.searchsorted(x, xi)) - 1
    frac = (xi - x[i]) / (x[i + 1] - x[i])
    return float(np.exp(y[i] + frac * (y[i + 1] - y[i])))
