"""Shape-factor models behind one evaluation interface.

Three variants: the identity model (simple corresponding states), the
Huber-Ely empirical temperature formulation, and the neural model (an
input-widening layer, two residual blocks, a molecular-similarity Hadamard
gate on half of the trunk, and an activation-free output head).

Every variant reports (theta, phi) together with their exact partial
derivatives with respect to the reduced state, which the ECS property
transformation consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import diffengine as de
from . import molgraph as mg
from .core import CriticalParameters, Fluid

CHECKPOINT_VERSION = 1
TRUNK_HIDDEN = 32
TRUNK_HALF = TRUNK_HIDDEN // 2


class NonPositiveShapeFactor(ValueError):
    """theta or phi left the physical domain (reported, never clamped)."""


class MissingCriticalPressure(ValueError):
    """Huber-Ely needs Zc (and omega); the fluid record lacks pc or omega."""


class UnidentifiableParameters(ValueError):
    """omega_j == omega_o makes the four parameters drop out of the model."""


class ConvergenceFailure(RuntimeError):
    def __init__(self, message: str, best: Optional["HuberElyParams"] = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class ShapeFactorEval:
    theta: object
    phi: object
    d_theta_d_tr: object
    d_theta_d_rhor: object
    d_phi_d_tr: object
    d_phi_d_rhor: object

    def __post_init__(self):
        theta = de.value_of(self.theta)
        phi = de.value_of(self.phi)
        if not (np.all(theta > 0.0) and np.all(phi > 0.0)):
            raise NonPositiveShapeFactor(
                f"non-positive shape factors: theta min {theta.min():.6g}, phi min {phi.min():.6g}"
            )


@dataclass(frozen=True)
class HuberElyParams:
    alpha1: float
    alpha2: float
    beta1: float
    beta2: float

    def __post_init__(self):
        values = (self.alpha1, self.alpha2, self.beta1, self.beta2)
        if not all(np.isfinite(v) for v in values):
            raise ValueError(f"non-finite Huber-Ely parameters {values}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha2, self.beta1, self.beta2])


# Published universal parameter sets (reference fluid in parentheses).
HUBER_ELY_1994 = HuberElyParams(0.086853583565, -0.55945094628,
                                0.057382113745, 0.20164093938)          # R134a
TERAISHI_2021 = HuberElyParams(0.06234, -0.6471, -0.3790, 0.1040)      # R1234ze(E)
REFIT_THIS_WORK = HuberElyParams(0.03458966, -0.65863522,
                                 -0.20994404, 0.16257211)               # R1234ze(E)


# ---------------------------------------------------------------------------
# Identity (simple corresponding states)
# ---------------------------------------------------------------------------

def identity_eval(tr, rhor) -> ShapeFactorEval:
    """theta = phi = 1 with zero derivatives, for any state."""
    shape = np.broadcast(np.asarray(tr, dtype=float), np.asarray(rhor, dtype=float)).shape
    one = np.ones(shape) if shape else 1.0
    zero = np.zeros(shape) if shape else 0.0
    return ShapeFactorEval(one, one, zero, zero, zero, zero)


class IdentityShapeModel:
    name = "identity"

    def evaluate(self, fluid: Fluid, tr, rhor) -> ShapeFactorEval:
        return identity_eval(tr, rhor)


# ---------------------------------------------------------------------------
# Huber-Ely empirical formulation
# ---------------------------------------------------------------------------

def huber_ely_eval(params: HuberElyParams, omega_j: float, omega_o: float,
                   zc_j: float, zc_o: float, tr_j) -> ShapeFactorEval:
    """Temperature-only empirical shape factors.

    theta = 1 + (w_j - w_o)(a1 + a2 ln tr); phi = (Zc_o/Zc_j) [1 + (w_j - w_o)
    (b1 + b2 ln tr)]; density derivatives are identically zero.
    """
    tr_j = np.asarray(tr_j, dtype=float)
    if np.any(tr_j <= 0.0):
        raise ValueError(f"reduced temperature must be positive, got {tr_j}")
    if zc_j <= 0.0 or zc_o <= 0.0:
        raise MissingCriticalPressure("critical compressibilities must be positive")
    d_omega = omega_j - omega_o
    zc_ratio = zc_o / zc_j
    ln_tr = np.log(tr_j)
    theta = 1.0 + d_omega * (params.alpha1 + params.alpha2 * ln_tr)
    phi = zc_ratio * (1.0 + d_omega * (params.beta1 + params.beta2 * ln_tr))
    zeros = np.zeros_like(tr_j)
    return ShapeFactorEval(
        theta=theta if theta.ndim else float(theta),
        phi=phi if phi.ndim else float(phi),
        d_theta_d_tr=d_omega * params.alpha2 / tr_j,
        d_theta_d_rhor=zeros if zeros.ndim else 0.0,
        d_phi_d_tr=zc_ratio * d_omega * params.beta2 / tr_j,
        d_phi_d_rhor=zeros if zeros.ndim else 0.0,
    )


class HuberElyShapeModel:
    name = "huber-ely"

    def __init__(self, params: HuberElyParams, reference_crit: CriticalParameters):
        if reference_crit.pc is None or reference_crit.omega is None:
            raise MissingCriticalPressure("reference fluid lacks pc or omega")
        self.params = params
        self.omega_o = reference_crit.omega
        self.zc_o = reference_crit.zc

    def evaluate(self, fluid: Fluid, tr, rhor) -> ShapeFactorEval:
        crit = fluid.crit
        if crit.pc is None or crit.omega is None:
            raise MissingCriticalPressure(
                f"{fluid.id}: Huber-Ely needs pc and omega; registry record lacks "
                f"{'pc' if crit.pc is None else 'omega'}"
            )
        return huber_ely_eval(self.params, crit.omega, self.omega_o,
                              crit.zc, self.zc_o, tr)


# ---------------------------------------------------------------------------
# Neural model
# ---------------------------------------------------------------------------

def trunk_param_shapes() -> dict[str, tuple]:
    return {
        "fcl1.w": (TRUNK_HIDDEN, 2),
        "fcl1.b": (TRUNK_HIDDEN,),
        "rb1.w1": (TRUNK_HIDDEN, TRUNK_HIDDEN),
        "rb1.b1": (TRUNK_HIDDEN,),
        "rb1.w2": (TRUNK_HIDDEN, TRUNK_HIDDEN),
        "rb1.b2": (TRUNK_HIDDEN,),
        "rb2.w1": (TRUNK_HIDDEN, TRUNK_HIDDEN),
        "rb2.b1": (TRUNK_HIDDEN,),
        "rb2.w2": (TRUNK_HIDDEN, TRUNK_HIDDEN),
        "rb2.b2": (TRUNK_HIDDEN,),
        "fcl2.w": (2, TRUNK_HIDDEN),
        "fcl2.b": (2,),
    }


def init_params(seed: int) -> dict[str, np.ndarray]:
    """Random init of the full parameter set (GNN + trunk), seeded."""
    rng = np.random.default_rng(seed)
    params = mg.init_gnn_params(rng)
    for name, shape in trunk_param_shapes().items():
        if name.endswith(("b", "b1", "b2")):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[-1]
            fan_out = shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    return params


def _residual_block(x, params: Mapping, prefix: str):
    inner = de.tanh(x @ de.transpose(params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return x + inner @ de.transpose(params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def trunk_forward(params: Mapping, s, tr_col, rhor_col):
    """(theta, phi) columns from reduced-state columns and a similarity row.

    Generic over floats, dual numbers, and recorded-graph nodes; the
    similarity gate multiplies the second half of the deep trunk, and the
    output head carries no activation.
    """
    x = de.concat([tr_col, rhor_col], axis=1)
    x = de.tanh(x @ de.transpose(params["fcl1.w"]) + params["fcl1.b"])
    x = _residual_block(x, params, "rb1")
    x = _residual_block(x, params, "rb2")
    x_a = x[:, :TRUNK_HALF]
    x_b = x[:, TRUNK_HALF:]
    y = de.concat([x_a, x_b * s], axis=1)
    out = y @ de.transpose(params["fcl2.w"]) + params["fcl2.b"]
    return out[:, 0:1], out[:, 1:2]


def neural_eval(params: Mapping, s: np.ndarray, tr, rhor) -> ShapeFactorEval:
    """Forward pass plus exact state derivatives via the dual-number engine."""
    tr_arr = np.atleast_1d(np.asarray(tr, dtype=float))
    rhor_arr = np.atleast_1d(np.asarray(rhor, dtype=float))
    tr_col = np.broadcast_to(tr_arr, np.broadcast(tr_arr, rhor_arr).shape).reshape(-1, 1)
    rhor_col = np.broadcast_to(rhor_arr, np.broadcast(tr_arr, rhor_arr).shape).reshape(-1, 1)
    s_row = np.asarray(s, dtype=float).reshape(1, -1)

    derivs = de.derive_wrt_state(
        lambda a, b: trunk_forward(params, s_row, a, b), tr_col, rhor_col)

    def shaped(x):
        col = de.value_of(x).reshape(-1)
        return col if np.ndim(tr) or np.ndim(rhor) else float(col[0])

    try:
        return ShapeFactorEval(
            theta=shaped(derivs["theta"]),
            phi=shaped(derivs["phi"]),
            d_theta_d_tr=shaped(derivs["d_theta_d_tr"]),
            d_theta_d_rhor=shaped(derivs["d_theta_d_rhor"]),
            d_phi_d_tr=shaped(derivs["d_phi_d_tr"]),
            d_phi_d_rhor=shaped(derivs["d_phi_d_rhor"]),
        )
    except NonPositiveShapeFactor as err:
        raise NonPositiveShapeFactor(
            f"{err} at tr={np.min(tr_arr):.6g}..{np.max(tr_arr):.6g}, "
            f"rhor={np.min(rhor_arr):.6g}..{np.max(rhor_arr):.6g}"
        ) from None


class NeuralShapeModel:
    """Trunk + GNN parameters, the reference molecule, and a per-fluid
    similarity cache."""

    name = "nn-ecs"

    def __init__(self, params: dict[str, np.ndarray], reference_fluid_id: str,
                 reference_molecule: mg.MoleculeGraph):
        self.params = params
        self.reference_fluid_id = reference_fluid_id
        self.reference_molecule = reference_molecule
        self._similarity_cache: dict[str, np.ndarray] = {}
        self._ref_embedding: np.ndarray | None = None

    @classmethod
    def random(cls, seed: int, reference_fluid_id: str,
               reference_molecule: mg.MoleculeGraph) -> "NeuralShapeModel":
        return cls(init_params(seed), reference_fluid_id, reference_molecule)

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.params = params
        self._similarity_cache.clear()
        self._ref_embedding = None

    def gnn_weights(self) -> mg.GnnWeights:
        return mg.GnnWeights({k: v for k, v in self.params.items() if k.startswith("gnn.")})

    def reference_embedding(self) -> np.ndarray:
        if self._ref_embedding is None:
            self._ref_embedding = mg.gnn_embed(self.reference_molecule, self.gnn_weights())
        return self._ref_embedding

    def similarity_for_molecule(self, key: str, molecule: mg.MoleculeGraph) -> np.ndarray:
        cached = self._similarity_cache.get(key)
        if cached is not None:
            return cached
        r_j = mg.gnn_embed(molecule, self.gnn_weights())
        s = np.asarray(mg.similarity(self.reference_embedding(), r_j))
        self._similarity_cache[key] = s
        return s

    def similarity_for(self, fluid: Fluid) -> np.ndarray:
        if fluid.molecule is None:
            raise ValueError(f"{fluid.id}: neural shape factors need a molecule graph")
        return self.similarity_for_molecule(fluid.id, fluid.molecule)

    def evaluate(self, fluid: Fluid, tr, rhor) -> ShapeFactorEval:
        return neural_eval(self.params, self.similarity_for(fluid), tr, rhor)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _group(params: Mapping[str, np.ndarray], prefix: str) -> dict:
    return {k[len(prefix):]: np.asarray(v).tolist()
            for k, v in params.items() if k.startswith(prefix)}


def save_checkpoint(model: NeuralShapeModel, path: str | Path,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "reference_fluid_id": model.reference_fluid_id,
        "reference_smiles": mg.render_smiles(model.reference_molecule),
        "activation": "tanh",
        "hadamard_half": "second",
        "gnn": _group(model.params, "gnn."),
        "fcl1": _group(model.params, "fcl1."),
        "rb1": _group(model.params, "rb1."),
        "rb2": _group(model.params, "rb2."),
        "fcl2": _group(model.params, "fcl2."),
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[NeuralShapeModel, dict]:
    """Model plus the residual metadata (seed, config echo, fold tag, ...)."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {raw.get('format_version')!r}")
    if raw.get("activation") != "tanh" or raw.get("hadamard_half") != "second":
        raise ValueError("checkpoint declares an unsupported architecture variant")
    params: dict[str, np.ndarray] = {}
    for prefix in ("gnn", "fcl1", "rb1", "rb2", "fcl2"):
        for leaf, value in raw[prefix].items():
            params[f"{prefix}.{leaf}"] = np.asarray(value, dtype=float)
    molecule = mg.parse_molecule(raw["reference_smiles"])
    model = NeuralShapeModel(params, raw["reference_fluid_id"], molecule)
    meta = {k: v for k, v in raw.items()
            if k not in {"format_version", "reference_fluid_id", "reference_smiles",
                         "activation", "hadamard_half", "gnn", "fcl1", "rb1", "rb2", "fcl2"}}
    return model, meta


# ---------------------------------------------------------------------------
# Huber-Ely parameter fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SaturationPoint:
    t: float         # K
    psat: float      # MPa
    rho_liq: float   # mol/L


def _dedupe(points) -> list[SaturationPoint]:
    seen = {}
    for p in points:
        seen[(p.t, p.psat, p.rho_liq)] = p
    return [seen[key] for key in sorted(seen)]


def _validate_fit_data(fluid: Fluid, points: list[SaturationPoint]) -> None:
    if len(points) < 8:
        raise ValueError(f"{fluid.id}: need >= 8 saturation points, got {len(points)}")
    tr = np.array([p.t for p in points]) / fluid.crit.tc
    if tr.min() > 0.75 or tr.max() < 0.90:
        raise ValueError(
            f"{fluid.id}: saturation data must span tr in [0.7, 0.95], got "
            f"[{tr.min():.3f}, {tr.max():.3f}]"
        )


def _residuals_for(reference, fluid: Fluid, points: list[SaturationPoint],
                   params: HuberElyParams) -> np.ndarray:
    from . import ecs, equilibrium

    shape = HuberElyShapeModel(params, reference.fluid.crit)
    model = ecs.EcsModel(reference=reference, target=fluid, shape=shape)
    out = []
    for point in points:
        try:
            sat = equilibrium.saturation_solve(model, point.t)
            out.append((sat.psat - point.psat) / point.psat)
            out.append((sat.rho_liq - point.rho_liq) / point.rho_liq)
        except Exception:
            out.extend([1e3, 1e3])  # prohibitive but finite: steers the fit back
    return np.array(out)


def fit_huber_ely_fluid_specific(reference, fluid: Fluid,
                                 points, x0: HuberElyParams | None = None) -> HuberElyParams:
    """Least-squares fit of the four parameters to one fluid's vapor pressure
    and saturated liquid density, through the full ECS + equilibrium pipeline."""
    from scipy.optimize import least_squares

    points = _dedupe(points)
    _validate_fit_data(fluid, points)
    if fluid.crit.omega is None or reference.fluid.crit.omega is None:
        raise MissingCriticalPressure(f"{fluid.id}: fitting needs omega on both fluids")
    if abs(fluid.crit.omega - reference.fluid.crit.omega) < 1e-12:
        raise UnidentifiableParameters(
            f"{fluid.id}: omega equals the reference omega; Huber-Ely parameters "
            "multiply (omega_j - omega_o) and cannot be identified"
        )

    def objective(x):
        return _residuals_for(reference, fluid, points, HuberElyParams(*x))

    start = (x0 or HuberElyParams(0.0, 0.0, 0.0, 0.0)).as_array()
    result = least_squares(objective, start, gtol=1e-8, xtol=1e-12, ftol=1e-14)
    best = HuberElyParams(*result.x)
    if not result.success:
        raise ConvergenceFailure(
            f"{fluid.id}: Huber-Ely fit did not converge ({result.message})", best=best)
    return best


def fit_huber_ely_universal(reference, dataset: list[tuple[Fluid, list]],
                            x0: HuberElyParams | None = None) -> HuberElyParams:
    """One parameter set minimizing the pooled objective across fluids."""
    from scipy.optimize import least_squares

    if not dataset:
        raise ValueError("universal fit needs at least one fluid")
    usable = []
    for fluid, points in dataset:
        points = _dedupe(points)
        _validate_fit_data(fluid, points)
        if fluid.crit.omega is None:
            raise MissingCriticalPressure(f"{fluid.id}: fitting needs omega")
        if abs(fluid.crit.omega - reference.fluid.crit.omega) >= 1e-12:
            usable.append((fluid, points))
    if not usable:
        raise UnidentifiableParameters(
            "no fluid differs from the reference in omega; nothing identifies the parameters"
        )

    def objective(x):
        params = HuberElyParams(*x)
        return np.concatenate([
            _residuals_for(reference, fluid, points, params) for fluid, points in usable
        ])

    start = (x0 or HuberElyParams(0.0, 0.0, 0.0, 0.0)).as_array()
    result = least_squares(objective, start, gtol=1e-8, xtol=1e-12, ftol=1e-14)
    best = HuberElyParams(*result.x)
    if not result.success:
        raise ConvergenceFailure(f"universal Huber-Ely fit did not converge "
                                 f"({result.message})", best=best)
    return best
