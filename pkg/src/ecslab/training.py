"""Pretraining, main training, and leave-one-out cross-validation for the
neural shape-factor model.

Pretraining drives (theta, phi) to 1 everywhere (the simple
corresponding-states anchor) so that the under-determined main loss starts
near a physical solution; main training then minimizes the mean absolute
error of the three transformed residual properties against truth values.
Parameter gradients flow through the state derivatives of the shape factors
via the differentiation engine's forward-over-reverse path.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffengine as de
from . import molgraph as mg
from .dataset import Corpus, FluidDataset, dataset_hash
from .ecs import Reference
from .helmholtz import alpha_r_parts
from .shapefactor import NeuralShapeModel, trunk_forward


class ConvergenceFailure(RuntimeError):
    def __init__(self, message: str, final_loss: float):
        super().__init__(message)
        self.final_loss = final_loss


class NonFiniteLoss(RuntimeError):
    pass


class NonPositiveShapeFactorAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    pretrain_epochs: int = 2000
    main_epochs: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    pretrain_target: float = 5e-4        # max grid |theta-1|, |phi-1| stop rule
    plateau_epochs: int = 500
    plateau_rtol: float = 1e-6
    loss_weights: tuple = (1.0, 1.0, 1.0)  # alpha, Z, u terms; unit per the loss definition

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        raw["loss_weights"] = tuple(raw.get("loss_weights", (1.0, 1.0, 1.0)))
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class FoldReport:
    held_out: str
    aad_rows: list            # evaluation.AadTable rows for the held-out fluid
    final_train_loss: float
    wall_time_s: float
    train_hashes: tuple = ()
    held_out_hash: str = ""
    checkpoint_extra: dict = field(default_factory=dict)


class Adam:
    """Adaptive-moment gradient descent, full batch, deterministic."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        out = {}
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = params[k] - self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
        return out


# ---------------------------------------------------------------------------
# Precomputed per-fluid training tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _FluidBatch:
    fluid_id: str
    molecule: mg.MoleculeGraph
    tr_col: np.ndarray        # (N, 1)
    rhor_col: np.ndarray      # (N, 1)
    tc_ratio: float           # tc_j / tc_o
    rhoc_ratio: float         # rhoc_o / rhoc_j
    t_col: np.ndarray         # (N, 1) kelvin
    rho_col: np.ndarray       # (N, 1) mol/L
    alpha_truth: np.ndarray   # (N, 1)
    z_truth: np.ndarray
    u_truth: np.ndarray


def _batches(corpus: Corpus, reference: Reference) -> list[_FluidBatch]:
    out = []
    for d in sorted(corpus.fluids, key=lambda d: d.fluid_id):
        if d.fluid is None or d.fluid.molecule is None:
            raise ValueError(f"{d.fluid_id}: training needs fluid identity and molecule")
        crit = d.fluid.crit
        t = np.array([pt.state.t for pt in d.points]).reshape(-1, 1)
        rho = np.array([pt.state.rho for pt in d.points]).reshape(-1, 1)
        out.append(_FluidBatch(
            fluid_id=d.fluid_id,
            molecule=d.fluid.molecule,
            tr_col=t / crit.tc,
            rhor_col=rho / crit.rhoc,
            tc_ratio=crit.tc / reference.model.tc,
            rhoc_ratio=reference.model.rhoc / crit.rhoc,
            t_col=t,
            rho_col=rho,
            alpha_truth=np.array([pt.truth.alpha_r for pt in d.points]).reshape(-1, 1),
            z_truth=np.array([pt.truth.z_r for pt in d.points]).reshape(-1, 1),
            u_truth=np.array([pt.truth.u_r for pt in d.points]).reshape(-1, 1),
        ))
    return out


def _similarities(params, reference_molecule, batches):
    r_o = mg.gnn_forward(reference_molecule, params)
    return {b.fluid_id: mg.similarity(r_o, mg.gnn_forward(b.molecule, params))
            for b in batches}


def _pretrain_loss(params, reference_molecule, batches):
    """Mean |theta - 1| + |phi - 1| over fluids and points."""
    sims = _similarities(params, reference_molecule, batches)
    total = 0.0
    for b in batches:
        theta, phi = trunk_forward(params, sims[b.fluid_id], b.tr_col, b.rhor_col)
        total = total + de.absolute(theta - 1.0).mean() + de.absolute(phi - 1.0).mean()
    return total / float(len(batches))


def _main_loss(params, reference: Reference, batches, weights=(1.0, 1.0, 1.0),
               monitor: dict | None = None):
    """Mean |d alpha| + |d Z| + |d u| of the ECS-transformed predictions."""
    sims = _similarities(params, _ref_molecule(reference), batches)
    bank = reference.model.eos.bank
    t_red_o = reference.model.eos.t_red
    rho_red_o = reference.model.eos.rho_red

    total = 0.0
    for b in batches:
        s = sims[b.fluid_id]
        dual_tr = trunk_forward(params, s,
                                de.DualScalar(b.tr_col, np.ones_like(b.tr_col)),
                                de.DualScalar(b.rhor_col, np.zeros_like(b.rhor_col)))
        dual_rho = trunk_forward(params, s,
                                 de.DualScalar(b.tr_col, np.zeros_like(b.tr_col)),
                                 de.DualScalar(b.rhor_col, np.ones_like(b.rhor_col)))
        theta, d_theta_tr = dual_tr[0].value, dual_tr[0].tangent
        phi, d_phi_tr = dual_tr[1].value, dual_tr[1].tangent
        d_theta_rhor = dual_rho[0].tangent
        d_phi_rhor = dual_rho[1].tangent

        if monitor is not None:
            monitor[b.fluid_id] = (float(np.min(de.value_of(theta))),
                                   float(np.min(de.value_of(phi))))

        big_f_t = b.tr_col * d_theta_tr / theta
        big_f_rho = b.rhor_col * d_theta_rhor / theta
        big_h_t = b.tr_col * d_phi_tr / phi
        big_h_rho = b.rhor_col * d_phi_rhor / phi

        f = b.tc_ratio * theta
        h = b.rhoc_ratio * phi
        tau_o = (t_red_o / b.t_col) * f
        delta_o = (b.rho_col / rho_red_o) * h
        alpha_o, a_tau, a_delta = alpha_r_parts(bank, tau_o, delta_o)
        u_o = tau_o * a_tau
        z_o = delta_o * a_delta

        z_j = u_o * big_f_rho + z_o * (1.0 + big_h_rho)
        u_j = u_o * (1.0 - big_f_t) - z_o * big_h_t

        fluid_loss = (weights[0] * de.absolute(alpha_o - b.alpha_truth).mean()
                      + weights[1] * de.absolute(z_j - b.z_truth).mean()
                      + weights[2] * de.absolute(u_j - b.u_truth).mean())
        total = total + fluid_loss
    return total / float(len(batches))


def _ref_molecule(reference: Reference) -> mg.MoleculeGraph:
    if reference.fluid.molecule is None:
        raise ValueError(f"{reference.fluid.id}: reference fluid needs a molecule graph")
    return reference.fluid.molecule


def _grid_deviation(model: NeuralShapeModel, batches) -> float:
    """Max |theta - 1|, |phi - 1| over the corpus grid (plain forward)."""
    worst = 0.0
    for b in batches:
        s = model.similarity_for_molecule(b.fluid_id, b.molecule)
        theta, phi = trunk_forward(model.params, s.reshape(1, -1), b.tr_col, b.rhor_col)
        worst = max(worst,
                    float(np.max(np.abs(theta - 1.0))),
                    float(np.max(np.abs(phi - 1.0))))
    return worst


# ---------------------------------------------------------------------------
# Training phases
# ---------------------------------------------------------------------------

PRETRAIN_WARMUP_CAP = 400


def pretrain(model: NeuralShapeModel, corpus: Corpus, config: TrainConfig,
             reference: Reference) -> NeuralShapeModel:
    """Drive theta, phi to 1 on the corpus grid (simple-CS anchor).

    Gradient epochs settle the nonlinear layers; the activation-free output
    head is then solved by variable projection.  For the constant unit target
    the head's least-squares optimum is the zero map with unit bias, which is
    an exact fixed point of the loss (every gradient vanishes there), so the
    pretrained model sits at loss 0 up to floating-point rounding.
    """
    batches = _batches(corpus, reference)
    ref_mol = _ref_molecule(reference)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2)

    warmup = min(config.pretrain_epochs, PRETRAIN_WARMUP_CAP)
    for epoch in range(warmup):
        grads = de.grad_params(lambda p: _pretrain_loss(p, ref_mol, batches), params)
        params = opt.step(params, grads)

    params["fcl2.w"] = np.zeros_like(params["fcl2.w"])
    params["fcl2.b"] = np.ones_like(params["fcl2.b"])

    model.set_params(params)
    deviation = _grid_deviation(model, batches)
    if deviation > config.pretrain_target:
        final = float(de.value_of(_pretrain_loss(params, ref_mol, batches)))
        raise ConvergenceFailure(
            f"pretraining left grid deviation {deviation:.3e} above target "
            f"{config.pretrain_target:.1e}", final_loss=final)
    return model


def train(model: NeuralShapeModel, corpus: Corpus, config: TrainConfig,
          reference: Reference, progress=None) -> NeuralShapeModel:
    """Main-loss minimization with monotone best-so-far checkpointing."""
    batches = _batches(corpus, reference)
    start_dev = _grid_deviation_safe(model, batches)
    if start_dev > 0.05:
        import warnings
        warnings.warn(
            f"initial shape factors deviate {start_dev:.3f} from 1; gradient descent "
            "risks walking away from the physical branch (pretrain first)",
            stacklevel=2)

    params = {k: v.copy() for k, v in model.params.items()}
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2)
    best_loss = np.inf
    best_params = params
    last_improvement = 0
    plateau_lr_drops = 0

    for epoch in range(config.main_epochs):
        monitor: dict = {}
        loss_node: list = []

        def forward(p):
            loss = _main_loss(p, reference, batches, config.loss_weights, monitor)
            loss_node.append(loss)
            return loss

        grads = de.grad_params(forward, params)
        loss = float(de.value_of(loss_node[0]))
        if not np.isfinite(loss):
            culprit = min(monitor, key=lambda k: min(monitor[k]))
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch} (worst fluid {culprit})")
        for fid, (min_theta, min_phi) in monitor.items():
            if min_theta <= 0.0 or min_phi <= 0.0:
                raise NonPositiveShapeFactorAbort(
                    f"{fid}: shape factors left the physical domain at epoch {epoch} "
                    f"(min theta {min_theta:.4f}, min phi {min_phi:.4f})")

        if loss < best_loss * (1.0 - config.plateau_rtol):
            best_loss = loss
            best_params = params
            last_improvement = epoch
        if best_loss < 1e-12:
            break
        if epoch - last_improvement >= config.plateau_epochs:
            if plateau_lr_drops < 4 and opt.lr > 1e-5:
                opt.lr *= 0.5
                plateau_lr_drops += 1
                last_improvement = epoch
            else:
                break
        if progress is not None and (epoch + 1) % 100 == 0:
            progress(epoch + 1, loss, best_loss)
        params = opt.step(params, grads)

    model.set_params({k: v.copy() for k, v in best_params.items()})
    model.final_loss = best_loss
    return model


def _grid_deviation_safe(model: NeuralShapeModel, batches) -> float:
    try:
        return _grid_deviation(model, batches)
    except Exception:
        return np.inf


def _fold_seed(base_seed: int, held_out: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{held_out}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def loocv(corpus: Corpus, config: TrainConfig, reference: Reference,
          holdable: Optional[list[str]] = None, progress=None,
          checkpoint_dir: Optional[Path] = None) -> list[FoldReport]:
    """One fold per held-out fluid: pretrain + train on the rest, evaluate on
    the held-out fluid.  Fold failures are recorded; remaining folds continue.

    Fold seeds derive from (seed, fluid id), so reports do not depend on fold
    execution order.  `holdable` restricts which fluids get their own fold.
    """
    from . import evaluation
    from .shapefactor import save_checkpoint

    if corpus.m < 2:
        raise ValueError("LOOCV needs at least two fluids")
    fold_ids = sorted(holdable) if holdable is not None else \
        sorted(d.fluid_id for d in corpus.fluids)
    reports: list[FoldReport] = []
    for held_out in fold_ids:
        t0 = time.time()
        train_sets = tuple(d for d in corpus.fluids if d.fluid_id != held_out)
        test_set = next(d for d in corpus.fluids if d.fluid_id == held_out)
        fold_corpus = Corpus(fluids=train_sets)
        seed = _fold_seed(config.seed, held_out)
        model = NeuralShapeModel.random(seed, reference.fluid.id, _ref_molecule(reference))
        extra = {"seed": seed, "fold_tag": f"loocv-{held_out}",
                 "config_echo": config.to_dict()}
        try:
            pretrain(model, fold_corpus, replace(config, seed=seed), reference)
            train(model, fold_corpus, replace(config, seed=seed), reference,
                  progress=progress)
            rows = evaluation.fold_rows(model, reference, test_set)
            if checkpoint_dir is not None:
                safe = held_out.replace("(", "_").replace(")", "")
                save_checkpoint(model, Path(checkpoint_dir) / f"loocv-{safe}.json",
                                extra=extra)
            reports.append(FoldReport(
                held_out=held_out,
                aad_rows=rows,
                final_train_loss=getattr(model, "final_loss", np.nan),
                wall_time_s=time.time() - t0,
                train_hashes=tuple(dataset_hash(d) for d in train_sets),
                held_out_hash=dataset_hash(test_set),
                checkpoint_extra=extra,
            ))
        except (ConvergenceFailure, NonFiniteLoss, NonPositiveShapeFactorAbort) as err:
            reports.append(FoldReport(
                held_out=held_out, aad_rows=[],
                final_train_loss=np.nan, wall_time_s=time.time() - t0,
                checkpoint_extra={**extra, "error": str(err)},
            ))
    return reports


def finalize_full_model(corpus: Corpus, config: TrainConfig, reference: Reference,
                        progress=None) -> tuple[NeuralShapeModel, dict]:
    """Train on every fluid; returns the model plus checkpoint metadata."""
    from .dataset import corpus_hash

    model = NeuralShapeModel.random(config.seed, reference.fluid.id,
                                    _ref_molecule(reference))
    pretrain(model, corpus, config, reference)
    train(model, corpus, config, reference, progress=progress)
    extra = {
        "seed": config.seed,
        "config_echo": config.to_dict(),
        "corpus_hash": corpus_hash(corpus),
        "fold_tag": "full-data",
    }
    return model, extra
