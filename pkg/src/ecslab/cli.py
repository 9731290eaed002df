"""Command-line front end: dataset generation, training, prediction,
saturation queries, comparison reports, and the sensitivity study.

Exit codes: 0 success, 2 input error, 3 partial failure, 4 training failure,
5 solver failure.  Logs go to stderr; data to stdout or --out.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset as ds
from . import equilibrium, evaluation, helmholtz, training
from .core import (Fluid, Phase, SaturationUnavailable, builtin_registry_path,
                   classify_phase, load_registry)
from .cubic import MissingCriticalConstant, PrModel, PrPropertyModel
from .ecs import EcsModel, Reference
from .shapefactor import (HUBER_ELY_1994, REFIT_THIS_WORK, TERAISHI_2021,
                          HuberElyShapeModel, IdentityShapeModel, MissingCriticalPressure,
                          load_checkpoint, save_checkpoint)

log = logging.getLogger("ecslab")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PARTIAL = 3
EXIT_TRAINING = 4
EXIT_SOLVER = 5

BASELINE_PARAMS = {
    "huber-ely": REFIT_THIS_WORK,
    "huber-ely-1994": HUBER_ELY_1994,
    "teraishi": TERAISHI_2021,
}


@dataclass
class CliConfig:
    registry: Path
    coeff_dir: Path
    dataset_dir: Optional[Path]
    checkpoint: Optional[Path]
    reference: str
    seed: int
    jobs: int
    report_energy_at: str = "t_p"


def _seed_default() -> int:
    env = os.environ.get("ECSLAB_SEED")
    return int(env) if env else 0


def _build_config(args) -> CliConfig:
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    def pick(flag, key, default):
        if flag is not None:
            return flag
        return file_cfg.get(key, default)

    cfg = CliConfig(
        registry=Path(pick(args.registry, "registry", builtin_registry_path())),
        coeff_dir=Path(pick(args.coeff_dir, "coeff_dir", helmholtz.DATA_DIR)),
        dataset_dir=None,
        checkpoint=None,
        reference=pick(args.reference, "reference", "R1234ze(E)"),
        seed=int(pick(args.seed, "seed", _seed_default())),
        jobs=int(pick(args.jobs, "jobs", os.cpu_count() or 1)),
        report_energy_at=file_cfg.get("report_energy_at", "t_p"),
    )
    if not cfg.registry.exists():
        raise FileNotFoundError(f"registry file {cfg.registry} does not exist")
    if not cfg.coeff_dir.exists():
        raise FileNotFoundError(f"coefficient directory {cfg.coeff_dir} does not exist")
    return cfg


def _load_eos_for(cfg: CliConfig, fluid_id: str) -> helmholtz.HelmholtzModel:
    safe = fluid_id.replace("(", "_").replace(")", "").lower()
    path = cfg.coeff_dir / f"eos_{safe}.json"
    if not path.exists():
        raise FileNotFoundError(f"no coefficient file for {fluid_id!r} at {path}")
    return helmholtz.HelmholtzModel(helmholtz.load_eos(path))


def _reference(cfg: CliConfig, registry: dict[str, Fluid]) -> Reference:
    if cfg.reference not in registry:
        raise KeyError(f"reference fluid {cfg.reference!r} not in registry")
    return Reference(model=_load_eos_for(cfg, cfg.reference), fluid=registry[cfg.reference])


def _resolve_model(cfg: CliConfig, registry: dict[str, Fluid], name: str, fluid: Fluid):
    """Property model for a fluid from a baseline name or checkpoint path."""
    if name == "truth":
        return _load_eos_for(cfg, fluid.id)
    if name == "identity":
        return EcsModel(_reference(cfg, registry), fluid, IdentityShapeModel())
    if name == "pr":
        return PrPropertyModel(PrModel.from_crit(fluid.crit, fluid.id), fluid.id)
    if name in BASELINE_PARAMS:
        ref = _reference(cfg, registry)
        return EcsModel(ref, fluid, HuberElyShapeModel(BASELINE_PARAMS[name], ref.fluid.crit))
    path = Path(name)
    if path.exists():
        model, _meta = load_checkpoint(path)
        ref = _reference(cfg, registry)
        if model.reference_fluid_id != ref.fluid.id:
            raise ValueError(
                f"checkpoint reference {model.reference_fluid_id!r} != configured "
                f"reference {ref.fluid.id!r}")
        return EcsModel(ref, fluid, model)
    raise FileNotFoundError(
        f"model {name!r} is neither a baseline "
        f"({'|'.join(['truth', 'identity', 'pr', *BASELINE_PARAMS])}) nor a checkpoint path")


def _emit(payload: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
    else:
        print(payload)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: CliConfig, args) -> int:
    registry = load_registry(cfg.registry)
    if args.all:
        wanted = sorted(registry)
    else:
        if args.fluid not in registry:
            log.error("unknown fluid id %r", args.fluid)
            return EXIT_INPUT
        wanted = [args.fluid]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        models = {fid: _load_eos_for(cfg, fid) for fid in wanted}
    except FileNotFoundError as err:
        log.error("%s", err)
        return EXIT_INPUT

    def one(fid: str):
        grid = ds.generate_grid(registry[fid], models[fid])
        safe = fid.replace("(", "_").replace(")", "")
        ds.export_csv(grid, out_dir / f"{safe}.csv")
        return grid

    failures = 0
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        futures = [(fid, pool.submit(one, fid)) for fid in wanted]
        for fid, fut in futures:  # ordered collection keeps output deterministic
            try:
                grid = fut.result()
                print(f"fluid={fid} points={len(grid)} skipped={grid.skipped}")
            except Exception as err:
                failures += 1
                log.error("fluid=%s failed: %s", fid, err)
                print(f"fluid={fid} points=0 skipped=-1 error={type(err).__name__}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_train(cfg: CliConfig, args) -> int:
    registry = load_registry(cfg.registry)
    reference = _reference(cfg, registry)
    corpus = ds.ingest_corpus_dir(args.corpus, registry)
    tcfg = training.TrainConfig.from_json(args.train_config) if args.train_config \
        else training.TrainConfig()
    if args.seed is not None or cfg.seed:
        from dataclasses import replace
        tcfg = replace(tcfg, seed=cfg.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(epoch, loss, best):
        log.info("epoch %d: loss %.6e (best %.6e)", epoch, loss, best)

    try:
        if args.loocv:
            if corpus.m < 2:
                log.error("LOOCV needs at least two fluids, corpus has %d", corpus.m)
                return EXIT_INPUT
            reports = training.loocv(corpus, tcfg, reference, progress=progress,
                                     checkpoint_dir=out_dir)
            payload = [{"held_out": r.held_out, "aad_rows": r.aad_rows,
                        "final_train_loss": r.final_train_loss,
                        "wall_time_s": r.wall_time_s,
                        "error": r.checkpoint_extra.get("error")} for r in reports]
            (out_dir / "fold_reports.json").write_text(json.dumps(payload, indent=2),
                                                       encoding="utf-8")
            failed = [r.held_out for r in reports if "error" in r.checkpoint_extra]
            for r in reports:
                print(f"fold={r.held_out} loss={r.final_train_loss:.6e} "
                      f"wall_s={r.wall_time_s:.1f}"
                      + (f" error={r.checkpoint_extra['error']}" if "error" in r.checkpoint_extra else ""))
            return EXIT_PARTIAL if failed else EXIT_OK
        model, extra = training.finalize_full_model(corpus, tcfg, reference,
                                                    progress=progress)
        ckpt = out_dir / "full-data.json"
        save_checkpoint(model, ckpt, extra=extra)
        print(f"checkpoint={ckpt} loss={model.final_loss:.6e}")
        return EXIT_OK
    except (training.ConvergenceFailure, training.NonFiniteLoss,
            training.NonPositiveShapeFactorAbort) as err:
        log.error("training aborted: %s", err)
        return EXIT_TRAINING


def _model_phase(model, fluid: Fluid, t: float, p: float) -> Phase:
    def oracle(t_query: float) -> float:
        return equilibrium.saturation_solve(model, t_query).psat
    return classify_phase(fluid, t, p, oracle)


def cmd_predict(cfg: CliConfig, args) -> int:
    registry = load_registry(cfg.registry)
    if args.fluid not in registry:
        log.error("unknown fluid id %r", args.fluid)
        return EXIT_INPUT
    fluid = registry[args.fluid]
    try:
        model = _resolve_model(cfg, registry, args.model, fluid)
    except (FileNotFoundError, ValueError, KeyError, MissingCriticalConstant,
            MissingCriticalPressure) as err:
        log.error("%s", err)
        return EXIT_INPUT

    try:
        if args.rho is not None:
            rho = args.rho
            if rho == 0.0:
                payload = {"t": args.t, "p": 0.0, "rho": 0.0, "phase": "vapor",
                           "alpha_r": 0.0, "z_r": 0.0, "u_r": 0.0, "s_r": 0.0,
                           "h_r": 0.0, "g_r": 0.0}
                _emit(json.dumps(payload, sort_keys=True), args.out)
                return EXIT_OK
            p = float(model.pressure(args.t, rho))
            phase = _model_phase(model, fluid, args.t, p)
        else:
            p = args.p
            phase = _model_phase(model, fluid, args.t, p)
            rho = equilibrium.density_solve(model, args.t, p, phase)
        rs = model.residual_set(args.t, rho)
        payload = {"t": args.t, "p": p, "rho": float(rho), "phase": phase.value,
                   "alpha_r": float(rs.alpha_r), "z_r": float(rs.z_r),
                   "u_r": float(rs.u_r), "s_r": float(rs.s_r),
                   "h_r": float(rs.h_r), "g_r": float(rs.g_r)}
        _emit(json.dumps(payload, sort_keys=True), args.out)
        return EXIT_OK
    except (equilibrium.NoRootInBracket, equilibrium.MultipleRootsAmbiguous,
            equilibrium.ConvergenceFailure, equilibrium.TrivialRootCollapse,
            SaturationUnavailable) as err:
        log.error("solver failure: %s", err)
        return EXIT_SOLVER


def cmd_satp(cfg: CliConfig, args) -> int:
    registry = load_registry(cfg.registry)
    if args.fluid not in registry:
        log.error("unknown fluid id %r", args.fluid)
        return EXIT_INPUT
    fluid = registry[args.fluid]
    try:
        model = _resolve_model(cfg, registry, args.model, fluid)
    except (FileNotFoundError, ValueError, KeyError, MissingCriticalConstant,
            MissingCriticalPressure) as err:
        log.error("%s", err)
        return EXIT_INPUT
    try:
        sat = equilibrium.saturation_solve(model, args.t)
    except SaturationUnavailable as err:
        log.error("supercritical: %s", err)
        return EXIT_SOLVER
    except (equilibrium.ConvergenceFailure, equilibrium.TrivialRootCollapse,
            equilibrium.NoRootInBracket) as err:
        log.error("solver failure: %s", err)
        return EXIT_SOLVER
    payload = {"t": sat.t, "psat": sat.psat, "rho_liq": sat.rho_liq,
               "rho_vap": sat.rho_vap, "g_residual_gap": sat.g_residual_gap}
    _emit(json.dumps(payload, sort_keys=True), args.out)
    return EXIT_OK


def cmd_report(cfg: CliConfig, args) -> int:
    registry = load_registry(cfg.registry)
    corpus = ds.ingest_corpus_dir(args.corpus, registry)
    names = [m.strip() for m in args.models.split(",") if m.strip()]
    props = tuple(p.strip() for p in args.props.split(",")) if args.props \
        else ("density", "s_r", "h_r")

    factories = {}
    failures = 0
    for name in names:
        def factory(fluid, _name=name):
            return _resolve_model(cfg, registry, _name, fluid)
        factories[name] = factory

    try:
        table = evaluation.property_report(factories, corpus, properties=props,
                                           energy_at=cfg.report_energy_at)
    except (FileNotFoundError, KeyError, ValueError, MissingCriticalConstant,
            MissingCriticalPressure) as err:
        log.error("%s", err)
        return EXIT_INPUT
    print(table.render_text())
    if args.out:
        Path(args.out).write_text(table.to_json() + "\n", encoding="utf-8")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_sensitivity(cfg: CliConfig, args) -> int:
    registry = load_registry(cfg.registry)
    if args.fluid not in registry:
        log.error("unknown fluid id %r", args.fluid)
        return EXIT_INPUT
    fluid = registry[args.fluid]
    corpus = ds.ingest_corpus_dir(args.corpus, registry)
    dataset = next((d for d in corpus if d.fluid_id == args.fluid), None)
    if dataset is None:
        log.error("corpus has no dataset for %r", args.fluid)
        return EXIT_INPUT

    def factory(f: Fluid):
        return _resolve_model(cfg, registry, args.model, f)

    report = evaluation.critical_sensitivity(factory, fluid, dataset, args.delta)
    for row in report.rows:
        print(f"{row['property']:>8s} {row['phase']:>14s} {row['parameter']:>5s} "
              f"{row['mean_variation_pct']:10.4f}% (n={row['count']})")
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecslab",
                                     description="Residual-property prediction engine "
                                                 "for fluorinated refrigerants")
    parser.add_argument("--config", help="CLI config JSON; flags win over file values")
    parser.add_argument("--registry", help="fluid registry JSON path")
    parser.add_argument("--coeff-dir", help="directory of EOS coefficient files")
    parser.add_argument("--reference", help="reference fluid id (default R1234ze(E))")
    parser.add_argument("--seed", type=int, help="seed (fallback: ECSLAB_SEED env)")
    parser.add_argument("--jobs", type=int, help="worker pool size")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate truth dataset CSVs")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--fluid")
    group.add_argument("--all", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the neural shape-factor model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-config", dest="train_config")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--loocv", action="store_true")
    mode.add_argument("--full", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="single-state property query")
    p.add_argument("--model", required=True)
    p.add_argument("--fluid", required=True)
    p.add_argument("--t", type=float, required=True)
    state = p.add_mutually_exclusive_group(required=True)
    state.add_argument("--p", type=float)
    state.add_argument("--rho", type=float)
    p.add_argument("--out")

    p = sub.add_parser("satp", help="saturation state at T")
    p.add_argument("--model", required=True)
    p.add_argument("--fluid", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out")

    p = sub.add_parser("report", help="AAD comparison tables")
    p.add_argument("--models", required=True, help="comma-separated model names/paths")
    p.add_argument("--corpus", required=True)
    p.add_argument("--props")
    p.add_argument("--out")

    p = sub.add_parser("sensitivity", help="critical-parameter sensitivity study")
    p.add_argument("--model", required=True)
    p.add_argument("--fluid", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "satp": cmd_satp,
    "report": cmd_report,
    "sensitivity": cmd_sensitivity,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _build_config(args)
    except (FileNotFoundError, ValueError) as err:
        log.error("%s", err)
        return EXIT_INPUT
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
