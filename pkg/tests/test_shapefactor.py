import numpy as np
import pytest

from ecslab import shapefactor as sf
from ecslab.core import CriticalParameters, Fluid
from ecslab.ecs import EcsModel
from ecslab.equilibrium import saturation_solve
from ecslab.molgraph import parse_molecule

from oracles import fd_central


class TestIdentityEval:
    @pytest.mark.parametrize("tr, rhor", [(0.8, 2.5), (1.0, 1.0), (3.7, 0.01)])
    def test_constant_unit_output(self, tr, rhor):
        ev = sf.identity_eval(tr, rhor)
        assert ev.theta == 1.0 and ev.phi == 1.0
        assert ev.d_theta_d_tr == 0.0 and ev.d_phi_d_rhor == 0.0


class TestHuberElyEval:
    def test_zero_omega_difference_is_identity(self):
        ev = sf.huber_ely_eval(sf.REFIT_THIS_WORK, 0.3, 0.3, 0.26, 0.26, 0.85)
        assert ev.theta == 1.0
        assert ev.phi == 1.0

    def test_this_work_parameters_at_unit_tr(self):
        ev = sf.huber_ely_eval(sf.REFIT_THIS_WORK, 0.4, 0.3, 0.26, 0.26, 1.0)
        assert ev.theta == pytest.approx(1.003458966, abs=1e-12)
        assert ev.phi == pytest.approx(0.979005596, abs=1e-12)

    def test_huber_ely_1994_parameters_at_unit_tr(self):
        ev = sf.huber_ely_eval(sf.HUBER_ELY_1994, 0.4, 0.3, 0.26, 0.26, 1.0)
        assert ev.theta == pytest.approx(1.0086853583565, abs=1e-12)

    def test_density_derivatives_identically_zero(self):
        rng = np.random.default_rng(20)
        for _ in range(30):
            tr = float(rng.uniform(0.5, 1.4))
            ev = sf.huber_ely_eval(sf.TERAISHI_2021, 0.35, 0.28, 0.25, 0.27, tr)
            assert ev.d_theta_d_rhor == 0.0
            assert ev.d_phi_d_rhor == 0.0

    def test_temperature_derivatives_match_fd(self):
        params = sf.REFIT_THIS_WORK
        for tr in (0.7, 0.9, 1.1):
            ev = sf.huber_ely_eval(params, 0.42, 0.313, 0.24, 0.266, tr)
            fd_theta = fd_central(lambda x: float(np.asarray(
                sf.huber_ely_eval(params, 0.42, 0.313, 0.24, 0.266, x).theta)), tr)
            fd_phi = fd_central(lambda x: float(np.asarray(
                sf.huber_ely_eval(params, 0.42, 0.313, 0.24, 0.266, x).phi)), tr)
            assert ev.d_theta_d_tr == pytest.approx(fd_theta, rel=1e-7)
            assert ev.d_phi_d_tr == pytest.approx(fd_phi, rel=1e-7)

    def test_missing_pc_fails_fast(self, registry):
        model = sf.HuberElyShapeModel(sf.REFIT_THIS_WORK, registry["R1234ze(E)"].crit)
        bare = Fluid(id="bare", family="HFC",
                     crit=CriticalParameters(tc=300.0, rhoc=5.0))
        with pytest.raises(sf.MissingCriticalPressure):
            model.evaluate(bare, 0.8, 1.0)


@pytest.fixture()
def zero_head_model(registry):
    model = sf.NeuralShapeModel.random(5, "R1234ze(E)", registry["R1234ze(E)"].molecule)
    params = dict(model.params)
    params["fcl2.w"] = np.zeros_like(params["fcl2.w"])
    params["fcl2.b"] = np.array([1.0, 1.0])
    model.set_params(params)
    return model


class TestNeuralEval:
    def test_zero_head_gives_unit_factors(self, zero_head_model, registry):
        rng = np.random.default_rng(21)
        for _ in range(10):
            ev = zero_head_model.evaluate(registry["propane"],
                                          float(rng.uniform(0.6, 1.3)),
                                          float(rng.uniform(0.01, 3.0)))
            assert ev.theta == 1.0 and ev.phi == 1.0
            assert ev.d_theta_d_tr == 0.0 and ev.d_phi_d_rhor == 0.0

    def test_state_derivatives_match_fd(self, registry):
        model = sf.NeuralShapeModel.random(6, "R1234ze(E)", registry["R1234ze(E)"].molecule)
        params = dict(model.params)
        params["fcl2.w"] = params["fcl2.w"] * 0.05
        params["fcl2.b"] = np.array([1.0, 1.0])
        model.set_params(params)
        s = model.similarity_for(registry["R143a"])
        rng = np.random.default_rng(22)
        for _ in range(20):
            tr = float(rng.uniform(0.6, 1.3))
            rhor = float(rng.uniform(0.05, 3.0))
            ev = sf.neural_eval(model.params, s, tr, rhor)
            for attr, axis in [("d_theta_d_tr", 0), ("d_theta_d_rhor", 1),
                               ("d_phi_d_tr", 0), ("d_phi_d_rhor", 1)]:
                which = 0 if "theta" in attr else 1
                def value(x):
                    point = (x, rhor) if axis == 0 else (tr, x)
                    out = sf.neural_eval(model.params, s, *point)
                    return float((out.theta, out.phi)[which])
                fd = fd_central(value, (tr, rhor)[axis])
                assert float(getattr(ev, attr)) == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_zero_similarity_kills_fluid_dependence(self, registry):
        model = sf.NeuralShapeModel.random(7, "R1234ze(E)", registry["R1234ze(E)"].molecule)
        params = dict(model.params)
        params["fcl2.w"] = params["fcl2.w"] * 0.05
        params["fcl2.b"] = np.array([1.0, 1.0])
        model.set_params(params)
        s0 = np.zeros(16)
        base = sf.neural_eval(model.params, s0, 0.85, 1.2)
        # rewire the gated half of the head: with s = 0 nothing may change
        params2 = dict(model.params)
        params2["fcl2.w"] = params2["fcl2.w"].copy()
        params2["fcl2.w"][:, sf.TRUNK_HALF:] = 99.0
        shifted = sf.neural_eval(params2, s0, 0.85, 1.2)
        assert base.theta == shifted.theta
        assert base.phi == shifted.phi

    def test_non_positive_factors_reported_with_state(self, registry):
        model = sf.NeuralShapeModel.random(5, "R1234ze(E)", registry["R1234ze(E)"].molecule)
        params = dict(model.params)
        params["fcl2.w"] = np.zeros_like(params["fcl2.w"])
        params["fcl2.b"] = np.array([-1.0, 1.0])
        with pytest.raises(sf.NonPositiveShapeFactor, match="tr="):
            sf.neural_eval(params, np.zeros(16), 0.8, 1.0)

    def test_batch_evaluation_matches_pointwise(self, zero_head_model, registry):
        s = zero_head_model.similarity_for(registry["R1234yf"])
        tr = np.array([0.7, 0.9, 1.1])
        rhor = np.array([0.3, 1.0, 2.4])
        batch = sf.neural_eval(zero_head_model.params, s, tr, rhor)
        for k in range(3):
            single = sf.neural_eval(zero_head_model.params, s, float(tr[k]), float(rhor[k]))
            assert batch.theta[k] == single.theta


class TestCheckpoint:
    def test_round_trip_bit_exact(self, registry, tmp_path):
        model = sf.NeuralShapeModel.random(9, "R1234ze(E)", registry["R1234ze(E)"].molecule)
        path = tmp_path / "ckpt.json"
        sf.save_checkpoint(model, path, extra={"seed": 9, "fold_tag": "full-data"})
        loaded, meta = sf.load_checkpoint(path)
        assert meta["seed"] == 9 and meta["fold_tag"] == "full-data"
        assert set(loaded.params) == set(model.params)
        for key in model.params:
            assert np.array_equal(loaded.params[key], model.params[key]), key
        assert loaded.reference_fluid_id == "R1234ze(E)"

    def test_wrong_version_rejected(self, registry, tmp_path):
        import json
        model = sf.NeuralShapeModel.random(9, "R1234ze(E)", registry["R1234ze(E)"].molecule)
        path = tmp_path / "ckpt.json"
        sf.save_checkpoint(model, path)
        raw = json.loads(path.read_text())
        raw["format_version"] = 99
        path.write_text(json.dumps(raw))
        with pytest.raises(ValueError, match="version"):
            sf.load_checkpoint(path)


def synthetic_huber_ely_fluid(reference, params, fluid_id="syn", omega=0.42,
                              tc=355.0, rhoc=4.8, pc=3.4):
    crit = CriticalParameters(tc=tc, rhoc=rhoc, pc=pc, omega=omega)
    fluid = Fluid(id=fluid_id, family="HFC", crit=crit, molecule=parse_molecule("CC(F)F"))
    truth = EcsModel(reference, fluid, sf.HuberElyShapeModel(params, reference.fluid.crit))
    return fluid, truth


def saturation_points(truth, fluid, n=10):
    out = []
    for tr in np.linspace(0.705, 0.945, n):
        sat = saturation_solve(truth, float(tr * fluid.crit.tc))
        out.append(sf.SaturationPoint(t=sat.t, psat=sat.psat, rho_liq=sat.rho_liq))
    return out


class TestHuberElyFitting:
    def test_plant_and_recover(self, reference):
        planted = sf.HuberElyParams(0.05, -0.5, -0.15, 0.12)
        fluid, truth = synthetic_huber_ely_fluid(reference, planted)
        points = saturation_points(truth, fluid)
        recovered = sf.fit_huber_ely_fluid_specific(reference, fluid, points)
        assert np.allclose(recovered.as_array(), planted.as_array(), atol=1e-4)

    def test_self_fit_unidentifiable(self, reference):
        fluid = Fluid(id="clone", family="HFO", crit=reference.fluid.crit,
                      molecule=reference.fluid.molecule)
        points = [sf.SaturationPoint(t=0.7 * fluid.crit.tc + i, psat=1.0, rho_liq=10.0)
                  for i in range(10)] + [
                  sf.SaturationPoint(t=0.94 * fluid.crit.tc, psat=2.0, rho_liq=9.0)]
        with pytest.raises(sf.UnidentifiableParameters):
            sf.fit_huber_ely_fluid_specific(reference, fluid, points)

    def test_duplicate_points_idempotent(self, reference):
        planted = sf.HuberElyParams(0.03, -0.6, -0.2, 0.15)
        fluid, truth = synthetic_huber_ely_fluid(reference, planted, omega=0.40)
        points = saturation_points(truth, fluid, n=9)
        clean = sf.fit_huber_ely_fluid_specific(reference, fluid, points)
        doubled = sf.fit_huber_ely_fluid_specific(reference, fluid, points + points)
        assert np.array_equal(clean.as_array(), doubled.as_array())

    def test_insufficient_data_rejected(self, reference):
        planted = sf.HuberElyParams(0.05, -0.5, -0.15, 0.12)
        fluid, truth = synthetic_huber_ely_fluid(reference, planted)
        points = saturation_points(truth, fluid)[:5]
        with pytest.raises(ValueError, match=">= 8"):
            sf.fit_huber_ely_fluid_specific(reference, fluid, points)


class TestHuberElyUniversalFit:
    def test_singleton_pool_matches_fluid_specific(self, reference):
        planted = sf.HuberElyParams(0.04, -0.55, -0.18, 0.14)
        fluid, truth = synthetic_huber_ely_fluid(reference, planted)
        points = saturation_points(truth, fluid, n=9)
        single = sf.fit_huber_ely_fluid_specific(reference, fluid, points)
        pooled = sf.fit_huber_ely_universal(reference, [(fluid, points)])
        assert np.array_equal(single.as_array(), pooled.as_array())

    def test_shared_truth_recovered(self, reference):
        planted = sf.HuberElyParams(0.05, -0.5, -0.15, 0.12)
        fluid_a, truth_a = synthetic_huber_ely_fluid(reference, planted, "syn-a",
                                                     omega=0.40, tc=350.0, rhoc=4.6)
        fluid_b, truth_b = synthetic_huber_ely_fluid(reference, planted, "syn-b",
                                                     omega=0.45, tc=365.0, rhoc=5.1)
        dataset = [(fluid_a, saturation_points(truth_a, fluid_a, n=9)),
                   (fluid_b, saturation_points(truth_b, fluid_b, n=9))]
        recovered = sf.fit_huber_ely_universal(reference, dataset)
        assert np.allclose(recovered.as_array(), planted.as_array(), atol=1e-4)

    def test_conflicting_truths_land_between(self, reference):
        low = sf.HuberElyParams(0.02, -0.45, -0.10, 0.10)
        high = sf.HuberElyParams(0.06, -0.65, -0.25, 0.18)
        fluid_a, truth_a = synthetic_huber_ely_fluid(reference, low, "syn-lo",
                                                     omega=0.40, tc=350.0, rhoc=4.6)
        fluid_b, truth_b = synthetic_huber_ely_fluid(reference, high, "syn-hi",
                                                     omega=0.45, tc=365.0, rhoc=5.1)
        dataset = [(fluid_a, saturation_points(truth_a, fluid_a, n=9)),
                   (fluid_b, saturation_points(truth_b, fluid_b, n=9))]
        fitted = sf.fit_huber_ely_universal(reference, dataset)
        lo = np.minimum(low.as_array(), high.as_array()) - 5e-3
        hi = np.maximum(low.as_array(), high.as_array()) + 5e-3
        assert np.all(fitted.as_array() >= lo) and np.all(fitted.as_array() <= hi)
