import numpy as np
import pytest

from ecslab import dataset as ds
from ecslab import diffengine as de
from ecslab import shapefactor as sf
from ecslab import training as tr
from ecslab.core import Fluid

from oracles import directional_fd


@pytest.fixture(scope="module")
def small_corpus(ref_grid):
    return ds.Corpus(fluids=(ref_grid,))


@pytest.fixture(scope="module")
def twin_corpus(ref_grid, registry):
    """Two ids carrying identical reference data (exchangeability checks)."""
    ref_fluid = registry["R1234ze(E)"]
    clone_fluid = Fluid(id="clone", family="HFO", crit=ref_fluid.crit,
                        molecule=ref_fluid.molecule)
    clone = ds.FluidDataset(fluid_id="clone", points=ref_grid.points,
                            provenance="generated", fluid=clone_fluid)
    return ds.Corpus(fluids=(ref_grid, clone))


def quick_config(**overrides):
    base = dict(seed=3, pretrain_epochs=120, main_epochs=150, plateau_epochs=60)
    base.update(overrides)
    return tr.TrainConfig(**base)


class TestTrainConfig:
    def test_rejects_nonpositive_learning_rate(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(learning_rate=0.0)

    def test_json_round_trip(self, tmp_path):
        import json
        cfg = tr.TrainConfig(seed=9, learning_rate=2e-3)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert tr.TrainConfig.from_json(path) == cfg


class TestPretrain:
    def test_exact_head_has_zero_loss(self, small_corpus, reference):
        model = sf.NeuralShapeModel.random(1, "R1234ze(E)", reference.fluid.molecule)
        params = dict(model.params)
        params["fcl2.w"] = np.zeros_like(params["fcl2.w"])
        params["fcl2.b"] = np.array([1.0, 1.0])
        batches = tr._batches(small_corpus, reference)
        loss = float(de.value_of(tr._pretrain_loss(params, reference.fluid.molecule, batches)))
        assert loss == 0.0

    def test_random_init_reaches_unit_output(self, small_corpus, reference):
        model = sf.NeuralShapeModel.random(17, "R1234ze(E)", reference.fluid.molecule)
        tr.pretrain(model, small_corpus, quick_config(), reference)
        batches = tr._batches(small_corpus, reference)
        assert tr._grid_deviation(model, batches) <= 1e-3

    def test_deterministic_given_seed(self, small_corpus, reference):
        results = []
        for _ in range(2):
            model = sf.NeuralShapeModel.random(23, "R1234ze(E)", reference.fluid.molecule)
            tr.pretrain(model, small_corpus, quick_config(), reference)
            results.append(model.params)
        for key in results[0]:
            assert np.array_equal(results[0][key], results[1][key]), key


class TestMainLoss:
    def test_zero_at_exact_truth(self, small_corpus, reference):
        # pretrained model on the reference-only corpus IS the truth oracle
        model = sf.NeuralShapeModel.random(2, "R1234ze(E)", reference.fluid.molecule)
        params = dict(model.params)
        params["fcl2.w"] = np.zeros_like(params["fcl2.w"])
        params["fcl2.b"] = np.array([1.0, 1.0])
        batches = tr._batches(small_corpus, reference)
        loss = float(de.value_of(tr._main_loss(params, reference, batches)))
        assert loss <= 1e-12

    def test_invariant_under_fluid_reordering(self, twin_corpus, reference):
        model = sf.NeuralShapeModel.random(4, "R1234ze(E)", reference.fluid.molecule)
        params = dict(model.params)
        params["fcl2.w"] = params["fcl2.w"] * 0.02
        params["fcl2.b"] = np.array([1.0, 1.0])
        forward = ds.Corpus(fluids=twin_corpus.fluids)
        backward = ds.Corpus(fluids=tuple(reversed(twin_corpus.fluids)))
        loss_f = float(de.value_of(tr._main_loss(params, reference, tr._batches(forward, reference))))
        loss_b = float(de.value_of(tr._main_loss(params, reference, tr._batches(backward, reference))))
        assert loss_f == loss_b

    def test_gradient_matches_directional_fd(self, small_corpus, reference):
        model = sf.NeuralShapeModel.random(11, "R1234ze(E)", reference.fluid.molecule)
        params = dict(model.params)
        params["fcl2.w"] = params["fcl2.w"] * 0.02
        params["fcl2.b"] = np.array([1.0, 1.0])
        batches = tr._batches(small_corpus, reference)
        grads = de.grad_params(lambda p: tr._main_loss(p, reference, batches), params)

        def loss_value(p):
            return float(de.value_of(tr._main_loss(p, reference, batches)))

        rng = np.random.default_rng(5)
        for _ in range(10):
            direction = {k: rng.normal(size=v.shape) for k, v in params.items()}
            norm = np.sqrt(sum(np.sum(d * d) for d in direction.values()))
            direction = {k: v / norm for k, v in direction.items()}
            fd = directional_fd(loss_value, params, direction)
            analytic = sum(np.sum(grads[k] * direction[k]) for k in params)
            assert analytic == pytest.approx(fd, rel=1e-4)


class TestTrain:
    def test_reference_only_corpus_reaches_identity_solution(self, small_corpus, reference):
        model = sf.NeuralShapeModel.random(3, "R1234ze(E)", reference.fluid.molecule)
        cfg = quick_config()
        tr.pretrain(model, small_corpus, cfg, reference)
        tr.train(model, small_corpus, cfg, reference)
        assert model.final_loss <= 1e-3

    def test_unpretrained_start_warns(self, small_corpus, reference):
        model = sf.NeuralShapeModel.random(29, "R1234ze(E)", reference.fluid.molecule)
        with pytest.warns(UserWarning, match="pretrain"):
            try:
                tr.train(model, small_corpus, quick_config(main_epochs=3), reference)
            except (tr.NonFiniteLoss, tr.NonPositiveShapeFactorAbort):
                pass  # expected failure mode of an unanchored start


class TestLoocv:
    def test_fold_isolation_and_exchangeability(self, twin_corpus, reference):
        cfg = quick_config(main_epochs=40)
        reports = tr.loocv(twin_corpus, cfg, reference)
        assert {r.held_out for r in reports} == {"R1234ze(E)", "clone"}
        for report in reports:
            assert report.held_out_hash not in report.train_hashes
            assert report.aad_rows, report.checkpoint_extra.get("error")
            nn_rows = [row for row in report.aad_rows if row["model"] == "nn-ecs"]
            # identical twin held out: in-sample solution transfers exactly
            assert all(row["aad_pct"] < 0.1 for row in nn_rows)

    def test_fold_order_independence(self, twin_corpus, reference):
        cfg = quick_config(main_epochs=40)
        first = tr.loocv(twin_corpus, cfg, reference, holdable=["clone"])
        both = tr.loocv(twin_corpus, cfg, reference)
        clone_a = first[0]
        clone_b = next(r for r in both if r.held_out == "clone")
        assert clone_a.final_train_loss == clone_b.final_train_loss
        assert clone_a.aad_rows == clone_b.aad_rows

    def test_single_fluid_corpus_rejected(self, small_corpus, reference):
        with pytest.raises(ValueError, match="two fluids"):
            tr.loocv(small_corpus, quick_config(), reference)


class TestFinalize:
    def test_checkpoint_metadata_and_round_trip(self, small_corpus, reference, tmp_path):
        cfg = quick_config(main_epochs=10)
        model, extra = tr.finalize_full_model(small_corpus, cfg, reference)
        assert extra["fold_tag"] == "full-data"
        assert extra["corpus_hash"] == ds.corpus_hash(small_corpus)
        path = tmp_path / "full.json"
        sf.save_checkpoint(model, path, extra=extra)
        loaded, meta = sf.load_checkpoint(path)
        assert meta["seed"] == cfg.seed
        for key in model.params:
            assert np.array_equal(loaded.params[key], model.params[key])

    def test_deterministic_given_seed(self, small_corpus, reference):
        cfg = quick_config(main_epochs=25)
        model_a, _ = tr.finalize_full_model(small_corpus, cfg, reference)
        model_b, _ = tr.finalize_full_model(small_corpus, cfg, reference)
        for key in model_a.params:
            assert np.array_equal(model_a.params[key], model_b.params[key]), key


class TestAdam:
    def test_step_is_deterministic(self):
        params = {"w": np.ones(4)}
        grads = {"w": np.full(4, 0.5)}
        opt_a = tr.Adam(params, 1e-3)
        opt_b = tr.Adam(params, 1e-3)
        assert np.array_equal(opt_a.step(params, grads)["w"], opt_b.step(params, grads)["w"])
