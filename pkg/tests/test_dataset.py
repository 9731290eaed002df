import numpy as np
import pytest

from ecslab import dataset as ds
from ecslab import equilibrium as eq
from ecslab.core import CriticalParameters, Fluid, Phase, ResidualSet, StatePoint


class TestPressureWalk:
    def test_subcritical_fine_sequence(self):
        walk = ds._pressure_walk(pc=3.761, t_is_supercritical=False, pmax_model=50.0)
        assert walk[:3] == [0.1, 0.3, 0.5]
        fine = [p for p in walk if p < 3.761]
        assert np.allclose(np.diff(fine), 0.2)

    def test_liquid_coarse_step_depends_on_cap(self):
        capped = ds._pressure_walk(pc=3.3822, t_is_supercritical=False, pmax_model=30.0)
        assert max(capped) <= 30.0
        coarse = np.diff([p for p in capped if p > 4.0])
        assert np.allclose(coarse, 3.0)
        full = ds._pressure_walk(pc=3.3822, t_is_supercritical=False, pmax_model=100.0)
        assert max(full) <= 50.0
        assert np.allclose(np.diff([p for p in full if p > 4.0]), 6.0)

    def test_supercritical_caps_at_five_pc(self):
        walk = ds._pressure_walk(pc=4.2512, t_is_supercritical=True, pmax_model=1000.0)
        assert max(walk) <= 5 * 4.2512
        assert np.allclose(np.diff([p for p in walk if p > 5.0]), 2.0)


class TestGenerateGrid:
    def test_temperature_lattice_anchored_at_seven_tenths(self, corpus4, registry):
        for dset in corpus4:
            tc = registry[dset.fluid_id].crit.tc
            temps = sorted({pt.state.t for pt in dset.points})
            assert temps[0] == pytest.approx(0.7 * tc, abs=1e-9)
            assert np.allclose(np.diff(temps), 10.0)
            assert temps[-1] <= 1.1 * tc + 1e-9

    def test_point_counts_near_paper_figure(self, corpus4):
        # approximately 430 state points per fluid
        for dset in corpus4:
            assert 430 - 65 <= len(dset) <= 430 + 65, (dset.fluid_id, len(dset))

    def test_phase_labels_respect_saturation(self, corpus4, truth_models):
        for dset in corpus4:
            model = truth_models[dset.fluid_id]
            tc = model.tc
            psat_cache = {}
            for pt in dset.points:
                st = pt.state
                if st.t >= tc:
                    assert st.phase is Phase.SUPERCRITICAL
                    continue
                if st.t not in psat_cache:
                    psat_cache[st.t] = eq.saturation_solve(model, st.t).psat
                expected = Phase.LIQUID if st.p > psat_cache[st.t] else Phase.VAPOR
                assert st.phase is expected, (dset.fluid_id, st)

    def test_determinism(self, registry, truth_models, ref_grid):
        again = ds.generate_grid(registry["R1234ze(E)"], truth_models["R1234ze(E)"])
        assert ds.dataset_hash(again) == ds.dataset_hash(ref_grid)

    def test_missing_pc_rejected(self, truth_models):
        bare = Fluid(id="bare", family="HC", crit=CriticalParameters(tc=369.89, rhoc=5.0))
        with pytest.raises(ValueError, match="critical pressure"):
            ds.generate_grid(bare, truth_models["propane"])


class TestCsvRoundTrip:
    def test_export_ingest_round_trip(self, ref_grid, registry, tmp_path):
        path = tmp_path / "ze.csv"
        ds.export_csv(ref_grid, path)
        back = ds.ingest_csv(path, registry)
        assert back.provenance == "ingested"
        assert len(back) == len(ref_grid)
        original = sorted(ref_grid.points, key=lambda pt: (pt.state.t, pt.state.p))
        for mine, theirs in zip(original, back.points):
            assert mine.state == theirs.state
            assert mine.truth.alpha_r == theirs.truth.alpha_r
            assert mine.truth.z_r == theirs.truth.z_r
            assert mine.truth.u_r == theirs.truth.u_r

    def test_export_is_byte_stable(self, ref_grid, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        ds.export_csv(ref_grid, a)
        ds.export_csv(ref_grid, b)
        assert a.read_bytes() == b.read_bytes()

    def test_small_wellformed_file(self, tmp_path):
        path = tmp_path / "mini.csv"
        rows = ["fluid_id,T_K,rho_molL,P_MPa,phase,alpha_r,Z_r,u_r,s_r,h_r"]
        for k in range(3):
            alpha, z, u = -1.0 - k, -0.2, -2.0
            rows.append(f"X,{300+k},5.0,1.0,liquid,{alpha},{z},{u},{u-alpha},{u+z}")
        path.write_text("\n".join(rows) + "\n")
        out = ds.ingest_csv(path)
        assert len(out) == 3 and out.fluid_id == "X"

    def test_identity_violating_row_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        good = "X,300.0,5.0,1.0,liquid,-1.0,-0.2,-2.0,-1.0,-2.2"
        bad = "X,310.0,5.0,1.0,liquid,-1.0,-0.2,-2.0,-1.0,-2.3"   # h off by 0.1
        header = "fluid_id,T_K,rho_molL,P_MPa,phase,alpha_r,Z_r,u_r,s_r,h_r"
        path.write_text("\n".join([header, good, bad]) + "\n")
        out = ds.ingest_csv(path)
        assert len(out) == 1
        assert len(out.rejected_rows) == 1
        assert "identities" in str(out.rejected_rows[0])

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "schema.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ds.SchemaError, match="header"):
            ds.ingest_csv(path)

    def test_mixed_fluids_rejected(self, tmp_path):
        header = "fluid_id,T_K,rho_molL,P_MPa,phase,alpha_r,Z_r,u_r,s_r,h_r"
        r1 = "A,300.0,5.0,1.0,liquid,-1.0,-0.2,-2.0,-1.0,-2.2"
        r2 = "B,300.0,5.0,1.0,liquid,-1.0,-0.2,-2.0,-1.0,-2.2"
        path = tmp_path / "mixed.csv"
        path.write_text("\n".join([header, r1, r2]) + "\n")
        with pytest.raises(ds.SchemaError, match="single fluid"):
            ds.ingest_csv(path)

    def test_experimental_schema(self, tmp_path):
        path = tmp_path / "exp.csv"
        path.write_text("fluid_id,T_K,P_MPa,rho_molL_exp\nR1132(E),300.0,1.0,9.5\n")
        points = ds.ingest_experimental_csv(path)
        assert points[0].rho_exp == 9.5


class TestNearCriticalFilter:
    def make_dataset(self, registry):
        crit = registry["propane"].crit
        points = []
        for t_fac, rho_fac in [(1.0, 1.0), (0.9, 1.0), (1.0, 2.0), (1.01, 1.1), (0.7, 0.2)]:
            st = StatePoint(t=t_fac * crit.tc, rho=rho_fac * crit.rhoc, p=1.0,
                            phase=Phase.SUPERCRITICAL if t_fac >= 1.0 else Phase.LIQUID)
            points.append(ds.DataPoint(state=st, truth=ResidualSet(-1.0, -0.2, -2.0)))
        return ds.FluidDataset(fluid_id="propane", points=tuple(points),
                               provenance="generated", fluid=registry["propane"])

    def test_zero_bands_identity(self, registry):
        dset = self.make_dataset(registry)
        assert len(ds.near_critical_filter(dset, 0.0, 0.0)) == len(dset)

    def test_critical_point_removed(self, registry):
        dset = self.make_dataset(registry)
        filtered = ds.near_critical_filter(dset, 0.02, 0.30)
        crit = registry["propane"].crit
        assert all(not (abs(pt.state.t / crit.tc - 1) < 0.02
                        and abs(pt.state.rho / crit.rhoc - 1) < 0.30)
                   for pt in filtered.points)
        assert len(filtered) == len(dset) - 2  # (1.0, 1.0) and (1.01, 1.1)

    def test_removal_count_matches_brute_force(self, ref_grid, registry):
        filtered = ds.near_critical_filter(ref_grid, 0.05, 0.5)
        crit = registry["R1234ze(E)"].crit
        removed = 0
        for pt in ref_grid.points:
            if abs(pt.state.t / crit.tc - 1.0) < 0.05 and abs(pt.state.rho / crit.rhoc - 1.0) < 0.5:
                removed += 1
        assert len(ref_grid) - len(filtered) == removed
        assert removed > 0


class TestCorpus:
    def test_duplicate_ids_rejected(self, ref_grid):
        with pytest.raises(ValueError, match="duplicate"):
            ds.Corpus(fluids=(ref_grid, ref_grid))

    def test_hash_is_order_insensitive(self, corpus4):
        reordered = ds.Corpus(fluids=tuple(reversed(corpus4.fluids)))
        assert ds.corpus_hash(corpus4) == ds.corpus_hash(reordered)
