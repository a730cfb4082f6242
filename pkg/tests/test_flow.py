"""Grid flow driver: initial data, stepping, engines, monitoring, blow-up."""

import csv
import os

import numpy as np
import pytest

from akflow.errors import BlowUpDetected, ConfigError
from akflow.flow import (
    GridSpec,
    GridState,
    MONITOR_COLUMNS,
    flat_state,
    make_initial_data,
    project_compatible,
    resolve_engine,
    rk4_step,
    run,
    standard_complex_structure,
    standard_two_form,
    tendency,
    worker_count,
)
from akflow.grid import read_snapshot


def small_spec(m=8):
    return GridSpec(dim=4, points_per_axis=m)


def read_monitor_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


class TestStandardStructures:
    def test_complex_structure(self):
        for dim in (4, 6):
            j = standard_complex_structure(dim)
            assert np.array_equal(j @ j, -np.eye(dim))
            assert np.array_equal(j, -j.T)

    def test_two_form_matches_j(self):
        for dim in (4, 6):
            j = standard_complex_structure(dim)
            w = standard_two_form(dim)
            assert np.array_equal(w, j.T @ np.eye(dim))
            assert np.array_equal(w, -w.T)


class TestInitialData:
    def test_flat_state_is_exact(self):
        st = flat_state(small_spec())
        d = st.drift_metrics()
        assert d["sup_domega"] == 0.0
        assert d["sup_j2_defect"] == 0.0
        assert d["sup_compat_defect"] == 0.0

    def test_generators_satisfy_constraints(self):
        for generator in ("flat", "kahler", "almost_kahler"):
            st = make_initial_data(small_spec(), generator, amplitude=0.1, seed=3)
            d = st.drift_metrics()
            assert d["sup_domega"] < 1e-13, generator
            assert d["sup_j2_defect"] < 1e-13, generator
            assert d["sup_compat_defect"] < 1e-13, generator

    def test_zero_amplitude_is_flat(self):
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.0, seed=3)
        flat = flat_state(small_spec())
        assert np.array_equal(st.g, flat.g)
        assert np.array_equal(st.j, flat.j)

    def test_seed_determinism(self):
        a = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=7)
        b = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=7)
        c = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=8)
        assert np.array_equal(a.g, b.g)
        assert np.array_equal(a.j, b.j)
        assert not np.array_equal(a.g, c.g)

    def test_generators_differ(self):
        kahler = make_initial_data(small_spec(), "kahler", amplitude=0.1, seed=3)
        generic = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=3)
        assert not np.array_equal(kahler.g, generic.g)
        # Kahler data keeps J flat; generic data does not
        jflat = standard_complex_structure(4).reshape(4, 4, 1, 1, 1, 1)
        assert np.abs(kahler.j - jflat).max() < 1e-13
        assert np.abs(generic.j - jflat).max() > 1e-3

    def test_unknown_generator_rejected(self):
        with pytest.raises(ConfigError):
            make_initial_data(small_spec(), "random", amplitude=0.1, seed=3)


class TestTendency:
    def test_flat_is_fixed_point(self):
        td = tendency(flat_state(small_spec()), want_rm=True, engine="numpy")
        assert np.abs(td.dg).max() == 0.0
        assert np.abs(td.dj).max() == 0.0
        assert td.sup_rm == 0.0
        assert td.sup_dj2 == 0.0

    def test_tendencies_preserve_constraints_to_first_order(self):
        # d/dt(J^2) = dj J + J dj and the compatibility derivative vanish
        # pointwise for both flow modes: the constraint manifold is invariant.
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=3)
        for mode in ("scf", "ahcf"):
            td = tendency(st, mode=mode, want_rm=False, engine="numpy")
            j2_dot = np.einsum("ab...,bc...->ac...", td.dj, st.j) + np.einsum(
                "ab...,bc...->ac...", st.j, td.dj
            )
            assert np.abs(j2_dot).max() < 1e-12, mode
            compat_dot = (
                np.einsum("ai...,ab...,bj...->ij...", td.dj, st.g, st.j)
                + np.einsum("ai...,ab...,bj...->ij...", st.j, td.dg, st.j)
                + np.einsum("ai...,ab...,bj...->ij...", st.j, st.g, td.dj)
                - td.dg
            )
            assert np.abs(compat_dot).max() < 1e-12, mode

    def test_fused_engine_matches_numpy(self):
        pytest.importorskip("numba")
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=3)
        a = tendency(st, want_rm=True, engine="numpy")
        b = tendency(st, want_rm=True, engine="fused")
        scale = max(1.0, np.abs(a.dg).max())
        assert np.abs(a.dg - b.dg).max() < 1e-13 * scale
        assert np.abs(a.dj - b.dj).max() < 1e-13
        assert a.sup_rm == pytest.approx(b.sup_rm, rel=1e-12)

    def test_resolve_engine_rules(self):
        spec = small_spec()
        try:
            import numba  # noqa: F401

            expected = "fused"
        except ImportError:
            expected = "numpy"
        assert resolve_engine("auto", "scf", spec) == expected
        assert resolve_engine("auto", "ahcf", spec) == "numpy"
        spec6 = GridSpec(dim=6, points_per_axis=8)
        assert resolve_engine("auto", "scf", spec6) == "numpy"
        spec2 = GridSpec(dim=4, points_per_axis=8, stencil_order=2)
        assert resolve_engine("auto", "scf", spec2) == "numpy"
        assert resolve_engine("numpy", "scf", spec) == "numpy"
        with pytest.raises(ConfigError):
            resolve_engine("cuda", "scf", spec)


class TestStepping:
    def test_rk4_self_convergence_order(self):
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=3)
        dt = 2e-3

        def advance(nsteps):
            cur = st
            for _ in range(nsteps):
                cur = rk4_step(cur, dt / nsteps, engine="numpy")
            return cur

        s1, s2, s4 = advance(1), advance(2), advance(4)
        e12 = np.abs(s1.g - s2.g).max() + np.abs(s1.j - s2.j).max()
        e24 = np.abs(s2.g - s4.g).max() + np.abs(s2.j - s4.j).max()
        order = np.log2(e12 / e24)
        assert order > 3.5

    def test_projection_restores_constraints(self):
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.1, seed=3)
        rng = np.random.default_rng(5)
        g = st.g + 1e-3 * (lambda a: a + np.swapaxes(a, 0, 1))(
            rng.normal(size=st.g.shape)
        )
        j = st.j + 1e-3 * rng.normal(size=st.j.shape)
        dirty = GridState(spec=st.spec, g=g, j=j, t=st.t)
        assert dirty.drift_metrics()["sup_j2_defect"] > 1e-4
        clean = project_compatible(dirty)
        d = clean.drift_metrics()
        assert d["sup_j2_defect"] < 1e-12
        assert d["sup_compat_defect"] < 1e-12
        again = project_compatible(clean)
        assert np.abs(again.g - clean.g).max() < 1e-13
        assert np.abs(again.j - clean.j).max() < 1e-13


class TestRun:
    def test_monitor_records_and_files(self, tmp_path):
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.05, seed=3)
        out = os.path.join(tmp_path, "run")
        result = run(
            st,
            t_end=1.0,
            max_steps=4,
            fixed_dt=1e-5,
            monitor_every=2,
            snapshot_every=4,
            output_dir=out,
            diagnostics=False,
            engine="numpy",
        )
        assert result.steps == 4
        assert not result.blew_up
        steps = [rec.step for rec in result.records]
        assert steps == [0, 2, 4]
        assert all(rec.dt == 1e-5 for rec in result.records[1:])
        rows = read_monitor_csv(os.path.join(out, "monitors.csv"))
        assert [r["step"] for r in rows] == ["0", "2", "4"]
        assert list(rows[0]) == list(MONITOR_COLUMNS)
        # diagnostics disabled: sentinel values in the static-residual columns
        assert float(rows[0]["lambda_best"]) == 0.0
        assert float(rows[0]["res_static_p"]) == -1.0
        snap = os.path.join(out, "snap_000004_metric.bin")
        assert os.path.exists(snap)
        f = read_snapshot(snap)
        assert np.array_equal(f.data, result.state.g)
        snap_j = os.path.join(out, "snap_000004_complex.bin")
        assert np.array_equal(read_snapshot(snap_j).data, result.state.j)

    def test_diagnostics_columns_populated(self, tmp_path):
        st = make_initial_data(small_spec(), "kahler", amplitude=0.01, seed=3)
        result = run(
            st,
            t_end=1.0,
            max_steps=1,
            fixed_dt=1e-5,
            monitor_every=1,
            output_dir=os.path.join(tmp_path, "run"),
            diagnostics=True,
            engine="numpy",
        )
        rec = result.records[0]
        assert rec.res_static_p >= 0.0
        assert rec.res_weitzenbock >= 0.0
        assert rec.res_flow_consistency >= 0.0
        assert rec.res_wplus_defect >= 0.0  # 4d grid: real value, not sentinel

    def test_time_limit_reached_exactly(self, tmp_path):
        st = flat_state(small_spec())
        result = run(
            st,
            t_end=5e-5,
            max_steps=100,
            fixed_dt=1e-5,
            monitor_every=50,
            output_dir=os.path.join(tmp_path, "run"),
            diagnostics=False,
            engine="numpy",
        )
        assert result.steps == 5
        assert result.state.t == pytest.approx(5e-5, rel=1e-12)
        assert result.records[-1].step == 5  # final record forced at t_end

    def test_blow_up_detection(self, tmp_path):
        st = make_initial_data(small_spec(), "almost_kahler", amplitude=0.9, seed=3)
        out = os.path.join(tmp_path, "run")
        with pytest.raises(BlowUpDetected):
            run(
                st,
                t_end=1.0,
                max_steps=10,
                fixed_dt=1e-7,
                monitor_every=1,
                blowup_threshold=5.0,
                output_dir=out,
                diagnostics=False,
                engine="numpy",
            )
        rows = read_monitor_csv(os.path.join(out, "monitors.csv"))
        assert rows, "blow-up must still emit the offending record"
        values = [float(v) for v in rows[-1].values()]
        assert all(np.isfinite(values)), "no NaN may reach the monitor file"
        assert float(rows[-1]["sup_rm"]) > 5.0


class TestWorkerCount:
    def test_env_override(self, monkeypatch):
        monkeypatch.delenv("AKFLOW_THREADS", raising=False)
        assert worker_count() == 1
        monkeypatch.setenv("AKFLOW_THREADS", "4")
        assert worker_count() == 4

    def test_invalid_env_rejected(self, monkeypatch):
        monkeypatch.setenv("AKFLOW_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_count()
