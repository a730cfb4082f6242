"""Almost-Hermitian pointwise operators: connections, torsion, flow drivers."""

import numpy as np
import pytest

from exact_jets import (
    exterior_d_point,
    kahler_potential_jet,
    rotation_family_jet,
)

from akflow.errors import AkflowError, DegenerateForm
from akflow.flow import standard_complex_structure, standard_two_form
from akflow.geometry import christoffel, covariant_derivative
from akflow.hermitian import (
    ak_torsion_defect,
    canonical_connection,
    compatible_j_from_omega,
    dstar_d_omega,
    gauduchon_connection,
    hodge_laplacian_omega,
    induced_domega,
    induced_metric,
    nijenhuis,
    nijenhuis_divergence,
    nijenhuis_jet,
    omega_upper,
    pairing_form_from_endo,
    point_operators,
    symplectic_flow_rhs,
    torsion_11_part,
)
from akflow.homogeneous import exact_jet, get_preset
from akflow.tensor_point import antisymmetrize


def nilmanifold_jets():
    """Exact almost-Kahler jets with nonzero Nijenhuis tensor, off origin."""
    return (
        exact_jet(get_preset("kodaira_thurston"), np.array([0.4, -0.3, 0.2, 0.6])),
        exact_jet(
            get_preset("iwasawa6"), np.array([0.3, -0.2, 0.15, 0.4, -0.25, 0.1])
        ),
    )


class TestKahlerPotentialJet:
    """A potential-generated Kahler metric is the exact oracle for every
    'vanishes on Kahler' claim: DJ, N, B1, B2 all zero, P = rho_star = 2 rho."""

    def test_fixture_is_valid_and_curved(self):
        jet = kahler_potential_jet()
        d = 4
        assert np.abs(jet.j @ jet.j + np.eye(d)).max() < 1e-15
        assert np.abs(jet.j.T @ jet.mjet.g @ jet.j - jet.mjet.g).max() < 1e-14
        assert np.abs(exterior_d_point(jet.dw)).max() < 1e-15
        assert np.linalg.eigvalsh(jet.mjet.g).min() > 1.0
        ops = point_operators(jet)
        assert float(np.abs(ops.rho).max()) > 0.01  # genuinely curved

    def test_parallel_complex_structure(self):
        ops = point_operators(kahler_potential_jet())
        assert np.abs(ops.nj).max() < 1e-15
        assert np.abs(ops.nijenhuis).max() < 1e-15
        assert np.abs(ops.quad.b1).max() < 1e-15
        assert np.abs(ops.quad.b2).max() < 1e-15
        assert float(ops.quad.dj_norm2) == pytest.approx(0.0, abs=1e-15)

    def test_ricci_form_identities(self):
        ops = point_operators(kahler_potential_jet())
        assert np.abs(ops.p - ops.rho_star).max() < 1e-14
        assert np.abs(ops.rho_star - 2.0 * ops.rho).max() < 1e-14

    def test_flow_reduces_to_ricci_flow(self):
        jet = kahler_potential_jet()
        ops = point_operators(jet)
        dg_dt, dj_dt = symplectic_flow_rhs(ops)
        assert np.abs(dg_dt + 2.0 * ops.curv.ric).max() < 1e-14
        assert np.abs(dj_dt - ops.ric_comm).max() < 1e-14

    def test_fundamental_form_is_harmonic_and_parallel(self):
        jet = kahler_potential_jet()
        conn = christoffel(jet.mjet)
        assert np.abs(hodge_laplacian_omega(jet, conn)).max() < 1e-15
        assert np.abs(dstar_d_omega(jet, conn)).max() < 1e-15

    def test_point_independence_of_identities(self):
        ops = point_operators(kahler_potential_jet(x=(-0.5, 0.2, 0.1, -0.3)))
        assert np.abs(ops.nj).max() < 1e-15
        assert np.abs(ops.p - ops.rho_star).max() < 1e-14


class TestNonAlmostKahlerJet:
    """Negative controls: which identities require d(omega) = 0."""

    def test_fixture_is_valid_but_not_symplectic(self):
        jet = rotation_family_jet()
        d = 6
        assert np.abs(jet.j @ jet.j + np.eye(d)).max() < 1e-15
        assert np.abs(jet.j.T @ jet.mjet.g @ jet.j - jet.mjet.g).max() < 1e-15
        assert np.abs(exterior_d_point(jet.dw)).max() > 0.5

    def test_ak_torsion_defect_detects_nonclosedness(self):
        jet = rotation_family_jet()
        ops = point_operators(jet)
        assert np.abs(ak_torsion_defect(jet.j, ops.nj)).max() > 0.1
        for ak in nilmanifold_jets():
            ak_ops = point_operators(ak)
            assert np.abs(ak_torsion_defect(ak.j, ak_ops.nj)).max() < 1e-13

    def test_curvature_form_decomposition_needs_closedness(self):
        # P = rho_star - N1/2 holds on almost-Kahler input only; on a
        # non-symplectic structure the residual is order one.
        jet = rotation_family_jet()
        ops = point_operators(jet)
        residual = ops.p - ops.rho_star + 0.5 * ops.quad.n1
        assert np.abs(residual).max() > 0.1
        for ak in nilmanifold_jets():
            ak_ops = point_operators(ak)
            ak_res = ak_ops.p - ak_ops.rho_star + 0.5 * ak_ops.quad.n1
            assert np.abs(ak_res).max() < 1e-13


class TestCanonicalConnection:
    def test_preserves_metric_and_j_everywhere(self):
        jets = (kahler_potential_jet(), rotation_family_jet()) + nilmanifold_jets()
        for jet in jets:
            hconn = canonical_connection(jet)
            ng = covariant_derivative(jet.mjet.g, jet.mjet.dg, hconn.gamma, ("d", "d"))
            nj_cov = covariant_derivative(jet.j, jet.dj, hconn.gamma, ("u", "d"))
            assert np.abs(ng).max() < 1e-14
            assert np.abs(nj_cov).max() < 1e-14

    def test_torsion_is_quarter_nijenhuis_on_symplectic_input(self):
        for jet in nilmanifold_jets():
            ops = point_operators(jet)
            assert np.abs(ops.hconn.torsion - 0.25 * ops.nijenhuis).max() < 1e-13
            assert np.abs(torsion_11_part(ops.hconn, jet.j)).max() < 1e-13

    def test_torsion_11_part_nonzero_off_symplectic(self):
        jet = rotation_family_jet()
        ops = point_operators(jet)
        assert np.abs(torsion_11_part(ops.hconn, jet.j)).max() > 0.1

    def test_gauduchon_family(self):
        jet = rotation_family_jet()
        c0 = canonical_connection(jet)
        g0 = gauduchon_connection(jet, 0.0)
        assert np.array_equal(g0.gamma, c0.gamma)
        for t in (0.5, 1.0):
            gt = gauduchon_connection(jet, t)
            ng = covariant_derivative(jet.mjet.g, jet.mjet.dg, gt.gamma, ("d", "d"))
            nj_cov = covariant_derivative(jet.j, jet.dj, gt.gamma, ("u", "d"))
            assert np.abs(ng).max() < 1e-14
            assert np.abs(nj_cov).max() < 1e-14
            if t != 0.0:
                assert np.abs(gt.gamma - c0.gamma).max() > 1e-3


class TestNijenhuis:
    def test_vanishes_for_constant_j(self):
        d = 4
        j = standard_complex_structure(d)
        assert np.abs(nijenhuis(j, np.zeros((d, d, d)))).max() == 0.0

    def test_antisymmetry_and_j_twist(self):
        # N(X, Y) = -N(Y, X) and N(JX, Y) = -J N(X, Y)
        jet = rotation_family_jet()
        n = nijenhuis(jet.j, jet.dj)
        assert np.abs(n + np.swapaxes(n, -1, -2)).max() < 1e-14
        twisted = np.einsum("ipk,pj->ijk", n, jet.j)
        jn = np.einsum("ip,pjk->ijk", jet.j, n)
        assert np.abs(twisted + jn).max() < 1e-13

    def test_jet_derivative_matches_finite_differences(self):
        st = get_preset("kodaira_thurston")
        x0 = np.array([0.4, -0.3, 0.2, 0.6])
        jet = exact_jet(st, x0)
        _, dn = nijenhuis_jet(jet.j, jet.dj, jet.ddj)
        h = 1e-6
        for k in range(4):
            e = np.zeros(4)
            e[k] = h
            jp, jm = exact_jet(st, x0 + e), exact_jet(st, x0 - e)
            fd = (nijenhuis(jp.j, jp.dj) - nijenhuis(jm.j, jm.dj)) / (2 * h)
            assert np.abs(fd - dn[k]).max() < 1e-9

    def test_divergence_vanishes_on_kahler(self):
        jet = kahler_potential_jet()
        ops = point_operators(jet)
        assert np.abs(nijenhuis_divergence(jet, ops.hconn)).max() < 1e-15


class TestCompatibilityHelpers:
    def test_recovers_standard_structure(self):
        d = 4
        j = compatible_j_from_omega(standard_two_form(d), np.eye(d))
        assert np.abs(j - standard_complex_structure(d)).max() < 1e-15

    def test_polar_retraction_from_perturbed_form(self):
        rng = np.random.default_rng(31)
        d = 4
        w = standard_two_form(d) + antisymmetrize(0.1 * rng.normal(size=(d, d)))
        j = compatible_j_from_omega(w, np.eye(d))
        assert np.abs(j @ j + np.eye(d)).max() < 1e-14
        g = induced_metric(w, j)
        assert np.abs(g - g.T).max() < 1e-14
        assert np.linalg.eigvalsh(g).min() > 0.1
        assert np.abs(np.einsum("ki,kj->ij", j, g) - w).max() < 1e-14

    def test_degenerate_form_rejected(self):
        w = np.zeros((4, 4))
        w[0, 1], w[1, 0] = 1.0, -1.0  # rank 2 only
        with pytest.raises((DegenerateForm, AkflowError)):
            compatible_j_from_omega(w, np.eye(4))

    def test_induced_metric_roundtrip(self):
        for jet in nilmanifold_jets():
            assert np.abs(induced_metric(jet.w, jet.j) - jet.mjet.g).max() < 1e-14

    def test_omega_upper_oracle(self):
        jet = nilmanifold_jets()[0]
        wu = omega_upper(jet.w, jet.mjet.ginv)
        oracle = np.einsum("ka,lb,ab->kl", jet.mjet.ginv, jet.mjet.ginv, jet.w)
        assert np.abs(wu - oracle).max() < 1e-15

    def test_pairing_form_loop_oracle(self):
        rng = np.random.default_rng(32)
        jet = kahler_potential_jet()
        d = 4
        k_endo = rng.normal(size=(d, d))
        got = pairing_form_from_endo(k_endo, jet.w, jet.j)
        loop = np.zeros((d, d))
        for x in range(d):
            for y in range(d):
                s = 0.0
                for a in range(d):
                    for b in range(d):
                        s += jet.w[a, b] * (
                            k_endo[a, x] * jet.j[b, y] + jet.j[a, x] * k_endo[b, y]
                        )
                loop[x, y] = 0.5 * s
        assert np.abs(got - loop).max() < 1e-14


class TestInducedDomega:
    def test_matches_product_rule(self):
        rng = np.random.default_rng(33)
        jet = nilmanifold_jets()[0]
        g, j = jet.mjet.g, jet.j
        h = rng.normal(size=(4, 4))
        h = h + h.T
        k = rng.normal(size=(4, 4))
        got = induced_domega(g, j, h, k)
        oracle = np.einsum("ai,aj->ij", k, g) + np.einsum("ai,aj->ij", j, h)
        assert np.abs(got - oracle).max() < 1e-14

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(34)
        jet = nilmanifold_jets()[0]
        g, j = jet.mjet.g, jet.j
        h = rng.normal(size=(4, 4))
        h = h + h.T
        k = rng.normal(size=(4, 4))
        eps = 1e-7
        wp = np.einsum("ki,kj->ij", j + eps * k, g + eps * h)
        wm = np.einsum("ki,kj->ij", j - eps * k, g - eps * h)
        fd = (wp - wm) / (2 * eps)
        assert np.abs(induced_domega(g, j, h, k) - fd).max() < 1e-7


class TestPointOperators:
    def test_hermitian_block_optional(self):
        jet = nilmanifold_jets()[0]
        lean = point_operators(jet, need_hermitian=False)
        full = point_operators(jet, need_hermitian=True)
        assert lean.hconn is None
        assert lean.hcurv is None
        assert lean.p is None
        assert lean.s is None
        for name in ("nj", "rho", "rho_star", "ric_comm", "ddj_rough", "ddw_rough"):
            assert np.array_equal(getattr(lean, name), getattr(full, name))
        assert np.array_equal(lean.curv.ric, full.curv.ric)

    def test_matches_frame_computation(self):
        # pointwise jet pipeline against the structure-constant pipeline
        from akflow.homogeneous import invariant_operators

        for name in ("kodaira_thurston", "iwasawa6"):
            st = get_preset(name)
            frame_ops = invariant_operators(st)
            ops = point_operators(exact_jet(st, np.zeros(st.g.shape[0])))
            for field in ("p", "rho", "rho_star", "ric_comm", "ddj_rough"):
                a, b = getattr(ops, field), getattr(frame_ops, field)
                assert np.abs(a - b).max() < 1e-10, field
            assert np.abs(ops.curv.ric - frame_ops.curv.ric).max() < 1e-10
            assert np.abs(ops.quad.b1 - frame_ops.quad.b1).max() < 1e-10
            assert np.abs(ops.quad.b2 - frame_ops.quad.b2).max() < 1e-10
