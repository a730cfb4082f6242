"""Pointwise tensor algebra: inverses, norms, splits, slot bookkeeping."""

import numpy as np
import pytest

from akflow.errors import (
    AkflowError,
    DegenerateMetric,
    NonFinite,
    NotAlmostComplex,
    NotAntisymmetric,
    SlotMismatch,
)
from akflow.flow import standard_complex_structure, standard_two_form
from akflow.tensor_point import (
    DenseTensor,
    antisymmetrize,
    check_finite,
    contract,
    endo_apply_form,
    ensure_almost_complex,
    ensure_antisymmetric,
    ensure_antisymmetric_3,
    form_type_split,
    j_split,
    metric_inverse,
    metric_inverse_unchecked,
    symmetrize,
    tensor_norm2,
    two_form_inner,
)


def random_spd(dim, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim))
    return a @ a.T + dim * np.eye(dim)


class TestMetricInverse:
    def test_inverse_of_spd(self):
        g = random_spd(4, 1)
        ginv = metric_inverse(g)
        assert np.abs(g @ ginv - np.eye(4)).max() < 1e-12

    def test_batched(self):
        g = np.stack([random_spd(4, s) for s in range(3)])
        ginv = metric_inverse(g)
        assert np.abs(np.einsum("bij,bjk->bik", g, ginv) - np.eye(4)).max() < 1e-12

    def test_checked_matches_unchecked_bitwise(self):
        g = random_spd(6, 2)
        assert np.array_equal(metric_inverse(g), metric_inverse_unchecked(g))

    def test_rejects_nonsymmetric(self):
        g = np.eye(4)
        g[0, 1] = 0.5
        with pytest.raises(AkflowError):
            metric_inverse(g)

    def test_rejects_indefinite(self):
        with pytest.raises(DegenerateMetric):
            metric_inverse(np.diag([1.0, 1.0, 1.0, -1.0]))

    def test_rejects_near_singular(self):
        with pytest.raises(DegenerateMetric):
            metric_inverse(np.diag([1.0, 1.0, 1.0, 1e-12]))

    def test_rejects_nonsquare(self):
        with pytest.raises(SlotMismatch):
            metric_inverse(np.zeros((4, 3)))


class TestNormsAndInner:
    def test_standard_structures_norm(self):
        # |J|^2 = tr(J^T J) = dim and |w|^2 = dim for the flat standard pair.
        for dim in (4, 6):
            eye = np.eye(dim)
            j = standard_complex_structure(dim)
            w = standard_two_form(dim)
            assert tensor_norm2(j, eye, eye, ("u", "d")) == pytest.approx(dim)
            assert tensor_norm2(w, eye, eye, ("d", "d")) == pytest.approx(dim)

    def test_two_form_inner_oracle(self):
        # a = b = e0 ^ e1 (components a_01 = -a_10 = 1), diagonal inverse
        # metric diag(2, 3, 1, 1): full contraction = 2 * 2 * 3 = 12.
        a = np.zeros((4, 4))
        a[0, 1], a[1, 0] = 1.0, -1.0
        ginv = np.diag([2.0, 3.0, 1.0, 1.0])
        assert two_form_inner(a, a, ginv) == pytest.approx(12.0)

    def test_two_form_inner_matches_norm2(self):
        rng = np.random.default_rng(3)
        a = antisymmetrize(rng.normal(size=(4, 4)))
        g = random_spd(4, 4)
        ginv = metric_inverse(g)
        assert two_form_inner(a, a, ginv) == pytest.approx(
            tensor_norm2(a, g, ginv, ("d", "d")), rel=1e-13
        )

    def test_norm2_scaling_by_variance(self):
        # Scaling g by c scales |t|^2 by c^(#up - #down).
        g = random_spd(4, 5)
        ginv = metric_inverse(g)
        rng = np.random.default_rng(6)
        t = rng.normal(size=(4, 4))
        for variance, power in ((("d", "d"), -2.0), (("u", "d"), 0.0), (("u", "u"), 2.0)):
            base = tensor_norm2(t, g, ginv, variance)
            scaled = tensor_norm2(t, 2.0 * g, 0.5 * ginv, variance)
            assert scaled == pytest.approx(2.0**power * base, rel=1e-12)


class TestSymmetrization:
    def test_decomposition(self):
        rng = np.random.default_rng(7)
        m = rng.normal(size=(5, 4, 4))
        assert np.allclose(symmetrize(m) + antisymmetrize(m), m)
        assert np.abs(antisymmetrize(symmetrize(m))).max() < 1e-15
        assert np.allclose(antisymmetrize(m), -np.swapaxes(antisymmetrize(m), -1, -2))

    def test_validators_pass_and_raise(self):
        w = standard_two_form(4)
        ensure_antisymmetric(w)
        with pytest.raises(NotAntisymmetric):
            ensure_antisymmetric(np.eye(4))
        j = standard_complex_structure(4)
        ensure_almost_complex(j)
        with pytest.raises(NotAlmostComplex):
            ensure_almost_complex(1.1 * j)
        phi = np.zeros((4, 4, 4))
        phi[0, 1, 2] = phi[1, 2, 0] = phi[2, 0, 1] = 1.0
        phi[1, 0, 2] = phi[0, 2, 1] = phi[2, 1, 0] = -1.0
        ensure_antisymmetric_3(phi)
        bad = phi.copy()
        bad[0, 0, 1] = 1.0
        with pytest.raises(NotAntisymmetric):
            ensure_antisymmetric_3(bad)

    def test_check_finite(self):
        check_finite(np.ones(3))
        with pytest.raises(NonFinite):
            check_finite(np.array([1.0, np.nan]))
        with pytest.raises(NonFinite):
            check_finite(np.array([1.0, np.inf]))


class TestJSplits:
    def test_j_split_standard_form_is_invariant(self):
        j = standard_complex_structure(4)
        w = standard_two_form(4)
        inv, anti = j_split(w, j)
        assert np.allclose(inv, w)
        assert np.abs(anti).max() < 1e-15

    def test_j_split_parts_and_reassembly(self):
        rng = np.random.default_rng(8)
        j = standard_complex_structure(6)
        w = antisymmetrize(rng.normal(size=(6, 6)))
        inv, anti = j_split(w, j)
        assert np.allclose(inv + anti, w)
        # invariant part: w(JX, JY) = w(X, Y); anti part flips sign
        def pull_back(a):
            return np.einsum("kl,ki,lj->ij", a, j, j)

        assert np.abs(pull_back(inv) - inv).max() < 1e-14
        assert np.abs(pull_back(anti) + anti).max() < 1e-14

    def test_endo_apply_form(self):
        j = standard_complex_structure(4)
        w = standard_two_form(4)
        # w(J., .) = -g for the standard flat pair (w = J^T g, J^2 = -Id)
        assert np.allclose(endo_apply_form(w, j, 0), -np.eye(4))
        assert np.allclose(endo_apply_form(w, j, 1), np.eye(4))
        with pytest.raises(SlotMismatch):
            endo_apply_form(w, j, 2)

    def test_form_type_split(self):
        rng = np.random.default_rng(9)
        j = standard_complex_structure(6)
        phi = rng.normal(size=(6, 6, 6))
        phi = (
            phi
            - np.einsum("abc->bac", phi)
            + np.einsum("abc->bca", phi)
            - np.einsum("abc->cba", phi)
            + np.einsum("abc->cab", phi)
            - np.einsum("abc->acb", phi)
        ) / 6.0
        plus, minus = form_type_split(phi, j)
        assert np.allclose(plus + minus, phi)

        def twist(a):
            return (
                np.einsum("pqc,pa,qb->abc", a, j, j)
                + np.einsum("pbq,pa,qc->abc", a, j, j)
                + np.einsum("apq,pb,qc->abc", a, j, j)
            )

        # eigenspaces of the pairwise-insertion operator: +1 and -3
        assert np.abs(twist(plus) - plus).max() < 1e-13
        assert np.abs(twist(minus) + 3.0 * minus).max() < 1e-13


class TestDenseTensor:
    def test_contract_opposite_variance(self):
        j = standard_complex_structure(4)
        t = DenseTensor(j, ("u", "d"))
        tr = contract(t, 0, 1)
        assert tr.components == pytest.approx(0.0)
        assert tr.variance == ()

    def test_contract_down_down_needs_metric(self):
        g = random_spd(4, 10)
        t = DenseTensor(g, ("d", "d"))
        with pytest.raises(SlotMismatch):
            contract(t, 0, 1)
        tr = contract(t, 0, 1, metric=g)
        assert tr.components == pytest.approx(4.0)

    def test_contract_up_up_needs_metric(self):
        g = random_spd(4, 11)
        ginv = metric_inverse(g)
        t = DenseTensor(ginv, ("u", "u"))
        tr = contract(t, 0, 1, metric=g)
        assert tr.components == pytest.approx(4.0)

    def test_contract_rank3(self):
        rng = np.random.default_rng(12)
        comp = rng.normal(size=(4, 4, 4))
        t = DenseTensor(comp, ("u", "d", "d"))
        tr = contract(t, 0, 1)
        assert tr.variance == ("d",)
        assert np.allclose(tr.components, np.einsum("aab->b", comp))

    def test_bad_slots_rejected(self):
        t = DenseTensor(np.eye(4), ("u", "d"))
        with pytest.raises(SlotMismatch):
            contract(t, 0, 0)
        with pytest.raises(SlotMismatch):
            contract(t, 0, 5)
