"""Exact analytic point jets with known invariants, shared across test modules.

Each builder returns data whose constraints (J^2 = -Id, compatibility,
closedness where claimed) hold to machine precision, so residuals measured
on them isolate the operator implementations from discretization error.
"""

import numpy as np

from akflow.flow import standard_complex_structure
from akflow.geometry import MetricJet2
from akflow.hermitian import AlmostHermitianJet
from akflow.tensor_point import metric_inverse


def exterior_d_point(dw):
    """(d w)_kij = d_k w_ij - d_i w_kj + d_j w_ki from the stack dw[k, i, j]."""
    return dw - np.einsum("ikj->kij", dw) + np.einsum("jki->kij", dw)


def kahler_potential_jet(x=(0.35, -0.15, 0.25, 0.45)):
    """Exact Kahler 2-jet on R^4: w = d(dphi o J) for a quartic potential.

    With J the constant standard complex structure and
    phi = |x|^2 / 2 + sum_t eps_t (v_t . x)^4, the two-form
    w_ij = J^k_i phi_kj - J^k_j phi_ki is exact (hence closed) and
    J-compatible, and g_ij = w_ik J^k_j is a positive Kahler metric with
    DJ = 0, N = 0 and nonzero, non-Einstein curvature.
    """
    d = 4
    x = np.asarray(x, dtype=float)
    j = standard_complex_structure(d)
    terms = [
        (0.02, np.array([0.6, -0.3, 0.45, 0.2])),
        (0.015, np.array([-0.25, 0.5, 0.1, 0.55])),
    ]
    hess = np.eye(d)
    dhess = np.zeros((d, d, d))
    ddhess = np.zeros((d, d, d, d))
    for eps, v in terms:
        s = float(v @ x)
        hess = hess + 12.0 * eps * s**2 * np.einsum("i,j->ij", v, v)
        dhess = dhess + 24.0 * eps * s * np.einsum("k,i,j->kij", v, v, v)
        ddhess = ddhess + 24.0 * eps * np.einsum("l,k,i,j->lkij", v, v, v, v)

    w = np.einsum("ki,kj->ij", j, hess) - np.einsum("kj,ki->ij", j, hess)
    dw = np.einsum("ki,akj->aij", j, dhess) - np.einsum("kj,aki->aij", j, dhess)
    ddw = np.einsum("ki,abkj->abij", j, ddhess) - np.einsum("kj,abki->abij", j, ddhess)
    g = np.einsum("ik,kj->ij", w, j)
    dg = np.einsum("aik,kj->aij", dw, j)
    ddg = np.einsum("abik,kj->abij", ddw, j)
    zero3 = np.zeros((d, d, d))
    zero4 = np.zeros((d, d, d, d))
    return AlmostHermitianJet(
        mjet=MetricJet2(g=g, dg=dg, ddg=ddg, ginv=metric_inverse(g)),
        j=j, dj=zero3, ddj=zero4, w=w, dw=dw, ddw=ddw,
    )


ROTATION_GENERATOR_ENTRIES = (
    (4, 0, 2, 0.5),
    (4, 1, 3, -0.5),
    (5, 0, 3, 0.5),
    (5, 1, 2, 0.5),
    (0, 1, 4, 0.3),
    (2, 3, 5, -0.4),
)


def rotation_generators(dim=6, entries=ROTATION_GENERATOR_ENTRIES):
    """Antisymmetric generator stack M[k] for the orthogonal family below."""
    m = np.zeros((dim, dim, dim))
    for k, a, b, amp in entries:
        m[k, a, b] = amp
        m[k, b, a] = -amp
    return m


def rotation_family_jet(dim=6):
    """Exact 2-jet at x = 0 of J(x) = Q(x) J0 Q(x)^T, Q = exp(sum x_k M_k).

    The metric is the identity, so compatibility and J^2 = -Id hold exactly
    at every jet order, while d(omega) is a nonzero three-form: a genuinely
    almost-Hermitian (non almost-Kahler) fixture.
    """
    j0 = standard_complex_structure(dim)
    m = rotation_generators(dim)
    j = j0.copy()
    dj = np.einsum("kab,bc->kac", m, j0) - np.einsum("ab,kbc->kac", j0, m)
    mm = np.einsum("lab,kbc->lkac", m, m)
    c = (
        0.5 * (np.einsum("lkab,bc->lkac", mm, j0) + np.einsum("ab,lkbc->lkac", j0, mm))
        - np.einsum("lab,bc,kcd->lkad", m, j0, m)
    )
    ddj = c + np.swapaxes(c, 0, 1)
    g = np.eye(dim)
    w = j.T @ g
    dw = np.einsum("kai,aj->kij", dj, g)
    ddw = np.einsum("lkai,aj->lkij", ddj, g)
    return AlmostHermitianJet(
        mjet=MetricJet2(
            g=g,
            dg=np.zeros((dim, dim, dim)),
            ddg=np.zeros((dim, dim, dim, dim)),
            ginv=np.eye(dim),
        ),
        j=j, dj=dj, ddj=ddj, w=w, dw=dw, ddw=ddw,
    )


def rotation_family_j(x):
    """The exact family behind rotation_family_jet, for finite differencing."""
    from scipy.linalg import expm

    x = np.asarray(x, dtype=float)
    dim = x.size
    j0 = standard_complex_structure(dim)
    q = expm(np.einsum("k,kab->ab", x, rotation_generators(dim)))
    return q @ j0 @ q.T


def round_sphere_jet(x=(0.3, -0.2, 0.4, 0.1)):
    """Stereographic 2-jet of the round 4-sphere metric g = lam^2 delta.

    lam = 2 / (1 + |x|^2) gives the unit round sphere: Ric = 3 g, scal = 12,
    Weyl = 0. Derivatives of lam^2 are closed-form:
    d_k(lam^2) = -2 lam^3 x_k,  d_l d_k(lam^2) = 6 lam^4 x_k x_l - 2 lam^3 d_kl.
    """
    d = 4
    x = np.asarray(x, dtype=float)
    r2 = float(x @ x)
    lam = 2.0 / (1.0 + r2)
    eye = np.eye(d)
    g = lam**2 * eye
    dlam2 = -2.0 * lam**3 * x
    ddlam2 = 6.0 * lam**4 * np.einsum("k,l->kl", x, x) - 2.0 * lam**3 * eye
    dg = np.einsum("k,ij->kij", dlam2, eye)
    ddg = np.einsum("lk,ij->lkij", ddlam2, eye)
    return MetricJet2(g=g, dg=dg, ddg=ddg, ginv=eye / lam**2)
