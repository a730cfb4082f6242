"""Almost-Hermitian structure operators at a point (batched).

Everything is assembled from second-order jets of the pair (g, J); the
fundamental two-form w = g(J., .) and its jets are derived by the product
rule so the triple stays algebraically consistent.

Endomorphisms are stored as matrices M[i, j] = M^i_j acting on column
vectors; two-forms as w[i, j] = w(e_i, e_j).
"""

from dataclasses import dataclass, field

import numpy as np

from .constants import OMEGA_CONTRACTION_SIGN, POLAR_EIG_FLOOR
from .errors import DegenerateForm, NotAlmostComplex
from .geometry import (
    ConnectionData,
    MetricJet2,
    christoffel,
    covariant_derivative,
    covariant_derivative_jet,
    curvature_from_connection,
    riemann,
    rough_laplacian,
)
from .tensor_point import ensure_antisymmetric


@dataclass
class AlmostHermitianJet:
    """Second-order jet of an almost-Hermitian pair with derived w-jet."""

    mjet: MetricJet2
    j: np.ndarray
    dj: np.ndarray
    ddj: np.ndarray
    w: np.ndarray = field(default=None)
    dw: np.ndarray = field(default=None)
    ddw: np.ndarray = field(default=None)

    def __post_init__(self):
        g, dg, ddg = self.mjet.g, self.mjet.dg, self.mjet.ddg
        j, dj, ddj = self.j, self.dj, self.ddj
        if self.w is None:
            self.w = np.einsum("...ki,...kj->...ij", j, g)
        if self.dw is None:
            self.dw = np.einsum("...mki,...kj->...mij", dj, g) + np.einsum(
                "...ki,...mkj->...mij", j, dg
            )
        if self.ddw is None:
            self.ddw = (
                np.einsum("...lmki,...kj->...lmij", ddj, g)
                + np.einsum("...mki,...lkj->...lmij", dj, dg)
                + np.einsum("...lki,...mkj->...lmij", dj, dg)
                + np.einsum("...ki,...lmkj->...lmij", j, ddg)
            )

    @property
    def dim(self):
        return self.mjet.dim

    @property
    def g(self):
        return self.mjet.g

    @property
    def ginv(self):
        return self.mjet.ginv

    def validate(self, tol=1e-10):
        """Check J^2 = -Id and g(J., J.) = g at every point."""
        d = self.dim
        jj = np.einsum("...ik,...kj->...ij", self.j, self.j)
        if float(np.max(np.abs(jj + np.eye(d)))) > tol:
            raise NotAlmostComplex("J^2 + Id exceeds tolerance")
        gjj = np.einsum("...kl,...ki,...lj->...ij", self.g, self.j, self.j)
        if float(np.max(np.abs(gjj - self.g))) > tol * max(
            1.0, float(np.max(np.abs(self.g)))
        ):
            raise NotAlmostComplex("g(J., J.) - g exceeds tolerance")
        return self


def omega_upper(w, ginv):
    """w^{kl} = g^{ka} g^{lb} w_{ab}."""
    half = np.einsum("...ka,...ab->...kb", ginv, w)
    return np.einsum("...lb,...kb->...kl", ginv, half)


def _metric_inverse_derivative(ginv, dg):
    """g^{ka} g^{lb} d_m g_{ab} (the derivative of g^{-1} is minus this)."""
    half = np.einsum("...lb,...mab->...mal", ginv, dg)
    return np.einsum("...ka,...mal->...mkl", ginv, half)


def nijenhuis(j, dj):
    """Nijenhuis tensor N[i,j,k]: N(e_j, e_k) = N[i,j,k] e_i.

    N^i_{jk} = J^p_j d_p J^i_k - J^p_k d_p J^i_j
               - J^i_p d_j J^p_k + J^i_p d_k J^p_j

    built from coordinate partials; the combination is tensorial.
    """
    t1 = np.einsum("...pj,...pik->...ijk", j, dj)
    t3 = np.einsum("...ip,...jpk->...ijk", j, dj)
    return t1 - np.swapaxes(t1, -1, -2) - t3 + np.swapaxes(t3, -1, -2)


def nijenhuis_jet(j, dj, ddj):
    """Nijenhuis tensor together with its coordinate derivative dN[m,i,j,k]."""
    n = nijenhuis(j, dj)
    t1 = np.einsum("...mpj,...pik->...mijk", dj, dj) + np.einsum(
        "...pj,...mpik->...mijk", j, ddj
    )
    t3 = np.einsum("...mip,...jpk->...mijk", dj, dj) + np.einsum(
        "...ip,...mjpk->...mijk", j, ddj
    )
    dn = t1 - np.swapaxes(t1, -1, -2) - t3 + np.swapaxes(t3, -1, -2)
    return n, dn


def dj_covariant(jet, conn):
    """(nj, dnj): covariant derivative of J and its coordinate derivative.

    nj[k, i, j] = (D_k J)^i_j.
    """
    return covariant_derivative_jet(
        jet.j, jet.dj, jet.ddj, conn.gamma, conn.dgamma, ("u", "d")
    )


def canonical_connection(jet, conn=None, nj=None, dnj=None):
    """Almost-Hermitian connection with correction (D_X J) J / 2.

    This is the t = 0 member of the Gauduchon family; it is metric and J
    preserving for any almost-Hermitian pair, and for a symplectic pair it
    is the connection whose curvature traces drive the flow.
    """
    if conn is None:
        conn = christoffel(jet.mjet)
    if nj is None:
        nj, dnj = dj_covariant(jet, conn)
    corr = 0.5 * np.einsum("...ikm,...mj->...kij", nj, jet.j)
    dcorr = 0.5 * (
        np.einsum("...likm,...mj->...lkij", dnj, jet.j)
        + np.einsum("...ikm,...lmj->...lkij", nj, jet.dj)
    )
    gamma = conn.gamma + corr
    dgamma = conn.dgamma + dcorr
    torsion = gamma - np.swapaxes(gamma, -1, -2)
    return ConnectionData(gamma=gamma, dgamma=dgamma, torsion=torsion)


def _exterior_d_two_form(dw):
    """Coordinate exterior derivative of a two-form from its first jet."""
    return dw - np.einsum("...bac->...abc", dw) + np.einsum("...cab->...abc", dw)


def _j_insert_pairs(phi, j):
    """Sum of the three double J insertions into a three-form."""
    return (
        np.einsum("...pqc,...pa,...qb->...abc", phi, j, j, optimize=True)
        + np.einsum("...pbq,...pa,...qc->...abc", phi, j, j, optimize=True)
        + np.einsum("...apq,...pb,...qc->...abc", phi, j, j, optimize=True)
    )


def _j_insert_pairs_d(phi, dphi, j, dj):
    """Coordinate derivative of _j_insert_pairs by the product rule."""
    out = (
        np.einsum("...mpqc,...pa,...qb->...mabc", dphi, j, j, optimize=True)
        + np.einsum("...mpbq,...pa,...qc->...mabc", dphi, j, j, optimize=True)
        + np.einsum("...mapq,...pb,...qc->...mabc", dphi, j, j, optimize=True)
    )
    out += (
        np.einsum("...pqc,...mpa,...qb->...mabc", phi, dj, j, optimize=True)
        + np.einsum("...pqc,...pa,...mqb->...mabc", phi, j, dj, optimize=True)
        + np.einsum("...pbq,...mpa,...qc->...mabc", phi, dj, j, optimize=True)
        + np.einsum("...pbq,...pa,...mqc->...mabc", phi, j, dj, optimize=True)
        + np.einsum("...apq,...mpb,...qc->...mabc", phi, dj, j, optimize=True)
        + np.einsum("...apq,...pb,...mqc->...mabc", phi, j, dj, optimize=True)
    )
    return out


def gauduchon_connection(jet, t, conn=None):
    """Member t of the canonical one-parameter family of almost-Hermitian
    connections; t = 1 is the Chern connection.  All members coincide with
    the t = 0 connection when the fundamental two-form is closed.
    """
    if conn is None:
        conn = christoffel(jet.mjet)
    base = canonical_connection(jet, conn=conn)
    if t == 0:
        return base
    j, dj, ginv = jet.j, jet.dj, jet.ginv
    dw3 = _exterior_d_two_form(jet.dw)
    ddw3 = _exterior_d_two_form(jet.ddw)
    # d^c w = -J dw (triple insertion), with coordinate derivative.
    phi = -np.einsum("...pqr,...pa,...qb,...rc->...abc", dw3, j, j, j, optimize=True)
    dphi = -(
        np.einsum("...mpqr,...pa,...qb,...rc->...mabc", ddw3, j, j, j, optimize=True)
        + np.einsum("...pqr,...mpa,...qb,...rc->...mabc", dw3, dj, j, j, optimize=True)
        + np.einsum("...pqr,...pa,...mqb,...rc->...mabc", dw3, j, dj, j, optimize=True)
        + np.einsum("...pqr,...pa,...qb,...mrc->...mabc", dw3, j, j, dj, optimize=True)
    )
    ins = _j_insert_pairs(phi, j)
    dins = _j_insert_pairs_d(phi, dphi, j, dj)
    plus = 0.25 * (3.0 * phi + ins)
    dplus = 0.25 * (3.0 * dphi + dins)
    # torsion potential tau[i,j,l] = plus(e_i, e_j, e_l) + plus(e_i, Je_j, Je_l)
    tau = plus + np.einsum("...ipq,...pj,...ql->...ijl", plus, j, j, optimize=True)
    dtau = dplus + (
        np.einsum("...mipq,...pj,...ql->...mijl", dplus, j, j, optimize=True)
        + np.einsum("...ipq,...mpj,...ql->...mijl", plus, dj, j, optimize=True)
        + np.einsum("...ipq,...pj,...mql->...mijl", plus, j, dj, optimize=True)
    )
    dginv = -_metric_inverse_derivative(ginv, jet.mjet.dg)
    gamma = base.gamma + (t / 4.0) * np.einsum("...kl,...ijl->...kij", ginv, tau)
    dgamma = base.dgamma + (t / 4.0) * (
        np.einsum("...mkl,...ijl->...mkij", dginv, tau)
        + np.einsum("...kl,...mijl->...mkij", ginv, dtau)
    )
    torsion = gamma - np.swapaxes(gamma, -1, -2)
    return ConnectionData(gamma=gamma, dgamma=dgamma, torsion=torsion)


def torsion_11_part(conn, j):
    """J-invariant part of the torsion in its two form slots."""
    t = conn.torsion
    tjj = np.einsum("...kpq,...pi,...qj->...kij", t, j, j, optimize=True)
    return 0.5 * (t + tjj)


def omega_traces(rm, w_up):
    """The two w-traces of a curvature tensor rm[i,j,k,l]:

    p[i,j] = sign * rm_{ijkl} w^{kl}   (trace over the last pair)
    s[i,j] = sign * rm_{klij} w^{kl}   (trace over the first pair)
    """
    p = OMEGA_CONTRACTION_SIGN * np.einsum("...ijkl,...kl->...ij", rm, w_up)
    s = OMEGA_CONTRACTION_SIGN * np.einsum("...klij,...kl->...ij", rm, w_up)
    return p, s


def hermitian_curvature(jet, hconn):
    """Curvature of an almost-Hermitian connection plus its two w-traces."""
    bundle = curvature_from_connection(hconn, jet.g)
    w_up = omega_upper(jet.w, jet.ginv)
    p, s = omega_traces(bundle.rm, w_up)
    return bundle, p, s


def ricci_forms(rm, ric, g, ginv, j, w):
    """(ric_j, rho, rho_star):

    ric_j     J-invariant average of the Ricci tensor
    rho[i,j]  = ric_j(J e_i, e_j)
    rho_star  = Riemann tensor evaluated on w (same trace convention as
                the Chern-Ricci form)
    """
    ric_j = 0.5 * (ric + np.einsum("...kl,...ki,...lj->...ij", ric, j, j))
    rho = np.einsum("...ki,...kj->...ij", j, ric_j)
    w_up = omega_upper(w, ginv)
    rho_star = OMEGA_CONTRACTION_SIGN * np.einsum("...ijkl,...kl->...ij", rm, w_up)
    return ric_j, rho, rho_star


def ricci_j_commutator(ric, ginv, j):
    """Endomorphism Ric# J - J Ric# (vanishes when Ric is J-invariant).

    The orientation matters: this is the choice for which the induced
    motion of w under the symplectic flow is exactly -P.
    """
    ric_sharp = np.einsum("...ik,...kj->...ij", ginv, ric)
    return np.einsum("...ik,...kj->...ij", ric_sharp, j) - np.einsum(
        "...ik,...kj->...ij", j, ric_sharp
    )


@dataclass
class Quadratics:
    """First-order quadratic operators built from DJ.

    n1, n2   two-forms <D_{JX} w, D_Y w> and <(DJ) JX, (DJ) Y>
    b1, b2   symmetric tensors: Frobenius pairings of DJ in the two
             natural slot positions
    w_comm   two-form <[J D_X J, D_{JX} J], D_Y J>
    nsq_endo endomorphism g^{-1} n2 (second-order term in the J equation)
    dj_norm2 scalar |DJ|^2 (equals both tr_g b1 and tr_g b2)
    """

    n1: np.ndarray
    n2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    w_comm: np.ndarray
    nsq_endo: np.ndarray
    dj_norm2: np.ndarray


def quadratic_operators(g, ginv, j, nj):
    """All quadratic DJ operators used by the flow and the identity suite.

    Every contraction is written pairwise so the batched grid evaluation
    never falls back to a nested multi-index loop.
    """
    # frob[x,y] = g^{kl} g_{mn} (D_x J)^m_k (D_y J)^n_l
    njl = np.einsum("...xmk,...mn->...xnk", nj, g)  # (D_x J)_{nk}
    nj_up2 = np.einsum("...km,...ynm->...ynk", ginv, nj)  # (D_y J)^{nk}
    frob = np.einsum("...xnk,...ynk->...xy", njl, nj_up2)
    b1 = frob
    n1 = np.einsum("...px,...py->...xy", j, frob)
    # nj_mixed[i,m,y] = g^{ij} g_{mn} (D_y J)^n_j: first slot raised,
    # second lowered, shared by the two Frobenius-type pairings below.
    nj_mixed = np.einsum("...ij,...jny->...iny", ginv, nj)
    nj_mixed = np.einsum("...mn,...iny->...imy", g, nj_mixed)
    njj = np.einsum("...imp,...px->...imx", nj, j)  # ((D J) J)^i_{m x}
    n2 = np.einsum("...imx,...imy->...xy", njj, nj_mixed)
    b2 = np.einsum("...imx,...imy->...xy", nj, nj_mixed)
    nsq_endo = np.einsum("...jk,...ik->...ji", ginv, n2)
    # commutator term: A_x = J (D_x J), B_x = D_{Jx} J
    a = np.einsum("...im,...xmj->...xij", j, nj)
    b = np.einsum("...px,...pij->...xij", j, nj)
    comm = np.einsum("...xim,...xmj->...xij", a, b) - np.einsum(
        "...xim,...xmj->...xij", b, a
    )
    nj_flip = np.einsum("...mn,...ynq->...ymq", g, nj)
    nj_flip = np.einsum("...pq,...ymq->...ymp", ginv, nj_flip)
    w_comm = np.einsum("...xmp,...ymp->...xy", comm, nj_flip)
    dj_norm2 = np.einsum("...xy,...xy->...", ginv, frob)
    return Quadratics(
        n1=n1,
        n2=n2,
        b1=b1,
        b2=b2,
        w_comm=w_comm,
        nsq_endo=nsq_endo,
        dj_norm2=dj_norm2,
    )


def dstar_d_j(jet, conn):
    """Connection Laplacian of J (nonnegative convention)."""
    return rough_laplacian(jet.j, jet.dj, jet.ddj, jet.mjet, conn, ("u", "d"))


def dstar_d_omega(jet, conn):
    """Connection Laplacian of the fundamental two-form."""
    return rough_laplacian(jet.w, jet.dw, jet.ddw, jet.mjet, conn, ("d", "d"))


def hodge_laplacian_omega(jet, conn):
    """Hodge Laplacian (d d* + d* d) w assembled from the pointwise jet."""
    ginv = jet.ginv
    nw, dnw = covariant_derivative_jet(
        jet.w, jet.dw, jet.ddw, conn.gamma, conn.dgamma, ("d", "d")
    )
    # d* w (one-form) and its coordinate derivative
    dginv = -_metric_inverse_derivative(ginv, jet.mjet.dg)
    delta_w = -np.einsum("...ij,...ijb->...b", ginv, nw)
    d_delta_w = -(
        np.einsum("...mij,...ijb->...mb", dginv, nw)
        + np.einsum("...ij,...mijb->...mb", ginv, dnw)
    )
    dd_star = d_delta_w - np.einsum("...bm->...mb", d_delta_w)
    # d w (three-form) from the covariant derivative (torsion-free), with
    # coordinate derivative for one more covariant pass
    dw3 = nw - np.einsum("...bac->...abc", nw) + np.einsum("...cab->...abc", nw)
    ddw3 = dnw - np.einsum("...mbac->...mabc", dnw) + np.einsum("...mcab->...mabc", dnw)
    ndw3 = covariant_derivative(dw3, ddw3, conn.gamma, ("d", "d", "d"))
    star_d = -np.einsum("...ij,...ijbc->...bc", ginv, ndw3)
    return dd_star + star_d


def ak_torsion_defect(j, nj):
    """Residual of D_{JX} J + J (D_X J), which vanishes iff dw = 0."""
    return np.einsum("...kx,...kij->...xij", j, nj) + np.einsum(
        "...im,...xmj->...xij", j, nj
    )


def nijenhuis_divergence(jet, hconn, n=None, dn=None):
    """Endomorphism w^{kl} (nabla_k N)(e_l, .) for a Hermitian connection.

    This is the second-order operator of the general J evolution; it
    anticommutes with J.
    """
    if n is None:
        n, dn = nijenhuis_jet(jet.j, jet.dj, jet.ddj)
    nn = covariant_derivative(n, dn, hconn.gamma, ("u", "d", "d"))
    w_up = omega_upper(jet.w, jet.ginv)
    return np.einsum("...kl,...kilj->...ij", w_up, nn)


def pairing_form_from_endo(k_endo, w, j):
    """Two-form (w(KX, JY) + w(JX, KY)) / 2 for an endomorphism K."""
    return 0.5 * (
        np.einsum("...mx,...mn,...ny->...xy", k_endo, w, j)
        + np.einsum("...mx,...mn,...ny->...xy", j, w, k_endo)
    )


def induced_domega(g, j, dg_dt, dj_dt):
    """Time derivative of w = g(J., .) induced by (dg/dt, dJ/dt)."""
    return np.einsum("...ki,...kj->...ij", dj_dt, g) + np.einsum(
        "...ki,...kj->...ij", j, dg_dt
    )


def compatible_j_from_omega(w, gref, eig_floor=POLAR_EIG_FLOOR):
    """Almost complex structure compatible with a nondegenerate two-form.

    Polar construction: A = gref^{-1} w, J = -A (-A^2)^{-1/2}, computed in
    a gref-orthonormal frame so the square root is of a symmetric matrix.
    The sign matches the convention w_ij = J^k_i g_kj, so the induced
    metric w(., J.) is symmetric positive definite and the construction
    returns the original J when w is already compatible with gref.
    """
    w = np.asarray(w, dtype=float)
    ensure_antisymmetric(w, what="two-form for polar construction")
    gref = np.asarray(gref, dtype=float)
    l = np.linalg.cholesky(gref)
    linv = np.linalg.inv(l)
    c = np.einsum("...ia,...ab,...jb->...ij", linv, w, linv)
    m = -np.einsum("...ik,...kj->...ij", c, c)
    evals, evecs = np.linalg.eigh(m)
    if float(np.min(evals)) < eig_floor:
        raise DegenerateForm(
            f"two-form is degenerate: min squared singular value "
            f"{float(np.min(evals)):.3e} < {eig_floor:.1e}"
        )
    inv_sqrt = np.einsum(
        "...ik,...k,...jk->...ij", evecs, evals ** -0.5, evecs
    )
    j_frame = -np.einsum("...ik,...kj->...ij", c, inv_sqrt)
    lt = np.swapaxes(l, -1, -2)
    lint = np.swapaxes(linv, -1, -2)
    return np.einsum("...ik,...kl,...lj->...ij", lint, j_frame, lt)


def induced_metric(w, j):
    """g(X, Y) = w(X, JY) for a compatible pair."""
    return np.einsum("...ik,...kj->...ij", w, j)


@dataclass
class PointOperators:
    """Everything the flows and the identity suite consume at one point."""

    conn: ConnectionData
    curv: object
    hconn: ConnectionData
    hcurv: object
    nj: np.ndarray
    quad: Quadratics
    ric_j: np.ndarray
    rho: np.ndarray
    rho_star: np.ndarray
    p: np.ndarray
    s: np.ndarray
    ric_comm: np.ndarray
    ddj_rough: np.ndarray
    ddw_rough: np.ndarray
    nijenhuis: np.ndarray


def point_operators(jet, need_hermitian=True):
    """Assemble the full operator set from one almost-Hermitian jet."""
    conn = christoffel(jet.mjet)
    curv = riemann(jet.mjet, conn)
    nj, dnj = dj_covariant(jet, conn)
    quad = quadratic_operators(jet.g, jet.ginv, jet.j, nj)
    ric_j, rho, rho_star = ricci_forms(curv.rm, curv.ric, jet.g, jet.ginv, jet.j, jet.w)
    ric_comm = ricci_j_commutator(curv.ric, jet.ginv, jet.j)
    ddj_rough = dstar_d_j(jet, conn)
    ddw_rough = dstar_d_omega(jet, conn)
    n = nijenhuis(jet.j, jet.dj)
    hconn = hcurv = p = s = None
    if need_hermitian:
        hconn = canonical_connection(jet, conn=conn, nj=nj, dnj=dnj)
        hcurv, p, s = hermitian_curvature(jet, hconn)
    return PointOperators(
        conn=conn,
        curv=curv,
        hconn=hconn,
        hcurv=hcurv,
        nj=nj,
        quad=quad,
        ric_j=ric_j,
        rho=rho,
        rho_star=rho_star,
        p=p,
        s=s,
        ric_comm=ric_comm,
        ddj_rough=ddj_rough,
        ddw_rough=ddw_rough,
        nijenhuis=n,
    )


def symplectic_flow_rhs(ops):
    """Tendency of the symplectic curvature flow in (g, J) variables.

    dg/dt = -2 Ric + b1/2 - b2
    dJ/dt = -D*D J + g^{-1} n2 + (Ric# J - J Ric#)
    """
    dg_dt = -2.0 * ops.curv.ric + 0.5 * ops.quad.b1 - ops.quad.b2
    dj_dt = -ops.ddj_rough + ops.quad.nsq_endo + ops.ric_comm
    return dg_dt, dj_dt


def general_flow_rhs(jet, ops, q_term=None, h_term=None):
    """Tendency of the general almost-Hermitian flow in (w, J) variables.

    dw/dt = -s + H + (optional injected q)
    dJ/dt = -K + (optional injected endomorphism)
    dg/dt follows by the product rule so the triple stays compatible.
    """
    kappa = nijenhuis_divergence(jet, ops.hconn)
    if h_term is not None:
        kappa = kappa - h_term
    h = pairing_form_from_endo(kappa, jet.w, jet.j)
    dw_dt = -ops.s + h
    if q_term is not None:
        dw_dt = dw_dt + q_term
    dj_dt = -kappa
    # dg(X,Y) = dw(X, JY) + w(X, dJ Y)
    dg_dt = np.einsum("...ik,...kj->...ij", dw_dt, jet.j) + np.einsum(
        "...ik,...kj->...ij", jet.w, dj_dt
    )
    return dg_dt, dj_dt, dw_dt, kappa
