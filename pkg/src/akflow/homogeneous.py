"""Left-invariant almost-Hermitian structures on nilpotent Lie groups.

A structure is a triple (bracket, frame metric, frame J) on a fixed basis
e_1..e_d of the Lie algebra; every geometric quantity is then a constant
tensor in that frame, computed by pure linear algebra with no stencils.

Storage: structure constants c[k, i, j] with [e_i, e_j] = c[k, i, j] e_k;
frame connections gamma[k, i, j] with nabla_{e_i} e_j = gamma[k, i, j] e_k,
matching the coordinate layout used elsewhere so the tensor calculus
helpers can be reused with a vanishing coordinate-derivative term.

For two-step algebras the module also produces exact polynomial coordinate
jets of the same structure (``exact_jet``), which feed the generic
pointwise engine: the two routes must agree to round-off, giving a strong
cross-check of both.
"""

from dataclasses import dataclass, field

import numpy as np

from .constants import DEFAULT_TOL
from .errors import ConfigError, NotAntisymmetric, WrongDimension
from .geometry import (
    ConnectionData,
    CurvatureBundle,
    MetricJet2,
    covariant_derivative,
)
from .hermitian import (
    AlmostHermitianJet,
    omega_traces,
    omega_upper,
    pairing_form_from_endo,
    quadratic_operators,
    ricci_forms,
    ricci_j_commutator,
)
from .tensor_point import (
    ensure_almost_complex,
    metric_inverse,
    metric_inverse_unchecked,
)


@dataclass(frozen=True)
class LieAlgebraData:
    """Structure constants of a finite-dimensional real Lie algebra."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.ndim != 3 or len({c.shape[0], c.shape[1], c.shape[2]}) != 1:
            raise WrongDimension("structure constants must be a cubic array")
        object.__setattr__(self, "c", c)
        skew = c + np.swapaxes(c, -1, -2)
        if float(np.max(np.abs(skew))) > 1e-13:
            raise NotAntisymmetric("bracket must be antisymmetric in its inputs")
        jac = self.jacobi_defect()
        if float(np.max(np.abs(jac))) > 1e-12:
            raise ConfigError("structure constants violate the Jacobi identity")

    @property
    def dim(self):
        return self.c.shape[0]

    def jacobi_defect(self):
        """[[x,y],z] + [[y,z],x] + [[z,x],y] as an array over basis triples."""
        c = self.c
        t = np.einsum("mij,lmk->lijk", c, c)
        return t + np.einsum("ljki->lijk", t) + np.einsum("lkij->lijk", t)

    def bracket(self, x, y):
        return np.einsum("kij,...i,...j->...k", self.c, x, y)

    def is_two_step(self, tol=1e-13):
        """True if all brackets are central: c([x, y], z) = 0 identically."""
        comp = np.einsum("aij,kab->kijb", self.c, self.c)
        return float(np.max(np.abs(comp))) <= tol


@dataclass
class InvariantStructure:
    """Left-invariant almost-Hermitian pair in a fixed Lie-algebra basis."""

    lie: LieAlgebraData
    g: np.ndarray
    j: np.ndarray
    w: np.ndarray = field(default=None)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        self.j = np.asarray(self.j, dtype=float)
        if self.w is None:
            self.w = np.einsum("ki,kj->ij", self.j, self.g)

    @property
    def dim(self):
        return self.lie.dim

    @property
    def ginv(self):
        return metric_inverse(self.g)

    def validate(self, tol=1e-12):
        ensure_almost_complex(self.j, tol=tol)
        gjj = np.einsum("kl,ki,lj->ij", self.g, self.j, self.j)
        if float(np.max(np.abs(gjj - self.g))) > tol:
            raise ConfigError("frame metric is not J-compatible")
        return self


def koszul_connection(lie, g, ginv=None):
    """Levi-Civita connection of a left-invariant metric.

    2 <nabla_i e_j, e_k> = <[e_i,e_j], e_k> - <[e_j,e_k], e_i>
                           + <[e_k,e_i], e_j>
    """
    c = lie.c
    if ginv is None:
        ginv = metric_inverse(g)
    cl = np.einsum("mij,mk->ijk", c, g)  # <[e_i, e_j], e_k>
    low = 0.5 * (cl - np.einsum("jki->ijk", cl) + np.einsum("kij->ijk", cl))
    gamma = np.einsum("kl,ijl->kij", ginv, low)
    dgamma = np.zeros((lie.dim,) + gamma.shape)
    torsion = gamma - np.swapaxes(gamma, -1, -2)
    return ConnectionData(gamma=gamma, dgamma=dgamma, torsion=torsion)


def frame_curvature(lie, gamma, g, ginv=None):
    """Curvature of a frame connection: [nabla_i, nabla_j] - nabla_{[e_i,e_j]}.

    rm31[i,j,k,l] = G^m_{jk} G^l_{im} - G^m_{ik} G^l_{jm} - c^m_{ij} G^l_{mk}
    """
    if ginv is None:
        ginv = metric_inverse(g)
    gg = np.einsum("mjk,lim->ijkl", gamma, gamma)
    rm31 = gg - np.swapaxes(gg, 0, 1) - np.einsum("mij,lmk->ijkl", lie.c, gamma)
    rm = np.einsum("ijkm,ml->ijkl", rm31, g)
    ric = np.einsum("ijki->jk", rm31)
    scal = float(np.einsum("jk,jk->", ginv, ric))
    return CurvatureBundle(rm31=rm31, rm=rm, ric=ric, scal=scal)


def frame_covariant(t, gamma, variance):
    """Covariant derivative of an invariant tensor (no coordinate term)."""
    return covariant_derivative(t, np.zeros((gamma.shape[0],) + t.shape), gamma, variance)


def frame_rough_laplacian(t, gamma, ginv, variance):
    """D*D of an invariant tensor: -g^{ab} (nabla nabla T)[a, b, ...]."""
    n1 = frame_covariant(t, gamma, variance)
    n2 = frame_covariant(n1, gamma, ("d",) + tuple(variance))
    letters = "ijkl"[: len(variance)]
    return -np.einsum(f"yz,yz{letters}->{letters}", ginv, n2)


def nijenhuis_frame(lie, j):
    """Nijenhuis tensor from brackets:

    N(X,Y) = [JX,JY] - [X,Y] - J[JX,Y] - J[X,JY],  stored n[i,j,k].
    """
    c = lie.c
    t_jj = np.einsum("kpq,pi,qj->kij", c, j, j)
    t_j1 = np.einsum("kp,pmj,mi->kij", j, c, j)
    t_j2 = np.einsum("kp,pim,mj->kij", j, c, j)
    return t_jj - c - t_j1 - t_j2


def invariant_d_one_form(beta, lie):
    """d beta (a, b) = -beta([e_a, e_b]) for an invariant one-form."""
    return -np.einsum("k,kab->ab", beta, lie.c)


def invariant_d_two_form(phi, lie):
    """d phi (a,b,c) = -phi([a,b],c) + phi([a,c],b) - phi([b,c],a)."""
    c = lie.c
    return (
        -np.einsum("mab,mc->abc", c, phi)
        + np.einsum("mac,mb->abc", c, phi)
        - np.einsum("mbc,ma->abc", c, phi)
    )


@dataclass
class InvariantOperators:
    """Operator bundle for one invariant structure (all frame components)."""

    conn: ConnectionData
    curv: CurvatureBundle
    hconn: ConnectionData
    hcurv: CurvatureBundle
    nj: np.ndarray
    quad: object
    ric_j: np.ndarray
    rho: np.ndarray
    rho_star: np.ndarray
    p: np.ndarray
    s: np.ndarray
    ric_comm: np.ndarray
    ddj_rough: np.ndarray
    ddw_rough: np.ndarray
    nijenhuis: np.ndarray
    kappa: np.ndarray
    dw3: np.ndarray
    hodge_w: np.ndarray


def invariant_operators(structure):
    """All flow/identity operators of a left-invariant structure."""
    lie, g, j, w = structure.lie, structure.g, structure.j, structure.w
    ginv = metric_inverse(g)
    conn = koszul_connection(lie, g)
    curv = frame_curvature(lie, conn.gamma, g)
    nj = frame_covariant(j, conn.gamma, ("u", "d"))
    quad = quadratic_operators(g, ginv, j, nj)
    ric_j, rho, rho_star = ricci_forms(curv.rm, curv.ric, g, ginv, j, w)
    ric_comm = ricci_j_commutator(curv.ric, ginv, j)
    ddj_rough = frame_rough_laplacian(j, conn.gamma, ginv, ("u", "d"))
    ddw_rough = frame_rough_laplacian(w, conn.gamma, ginv, ("d", "d"))
    n = nijenhuis_frame(lie, j)
    # canonical connection in the frame
    corr = 0.5 * np.einsum("ikm,mj->kij", nj, j)
    hgamma = conn.gamma + corr
    hconn = ConnectionData(
        gamma=hgamma,
        dgamma=np.zeros((lie.dim,) + hgamma.shape),
        torsion=hgamma - np.swapaxes(hgamma, -1, -2),
    )
    hcurv = frame_curvature(lie, hgamma, g)
    p, s = omega_traces(hcurv.rm, omega_upper(w, ginv))
    # second-order J operator: w^{kl} (nabla^c_k N)(e_l, .)
    nn = frame_covariant(n, hgamma, ("u", "d", "d"))
    kappa = np.einsum("kl,kilj->ij", omega_upper(w, ginv), nn)
    # Hodge Laplacian of w from covariant data (same recipe as the jet route)
    nw = frame_covariant(w, conn.gamma, ("d", "d"))
    dw3 = nw - np.einsum("bac->abc", nw) + np.einsum("cab->abc", nw)
    delta_w = -np.einsum("ij,ijb->b", ginv, nw)
    ndelta = frame_covariant(delta_w, conn.gamma, ("d",))
    dd_star = ndelta - ndelta.T
    ndw3 = frame_covariant(dw3, conn.gamma, ("d", "d", "d"))
    star_d = -np.einsum("ij,ijbc->bc", ginv, ndw3)
    hodge_w = dd_star + star_d
    return InvariantOperators(
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
        kappa=kappa,
        dw3=dw3,
        hodge_w=hodge_w,
    )


def symplectic_rhs(structure):
    """Symplectic flow tendency for an invariant structure (frame components)."""
    ops = invariant_operators(structure)
    dg_dt = -2.0 * ops.curv.ric + 0.5 * ops.quad.b1 - ops.quad.b2
    dj_dt = -ops.ddj_rough + ops.quad.nsq_endo + ops.ric_comm
    return dg_dt, dj_dt, ops


def _symplectic_stage(lie, g, j):
    """Symplectic tendency for one integrator stage, minimal work.

    Same calls as the symplectic part of ``invariant_operators`` (hence
    bitwise-identical tendencies), skipping the hermitian-connection
    block the stepper never reads.  Returns (dg, dj, monitor-view) where
    the view carries just curv and quad for history sampling.
    """
    ginv = metric_inverse_unchecked(g)
    conn = koszul_connection(lie, g, ginv=ginv)
    curv = frame_curvature(lie, conn.gamma, g, ginv=ginv)
    nj = frame_covariant(j, conn.gamma, ("u", "d"))
    quad = quadratic_operators(g, ginv, j, nj)
    ddj_rough = frame_rough_laplacian(j, conn.gamma, ginv, ("u", "d"))
    ric_comm = ricci_j_commutator(curv.ric, ginv, j)
    dg_dt = -2.0 * curv.ric + 0.5 * quad.b1 - quad.b2
    dj_dt = -ddj_rough + quad.nsq_endo + ric_comm
    return dg_dt, dj_dt, _StageView(curv=curv, quad=quad)


@dataclass
class _StageView:
    """curv/quad-only view matching the fields ode_run's history reads."""

    curv: CurvatureBundle
    quad: object


def general_rhs(structure):
    """General almost-Hermitian flow tendency in (w, J) frame variables."""
    ops = invariant_operators(structure)
    h = pairing_form_from_endo(ops.kappa, structure.w, structure.j)
    dw_dt = -ops.s + h
    dj_dt = -ops.kappa
    dg_dt = np.einsum("ik,kj->ij", dw_dt, structure.j) + np.einsum(
        "ik,kj->ij", structure.w, dj_dt
    )
    return dg_dt, dj_dt, ops


def ode_run(structure, t_final, dt, rhs=symplectic_rhs, monitor_every=1):
    """Fixed-step RK4 integration of an invariant flow.

    Returns (structure_final, history) where history is a list of dicts
    with keys t, g, j, scal, dj_norm2, sup_rm.
    """
    lie = structure.lie
    g = np.array(structure.g, dtype=float)
    j = np.array(structure.j, dtype=float)
    nsteps = int(round(t_final / dt))
    history = []

    if rhs is symplectic_rhs:
        # same arithmetic as symplectic_rhs, skipping the hermitian
        # block the stepper never reads (stage cost dominates runtime)
        def f(gc, jc):
            return _symplectic_stage(lie, gc, jc)
    else:
        def f(gc, jc):
            st = InvariantStructure(lie=lie, g=gc, j=jc)
            dg, dj, ops = rhs(st)
            return dg, dj, ops

    t = 0.0
    for step in range(nsteps + 1):
        dg1, dj1, ops = f(g, j)
        if step % monitor_every == 0 or step == nsteps:
            history.append(
                {
                    "t": t,
                    "g": g.copy(),
                    "j": j.copy(),
                    "scal": ops.curv.scal,
                    "dj_norm2": float(ops.quad.dj_norm2),
                    "sup_rm": float(np.max(np.abs(ops.curv.rm))),
                }
            )
        if step == nsteps:
            break
        dg2, dj2, _ = f(g + 0.5 * dt * dg1, j + 0.5 * dt * dj1)
        dg3, dj3, _ = f(g + 0.5 * dt * dg2, j + 0.5 * dt * dj2)
        dg4, dj4, _ = f(g + dt * dg3, j + dt * dj3)
        g = g + (dt / 6.0) * (dg1 + 2.0 * dg2 + 2.0 * dg3 + dg4)
        j = j + (dt / 6.0) * (dj1 + 2.0 * dj2 + 2.0 * dj3 + dj4)
        t += dt
    return InvariantStructure(lie=lie, g=g, j=j), history


# ---------------------------------------------------------------------------
# presets


def abelian4_preset():
    """Flat torus algebra with the standard compatible pair (Kaehler)."""
    c = np.zeros((4, 4, 4))
    g = np.eye(4)
    j = np.zeros((4, 4))
    j[1, 0], j[0, 1] = 1.0, -1.0
    j[3, 2], j[2, 3] = 1.0, -1.0
    lie = LieAlgebraData(c=c)
    return lie, InvariantStructure(lie=lie, g=g, j=j).validate()


def kodaira_thurston_preset():
    """Kodaira-Thurston nilmanifold: (3d Heisenberg) x (line).

    [e1, e2] = e3, metric the identity, J e1 = e3, J e2 = e4.  The
    fundamental two-form e^1^e^3 + e^2^e^4 is closed but not parallel:
    the simplest strictly almost-Kaehler homogeneous example.
    """
    c = np.zeros((4, 4, 4))
    c[2, 0, 1], c[2, 1, 0] = 1.0, -1.0
    g = np.eye(4)
    j = np.zeros((4, 4))
    j[2, 0], j[0, 2] = 1.0, -1.0
    j[3, 1], j[1, 3] = 1.0, -1.0
    lie = LieAlgebraData(c=c)
    return lie, InvariantStructure(lie=lie, g=g, j=j).validate()


def iwasawa6_preset():
    """Six-dimensional two-step example on an Iwasawa-type algebra.

    [e1,e3] = e5/2, [e2,e4] = e5/2, [e1,e4] = e6/2, [e2,e3] = -e6/2,
    J e1 = e5, J e2 = e6, J e3 = e4.  The two-form e^1^e^5 + e^2^e^6
    + e^3^e^4 is closed (the center pairs off against the closure
    constraints), so the pair (g = Id, w) is strictly almost Kaehler
    with a nonvanishing Nijenhuis tensor.
    """
    c = np.zeros((6, 6, 6))
    pairs = [
        (4, 0, 2, 0.5),
        (4, 1, 3, 0.5),
        (5, 0, 3, 0.5),
        (5, 1, 2, -0.5),
    ]
    for k, i, jx, v in pairs:
        c[k, i, jx] = v
        c[k, jx, i] = -v
    g = np.eye(6)
    j = np.zeros((6, 6))
    j[4, 0], j[0, 4] = 1.0, -1.0
    j[5, 1], j[1, 5] = 1.0, -1.0
    j[3, 2], j[2, 3] = 1.0, -1.0
    lie = LieAlgebraData(c=c)
    return lie, InvariantStructure(lie=lie, g=g, j=j).validate()


PRESETS = {
    "abelian4": abelian4_preset,
    "kodaira_thurston": kodaira_thurston_preset,
    "iwasawa6": iwasawa6_preset,
}


def get_preset(name):
    """Look up a preset structure by catalog name."""
    try:
        factory = PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(f"unknown preset '{name}' (known: {known})") from None
    return factory()[1]


# ---------------------------------------------------------------------------
# exact coordinate jets for two-step algebras


def exact_jet(structure, x):
    """Exact second-order coordinate jet of a two-step invariant structure.

    In exponential coordinates of a two-step nilpotent group the frame
    fields E_a = (Id + C(x)/2) e_a with C(x)^i_a = x^k c^i_{ka} satisfy
    [E_a, E_b] = c^m_{ab} E_m exactly, and C(x) C(y) = 0 for all x, y.
    The coordinate components of the invariant pair are then quadratic
    polynomials, so all jets below are exact (no truncation error).
    """
    lie = structure.lie
    if not lie.is_two_step():
        raise ConfigError("exact coordinate jets require a two-step algebra")
    c = lie.c
    d = lie.dim
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise WrongDimension("points must have the algebra dimension")
    batch = x.shape[:-1]
    gbar, jbar = structure.g, structure.j
    # ck[k, i, a] = c^i_{ka}: derivative of C in direction k
    ck = np.einsum("ika->kia", c)
    cx = np.einsum("...k,kia->...ia", x, ck)
    eye = np.broadcast_to(np.eye(d), batch + (d, d))
    # metric: (Id - C/2)^T gbar (Id - C/2)
    theta = eye - 0.5 * cx
    g = np.einsum("...ai,ab,...bj->...ij", theta, gbar, theta)
    dg = -0.5 * (
        np.einsum("kai,ab,...bj->...kij", ck, gbar, theta)
        + np.einsum("...ai,ab,kbj->...kij", theta, gbar, ck)
    )
    ddg = 0.25 * (
        np.einsum("kai,ab,lbj->klij", ck, gbar, ck)
        + np.einsum("lai,ab,kbj->klij", ck, gbar, ck)
    )
    ddg = np.broadcast_to(ddg, batch + (d, d, d, d)).copy()
    # J: (Id + C/2) jbar (Id - C/2)
    e = eye + 0.5 * cx
    j = np.einsum("...ia,ab,...bj->...ij", e, jbar, theta)
    dj = 0.5 * (
        np.einsum("kia,ab,...bj->...kij", ck, jbar, theta)
        - np.einsum("...ia,ab,kbj->...kij", e, jbar, ck)
    )
    ddj = -0.25 * (
        np.einsum("kia,ab,lbj->klij", ck, jbar, ck)
        + np.einsum("lia,ab,kbj->klij", ck, jbar, ck)
    )
    ddj = np.broadcast_to(ddj, batch + (d, d, d, d)).copy()
    mjet = MetricJet2(g=g, dg=dg, ddg=ddg)
    return AlmostHermitianJet(mjet=mjet, j=j, dj=dj, ddj=ddj)
