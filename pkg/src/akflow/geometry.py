"""Levi-Civita geometry assembled from metric 2-jets at a point.

All functions accept arrays whose trailing axes are tensor slots; leading
axes are batch axes, so the same code evaluates a single point or a whole
grid of points.

Storage conventions (see tensor_point for the full table):

    gamma[k, i, j]        Gamma^k_{ij}, upper slot first
    dgamma[l, k, i, j]    d_l Gamma^k_{ij}
    rm31[i, j, k, l]      R(e_i, e_j) e_k = rm31[i,j,k,:] (last slot up)
    rm[i, j, k, l]        <R(e_i,e_j)e_k, e_l>
    ric[j, k]             trace rm31[i,j,k,i]

Curvature sign: R(X,Y)Z = D_X D_Y Z - D_Y D_X Z - D_{[X,Y]} Z, so the
round unit 2-sphere has Ric = +g and scal = 2.
"""

from dataclasses import dataclass, field

import numpy as np

from .constants import OMEGA_CONTRACTION_SIGN
from .errors import SlotMismatch, WrongDimension
from .tensor_point import metric_inverse_unchecked

_SLOT_LETTERS = "abcdefh"
_EINSUM_CACHE = {}


@dataclass
class MetricJet2:
    """Second-order jet of a metric: g, dg[k,i,j], ddg[l,k,i,j]."""

    g: np.ndarray
    dg: np.ndarray
    ddg: np.ndarray
    ginv: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ginv is None:
            self.ginv = metric_inverse_unchecked(self.g)

    @property
    def dim(self):
        return self.g.shape[-1]


@dataclass
class ConnectionData:
    """Connection coefficients and their first derivatives.

    torsion is the vector-valued two-form T^k_{ij} = gamma[k,i,j] -
    gamma[k,j,i]; identically zero for the Levi-Civita connection.
    """

    gamma: np.ndarray
    dgamma: np.ndarray
    torsion: np.ndarray
    metric_compatible: bool = True


@dataclass
class CurvatureBundle:
    """Curvature of a connection: (3,1) and (4,0) tensors plus traces."""

    rm31: np.ndarray
    rm: np.ndarray
    ric: np.ndarray
    scal: np.ndarray


def christoffel(jet):
    """Levi-Civita connection of a metric 2-jet, with first derivatives."""
    g, dg, ddg, ginv = jet.g, jet.dg, jet.ddg, jet.ginv
    # a[l,i,j] = d_i g_{jl} + d_j g_{il} - d_l g_{ij}
    a = (
        np.einsum("...ijl->...lij", dg)
        + np.einsum("...jil->...lij", dg)
        - dg
    )
    gamma = 0.5 * np.einsum("...kl,...lij->...kij", ginv, a)
    # da[m,l,i,j] = d_m a[l,i,j], assembled from the symmetric second jet
    da = (
        np.einsum("...mijl->...mlij", ddg)
        + np.einsum("...mjil->...mlij", ddg)
        - ddg
    )
    dginv_half = np.einsum("...lb,...mab->...mal", ginv, dg)
    dginv = -np.einsum("...ka,...mal->...mkl", ginv, dginv_half)
    dgamma = 0.5 * (
        np.einsum("...mkl,...lij->...mkij", dginv, a)
        + np.einsum("...kl,...mlij->...mkij", ginv, da)
    )
    torsion = gamma - np.swapaxes(gamma, -1, -2)
    return ConnectionData(gamma=gamma, dgamma=dgamma, torsion=torsion)


def curvature_from_connection(conn, g):
    """Curvature tensor of any connection given its coefficient jet.

    rm31[i,j,k,l] = d_i G^l_{jk} - d_j G^l_{ik} + G^l_{ip} G^p_{jk}
                    - G^l_{jp} G^p_{ik}
    """
    gamma, dgamma = conn.gamma, conn.dgamma
    gg = np.einsum("...lip,...pjk->...ijkl", gamma, gamma)
    rm31 = (
        np.einsum("...iljk->...ijkl", dgamma)
        - np.einsum("...jlik->...ijkl", dgamma)
        + gg
        - np.swapaxes(gg, -4, -3)
    )
    rm = np.einsum("...ijkm,...ml->...ijkl", rm31, g)
    ric = np.einsum("...ijki->...jk", rm31)
    ginv = metric_inverse_unchecked(g)
    scal = np.einsum("...jk,...jk->...", ginv, ric)
    return CurvatureBundle(rm31=rm31, rm=rm, ric=ric, scal=scal)


def riemann(jet, conn=None):
    """Riemann curvature of a metric 2-jet (Levi-Civita by default)."""
    if conn is None:
        conn = christoffel(jet)
    return curvature_from_connection(conn, jet.g)


def _cov_spec(rank_key):
    """Cached einsum specs for the per-slot connection corrections."""
    specs = _EINSUM_CACHE.get(rank_key)
    if specs is not None:
        return specs
    variance = rank_key
    rank = len(variance)
    letters = _SLOT_LETTERS[:rank]
    specs = []
    for s, v in enumerate(variance):
        x = letters[s]
        rest = letters
        if v == "u":
            # + G^{x}_{z m} T[... m ...]
            src = rest[:s] + "m" + rest[s + 1 :]
            specs.append(("+", f"...{x}zm,...{src}->...z{rest}"))
        else:
            # - G^{m}_{z x} T[... m ...]
            src = rest[:s] + "m" + rest[s + 1 :]
            specs.append(("-", f"...mz{x},...{src}->...z{rest}"))
    _EINSUM_CACHE[rank_key] = specs
    return specs


def covariant_derivative(t, dt, gamma, variance):
    """One covariant derivative of a tensor with given slot variances.

    Returns nabla T with the new derivative slot first among the trailing
    tensor axes: out[z, slots] = dt[z, slots] + per-slot corrections.
    """
    rank = len(variance)
    if rank == 0:
        return dt
    if rank > len(_SLOT_LETTERS):
        raise SlotMismatch(f"rank {rank} beyond supported maximum")
    out = np.array(dt, dtype=float, copy=True)
    for sign, spec in _cov_spec(tuple(variance)):
        term = np.einsum(spec, gamma, t)
        if sign == "+":
            out += term
        else:
            out -= term
    return out


def covariant_derivative_jet(t, dt, ddt, gamma, dgamma, variance):
    """Covariant derivative together with its coordinate derivative.

    Returns (nt, dnt) where nt = covariant_derivative(t, dt, ...) and
    dnt[y, z, slots] = d_y nt[z, slots], assembled by the product rule so
    a second covariant derivative can be taken without new stencil passes.
    """
    rank = len(variance)
    nt = np.array(dt, dtype=float, copy=True)
    dnt = np.array(ddt, dtype=float, copy=True)
    if rank == 0:
        return nt, dnt
    letters = _SLOT_LETTERS[:rank]
    for s, v in enumerate(variance):
        x = letters[s]
        src = letters[:s] + "m" + letters[s + 1 :]
        if v == "u":
            spec = f"...{x}zm,...{src}->...z{letters}"
            dspec_g = f"...y{x}zm,...{src}->...yz{letters}"
            dspec_t = f"...{x}zm,...y{src}->...yz{letters}"
            nt += np.einsum(spec, gamma, t)
            dnt += np.einsum(dspec_g, dgamma, t)
            dnt += np.einsum(dspec_t, gamma, dt)
        else:
            spec = f"...mz{x},...{src}->...z{letters}"
            dspec_g = f"...ymz{x},...{src}->...yz{letters}"
            dspec_t = f"...mz{x},...y{src}->...yz{letters}"
            nt -= np.einsum(spec, gamma, t)
            dnt -= np.einsum(dspec_g, dgamma, t)
            dnt -= np.einsum(dspec_t, gamma, dt)
    return nt, dnt


def second_covariant_derivative(t, dt, ddt, gamma, dgamma, variance):
    """nabla^2 T[y, z, slots] for a tensor with a full second jet."""
    nt, dnt = covariant_derivative_jet(t, dt, ddt, gamma, dgamma, variance)
    return covariant_derivative(nt, dnt, gamma, ("d",) + tuple(variance))


def rough_laplacian(t, dt, ddt, jet, conn, variance):
    """Connection Laplacian D*D T = -g^{yz} nabla_y nabla_z T (nonnegative).

    On the flat torus this sends sin(x1) to +sin(x1).
    """
    n2 = second_covariant_derivative(t, dt, ddt, conn.gamma, conn.dgamma, variance)
    rank = len(variance)
    letters = _SLOT_LETTERS[:rank]
    return -np.einsum(f"...yz,...yz{letters}->...{letters}", jet.ginv, n2)


def _kulkarni_nomizu(p, q):
    """(P wedge Q)_{ijkl} = P_ik Q_jl + P_jl Q_ik - P_il Q_jk - P_jk Q_il."""
    t1 = np.einsum("...ik,...jl->...ijkl", p, q)
    t2 = np.einsum("...jl,...ik->...ijkl", p, q)
    t3 = np.einsum("...il,...jk->...ijkl", p, q)
    t4 = np.einsum("...jk,...il->...ijkl", p, q)
    return t1 + t2 - t3 - t4


def weyl_tensor(jet, curv):
    """Weyl curvature in the package sign convention (vanishes iff the
    metric is locally conformally flat, dim >= 4)."""
    g, ginv = jet.g, jet.ginv
    n = jet.dim
    if n < 4:
        raise WrongDimension("Weyl tensor requires dimension >= 4")
    ric, scal = curv.ric, curv.scal
    e = ric - (scal / n)[..., None, None] * g
    w = (
        curv.rm
        + _kulkarni_nomizu(e, g) / (n - 2)
        + (scal / (2.0 * n * (n - 1)))[..., None, None, None, None]
        * _kulkarni_nomizu(g, g)
    )
    return w


def _self_dual_basis(d, orient_sign):
    """Orthonormal basis of the self-dual two-forms of flat R^4.

    orient_sign = +1 uses the e1^e2^e3^e4 orientation; -1 the opposite.
    Normalized to unit full-contraction norm.
    """
    pairs = [((0, 1), (2, 3)), ((0, 2), (3, 1)), ((0, 3), (1, 2))]
    basis = np.zeros((3, d, d))
    for a, ((p, q), (r, s)) in enumerate(pairs):
        basis[a, p, q] = 0.5
        basis[a, q, p] = -0.5
        basis[a, r, s] = 0.5 * orient_sign
        basis[a, s, r] = -0.5 * orient_sign
    return basis


def weyl_plus(jet, curv, orient_sign=1):
    """Self-dual block of the Weyl operator on two-forms (dim 4 only).

    Returns a symmetric trace-free 3x3 matrix (batched) in an orthonormal
    self-dual basis.  orient_sign selects the orientation: +1 for
    e1^e2^e3^e4, -1 for the opposite; a compatible almost complex
    structure is self-dual exactly when orient_sign matches the
    orientation it induces.
    """
    if jet.dim != 4:
        raise WrongDimension("weyl_plus requires dimension 4")
    w = weyl_tensor(jet, curv)
    # Move to a g-orthonormal frame: columns of inv(L)^T with g = L L^T.
    l = np.linalg.cholesky(jet.g)
    f = np.linalg.inv(np.swapaxes(l, -1, -2))
    wf = np.einsum(
        "...ijkl,...ia,...jb,...kc,...ld->...abcd", w, f, f, f, f, optimize=True
    )
    basis = _self_dual_basis(4, orient_sign)
    block = OMEGA_CONTRACTION_SIGN * np.einsum(
        "Aij,...ijkl,Bkl->...AB", basis, wf, basis, optimize=True
    )
    return block


def frame_orthonormalizer(g):
    """Columns of the returned matrix form a g-orthonormal frame."""
    l = np.linalg.cholesky(g)
    return np.linalg.inv(np.swapaxes(l, -1, -2))
