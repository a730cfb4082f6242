"""Dense tensor algebra at a single point.

Tensors are plain numpy arrays whose trailing axes are the tensor slots;
any leading axes are batch axes, so every function here also works on
whole fields of points.  The DenseTensor wrapper adds variance bookkeeping
for the public pointwise API; the geometry engine passes raw arrays.

Index storage conventions used across the package:

    g[i, j]          metric, both slots down
    J[i, j]          endomorphism J^i_j, first slot up
    w[i, j]          two-form w_{ij} = g(J e_i, e_j)
    dg[k, i, j]      coordinate derivative d_k g_{ij} (derivative slot first)
    phi[a, b, c]     three-form components phi(e_a, e_b, e_c)
"""

from dataclasses import dataclass

import numpy as np

from .constants import METRIC_EIG_FLOOR, SUPPORTED_DIMS, DEFAULT_TOL
from .errors import (
    DegenerateMetric,
    NotAlmostComplex,
    NotAntisymmetric,
    SlotMismatch,
    WrongDimension,
)

UP = "u"
DOWN = "d"


@dataclass(frozen=True)
class DenseTensor:
    """A dense tensor with per-slot variance markers ('u' or 'd')."""

    components: np.ndarray
    variance: tuple

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=float)
        object.__setattr__(self, "components", comp)
        if len(self.variance) != comp.ndim:
            raise SlotMismatch(
                f"variance lists {len(self.variance)} slots, "
                f"components have rank {comp.ndim}"
            )
        for v in self.variance:
            if v not in (UP, DOWN):
                raise SlotMismatch(f"variance markers must be 'u' or 'd', got {v!r}")
        if comp.ndim > 0:
            dims = set(comp.shape)
            if len(dims) != 1:
                raise SlotMismatch(f"mixed slot dimensions {comp.shape}")
            (dim,) = dims
            if dim not in SUPPORTED_DIMS:
                raise WrongDimension(f"dimension {dim} not in {SUPPORTED_DIMS}")

    @property
    def rank(self):
        return self.components.ndim

    @property
    def dim(self):
        return self.components.shape[-1] if self.rank else 0


def check_finite(arr, what="array"):
    """Raise NonFinite if arr contains NaN or Inf."""
    from .errors import NonFinite

    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains NaN or Inf")


def metric_inverse(g, eig_floor=METRIC_EIG_FLOOR):
    """Inverse of a symmetric positive definite metric (batched).

    Raises DegenerateMetric when the smallest eigenvalue does not clear
    eig_floor, which also catches indefinite input.
    """
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != g.shape[-2]:
        raise SlotMismatch(f"metric must be square, got shape {g.shape}")
    sym_defect = np.max(np.abs(g - np.swapaxes(g, -1, -2)))
    if sym_defect > 1e-10 * max(1.0, float(np.max(np.abs(g)))):
        raise NotAntisymmetric(f"metric not symmetric (defect {sym_defect:.3e})")
    w = np.linalg.eigvalsh(g)
    min_eig = float(np.min(w))
    if min_eig <= eig_floor:
        raise DegenerateMetric(f"metric eigenvalue {min_eig:.6e} <= {eig_floor:.1e}")
    return np.linalg.inv(g)


def metric_inverse_unchecked(g):
    """Plain batched inverse for inner loops that guard degeneracy elsewhere."""
    return np.linalg.inv(np.asarray(g, dtype=float))


def contract(t, slot_a, slot_b, metric=None, metric_inv=None):
    """Contract two slots of a DenseTensor.

    Opposite variances trace directly.  Equal variances require the metric
    (both down) or its inverse (both up) to raise or lower one slot first.
    Returns a DenseTensor of rank-2 lower rank; rank-2 input yields a
    scalar DenseTensor of rank 0.
    """
    if not isinstance(t, DenseTensor):
        raise SlotMismatch("contract expects a DenseTensor")
    r = t.rank
    if slot_a == slot_b or not (0 <= slot_a < r and 0 <= slot_b < r):
        raise SlotMismatch(f"bad slot pair ({slot_a}, {slot_b}) for rank {r}")
    va, vb = t.variance[slot_a], t.variance[slot_b]
    comp = t.components
    if va == vb:
        if va == DOWN:
            if metric_inv is None:
                if metric is None:
                    raise SlotMismatch("contracting two down slots needs the metric")
                metric_inv = metric_inverse(metric)
            comp = np.tensordot(comp, metric_inv, axes=([slot_a], [0]))
        else:
            if metric is None:
                raise SlotMismatch("contracting two up slots needs the metric")
            comp = np.tensordot(comp, np.asarray(metric, dtype=float), axes=([slot_a], [0]))
        # tensordot moved slot_a to the last axis; slot_b may have shifted.
        b = slot_b - 1 if slot_b > slot_a else slot_b
        comp = np.trace(comp, axis1=b, axis2=comp.ndim - 1)
        new_var = tuple(v for i, v in enumerate(t.variance) if i not in (slot_a, slot_b))
    else:
        comp = np.trace(comp, axis1=slot_a, axis2=slot_b)
        new_var = tuple(v for i, v in enumerate(t.variance) if i not in (slot_a, slot_b))
    return DenseTensor(comp, new_var)


def ensure_antisymmetric(w, tol=None, what="two-form"):
    """Check antisymmetry of the trailing two axes."""
    tol = DEFAULT_TOL.roundoff if tol is None else tol
    w = np.asarray(w, dtype=float)
    defect = float(np.max(np.abs(w + np.swapaxes(w, -1, -2))))
    scale = max(1.0, float(np.max(np.abs(w))))
    if defect > tol * scale:
        raise NotAntisymmetric(f"{what} antisymmetry defect {defect:.3e}")


def ensure_almost_complex(j, tol=None):
    """Check J @ J = -Id on the trailing two axes."""
    tol = 1e-10 if tol is None else tol
    j = np.asarray(j, dtype=float)
    d = j.shape[-1]
    jj = np.einsum("...ik,...kj->...ij", j, j)
    defect = float(np.max(np.abs(jj + np.eye(d))))
    if defect > tol:
        raise NotAlmostComplex(f"J^2 + Id defect {defect:.3e}")


def endo_apply_form(w, j, slot):
    """Insert J into one slot of a (0,2) tensor: slot 0 gives w(J.,.)."""
    if slot == 0:
        return np.einsum("...kj,...ki->...ij", w, j)
    if slot == 1:
        return np.einsum("...ik,...kj->...ij", w, j)
    raise SlotMismatch(f"slot must be 0 or 1, got {slot}")


def j_split(w, j):
    """Split a (0,2) tensor into its J-invariant and J-anti-invariant parts.

    Returns (w_inv, w_anti) with w_inv(X,Y) = (w(X,Y) + w(JX,JY))/2.
    For two-forms these are the (1,1) and (2,0)+(0,2) pieces.
    """
    w = np.asarray(w, dtype=float)
    j = np.asarray(j, dtype=float)
    wjj = np.einsum("...kl,...ki,...lj->...ij", w, j, j)
    w_inv = 0.5 * (w + wjj)
    return w_inv, w - w_inv


def form_type_split(phi, j):
    """Split a three-form into its (2,1)+(1,2) and (3,0)+(0,3) parts.

    Uses the eigendecomposition of the pairwise J-insertion operator,
    which acts as +1 on (2,1)+(1,2) and -3 on (3,0)+(0,3):
        plus  = (3 phi + T phi) / 4
        minus = (phi - T phi) / 4
    where (T phi)(X,Y,Z) sums phi over the three ways of applying J to
    two of the slots.
    """
    phi = np.asarray(phi, dtype=float)
    j = np.asarray(j, dtype=float)
    ensure_antisymmetric_3(phi)
    t = (
        np.einsum("...pqc,...pa,...qb->...abc", phi, j, j)
        + np.einsum("...pbq,...pa,...qc->...abc", phi, j, j)
        + np.einsum("...apq,...pb,...qc->...abc", phi, j, j)
    )
    plus = 0.25 * (3.0 * phi + t)
    minus = 0.25 * (phi - t)
    return plus, minus


def ensure_antisymmetric_3(phi, tol=None):
    """Check total antisymmetry of the trailing three axes."""
    tol = DEFAULT_TOL.roundoff if tol is None else tol
    phi = np.asarray(phi, dtype=float)
    scale = max(1.0, float(np.max(np.abs(phi))))
    swaps = (
        np.swapaxes(phi, -1, -2),
        np.swapaxes(phi, -2, -3),
    )
    for s in swaps:
        defect = float(np.max(np.abs(phi + s)))
        if defect > tol * scale:
            raise NotAntisymmetric(f"three-form antisymmetry defect {defect:.3e}")


def two_form_inner(a, b, ginv):
    """Full contraction <a,b> = a_{ij} b_{kl} g^{ik} g^{jl} (batched scalar)."""
    b_up = np.einsum("...ik,...kl->...il", ginv, b)
    b_up = np.einsum("...jl,...il->...ij", ginv, b_up)
    return np.einsum("...ij,...ij->...", a, b_up)


def tensor_norm2(t, g, ginv, variance):
    """Squared g-norm of a tensor given per-slot variance markers.

    Up slots contract with g, down slots with g inverse.  Indices are
    moved one slot at a time so the cost stays linear in the rank.
    """
    t = np.asarray(t, dtype=float)
    rank = len(variance)
    letters = "abcdefgh"[:rank]
    moved = t
    for slot, v in enumerate(variance):
        pairing = g if v == UP else ginv
        out = letters[:slot] + "z" + letters[slot + 1 :]
        moved = np.einsum(f"...{letters[slot]}z,...{letters}->...{out}", pairing, moved)
    return np.einsum(f"...{letters},...{letters}->...", t, moved)


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def antisymmetrize(a):
    return 0.5 * (a - np.swapaxes(a, -1, -2))
