"""Periodic structured-grid fields on flat tori and their finite-difference calculus.

The torus has side length 2*pi on every axis, sampled by m points per axis
(spacing h = 2*pi/m).  Fields are stored component-major: the tensor axes
come first and the grid axes last, so a single component is one contiguous
block and stencil sweeps stream through memory.

Derivative layout convention (matching the pointwise jet modules): every
derivative operator *prepends* its direction axis.  For a field ``f`` with
tensor shape ``ts``:

* ``first_jet(f)[k]``     is the partial derivative along grid axis k,
* ``second_jet(f)[l, k]`` is d_l d_k f  (symmetric in l, k).

Mixed second partials compose the same 1d first-derivative stencils, so
discrete partials commute exactly and the discrete exterior derivative
satisfies d(d(.)) = 0 to round-off.  Pure second partials use a dedicated
central stencil of the same order for a smaller error constant.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .constants import BOX_SIDE
from .errors import ConfigError, NonFinite, SnapshotFormatError
from .geometry import MetricJet2, christoffel
from .tensor_point import metric_inverse_unchecked

MAGIC = b"AKFLOW01"
HEADER_BYTES = 64

# halo width needed by the widest stencil of each order
_HALO = {2: 1, 4: 2}


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on a flat torus of side 2*pi per axis."""

    dim: int
    points_per_axis: int
    stencil_order: int = 4

    def __post_init__(self):
        if self.dim not in (4, 6):
            raise ConfigError(f"grid dim must be 4 or 6, got {self.dim}")
        if self.points_per_axis < 8:
            raise ConfigError(
                f"points_per_axis must be >= 8, got {self.points_per_axis}"
            )
        if self.stencil_order not in (2, 4):
            raise ConfigError(
                f"stencil_order must be 2 or 4, got {self.stencil_order}"
            )

    @property
    def h(self):
        return BOX_SIDE / self.points_per_axis

    @property
    def shape(self):
        return (self.points_per_axis,) * self.dim

    @property
    def npoints(self):
        return self.points_per_axis ** self.dim

    @property
    def halo(self):
        return _HALO[self.stencil_order]

    def axis_coordinates(self):
        """Sample coordinates of one axis: x_i = i*h, i = 0..m-1."""
        return np.arange(self.points_per_axis) * self.h

    def coordinate_arrays(self):
        """Per-axis coordinate fields, each broadcastable to the grid shape."""
        x = self.axis_coordinates()
        out = []
        for a in range(self.dim):
            shape = [1] * self.dim
            shape[a] = self.points_per_axis
            out.append(x.reshape(shape))
        return out


@dataclass
class GridField:
    """Dense tensor field over the grid: tensor axes first, grid axes last.

    ``variance`` holds one letter per tensor slot ("u" contravariant /
    "d" covariant); scalars have an empty variance.
    """

    spec: GridSpec
    data: np.ndarray
    variance: tuple = ()

    def __post_init__(self):
        rank = len(self.variance)
        ok = (
            self.data.shape[:rank] == (self.spec.dim,) * rank
            and self.data.shape[rank:] == self.spec.shape
        )
        if not ok:
            raise ConfigError(
                "field shape {} does not match variance {} on grid {}".format(
                    self.data.shape, self.variance, self.spec.shape
                )
            )

    @property
    def rank(self):
        return len(self.variance)

    def check_finite(self, what="grid field"):
        if not np.all(np.isfinite(self.data)):
            raise NonFinite(f"{what} contains NaN/Inf")
        return self

    def copy(self):
        return GridField(self.spec, self.data.copy(), self.variance)


def field_from_function(spec, fn, variance=()):
    """Sample ``fn(coords) -> components`` into a GridField.

    ``fn`` receives the list of broadcastable per-axis coordinate arrays and
    returns an array broadcastable to (dim,)*rank + grid shape.
    """
    coords = spec.coordinate_arrays()
    target = (spec.dim,) * len(variance) + spec.shape
    data = np.broadcast_to(np.asarray(fn(coords), dtype=float), target).copy()
    return GridField(spec, data, variance)


def constant_field(spec, tensor, variance):
    """Broadcast a constant per-point tensor over the grid."""
    tensor = np.asarray(tensor, dtype=float)
    data = np.broadcast_to(
        tensor.reshape(tensor.shape + (1,) * spec.dim),
        tensor.shape + spec.shape,
    ).copy()
    return GridField(spec, data, variance)


# ----------------------------------------------------------------------
# stencil primitives
#
# np.roll implements the periodic wrap.  The same primitives run on
# axis-0-extended slabs: a halo of `spec.halo` rows absorbs the spurious
# wraparound (shifts never exceed the halo), and the halo rows are
# cropped afterwards.
# ----------------------------------------------------------------------

def _d1(data, spec, tensor_ndim, axis):
    """First derivative along grid axis ``axis``."""
    ax = tensor_ndim + axis
    h = spec.h
    if spec.stencil_order == 2:
        return (np.roll(data, -1, ax) - np.roll(data, 1, ax)) / (2.0 * h)
    return (
        -np.roll(data, -2, ax)
        + 8.0 * np.roll(data, -1, ax)
        - 8.0 * np.roll(data, 1, ax)
        + np.roll(data, 2, ax)
    ) / (12.0 * h)


def _d2(data, spec, tensor_ndim, axis):
    """Pure second derivative along one grid axis (dedicated stencil)."""
    ax = tensor_ndim + axis
    h2 = spec.h * spec.h
    if spec.stencil_order == 2:
        return (np.roll(data, -1, ax) - 2.0 * data + np.roll(data, 1, ax)) / h2
    return (
        -np.roll(data, -2, ax)
        + 16.0 * np.roll(data, -1, ax)
        - 30.0 * data
        + 16.0 * np.roll(data, 1, ax)
        - np.roll(data, 2, ax)
    ) / (12.0 * h2)


def first_jet(f: GridField):
    """All first partials, derivative axis prepended: out[k] = d_k f."""
    out = np.empty((f.spec.dim,) + f.data.shape)
    for a in range(f.spec.dim):
        out[a] = _d1(f.data, f.spec, f.rank, a)
    return out


def second_jet(f: GridField, df=None):
    """All second partials: out[l, k] = d_l d_k f (symmetric in l, k)."""
    spec, tn = f.spec, f.rank
    d = spec.dim
    if df is None:
        df = first_jet(f)
    out = np.empty((d, d) + f.data.shape)
    for k in range(d):
        out[k, k] = _d2(f.data, spec, tn, k)
        for l in range(k + 1, d):
            mixed = _d1(df[k], spec, tn, l)
            out[l, k] = mixed
            out[k, l] = mixed
    return out


def jets(f: GridField, order):
    """Per-point derivative fields of ``f`` up to ``order`` in {1, 2}."""
    if order not in (1, 2):
        raise ConfigError(f"jet order must be 1 or 2, got {order}")
    df = first_jet(f)
    if order == 1:
        return (df,)
    return (df, second_jet(f, df))


# ----------------------------------------------------------------------
# slab (chunked) jet extraction — the point-engine bridge
# ----------------------------------------------------------------------

def slab_ranges(spec, max_points=150_000):
    """Partition grid axis 0 into slabs below a fixed point budget.

    The partition depends only on the grid spec and the constant budget —
    never on worker count — so chunked reductions stay deterministic.
    """
    m = spec.points_per_axis
    per_row = m ** (spec.dim - 1)
    rows = max(1, min(m, max_points // per_row))
    return [(i, min(i + rows, m)) for i in range(0, m, rows)]


def _extended_slab(data, spec, tensor_ndim, i0, i1):
    """Rows i0-halo .. i1-1+halo (mod m) along grid axis 0."""
    m = spec.points_per_axis
    idx = np.arange(i0 - spec.halo, i1 + spec.halo) % m
    return np.take(data, idx, axis=tensor_ndim)


def _slab_jets(data, spec, tensor_ndim, i0, i1):
    """(value, first, second) jets on the grid-axis-0 slab [i0, i1).

    Shapes: value = tensor + slab grid; first = (dim,) + value shape;
    second = (dim, dim) + value shape.
    """
    halo = spec.halo
    d = spec.dim
    ext = _extended_slab(data, spec, tensor_ndim, i0, i1)

    def crop(a):
        ax = a.ndim - d  # first grid axis
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(halo, a.shape[ax] - halo)
        return a[tuple(sl)]

    tshape = data.shape[:tensor_ndim]
    slab_shape = (i1 - i0,) + data.shape[tensor_ndim + 1:]
    df = np.empty((d,) + tshape + slab_shape)
    ddf = np.empty((d, d) + tshape + slab_shape)
    ext_d = []
    for a in range(d):
        da = _d1(ext, spec, tensor_ndim, a)
        ext_d.append(da)
        df[a] = crop(da)
    for k in range(d):
        ddf[k, k] = crop(_d2(ext, spec, tensor_ndim, k))
        for l in range(k + 1, d):
            # second direction l > k >= 0 never re-differentiates axis 0,
            # so one halo is enough for every mixed partial
            mixed = crop(_d1(ext_d[k], spec, tensor_ndim, l))
            ddf[l, k] = mixed
            ddf[k, l] = mixed
    return crop(ext), df, ddf


def _to_batch(a, spec):
    """Move the grid axes (always trailing) to one leading batch axis."""
    d = spec.dim
    a = np.moveaxis(a, list(range(a.ndim - d, a.ndim)), list(range(d)))
    npts = int(np.prod(a.shape[:d]))
    return np.ascontiguousarray(a.reshape((npts,) + a.shape[d:]))


def from_point_batch(batch, spec, nslab=None):
    """Inverse of _to_batch: (N,) + tensor -> tensor + (slab) grid."""
    d = spec.dim
    m = spec.points_per_axis
    if nslab is None:
        nslab = m
    grid_shape = (nslab,) + (m,) * (d - 1)
    a = batch.reshape(grid_shape + batch.shape[1:])
    return np.moveaxis(a, list(range(d)), list(range(a.ndim - d, a.ndim)))


def slab_point_batch(spec, arrays, i0, i1):
    """Jets of several fields on a slab, flattened to a point batch.

    ``arrays`` is a list of (data, tensor_ndim) pairs; for each, returns a
    (value, first, second) triple with shapes (N,)+ts, (N, dim)+ts and
    (N, dim, dim)+ts, where N = (i1-i0) * m**(dim-1).  Derivative axes sit
    right after the batch axis, matching the pointwise jet dataclasses.
    """
    out = []
    for data, tn in arrays:
        val, df, ddf = _slab_jets(data, spec, tn, i0, i1)
        out.append((_to_batch(val, spec), _to_batch(df, spec), _to_batch(ddf, spec)))
    return out


# ----------------------------------------------------------------------
# discrete exterior calculus
# ----------------------------------------------------------------------

def exterior_d(f: GridField):
    """Coordinate exterior derivative of a k-form field (full-tensor storage).

    (d phi)_{j0..jk} = sum_m (-1)^m d_{j_m} phi_{j0 .. omit j_m .. jk};
    built from the shared commuting 1d stencils, so d(d(.)) = 0 to
    round-off.
    """
    k = f.rank
    if any(v != "d" for v in f.variance):
        raise ConfigError("exterior_d expects a covariant (form) field")
    df = first_jet(f)  # layout [a, i1..ik] + grid
    out = np.zeros((f.spec.dim,) * (k + 1) + f.spec.shape)
    for mslot in range(k + 1):
        out += ((-1.0) ** mslot) * np.moveaxis(df, 0, mslot)
    return GridField(f.spec, out, ("d",) * (k + 1))


def levi_civita_field(metric: GridField):
    """Christoffel coefficients over the grid, layout (k, i, j) + grid."""
    dg = first_jet(metric)
    gb = _to_batch(metric.data, metric.spec)
    dgb = _to_batch(dg, metric.spec)
    ddgb = np.zeros((gb.shape[0],) + (metric.spec.dim,) * 4)
    conn = christoffel(MetricJet2(g=gb, dg=dgb, ddg=ddgb))
    return from_point_batch(conn.gamma, metric.spec)


def codifferential(f: GridField, metric: GridField, gamma_field=None):
    """Formal adjoint d* of the exterior derivative on k-form fields.

    (d* phi)_{i2..ik} = -g^{ab} (nabla_a phi)_{b i2..ik} with the
    Levi-Civita connection of ``metric``.  Pass ``gamma_field`` (from
    levi_civita_field) to reuse a precomputed connection.
    """
    k = f.rank
    if k == 0:
        raise ConfigError("codifferential needs a form of rank >= 1")
    spec = f.spec
    if gamma_field is None:
        gamma_field = levi_civita_field(metric)
    gamma_b = _to_batch(gamma_field, spec)
    fb = _to_batch(f.data, spec)
    dfb = _to_batch(first_jet(f), spec)
    ginv_b = metric_inverse_unchecked(_to_batch(metric.data, spec))
    letters = "ijklmn"[:k]
    nab = dfb.copy()
    for s in range(k):
        src = letters[:s] + "p" + letters[s + 1:]
        nab -= np.einsum(
            f"...pa{letters[s]},...{src}->...a{letters}", gamma_b, fb
        )
    res = -np.einsum(
        f"...ab,...ab{letters[1:]}->...{letters[1:]}", ginv_b, nab
    )
    return GridField(spec, from_point_batch(res, spec), ("d",) * (k - 1))


def hodge_laplacian(f: GridField, metric: GridField, gamma_field=None):
    """Composite Hodge-de Rham Laplacian (d d* + d* d) on a form field."""
    if gamma_field is None:
        gamma_field = levi_civita_field(metric)
    ddstar = (
        exterior_d(codifferential(f, metric, gamma_field)).data
        if f.rank >= 1
        else 0.0
    )
    dstard = codifferential(exterior_d(f), metric, gamma_field).data
    return GridField(f.spec, ddstar + dstard, f.variance)


def l2_inner(a: GridField, b: GridField, metric: GridField):
    """L2 inner product of two k-form fields.

    Pointwise pairing (1/k!) a_{i1..ik} b^{i1..ik} (the forms inner
    product, under which the codifferential is the exact adjoint of the
    exterior derivative), integrated with the Riemannian volume element.
    """
    if a.variance != b.variance:
        raise ConfigError("l2_inner needs forms of equal rank")
    spec = a.spec
    ginv_b = metric_inverse_unchecked(_to_batch(metric.data, spec))
    ab = _to_batch(a.data, spec)
    bb = _to_batch(b.data, spec)
    k = a.rank
    letters = "ijklmn"[:k]
    caps = "IJKLMN"[:k]
    raises_ = ",".join(f"...{lo}{hi}" for lo, hi in zip(letters, caps))
    expr = f"...{letters},{raises_},...{caps}->..." if k else "...,...->..."
    args = (ab,) + (ginv_b,) * k + (bb,) if k else (ab, bb)
    dens = np.einsum(expr, *args) / float(math.factorial(k))
    detg = np.linalg.det(_to_batch(metric.data, spec))
    vals = dens * np.sqrt(detg) * spec.h ** spec.dim
    chunks = np.array_split(vals, min(64, vals.size))
    return _tree_sum([float(np.sum(c)) for c in chunks])


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def _tree_sum(values):
    """Pairwise sum in a fixed order (bit-stable, worker-count independent)."""
    vals = list(values)
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def reduce_field(f, kind, spec=None):
    """Deterministic reduction of a field or raw array.

    kinds: "sup" (max abs over everything), "l2" (sqrt of h^dim * sum of
    squares over points and components — flat-measure L2 norm), "mean"
    (average over points and components).
    """
    if isinstance(f, GridField):
        spec, data = f.spec, f.data
    else:
        data = np.asarray(f)
        if spec is None:
            raise ConfigError("reduce of a raw array needs the grid spec")
    if kind == "sup":
        return float(np.max(np.abs(data)))
    flat = data.reshape(-1)
    chunks = np.array_split(flat, min(64, flat.size))
    if kind == "l2":
        partial = [float(np.sum(c * c)) for c in chunks]
        return float(np.sqrt(spec.h ** spec.dim * _tree_sum(partial)))
    if kind == "mean":
        partial = [float(np.sum(c)) for c in chunks]
        return _tree_sum(partial) / float(data.size)
    raise ConfigError(f"unknown reduction kind: {kind}")


# ----------------------------------------------------------------------
# snapshot I/O
# ----------------------------------------------------------------------

_VARIANCE_BITS = {"d": 0, "u": 1}


def write_snapshot(path, f: GridField):
    """Binary field snapshot: 64-byte header + little-endian float64 data."""
    vmask = 0
    for i, v in enumerate(f.variance):
        vmask |= _VARIANCE_BITS[v] << i
    header = struct.pack(
        "<8sIIIIQ",
        MAGIC,
        f.spec.dim,
        f.spec.points_per_axis,
        f.rank,
        vmask,
        f.spec.dim ** f.rank,
    )
    header += b"\x00" * (HEADER_BYTES - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def read_snapshot(path, stencil_order=4):
    """Read a snapshot written by write_snapshot back into a GridField."""
    with open(path, "rb") as fh:
        header = fh.read(HEADER_BYTES)
        if len(header) < HEADER_BYTES or header[:8] != MAGIC:
            raise SnapshotFormatError(f"{path}: bad snapshot header")
        _, dim, m, rank, vmask, ncomp = struct.unpack(
            "<8sIIIIQ", header[: struct.calcsize("<8sIIIIQ")]
        )
        if ncomp != dim ** rank:
            raise SnapshotFormatError(
                f"{path}: component count {ncomp} != dim^rank"
            )
        spec = GridSpec(dim=dim, points_per_axis=m, stencil_order=stencil_order)
        variance = tuple("u" if (vmask >> i) & 1 else "d" for i in range(rank))
        n = ncomp * spec.npoints
        raw = fh.read(n * 8)
        if len(raw) != n * 8:
            raise SnapshotFormatError(f"{path}: truncated snapshot payload")
        data = np.frombuffer(raw, dtype="<f8", count=n).astype(float)
    f = GridField(spec, data.reshape((dim,) * rank + spec.shape), variance)
    f.check_finite(what=str(path))
    return f
