"""Time integration of the curvature flows on periodic torus grids.

Two modes share the same state and stepper:

* "scf":  dg/dt = -2 Ric + B1/2 - B2,  dJ/dt = -D*DJ + g^{-1}N^2 + [Ric#, J]
          (the symplectic-curvature flow in (g, J) variables);
* "ahcf": dw/dt = -S + H, dJ/dt = -K, with dg recovered by the product
          rule (the general almost-Hermitian flow with the quadratic and
          H-gauge terms set to zero).

The tendency is evaluated slab-by-slab through the pointwise jet engine;
an optional fused kernel (see fastpath) accelerates the scf mode.  All
reductions are deterministic: the slab partition depends only on the grid
spec, and partial results are combined in slab order regardless of worker
scheduling.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .constants import DEFAULT_BLOWUP_THRESHOLD, DEFAULT_CFL, POLAR_EIG_FLOOR
from .errors import (
    BlowUpDetected,
    ConfigError,
    DegenerateMetric,
    NonFinite,
)
from .geometry import MetricJet2, weyl_plus
from .grid import (
    GridField,
    GridSpec,
    exterior_d,
    first_jet,
    from_point_batch,
    reduce_field,
    slab_point_batch,
    slab_ranges,
    write_snapshot,
    _to_batch,
    _tree_sum,
)
from .hermitian import (
    AlmostHermitianJet,
    compatible_j_from_omega,
    general_flow_rhs,
    hodge_laplacian_omega,
    induced_domega,
    induced_metric,
    point_operators,
    symplectic_flow_rhs,
)
from .tensor_point import metric_inverse_unchecked, tensor_norm2, two_form_inner


def worker_count():
    """Worker cap from AKFLOW_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("AKFLOW_THREADS", "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------------
# state
# ----------------------------------------------------------------------

def standard_complex_structure(dim):
    """Constant block structure J e_{2k} = e_{2k+1}, J e_{2k+1} = -e_{2k}."""
    j = np.zeros((dim, dim))
    for k in range(0, dim, 2):
        j[k + 1, k] = 1.0
        j[k, k + 1] = -1.0
    return j


def standard_two_form(dim):
    """The constant symplectic form paired with the standard J and g = Id."""
    w = np.zeros((dim, dim))
    for k in range(0, dim, 2):
        w[k, k + 1] = 1.0
        w[k + 1, k] = -1.0
    return w


@dataclass
class GridState:
    """Metric + almost-complex-structure fields at one time."""

    spec: GridSpec
    g: np.ndarray  # (d, d) + grid, lower indices
    j: np.ndarray  # (d, d) + grid, J^i_j at [i, j]
    t: float = 0.0

    def omega(self):
        """w_ij = g(J e_i, e_j) = J^k_i g_kj, as a raw grid array."""
        return np.einsum("ki...,kj...->ij...", self.j, self.g)

    def omega_field(self):
        return GridField(self.spec, self.omega(), ("d", "d"))

    def drift_metrics(self):
        """sup norms of dω, J^2 + Id and the compatibility defect."""
        d = self.spec.dim
        j2 = np.einsum("ik...,kj...->ij...", self.j, self.j)
        j2 += np.eye(d).reshape((d, d) + (1,) * d)
        jgj = np.einsum("ki...,kl...,lj...->ij...", self.j, self.g, self.j)
        dw = exterior_d(self.omega_field())
        return {
            "sup_domega": reduce_field(dw, "sup"),
            "sup_j2_defect": float(np.max(np.abs(j2))),
            "sup_compat_defect": float(np.max(np.abs(jgj - self.g))),
        }

    def check_finite(self):
        if not (np.all(np.isfinite(self.g)) and np.all(np.isfinite(self.j))):
            raise NonFinite("grid state contains NaN/Inf")
        return self


def flat_state(spec):
    """The standard flat structure: g = Id, J = block rotation."""
    d = spec.dim
    eye = np.eye(d).reshape((d, d) + (1,) * d)
    j0 = standard_complex_structure(d).reshape((d, d) + (1,) * d)
    g = np.broadcast_to(eye, (d, d) + spec.shape).copy()
    j = np.broadcast_to(j0, (d, d) + spec.shape).copy()
    return GridState(spec=spec, g=g, j=j, t=0.0)


# ----------------------------------------------------------------------
# initial data
# ----------------------------------------------------------------------

def _random_trig_scalar(spec, rng, max_freq=2, axis_cap=None):
    """Smooth random periodic scalar: a low-frequency trig polynomial.

    Modes are drawn with a fixed iteration order, so a fixed seed yields
    the same field on any worker count.  ``axis_cap`` optionally bounds
    each frequency component separately (useful for convergence studies,
    where every retained mode should be well inside the resolved band of
    the coarsest grid).
    """
    coords = spec.coordinate_arrays()
    out = np.zeros(spec.shape)
    freqs = range(-max_freq, max_freq + 1)
    from itertools import product

    for kvec in product(freqs, repeat=spec.dim):
        if all(k == 0 for k in kvec):
            continue
        if sum(abs(k) for k in kvec) > max_freq:
            continue
        if axis_cap is not None and max(abs(k) for k in kvec) > axis_cap:
            continue
        a, b = rng.normal(size=2)
        phase = sum(k * c for k, c in zip(kvec, coords))
        out = out + a * np.cos(phase) + b * np.sin(phase)
    scale = max(1.0, float(np.max(np.abs(out))))
    return out / scale


def make_initial_data(spec, generator, amplitude=0.1, seed=0, axis_cap=None):
    """Build a compatible almost-Hermitian grid state.

    generators:
      "flat":          the standard constant structure (fixed point);
      "kahler":        w = w0 + d(d^c phi) with the standard constant J
                       (integrable), g = w(., J.); closed by construction;
      "almost_kahler": w = w0 + amplitude * d(alpha) for a random smooth
                       1-form alpha, J from the polar retraction against
                       the flat metric, g = w(., J.); closed by
                       construction, generically non-integrable.
    """
    d = spec.dim
    if generator == "flat":
        return flat_state(spec)
    rng = np.random.default_rng(seed)
    j0 = standard_complex_structure(d)
    w0 = standard_two_form(d).reshape((d, d) + (1,) * d)
    if generator == "kahler":
        phi = _random_trig_scalar(spec, rng, axis_cap=axis_cap)
        grad = first_jet(GridField(spec, phi))
        # (d^c phi)_i = -(d phi)_k J^k_i
        dc = -np.einsum("k...,ki->i...", grad, j0)
        ddc = exterior_d(GridField(spec, dc, ("d",))).data
        # Normalize after differentiation (see the almost_kahler branch):
        # scaling d(d^c phi) by a constant rescales the potential itself.
        ddc *= amplitude / max(1.0, float(np.max(np.abs(ddc))))
        w = w0 + ddc
        g = np.einsum("ik...,kj->ij...", w, j0)
        _require_spd(g, spec)
        j = np.broadcast_to(
            j0.reshape((d, d) + (1,) * d), (d, d) + spec.shape
        ).copy()
        return GridState(spec=spec, g=g, j=j, t=0.0)
    if generator == "almost_kahler":
        alpha = np.stack(
            [_random_trig_scalar(spec, rng, axis_cap=axis_cap) for _ in range(d)]
        )
        da = exterior_d(GridField(spec, alpha, ("d",))).data
        # Normalize after differentiation so `amplitude` bounds the actual
        # sup-deviation of w from the constant form (d amplifies each mode
        # by its frequency; scaling an exact form keeps it exact).
        da *= amplitude / max(1.0, float(np.max(np.abs(da))))
        w = w0 + da
        wb = _to_batch(w, spec)
        gref = np.broadcast_to(np.eye(d), wb.shape).copy()
        jb = compatible_j_from_omega(wb, gref, eig_floor=POLAR_EIG_FLOOR)
        gb = induced_metric(wb, jb)
        g = from_point_batch(gb, spec)
        j = from_point_batch(jb, spec)
        _require_spd(g, spec)
        return GridState(spec=spec, g=g, j=j, t=0.0)
    raise ConfigError(f"unknown initial-data generator: {generator}")


def _require_spd(g, spec):
    gb = _to_batch(g, spec)
    eigs = np.linalg.eigvalsh(gb)
    lo = float(np.min(eigs))
    if lo <= POLAR_EIG_FLOOR:
        raise DegenerateMetric(
            f"initial metric not safely positive (min eigenvalue {lo:.3e}); "
            "reduce the amplitude"
        )


# ----------------------------------------------------------------------
# tendency
# ----------------------------------------------------------------------

@dataclass
class Tendency:
    """Flow right-hand side on the grid plus per-evaluation statistics."""

    dg: np.ndarray
    dj: np.ndarray
    sup_rm: float = 0.0
    sup_dj2: float = 0.0
    l2_dj2: float = 0.0
    energy: float = 0.0
    l2_ric: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _slab_jet(spec, state, i0, i1):
    (gv, dgb, ddgb), (jv, djb, ddjb) = slab_point_batch(
        spec, [(state.g, 2), (state.j, 2)], i0, i1
    )
    mjet = MetricJet2(g=gv, dg=dgb, ddg=ddgb)
    return AlmostHermitianJet(mjet=mjet, j=jv, dj=djb, ddj=ddjb)


def _scf_slab(jet, want_rm):
    ops = point_operators(jet, need_hermitian=False)
    dg, dj = symplectic_flow_rhs(ops)
    return dg, dj, ops, want_rm and _sup_rm_batch(jet, ops)


def _sup_rm_batch(jet, ops):
    norm2 = tensor_norm2(ops.curv.rm, jet.g, jet.ginv, "dddd")
    return float(np.sqrt(max(0.0, float(np.max(norm2)))))


def tendency(state, mode="scf", want_rm=True, slab_points=40_000, engine="numpy"):
    """Evaluate the flow right-hand side over the whole grid.

    ``want_rm`` controls whether sup|Rm| is computed (needed for the CFL
    control and the blow-up guard on the first stage of each step; the
    remaining stages skip it).  ``engine`` selects "numpy" (reference),
    "fused" (compiled kernel, scf on 4d grids only) or "auto" (fused
    where supported, numpy otherwise).
    """
    spec = state.spec
    d = spec.dim
    engine = resolve_engine(engine, mode, spec)
    if engine == "fused":
        from . import fastpath

        return fastpath.fused_scf_tendency(
            state, want_rm=want_rm, slab_points=slab_points
        )
    dg_out = np.empty_like(state.g)
    dj_out = np.empty_like(state.j)
    ranges = slab_ranges(spec, max_points=slab_points)

    def eval_slab(rng_pair):
        i0, i1 = rng_pair
        jet = _slab_jet(spec, state, i0, i1)
        if mode == "scf":
            ops = point_operators(jet, need_hermitian=False)
            dg, dj = symplectic_flow_rhs(ops)
        elif mode == "ahcf":
            ops = point_operators(jet, need_hermitian=True)
            dg, dj, _, _ = general_flow_rhs(jet, ops)
        else:
            raise ConfigError(f"unknown flow mode: {mode}")
        sup_rm = _sup_rm_batch(jet, ops) if want_rm else 0.0
        dj2 = ops.quad.dj_norm2
        detg = np.linalg.det(jet.g)
        sqd = np.sqrt(detg)
        ric2 = tensor_norm2(ops.curv.ric, jet.g, jet.ginv, "dd")
        return (
            dg,
            dj,
            sup_rm,
            float(np.max(dj2)),
            float(np.sum(dj2)),
            float(np.sum(dj2 * sqd)),
            float(np.sum(ric2 * sqd)),
        )

    nworkers = worker_count()
    if nworkers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(eval_slab, ranges))
    else:
        results = [eval_slab(r) for r in ranges]

    sup_rm = 0.0
    sup_dj2 = 0.0
    l2_parts = []
    en_parts = []
    ric_parts = []
    for (i0, i1), (dg, dj, s_rm, s_dj2, l2p, enp, ricp) in zip(ranges, results):
        dg_out[:, :, i0:i1] = from_point_batch(dg, spec, i1 - i0)
        dj_out[:, :, i0:i1] = from_point_batch(dj, spec, i1 - i0)
        sup_rm = max(sup_rm, s_rm)
        sup_dj2 = max(sup_dj2, s_dj2)
        l2_parts.append(l2p)
        en_parts.append(enp)
        ric_parts.append(ricp)
    vol = spec.h ** d
    return Tendency(
        dg=dg_out,
        dj=dj_out,
        sup_rm=sup_rm,
        sup_dj2=sup_dj2,
        l2_dj2=vol * _tree_sum(l2_parts),
        energy=vol * _tree_sum(en_parts),
        l2_ric=float(np.sqrt(max(0.0, vol * _tree_sum(ric_parts)))),
    )


def resolve_engine(engine, mode, spec):
    """Map "auto" to the fused kernels where they apply, numpy elsewhere."""
    if engine == "auto":
        if mode == "scf" and spec.dim == 4 and spec.stencil_order == 4:
            try:
                import numba  # noqa: F401
            except ImportError:
                return "numpy"
            return "fused"
        return "numpy"
    if engine not in ("numpy", "fused"):
        raise ConfigError(f"unknown engine: {engine!r}")
    return engine


def induced_domega_grid(state, dg, dj):
    """Product-rule time derivative of w = g(J., .) as a grid array."""
    return np.einsum("ki...,kj...->ij...", dj, state.g) + np.einsum(
        "ki...,kj...->ij...", state.j, dg
    )


# ----------------------------------------------------------------------
# diagnostics (monitor-cadence only: includes the curvature two-forms)
# ----------------------------------------------------------------------

def diagnostic_pass(state, tend, slab_points=40_000):
    """Static and identity residuals over the grid.

    Returns a dict with the globally fitted proportionality constant
    lambda_best = <P, w>_{L2} / <w, w>_{L2} and sup-norm residuals of:
    P - lambda_best*w, the J-anti-invariant Ricci part, the self-dual Weyl
    eigenvector defect (4d, else -1), the Weitzenboeck identity and the
    induced-dw flow-consistency identity.
    """
    spec = state.spec
    d = spec.dim
    vol = spec.h ** d
    ranges = slab_ranges(spec, max_points=slab_points)
    pw_parts, ww_parts = [], []
    fields = []  # per-slab (a, b, c) pointwise inner products
    sup_ricj = 0.0
    sup_wplus = -1.0 if d != 4 else 0.0
    sup_weitz = 0.0
    sup_flowc = 0.0
    for i0, i1 in ranges:
        jet = _slab_jet(spec, state, i0, i1)
        ops = point_operators(jet, need_hermitian=True)
        g, ginv, j, w = jet.g, jet.ginv, jet.j, jet.w
        detg = np.sqrt(np.linalg.det(g))
        p = ops.p
        a = tensor_norm2(p, g, ginv, "dd")
        b = two_form_inner(p, w, ginv)
        c = tensor_norm2(w, g, ginv, "dd")
        pw_parts.append(float(np.sum(b * detg)))
        ww_parts.append(float(np.sum(c * detg)))
        fields.append((a, b, c))
        ric = ops.curv.ric
        ricj = 0.5 * (
            ric - np.einsum("...ki,...kl,...lj->...ij", j, ric, j)
        )
        sup_ricj = max(
            sup_ricj,
            float(np.sqrt(max(0.0, np.max(tensor_norm2(ricj, g, ginv, "dd"))))),
        )
        if d == 4:
            sup_wplus = max(sup_wplus, _wplus_defect(jet, ops))
        # identity residuals
        weitz = (
            ops.rho_star
            - 2.0 * ops.rho
            - ops.ddw_rough
            + hodge_laplacian_omega(jet, ops.conn)
        )
        sup_weitz = max(sup_weitz, float(np.max(np.abs(weitz))))
        dgb = _to_batch(tend.dg[:, :, i0:i1], spec)
        djb = _to_batch(tend.dj[:, :, i0:i1], spec)
        flowc = induced_domega(g, j, dgb, djb) + p
        sup_flowc = max(sup_flowc, float(np.max(np.abs(flowc))))
    ww = _tree_sum(ww_parts) * vol
    pw = _tree_sum(pw_parts) * vol
    lam = pw / ww if ww > 0 else 0.0
    sup_p = 0.0
    for a, b, c in fields:
        res2 = a - 2.0 * lam * b + lam * lam * c
        sup_p = max(sup_p, float(np.sqrt(max(0.0, float(np.max(res2))))))
    return {
        "lambda_best": lam,
        "res_static_p": sup_p,
        "res_ric_j_anti": sup_ricj,
        "res_wplus_defect": sup_wplus,
        "res_weitzenbock": sup_weitz,
        "res_flow_consistency": sup_flowc,
    }


def _wplus_defect(jet, ops):
    """Sup over the slab of the self-dual-Weyl eigenvector defect of w."""
    from .geometry import frame_orthonormalizer, _self_dual_basis

    f = frame_orthonormalizer(jet.g)
    wf = np.einsum("...ij,...ia,...jb->...ab", jet.w, f, f)
    # orientation induced by J: sign of the Pfaffian of w in the flat frame
    pf = (
        wf[..., 0, 1] * wf[..., 2, 3]
        - wf[..., 0, 2] * wf[..., 1, 3]
        + wf[..., 0, 3] * wf[..., 1, 2]
    )
    defects = np.zeros(wf.shape[0])
    for sign in (1.0, -1.0):
        mask = (pf * sign) > 0
        if not np.any(mask):
            continue
        block = weyl_plus(
            _JetView(jet.g[mask], jet.ginv[mask]),
            _CurvView(ops.curv, mask),
            orient_sign=sign,
        )
        basis = _self_dual_basis(4, sign)
        v = np.einsum("Aij,...ij->...A", basis, wf[mask])
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        v = v / np.maximum(nv, 1e-300)
        bv = np.einsum("...AB,...B->...A", block, v)
        lam = np.einsum("...A,...A->...", v, bv)
        defects[mask] = np.linalg.norm(
            bv - lam[..., None] * v, axis=-1
        )
    return float(np.max(defects))


class _JetView:
    """Minimal (g, ginv, dim) view for weyl_plus on a masked batch."""

    def __init__(self, g, ginv):
        self.g = g
        self.ginv = ginv

    @property
    def dim(self):
        return self.g.shape[-1]


class _CurvView:
    """Masked view of a CurvatureBundle (only fields weyl_plus reads)."""

    def __init__(self, curv, mask):
        self.rm = curv.rm[mask]
        self.ric = curv.ric[mask]
        self.scal = curv.scal[mask]


# ----------------------------------------------------------------------
# stepping
# ----------------------------------------------------------------------

def rk4_step(state, dt, mode="scf", slab_points=40_000, engine="numpy",
             first_tendency=None):
    """Classical 4-stage explicit step on (g, J) jointly."""
    if dt <= 0:
        raise ConfigError("rk4_step needs dt > 0")
    k1 = first_tendency or tendency(
        state, mode, want_rm=False, slab_points=slab_points, engine=engine
    )

    def shifted(coeff, k):
        return GridState(
            spec=state.spec,
            g=state.g + coeff * k.dg,
            j=state.j + coeff * k.dj,
            t=state.t + coeff,
        )

    half = 0.5 * dt
    k2 = tendency(shifted(half, k1), mode, want_rm=False,
                  slab_points=slab_points, engine=engine)
    k3 = tendency(shifted(half, k2), mode, want_rm=False,
                  slab_points=slab_points, engine=engine)
    k4 = tendency(shifted(dt, k3), mode, want_rm=False,
                  slab_points=slab_points, engine=engine)
    new = GridState(
        spec=state.spec,
        g=state.g + (dt / 6.0) * (k1.dg + 2 * k2.dg + 2 * k3.dg + k4.dg),
        j=state.j + (dt / 6.0) * (k1.dj + 2 * k2.dj + 2 * k3.dj + k4.dj),
        t=state.t + dt,
    )
    return new.check_finite()


def project_compatible(state):
    """Restore exact pointwise compatibility of the (g, J, w) triple.

    J is retracted to the w-compatible almost complex structure polar to
    the current metric, and g is rebuilt as w(., J.), which is exactly
    symmetric, positive and J-invariant for the retracted J.
    """
    spec = state.spec
    wb = _to_batch(state.omega(), spec)
    wb = 0.5 * (wb - np.swapaxes(wb, -1, -2))
    gb = _to_batch(state.g, spec)
    gb = 0.5 * (gb + np.swapaxes(gb, -1, -2))
    jb = compatible_j_from_omega(wb, gb, eig_floor=POLAR_EIG_FLOOR)
    gnew = induced_metric(wb, jb)
    return GridState(
        spec=spec,
        g=from_point_batch(gnew, spec),
        j=from_point_batch(jb, spec),
        t=state.t,
    )


# ----------------------------------------------------------------------
# the run loop
# ----------------------------------------------------------------------

MONITOR_COLUMNS = (
    "step",
    "t",
    "dt",
    "sup_rm",
    "sup_dj2",
    "l2_dj2",
    "l2_ric",
    "sup_domega",
    "sup_j2_defect",
    "sup_compat_defect",
    "energy",
    "lambda_best",
    "res_static_p",
    "res_ric_j_anti",
    "res_wplus_defect",
    "res_weitzenbock",
    "res_flow_consistency",
)


@dataclass
class MonitorRecord:
    """One monitor sample; fields mirror MONITOR_COLUMNS."""

    step: int
    t: float
    dt: float
    sup_rm: float
    sup_dj2: float
    l2_dj2: float
    l2_ric: float
    sup_domega: float
    sup_j2_defect: float
    sup_compat_defect: float
    energy: float
    lambda_best: float
    res_static_p: float
    res_ric_j_anti: float
    res_wplus_defect: float
    res_weitzenbock: float
    res_flow_consistency: float

    def row(self):
        vals = [getattr(self, c) for c in MONITOR_COLUMNS]
        out = [str(vals[0])]
        out.extend(f"{float(v):.17g}" for v in vals[1:])
        return out

    def validate(self):
        for c in MONITOR_COLUMNS:
            v = getattr(self, c)
            if not np.isfinite(v):
                raise NonFinite(f"monitor field {c} is not finite")
        return self


def _make_record(step, dt, state, tend, diag):
    drift = state.drift_metrics()
    return MonitorRecord(
        step=step,
        t=state.t,
        dt=dt,
        sup_rm=tend.sup_rm,
        sup_dj2=tend.sup_dj2,
        l2_dj2=tend.l2_dj2,
        l2_ric=tend.l2_ric,
        sup_domega=drift["sup_domega"],
        sup_j2_defect=drift["sup_j2_defect"],
        sup_compat_defect=drift["sup_compat_defect"],
        energy=tend.energy,
        lambda_best=diag["lambda_best"],
        res_static_p=diag["res_static_p"],
        res_ric_j_anti=diag["res_ric_j_anti"],
        res_wplus_defect=diag["res_wplus_defect"],
        res_weitzenbock=diag["res_weitzenbock"],
        res_flow_consistency=diag["res_flow_consistency"],
    ).validate()


class _MonitorWriter:
    def __init__(self, path):
        self.path = path
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh)
            self.writer.writerow(MONITOR_COLUMNS)
            self.fh.flush()

    def emit(self, record):
        if self.fh is not None:
            self.writer.writerow(record.row())
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


@dataclass
class RunResult:
    state: GridState
    records: list
    blew_up: bool = False
    steps: int = 0


def run(
    state,
    mode="scf",
    t_end=0.1,
    max_steps=10_000,
    cfl=DEFAULT_CFL,
    monitor_every=1,
    snapshot_every=0,
    projection=False,
    output_dir=None,
    blowup_threshold=DEFAULT_BLOWUP_THRESHOLD,
    slab_points=40_000,
    engine="auto",
    diagnostics=True,
    fixed_dt=None,
):
    """March the flow until t_end, max_steps, or the blow-up guard.

    ``fixed_dt`` overrides the curvature-adaptive step size with a
    constant one (still clamped so the run lands on t_end exactly).

    Emits one MonitorRecord every ``monitor_every`` steps (and always for
    the initial and final states).  Raises BlowUpDetected when sup|Rm|
    exceeds ``blowup_threshold``; the offending record is emitted first.
    """
    spec = state.spec
    h2 = spec.h * spec.h
    writer = _MonitorWriter(
        os.path.join(output_dir, "monitors.csv") if output_dir else None
    )
    records = []

    def emit(step, dt, st, tend):
        diag = (
            diagnostic_pass(st, tend, slab_points=slab_points)
            if diagnostics
            else {
                # negative sentinel: genuine residuals are nonnegative,
                # so -1 marks "not computed" unambiguously in the CSV
                "lambda_best": 0.0,
                "res_static_p": -1.0,
                "res_ric_j_anti": -1.0,
                "res_wplus_defect": -1.0,
                "res_weitzenbock": -1.0,
                "res_flow_consistency": -1.0,
            }
        )
        rec = _make_record(step, dt, st, tend, diag)
        records.append(rec)
        writer.emit(rec)
        return rec

    def snapshot(step, st):
        if snapshot_every and output_dir and step % snapshot_every == 0:
            write_snapshot(
                os.path.join(output_dir, f"snap_{step:06d}_metric.bin"),
                GridField(spec, st.g, ("d", "d")),
            )
            write_snapshot(
                os.path.join(output_dir, f"snap_{step:06d}_complex.bin"),
                GridField(spec, st.j, ("u", "d")),
            )

    step = 0
    try:
        while True:
            finishing = state.t >= t_end - 1e-15 or step >= max_steps
            # sup|Rm| drives the adaptive step, the blow-up guard and the
            # monitors; with a fixed step it is only needed on emitted
            # records, so the guard then runs at the monitor cadence
            want_rm = (
                fixed_dt is None
                or step % max(1, monitor_every) == 0
                or finishing
            )
            k1 = tendency(
                state, mode, want_rm=want_rm, slab_points=slab_points,
                engine=engine,
            )
            remaining = t_end - state.t
            if fixed_dt is not None:
                dt = float(fixed_dt)
            else:
                dt = cfl * h2 / max(1.0, k1.sup_rm + k1.sup_dj2)
            dt = min(dt, max(remaining, 1e-15))
            blow = want_rm and k1.sup_rm > blowup_threshold
            if step % max(1, monitor_every) == 0 or finishing or blow:
                emit(step, dt, state, k1)
            snapshot(step, state)
            if blow:
                raise BlowUpDetected(k1.sup_rm, state.t, step)
            if finishing:
                break
            state = rk4_step(
                state,
                dt,
                mode,
                slab_points=slab_points,
                engine=engine,
                first_tendency=k1,
            )
            if projection:
                state = project_compatible(state)
            step += 1
        return RunResult(state=state, records=records, blew_up=False, steps=step)
    finally:
        writer.close()
