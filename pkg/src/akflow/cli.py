"""Command-line front end: configured runs, verification reports, summaries.

Subcommands:

* ``run``    — march a configured flow and write ``monitors.csv`` (plus
  optional field snapshots) into the output directory;
* ``verify`` — run the identity-certification suite on the exact preset
  structures and write ``identity.csv``;
* ``report`` — summarize an existing run directory (final residuals,
  blow-up flag, decay slopes).

Configuration is a flat TOML file of ``key = value`` pairs; every key
has a documented default (see ``--help``), unknown keys are rejected,
and the fully-resolved configuration is echoed to ``config.echo`` in the
output directory for reproducibility.  ``--set key=value`` overrides
individual keys from the command line.

Exit codes: 0 success, 1 configuration error, 2 runtime error,
3 blow-up detected.

The startup convention self-test (frozen benchmark anchors plus the full
identity suite on the benchmark structure) runs before any subcommand;
the binary aborts if the build's sign conventions are broken.

The environment variable ``AKFLOW_THREADS`` caps the worker count used
for slab-parallel grid evaluation; results are bit-identical for any
worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np
import tomli

from . import flow, harness
from .constants import (
    DEFAULT_AMPLITUDE,
    DEFAULT_BLOWUP_THRESHOLD,
    DEFAULT_CFL,
)
from .errors import AkflowError, BlowUpDetected, ConfigError, ConventionError
from .flow import MONITOR_COLUMNS, MonitorRecord
from .grid import GridSpec
from .homogeneous import (
    PRESETS,
    get_preset,
    invariant_d_two_form,
    invariant_operators,
    ode_run,
    symplectic_rhs,
)
from .tensor_point import tensor_norm2

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_BLOWUP = 3

GENERATORS = ("flat", "kahler", "almost_kahler")
MODES = ("scf", "ahcf", "homogeneous", "verify")
GRID_MANIFOLDS = ("torus4", "torus6")


@dataclasses.dataclass
class RunConfig:
    """Fully-resolved run configuration (defaults fill missing keys)."""

    mode: str = "scf"
    manifold: str = "torus4"
    points_per_axis: int = 16
    stencil_order: int = 4
    generator: str = "almost_kahler"
    amplitude: float = DEFAULT_AMPLITUDE
    seed: int = 0
    axis_cap: int = 0
    cfl: float = DEFAULT_CFL
    fixed_dt: float = 0.0
    t_end: float = 0.1
    max_steps: int = 10_000
    monitor_every: int = 1
    snapshot_every: int = 0
    projection: bool = False
    output_dir: str = "akflow_run"
    blowup_threshold: float = DEFAULT_BLOWUP_THRESHOLD
    engine: str = "auto"
    slab_points: int = 40_000
    diagnostics: bool = True
    ode_dt: float = 1e-3


_KEY_DOC = {
    "mode": f"flow family / action: {', '.join(MODES)}",
    "manifold": "torus4 | torus6 (grid modes) or a preset name "
    f"({', '.join(sorted(PRESETS))}; homogeneous mode)",
    "points_per_axis": "grid points per axis (even, 8..96)",
    "stencil_order": "finite-difference order: 2 or 4",
    "generator": f"initial data family: {', '.join(GENERATORS)}",
    "amplitude": "perturbation amplitude of the initial data (0..1)",
    "seed": "RNG seed for the initial data (>= 0)",
    "axis_cap": "cap on per-axis mode numbers of the random data; 0 = none",
    "cfl": "parabolic step-size factor dt = cfl h^2 / max(1, sup|Rm|+|DJ|^2)",
    "fixed_dt": "fixed time step overriding the adaptive one; 0 = adaptive",
    "t_end": "final flow time",
    "max_steps": "hard step limit",
    "monitor_every": "monitor-row cadence in steps (>= 1)",
    "snapshot_every": "field-snapshot cadence in steps; 0 = never",
    "projection": "re-project onto compatible pairs after each step",
    "output_dir": "directory for config.echo, monitors.csv, snapshots",
    "blowup_threshold": "abort when sup|Rm| exceeds this (> 0)",
    "engine": "auto | numpy | fused (fused: scf on torus4, order 4)",
    "slab_points": "max grid points per evaluation slab (>= 1000)",
    "diagnostics": "compute identity/static residual columns at monitor rows",
    "ode_dt": "fixed RK4 step for homogeneous (structure-constant) runs",
}


def _coerce(key, value, target_type):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"config key '{key}' expects true/false, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"config key '{key}' expects an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(
                f"config key '{key}' expects an integer, got {value!r}"
            ) from None
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"config key '{key}' expects a number, got {value!r}")
        try:
            return float(value)
        except ValueError:
            raise ConfigError(
                f"config key '{key}' expects a number, got {value!r}"
            ) from None
    if not isinstance(value, str):
        raise ConfigError(f"config key '{key}' expects a string, got {value!r}")
    return value


def _validate(cfg):
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got '{cfg.mode}'")
    known_manifolds = GRID_MANIFOLDS + tuple(sorted(PRESETS))
    if cfg.manifold not in known_manifolds:
        raise ConfigError(
            f"manifold must be one of {known_manifolds}, got '{cfg.manifold}'"
        )
    if cfg.mode in ("scf", "ahcf") and cfg.manifold not in GRID_MANIFOLDS:
        raise ConfigError(
            f"mode '{cfg.mode}' runs on a grid torus; manifold "
            f"'{cfg.manifold}' is a homogeneous preset (use mode = "
            "'homogeneous')"
        )
    if cfg.mode == "homogeneous" and cfg.manifold in GRID_MANIFOLDS:
        raise ConfigError(
            "mode 'homogeneous' integrates a structure-constant preset; "
            f"pick manifold from {tuple(sorted(PRESETS))}, not "
            f"'{cfg.manifold}'"
        )
    if not (8 <= cfg.points_per_axis <= 96) or cfg.points_per_axis % 2:
        raise ConfigError(
            "points_per_axis must be an even integer in 8..96, got "
            f"{cfg.points_per_axis}"
        )
    if cfg.stencil_order not in (2, 4):
        raise ConfigError(f"stencil_order must be 2 or 4, got {cfg.stencil_order}")
    if cfg.generator not in GENERATORS:
        raise ConfigError(
            f"generator must be one of {GENERATORS}, got '{cfg.generator}'"
        )
    if not (0.0 <= cfg.amplitude <= 1.0):
        raise ConfigError(f"amplitude must be in [0, 1], got {cfg.amplitude}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")
    if cfg.axis_cap < 0:
        raise ConfigError(f"axis_cap must be >= 0, got {cfg.axis_cap}")
    if not (0.0 < cfg.cfl <= 1.0):
        raise ConfigError(f"cfl must be in (0, 1], got {cfg.cfl}")
    if cfg.fixed_dt < 0.0:
        raise ConfigError(f"fixed_dt must be >= 0 (0 = adaptive), got {cfg.fixed_dt}")
    if cfg.t_end <= 0.0:
        raise ConfigError(f"t_end must be > 0, got {cfg.t_end}")
    if not (0 <= cfg.max_steps <= 10_000_000):
        raise ConfigError(f"max_steps must be in 0..1e7, got {cfg.max_steps}")
    if cfg.monitor_every < 1:
        raise ConfigError(f"monitor_every must be >= 1, got {cfg.monitor_every}")
    if cfg.snapshot_every < 0:
        raise ConfigError(f"snapshot_every must be >= 0, got {cfg.snapshot_every}")
    if cfg.blowup_threshold <= 0.0:
        raise ConfigError(
            f"blowup_threshold must be > 0, got {cfg.blowup_threshold}"
        )
    if cfg.engine not in ("auto", "numpy", "fused"):
        raise ConfigError(
            f"engine must be auto, numpy or fused, got '{cfg.engine}'"
        )
    if cfg.slab_points < 1000:
        raise ConfigError(f"slab_points must be >= 1000, got {cfg.slab_points}")
    if cfg.ode_dt <= 0.0:
        raise ConfigError(f"ode_dt must be > 0, got {cfg.ode_dt}")
    return cfg


def parse_config(path=None, overrides=()):
    """Build a RunConfig from an optional TOML file plus key=value flags.

    Unknown keys and malformed values raise ConfigError naming the key.
    """
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {"str": str, "int": int, "float": float, "bool": bool}
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        for key, value in data.items():
            if key not in fields:
                known = ", ".join(sorted(fields))
                raise ConfigError(
                    f"unknown config key '{key}' in {path} (known keys: {known})"
                )
            if isinstance(value, (dict, list)):
                raise ConfigError(
                    f"config key '{key}' must be a scalar, got {type(value).__name__}"
                )
            raw[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in fields:
            known = ", ".join(sorted(fields))
            raise ConfigError(f"unknown config key '{key}' (known keys: {known})")
        raw[key] = value.strip()
    kwargs = {
        key: _coerce(key, value, types.get(fields[key], str))
        for key, value in raw.items()
    }
    return _validate(RunConfig(**kwargs))


def echo_config(cfg, path):
    """Write the fully-resolved configuration as reusable TOML."""
    lines = ["# fully-resolved run configuration (machine-written)"]
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, str):
            rendered = f'"{value}"'
        elif isinstance(value, float):
            rendered = f"{value:.17g}"
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_echo(path):
    out = {}
    with open(path, "rb") as fh:
        out.update(tomli.load(fh))
    return out


# ----------------------------------------------------------------------
# run orchestration
# ----------------------------------------------------------------------

def build_initial_state(cfg):
    dim = 4 if cfg.manifold == "torus4" else 6
    spec = GridSpec(
        dim=dim,
        points_per_axis=cfg.points_per_axis,
        stencil_order=cfg.stencil_order,
    )
    if cfg.generator == "flat":
        return flow.flat_state(spec)
    return flow.make_initial_data(
        spec,
        cfg.generator,
        amplitude=cfg.amplitude,
        seed=cfg.seed,
        axis_cap=cfg.axis_cap or None,
    )


def _run_grid(cfg):
    state = build_initial_state(cfg)
    result = flow.run(
        state,
        mode=cfg.mode,
        t_end=cfg.t_end,
        max_steps=cfg.max_steps,
        cfl=cfg.cfl,
        monitor_every=cfg.monitor_every,
        snapshot_every=cfg.snapshot_every,
        projection=cfg.projection,
        output_dir=cfg.output_dir,
        blowup_threshold=cfg.blowup_threshold,
        slab_points=cfg.slab_points,
        engine=cfg.engine,
        diagnostics=cfg.diagnostics,
        fixed_dt=cfg.fixed_dt or None,
    )
    last = result.records[-1]
    print(
        f"run finished: steps={result.steps} t={result.state.t:.6g} "
        f"sup|Rm|={last.sup_rm:.6g} |DJ|^2={last.sup_dj2:.6g} "
        f"L2|Ric|={last.l2_ric:.6g}"
    )
    return EXIT_OK


def _homogeneous_record(step, t, dt, structure, sup_rm):
    """Full monitor row for one invariant-flow sample.

    The quotient has unit volume in the invariant normalization, so the
    L2 columns coincide with the pointwise frame norms.  The sample is
    deliberately not re-validated: the integrated structure drifts off
    the compatibility constraints by the integrator error, and that
    drift is exactly what the defect columns monitor.
    """
    st = structure
    ops = invariant_operators(st)
    g, ginv, j, w = st.g, st.ginv, st.j, st.w
    d = st.dim
    dw = invariant_d_two_form(w, st.lie)
    j2 = j @ j + np.eye(d)
    compat = j.T @ g @ j - g
    static = harness.static_residuals(st)
    idres = {
        rep.name: rep.residual_sup for rep in harness.identity_reports(st)
    }
    return MonitorRecord(
        step=step,
        t=t,
        dt=dt,
        sup_rm=sup_rm,
        sup_dj2=float(ops.quad.dj_norm2),
        l2_dj2=float(ops.quad.dj_norm2),
        l2_ric=float(
            np.sqrt(max(0.0, float(tensor_norm2(ops.curv.ric, g, ginv, "dd"))))
        ),
        sup_domega=float(np.max(np.abs(dw))),
        sup_j2_defect=float(np.max(np.abs(j2))),
        sup_compat_defect=float(np.max(np.abs(compat))),
        energy=float(ops.quad.dj_norm2),
        lambda_best=static["lambda_best"],
        res_static_p=static["res_static_p"],
        res_ric_j_anti=static["res_ric_j_anti"],
        res_wplus_defect=static["res_wplus_defect"],
        res_weitzenbock=idres["weitzenbock"],
        res_flow_consistency=idres["flow_consistency"],
    ).validate()


def _run_homogeneous(cfg):
    from .flow import _MonitorWriter
    from .homogeneous import InvariantStructure

    preset = get_preset(cfg.manifold)
    dt = cfg.fixed_dt or cfg.ode_dt
    final, history = ode_run(
        preset,
        t_final=cfg.t_end,
        dt=dt,
        rhs=symplectic_rhs,
        monitor_every=cfg.monitor_every,
    )
    nsteps = int(round(cfg.t_end / dt))
    steps = list(range(0, nsteps + 1, cfg.monitor_every))
    if steps and steps[-1] != nsteps:
        steps.append(nsteps)
    writer = _MonitorWriter(os.path.join(cfg.output_dir, "monitors.csv"))
    try:
        for step, sample in zip(steps, history):
            st = InvariantStructure(
                lie=preset.lie, g=sample["g"], j=sample["j"]
            )
            writer.emit(
                _homogeneous_record(step, sample["t"], dt, st, sample["sup_rm"])
            )
    finally:
        writer.close()
    ops = invariant_operators(final)
    print(
        f"homogeneous run finished: preset={cfg.manifold} steps={nsteps} "
        f"t={cfg.t_end:.6g} scal={float(ops.curv.scal):.6g} "
        f"|DJ|^2={float(ops.quad.dj_norm2):.6g}"
    )
    return EXIT_OK


def cmd_run(args):
    cfg = parse_config(args.config, args.set or ())
    if cfg.mode == "verify":
        return cmd_verify(args, cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.output_dir, "config.echo"))
    if cfg.mode == "homogeneous":
        return _run_homogeneous(cfg)
    return _run_grid(cfg)


def cmd_verify(args, cfg=None):
    out_dir = getattr(args, "output", None) or (cfg.output_dir if cfg else ".")
    os.makedirs(out_dir, exist_ok=True)
    reports = harness.verify_reports()
    harness.write_identity_csv(os.path.join(out_dir, "identity.csv"), reports)
    width = max(len(r.name) for r in reports)
    swidth = max(len(r.subject) for r in reports)
    failures = 0
    for rep in reports:
        status = "pass" if rep.passed else "FAIL"
        failures += 0 if rep.passed else 1
        print(
            f"{status}  {rep.name:<{width}}  {rep.subject:<{swidth}}  "
            f"sup={rep.residual_sup:.3e}  l2={rep.residual_l2:.3e}"
        )
    print(
        f"verify: {len(reports) - failures}/{len(reports)} checks passed; "
        f"table written to {os.path.join(out_dir, 'identity.csv')}"
    )
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def _slope(ts, values):
    """Least-squares slope of log(value) against t over the samples."""
    ts = np.asarray(ts)
    values = np.asarray(values)
    mask = values > 0
    if mask.sum() < 2 or np.ptp(ts[mask]) == 0:
        return None
    return float(np.polyfit(ts[mask], np.log(values[mask]), 1)[0])


def cmd_report(args):
    run_dir = args.run_dir
    monitors = os.path.join(run_dir, "monitors.csv")
    if not os.path.isfile(monitors):
        raise ConfigError(f"no monitors.csv in '{run_dir}'")
    import csv as _csv

    with open(monitors, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"monitors.csv in '{run_dir}' is empty")
    echo_path = os.path.join(run_dir, "config.echo")
    threshold = DEFAULT_BLOWUP_THRESHOLD
    if os.path.isfile(echo_path):
        threshold = float(_read_echo(echo_path).get("blowup_threshold", threshold))
    last = rows[-1]
    blew_up = float(last["sup_rm"]) > threshold
    print(f"run directory : {run_dir}")
    print(f"monitor rows  : {len(rows)}")
    print(f"final step    : {last['step']}  t = {float(last['t']):.6g}")
    print(f"blow-up       : {'YES (sup|Rm| above threshold)' if blew_up else 'no'}")
    print("final values  :")
    for col in MONITOR_COLUMNS[3:]:
        print(f"  {col:<18s} {float(last[col]):.6g}")
    half = rows[len(rows) // 2 :]
    ts = [float(r["t"]) for r in half]
    print("decay slopes d(log x)/dt over the final half:")
    for col in ("l2_ric", "l2_dj2", "energy"):
        slope = _slope(ts, [float(r[col]) for r in half])
        rendered = f"{slope:+.6g}" if slope is not None else "n/a"
        print(f"  {col:<18s} {rendered}")
    return EXIT_OK


def _build_parser():
    epilog_lines = ["configuration keys (TOML file and/or --set key=value):"]
    for f in dataclasses.fields(RunConfig):
        default = getattr(RunConfig(), f.name)
        epilog_lines.append(f"  {f.name:<18s} default {default!r:<16} {_KEY_DOC[f.name]}")
    parser = argparse.ArgumentParser(
        prog="akflow",
        description=(
            "Numerical laboratory for curvature flows of almost-Hermitian "
            "structures on periodic tori and nilpotent homogeneous spaces."
        ),
        epilog="\n".join(epilog_lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser(
        "run",
        help="march a configured flow",
        epilog="\n".join(epilog_lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p_run.add_argument("config", nargs="?", default=None, help="TOML config file")
    p_run.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p_run.set_defaults(func=cmd_run)
    p_verify = sub.add_parser(
        "verify", help="run the identity-certification suite on exact presets"
    )
    p_verify.add_argument(
        "--output", default=None, help="directory for identity.csv (default .)"
    )
    p_verify.set_defaults(func=cmd_verify)
    p_report = sub.add_parser("report", help="summarize a run directory")
    p_report.add_argument("run_dir", help="directory holding monitors.csv")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        harness.conventions_selftest()
    except ConventionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpDetected as exc:
        print(
            f"blow-up detected: sup|Rm| = {exc.sup_rm:.6g} at t = {exc.t:.6g} "
            f"(step {exc.step}); final monitor record was written",
            file=sys.stderr,
        )
        return EXIT_BLOWUP
    except AkflowError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
