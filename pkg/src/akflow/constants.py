"""Central tolerance table and fixed numerical conventions.

All comparison thresholds used by library code live here so a run can
override them in one place.  Tests freeze their own expected values and
reference these defaults only where the contract says "default".
"""

from dataclasses import dataclass, replace

# Dimensions the geometry engine accepts.  Pointwise tensor algebra is
# dimension generic; grids and presets only ever use these.
SUPPORTED_DIMS = (2, 4, 6)

# Floor applied to eigenvalues when deciding that a metric or a two-form
# is degenerate.
METRIC_EIG_FLOOR = 1e-8

# Floor for eigenvalues inside the polar factorization that builds a
# compatible almost complex structure from a nondegenerate two-form.
POLAR_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class Tolerances:
    """Comparison thresholds, grouped by how the compared data was produced.

    exact      -- algebraic identities on exact (homogeneous or hand-built)
                  data; limited only by round-off accumulation.
    roundoff   -- single-operation round-off checks (inverse residuals,
                  projector idempotence).
    identity   -- certification bound for the curvature-identity suite on
                  exact inputs (acceptance gate value).
    cross      -- agreement bound between two independent evaluation routes.
    ode        -- invariant drift along homogeneous ODE trajectories.
    conserved  -- invariant drift along grid flows.
    """

    exact: float = 1e-12
    roundoff: float = 1e-12
    identity: float = 1e-9
    cross: float = 1e-10
    ode: float = 1e-10
    conserved: float = 1e-6

    def with_overrides(self, **kw):
        return replace(self, **kw)


DEFAULT_TOL = Tolerances()

# Time stepping: dt = cfl * h^2 / max(1, sup|Rm| + sup|DJ|^2).
DEFAULT_CFL = 0.1

# Curvature guard threshold (sup |Rm|) for declaring blow-up.
DEFAULT_BLOWUP_THRESHOLD = 1e6

# Default finite-difference stencil order (2 available for debugging).
DEFAULT_STENCIL_ORDER = 4

# Periodic box: every axis has side 2*pi.
BOX_SIDE = 6.283185307179586476925286766559

# Amplitude used by initial-data generators unless the caller overrides it.
DEFAULT_AMPLITUDE = 0.1

# ---------------------------------------------------------------------------
# Orientation and sign conventions, pinned once by numerical experiment and
# enforced at startup by the conventions self-check (see harness module).
#
# Curvature tensor:  R(X,Y)Z = D_X D_Y Z - D_Y D_X Z - D_[X,Y] Z, stored as
#   rm[i,j,k,l] = <R(e_i,e_j)e_k, e_l>,  Ric[j,k] = rm31[i,j,k,i] trace.
# With this sign the round unit 2-sphere has Ric = +g.
#
# The curvature operator evaluated on the fundamental two-form, and the
# Chern-Ricci form, both carry one overall sign relative to the raw
# contraction in this storage convention:
#   rho_star[i,j] = OMEGA_CONTRACTION_SIGN * rm[i,j,k,l] w^{kl}
#   p[i,j]        = OMEGA_CONTRACTION_SIGN * hrm[i,j,k,l] w^{kl}
# Pinned by requiring (a) the Weitzenboeck identity to close on exact
# nilmanifold data, (b) rho_star = 2 rho on Kaehler jets, and (c) the
# induced d/dt omega to equal -p along the flow.  A wrong sign here fails
# all three at O(1); the startup check would refuse to run.
OMEGA_CONTRACTION_SIGN = -1.0
