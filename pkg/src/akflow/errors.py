"""Exception types shared across the package.

Every error raised on purpose by this package derives from AkflowError so
callers can catch the whole family at the CLI boundary.
"""


class AkflowError(Exception):
    """Base class for all package errors."""


class WrongDimension(AkflowError):
    """Tensor or grid dimension outside the supported set."""


class SlotMismatch(AkflowError):
    """Contraction or product applied to incompatible tensor slots."""


class NotAntisymmetric(AkflowError):
    """Input expected to be an antisymmetric form but is not."""


class NotAlmostComplex(AkflowError):
    """Endomorphism expected to square to -Id but does not."""


class NotJSkew(AkflowError):
    """Endomorphism expected to anticommute with J but does not."""


class DegenerateMetric(AkflowError):
    """Symmetric tensor expected to be positive definite but is not."""


class DegenerateForm(AkflowError):
    """Two-form expected to be nondegenerate but is not."""


class NonFinite(AkflowError):
    """NaN or Inf encountered in field data."""


class BlowUpDetected(AkflowError):
    """Curvature guard tripped: sup |Rm| exceeded the configured threshold.

    Carries the offending monitor value so the driver can log it before
    terminating with the dedicated exit code.
    """

    def __init__(self, sup_rm, t, step):
        self.sup_rm = float(sup_rm)
        self.t = float(t)
        self.step = int(step)
        super().__init__(
            f"curvature blow-up guard tripped at t={t:.6g} (step {step}): "
            f"sup|Rm| = {sup_rm:.6g}"
        )


class ConventionError(AkflowError):
    """Startup self-test failed: a pinned identity does not close.

    Raised by the certification harness when the package's sign and
    normalization conventions stop reproducing the frozen reference
    values; aborts the CLI rather than produce silently wrong output.
    """


class ConfigError(AkflowError):
    """Run configuration file is malformed or contains unknown keys."""


class SnapshotFormatError(AkflowError):
    """Snapshot file is missing, truncated, or has a bad header."""
