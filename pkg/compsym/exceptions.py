"""
compsym Exceptions.

This module provides the exception classes for compsym.
"""

CONFIG = 'CONFIG'
BUILD = 'BUILD'
GATE = 'GATE'


class CompsymError(Exception):
    """Base class for all compsym errors."""
    pass


class ToolkitError(CompsymError):
    """Raised when an operation rejects its inputs or a gate fails."""

    category = BUILD

    def __init__(self, error, operation_name):
        self.response = {
            'Error': error,
            'Operation': operation_name,
            'Category': self.category,
        }
        self.operation_name = operation_name

        message = f"{error.get('Code', 'Unknown')}: {error.get('Message', 'Unknown')}"
        super().__init__(message)

    @property
    def code(self):
        return self.response['Error'].get('Code', 'Unknown')


class ConfigError(ToolkitError):
    """Raised when a run configuration or network document is invalid."""

    category = CONFIG

    def __init__(self, message):
        super().__init__({'Code': 'ConfigError', 'Message': message}, 'LoadConfig')


class NotInvertibleRepresentation(ToolkitError):
    """Raised when a K-infinity function has no closed-form inverse."""

    def __init__(self, kfn):
        error = {
            'Code': 'NotInvertibleRepresentation',
            'Message': f"no closed-form inverse for {kfn!r}"
        }
        super().__init__(error, 'KFnInverse')


class DomainViolation(ToolkitError):
    """Raised when a state, input or mode lies outside its declared domain."""

    def __init__(self, what, value, subsystem_id=None):
        where = f" of subsystem {subsystem_id}" if subsystem_id is not None else ""
        error = {
            'Code': 'DomainViolation',
            'Message': f"{what}{where} outside its domain: {value}"
        }
        self.what = what
        self.value = value
        super().__init__(error, 'SubsystemStep')


class DimensionMismatch(ToolkitError):
    """Raised when matrix shapes or partition block sizes disagree."""

    def __init__(self, detail):
        error = {
            'Code': 'DimensionMismatch',
            'Message': detail
        }
        super().__init__(error, 'ValidateNetwork')


class EtaTooLarge(ToolkitError):
    """Raised when a quantization parameter exceeds the span of its domain."""

    def __init__(self, eta, span):
        error = {
            'Code': 'EtaTooLarge',
            'Message': f"quantization parameter {eta} exceeds domain span {span}"
        }
        self.eta = eta
        self.span = span
        super().__init__(error, 'BuildGrid')


class DwellViolation(ToolkitError):
    """Raised when a switching sequence switches before the dwell time elapsed."""

    def __init__(self, step, dwell_time):
        error = {
            'Code': 'DwellViolation',
            'Message': f"switch at step {step} violates dwell time {dwell_time}"
        }
        self.step = step
        super().__init__(error, 'RunEquivalence')


class NotContractive(ToolkitError):
    """Raised when a mode's weighted induced norm is not below one."""

    category = GATE

    def __init__(self, mode, kappa):
        error = {
            'Code': 'NotContractive',
            'Message': f"mode {mode} has contraction factor {kappa:.6g} >= 1"
        }
        self.mode = mode
        self.kappa = kappa
        super().__init__(error, 'CertifyDeltaISS')


class BadEpsilon(ToolkitError):
    """Raised when the dwell exponent is not strictly greater than one."""

    def __init__(self, epsilon):
        error = {
            'Code': 'BadEpsilon',
            'Message': f"dwell exponent must exceed 1, got {epsilon}"
        }
        super().__init__(error, 'MinDwellTime')


class DwellTooSmall(ToolkitError):
    """Raised when the dwell time is below the certified minimum."""

    category = GATE

    def __init__(self, dwell_time, required):
        error = {
            'Code': 'DwellTooSmall',
            'Message': f"dwell time {dwell_time} below required {required}"
        }
        super().__init__(error, 'BuildAltSim')


class BadSplitters(ToolkitError):
    """Raised when the splitting weights cannot yield a contraction."""

    def __init__(self, detail):
        error = {
            'Code': 'BadSplitters',
            'Message': detail
        }
        super().__init__(error, 'BuildAltSim')


class CertificateRejected(ToolkitError):
    """Raised when a sampled verification gate reports violations."""

    category = GATE

    def __init__(self, what, violations):
        error = {
            'Code': 'CertificateRejected',
            'Message': f"{what}: {violations} sampled violation(s)"
        }
        self.violations = violations
        super().__init__(error, 'VerifySampled')


class CycleExplosion(ToolkitError):
    """Raised when cycle enumeration exceeds its budget and no fallback applies."""

    def __init__(self, budget):
        error = {
            'Code': 'CycleExplosion',
            'Message': f"more than {budget} simple cycles and gains are not all linear"
        }
        super().__init__(error, 'CheckSmallGain')


class NonLinearGains(ToolkitError):
    """Raised when a linear-only construction meets a nonlinear gain."""

    def __init__(self, i, j):
        error = {
            'Code': 'NonLinearGains',
            'Message': f"gain ({i}, {j}) is not linear"
        }
        super().__init__(error, 'ComputeDeltas')


class SmallGainViolated(ToolkitError):
    """Raised when a construction requires a passing small-gain check."""

    category = GATE

    def __init__(self, cycle, slope):
        error = {
            'Code': 'SmallGainViolated',
            'Message': f"cycle {list(cycle)} has gain {slope:.6g} not below identity"
        }
        self.cycle = cycle
        super().__init__(error, 'CheckSmallGain')


class CouplingMismatch(ToolkitError):
    """Raised when an internal-input point list differs from its neighbour outputs."""

    def __init__(self, target, detail):
        error = {
            'Code': 'CouplingMismatch',
            'Message': f"subsystem {target}: {detail}"
        }
        super().__init__(error, 'InterconnectFinite')


class NoWinningStateNearby(ToolkitError):
    """Raised when the refined controller finds no winning grid point."""

    category = GATE

    def __init__(self, x, radius):
        error = {
            'Code': 'NoWinningStateNearby',
            'Message': f"no winning grid point within {radius:.6g} of {list(x)}"
        }
        self.step = None
        super().__init__(error, 'RefinedController')


class PipelineError(ToolkitError):
    """Raised when a stage of the traffic pipeline fails."""

    def __init__(self, stage, cause):
        error = {
            'Code': 'PipelineError',
            'Message': f"stage '{stage}' failed: {cause}"
        }
        self.stage = stage
        self.cause = cause
        if isinstance(cause, ToolkitError):
            self.category = cause.category
        super().__init__(error, 'RunTrafficPipeline')
