"""
Exception hierarchy shared by the estimation, calibration and CLI layers
"""


class NoiseLabError(Exception):
    """Base class for every error raised by this package"""


class ParameterError(NoiseLabError, ValueError):
    """theta does not fit the parameterization, or a coordinate is out of range"""


class ModelError(NoiseLabError, ValueError):
    """System model or supervisory spec dimensions are inconsistent"""


class SingularInnovationError(NoiseLabError, ArithmeticError):
    """Innovation covariance S_k could not be Cholesky-factorized"""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        message = f"Innovation covariance is not SPD at step k={step}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class SingularSupervisoryError(NoiseLabError, ArithmeticError):
    """Supervisory covariance C stayed singular after jitter"""


class FilterInvariantError(NoiseLabError, RuntimeError):
    """Internal bookkeeping of the augmented filter was violated"""


class OracleScaleError(NoiseLabError, ValueError):
    """Problem is too large for dense joint-Gaussian assembly"""


class NumericalDivergenceError(NoiseLabError, ArithmeticError):
    """Loss or gradient became non-finite during calibration"""


class ConfigError(NoiseLabError, ValueError):
    """Run configuration failed validation"""


def with_step(error: NoiseLabError, step: int) -> NoiseLabError:
    """Attach the filter step to an error raised inside the recursion"""
    if getattr(error, "step", None) is None:
        error.step = step
        error.args = (f"[k={step}] {error.args[0] if error.args else ''}",)
    return error
