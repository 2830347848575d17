"""Exception types raised across the package."""


class ThermoviError(Exception):
    """Base class for all package errors."""


class ArityMismatch(ThermoviError, ValueError):
    pass


class UnsupportedPrimitive(ThermoviError):
    """An operation outside the closed differentiable primitive set was used."""


class NonpositiveTemperature(ThermoviError, ValueError):
    pass


class NonpositiveVolume(ThermoviError, ValueError):
    pass


class NotSkew(ThermoviError, ValueError):
    pass


class PistonOutOfRange(ThermoviError, ValueError):
    pass


class OutsidePhysicalDomain(ThermoviError, ValueError):
    pass


class NewtonDiverged(ThermoviError):
    """Implicit step failed to converge.

    ``residual`` holds the infinity norm of the last residual and ``step`` the
    index of the failing step when the error comes out of a trajectory loop.
    """

    def __init__(self, message, residual=float("nan"), step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class StepSizeUnderflow(ThermoviError):
    pass


class NonfiniteLoss(ThermoviError):
    def __init__(self, message, epoch, last_good=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


class GridMismatch(ThermoviError, ValueError):
    pass


class ConfigError(ThermoviError, ValueError):
    pass
