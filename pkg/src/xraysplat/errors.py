"""Exception hierarchy shared by every module."""


class XraySplatError(Exception):
    """Base class for all package errors."""


class InvalidConfig(XraySplatError, ValueError):
    pass


class InvalidTime(XraySplatError, ValueError):
    pass


class BehindCamera(XraySplatError, ValueError):
    pass


class NonPSD(XraySplatError, ValueError):
    pass


class DimensionMismatch(XraySplatError, ValueError):
    pass


class NoSamples(XraySplatError, RuntimeError):
    pass


class CapExceeded(XraySplatError, RuntimeError):
    pass


class MissingPseudoLabel(XraySplatError, FileNotFoundError):
    pass


class NonFiniteLoss(XraySplatError, FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class FormatError(XraySplatError, ValueError):
    """Malformed checkpoint, image or geometry file."""


def check_time(t: float, tol: float = 1e-9) -> float:
    t = float(t)
    if not (-tol <= t <= 1.0 + tol):
        raise InvalidTime(f"t={t} outside [0, 1]")
    return min(max(t, 0.0), 1.0)
