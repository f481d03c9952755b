"""
Exception hierarchy for the AirComp simulator.
"""
from typing import Any, Optional


class AirCompError(Exception):
    """Base class for all errors raised by the simulator."""


class ConfigurationError(AirCompError, ValueError):
    """Invalid system, solver or experiment configuration."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class DataError(AirCompError, ValueError):
    """Non-finite or otherwise unusable numerical input."""


class DimensionError(AirCompError, ValueError):
    """Arrays whose shapes do not agree with the channel/solution."""


class SingularChannelError(AirCompError):
    """A channel Gram matrix is rank deficient (condition number too large)."""

    def __init__(self, message: str, device: Optional[int] = None, condition: float = float("inf")):
        super().__init__(message)
        self.device = device
        self.condition = condition


class DegenerateBeamformerError(AirCompError):
    """Beamformers give a zero aligned-signal sum, so the optimal receive scaling is undefined."""


class SolverError(AirCompError):
    """The power-minimisation solver did not converge."""

    def __init__(self, message: str, best_iterate: Any = None):
        super().__init__(message)
        self.best_iterate = best_iterate


class DisconnectedGraphError(AirCompError):
    """Mixing matrix has lambda2 >= 1, so no consensus rate exists."""


class InstanceTooLargeError(AirCompError):
    """Instance exceeds the brute-force oracle's cost guard."""


class AggregationError(AirCompError):
    """An aggregator failed inside the optimisation loop."""

    def __init__(self, message: str, round_index: int):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index
