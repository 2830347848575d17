"""Learning and simulating dissipative thermodynamic systems from observable data."""

from .core import ObservableState, PhaseState, ReducedObservable, ReducedPhase, TrajectoryDataset
from .errors import ThermoviError
from .systems import Piston, PistonParams, RigidBody, RigidBodyParams, make_system

__version__ = "0.1.0"

__all__ = [
    "ObservableState", "PhaseState", "ReducedObservable", "ReducedPhase", "TrajectoryDataset",
    "ThermoviError", "Piston", "PistonParams", "RigidBody", "RigidBodyParams", "make_system",
]
