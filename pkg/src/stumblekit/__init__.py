"""stumblekit: stumble-recovery trajectory design for a planar
human-prosthesis biped (gait synthesis, reachable-set planning,
closed-loop evaluation)."""

__version__ = "0.1.0"

from .model import (
    Config,
    ModelParams,
    Stance,
    State,
    default_params,
    dynamics_terms,
    forward_kinematics,
    heel_strike_guard,
    impact_map,
    phase_variable,
)

__all__ = [
    "Config",
    "ModelParams",
    "Stance",
    "State",
    "default_params",
    "dynamics_terms",
    "forward_kinematics",
    "heel_strike_guard",
    "impact_map",
    "phase_variable",
    "__version__",
]
