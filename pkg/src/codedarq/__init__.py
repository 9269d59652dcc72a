"""Coded-retransmission scheduling over a lossy broadcast downlink."""

__version__ = "0.1.0"

from .aggregation import (
    Action,
    AggregatedState,
    Scheme,
    SchemeKind,
    aggregate,
    enumerate_aggregated,
    feasible_actions,
    seed_state,
)
from .channel import ChannelConfig, Simulator, Trace, realize_action
from .learning import (
    LearningSchedule,
    Policy,
    TransitionModel,
    ValueFunction,
    algorithm_a,
    average_cost_eval,
    threshold_accelerate,
    value_iteration,
)
from .state import (
    DetailedState,
    Packet,
    SlotOutcome,
    age_tte,
    apply_outcome,
    clique_with_oldest,
    empty_lines,
    max_clique,
    xor_combine,
)

__all__ = [
    "Action",
    "AggregatedState",
    "ChannelConfig",
    "DetailedState",
    "LearningSchedule",
    "Packet",
    "Policy",
    "Scheme",
    "SchemeKind",
    "Simulator",
    "SlotOutcome",
    "Trace",
    "TransitionModel",
    "ValueFunction",
    "age_tte",
    "aggregate",
    "algorithm_a",
    "apply_outcome",
    "average_cost_eval",
    "clique_with_oldest",
    "empty_lines",
    "enumerate_aggregated",
    "feasible_actions",
    "max_clique",
    "realize_action",
    "seed_state",
    "threshold_accelerate",
    "value_iteration",
    "xor_combine",
]
