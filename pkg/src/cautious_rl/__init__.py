"""Risk-averse tabular reinforcement learning on occupancy measures."""

from .mdp import (
    MDPError,
    TabularMDP,
    constraint_residual,
    expected_reward_table,
    lagrangian_value,
    load_mdp,
    occupancy_from_policy,
    policy_from_occupancy,
    return_of_occupancy,
    save_mdp,
)
from .risk import RiskSpec, risk_subgradient, risk_value, safety_mass, sigma_default

__version__ = "0.1.0"
