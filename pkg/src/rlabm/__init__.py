"""Reinforcement-learning agents inside agent-based models.

Two environments (a minority game and a seasonal flu-vaccination model), a
small numpy MLP, policy-gradient and multi-agent actor-critic learners, and a
config-driven experiment harness.
"""

from .errors import BurnInError, ConfigError, ContractViolation, NumericError
from .rng import RngStream, rng_fork

__all__ = ["BurnInError", "ConfigError", "ContractViolation", "NumericError", "RngStream", "rng_fork"]
__version__ = "0.1.0"
