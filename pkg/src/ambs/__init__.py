"""Approximate model-based shielding for safe reinforcement learning.

Submodules: ``logic`` (formulas, labelled MDPs, traces), ``envs``,
``measure`` (bounded-safety measures and bound validators),
``world_model``, ``agent`` (policies, critics, gradients, Lagrangian),
``shield``, ``config``, ``trainer`` and ``cli``.
"""

from .errors import ConfigurationError, PreconditionError

__version__ = "0.1.0"
__all__ = ["ConfigurationError", "PreconditionError", "__version__"]
