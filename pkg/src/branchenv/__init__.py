"""Branching particle systems in a correlated random environment.

Forward Monte Carlo of the interacting branching system, deterministic and
jump-process moment oracles, a conditional-convolution (mild) solver for the
limiting density field, and estimators for its Hoelder regularity.
"""

__version__ = "0.1.0"
