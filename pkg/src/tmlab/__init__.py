"""Desk-scale laboratory for continuous-time Transition Matching."""

from tmlab.process import Parameterization

__version__ = "0.1.0"

__all__ = ["Parameterization", "__version__"]
