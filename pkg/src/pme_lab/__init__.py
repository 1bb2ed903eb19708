"""pme-lab: a numerical laboratory for degenerate-parabolic half-space flows
near flat travelling waves."""

__version__ = "0.1.0"

from .params import SigmaParam, DEFAULT_SEED  # noqa: F401
