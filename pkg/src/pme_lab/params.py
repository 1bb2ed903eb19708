"""Parameter bundle for the degenerate half-space problems.

The single dimensionless parameter is ``sigma`` (> -1).  Everything else is
derived: the porous-medium exponent ``m = (2+sigma)/(1+sigma)``, the pressure
scaling constant ``c_m = m/(m-1) = 2+sigma`` and the flat wave speed ``1+sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class SigmaParam:
    """Weight exponent sigma > -1 together with its derived constants."""

    sigma: float
    m: float = field(init=False)
    c_m: float = field(init=False)
    wave_speed: float = field(init=False)

    def __post_init__(self):
        if not self.sigma > -1.0:
            raise ValueError("sigma must exceed -1 (got %r)" % (self.sigma,))
        object.__setattr__(self, "m", (2.0 + self.sigma) / (1.0 + self.sigma))
        object.__setattr__(self, "c_m", self.m / (self.m - 1.0))
        object.__setattr__(self, "wave_speed", 1.0 + self.sigma)


#: default seed for every stochastic sweep in the laboratory
DEFAULT_SEED = 0x5EED
