from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 1e-2
SIGMA_MAX = 80.0
RHO = 3.0


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """rho-power interpolation between ``sigma_max`` and ``sigma_min``, then 0.

    ``sigmas`` has ``steps + 1`` entries; the last is the terminal 0.
    """

    steps: int = 50
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho: float = RHO

    def __post_init__(self):
        if self.steps < 2:
            raise ScheduleError("schedule needs at least 2 steps")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ScheduleError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0:
            raise ScheduleError("rho must be positive")

    @property
    def sigmas(self) -> np.ndarray:
        i = np.arange(self.steps, dtype=np.float64)
        inv = 1.0 / self.rho
        s = (self.sigma_max**inv + i / (self.steps - 1) * (self.sigma_min**inv - self.sigma_max**inv)) ** self.rho
        # pin the endpoints exactly; the power round trip is off by an ulp
        s[0], s[-1] = self.sigma_max, self.sigma_min
        return np.append(s, 0.0)

    def pairs(self):
        s = self.sigmas
        return list(zip(s[:-1], s[1:]))
