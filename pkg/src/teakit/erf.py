"""Traditional exposure-response-function calculator.

For a log-linear health effect ``beta`` per unit exposure, a cell with
baseline incidence ``pi0`` and population ``pop`` whose exposure changes by
``delta_x`` gains ``pi0 * pop * (exp(beta * delta_x) - 1)`` events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

__all__ = ["ErfInput", "erf_delta_events", "erf_total"]


@dataclass(frozen=True)
class ErfInput:
    beta: float
    pi0: float
    pop: float
    delta_x: float

    def __post_init__(self):
        for name in ("beta", "pi0", "pop", "delta_x"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.pi0 < 0 or self.pop < 0:
            raise ValueError("pi0 and pop must be nonnegative")


def erf_delta_events(cell: ErfInput) -> float:
    """Change in expected events; ``expm1`` keeps small ``beta * delta_x`` accurate."""
    return cell.pi0 * cell.pop * math.expm1(cell.beta * cell.delta_x)


def erf_total(cells: Iterable[ErfInput]) -> float:
    cells = list(cells)
    if not cells:
        raise ValueError("erf_total needs at least one cell")
    return math.fsum(erf_delta_events(c) for c in cells)
