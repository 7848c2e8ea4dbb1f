"""First-order exponential smoothing of scalar prediction streams."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import BadAlphaError

DEFAULT_ALPHA = 0.3


@dataclass(frozen=True)
class SmoothingState:
    alpha: float = DEFAULT_ALPHA
    carry: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise BadAlphaError(f"alpha must lie in (0, 1], got {self.alpha}")


def es_update(state: SmoothingState, x: float) -> tuple[SmoothingState, float]:
    """Feed one sample; the first sample passes through and seeds the carry."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"sample must be finite, got {x}")
    if not state.initialized:
        value = x
    else:
        value = state.alpha * x + (1.0 - state.alpha) * state.carry
    return replace(state, carry=value, initialized=True), value


def smooth_sequence(xs, alpha: float = DEFAULT_ALPHA) -> list[float]:
    state = SmoothingState(alpha)
    out = []
    for x in xs:
        state, value = es_update(state, x)
        out.append(value)
    return out
