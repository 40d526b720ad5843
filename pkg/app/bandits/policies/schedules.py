import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class ConversationSchedule(BaseModel):
    """
    Conversation budget b(t): 5 floor(ln t) for ``log``, floor(t / 50) for
    ``linear``. Both are nondecreasing with b(0) = 0.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["log", "linear", "none"] = "log"
    factor: int = Field(5, gt=0)
    divisor: int = Field(50, gt=0)

    def budget(self, t: int) -> int:
        if t <= 0 or self.kind == "none":
            return 0
        if self.kind == "log":
            return self.factor * math.floor(math.log(t))
        return t // self.divisor


def schedule_queries(sched: ConversationSchedule, t: int) -> int:
    """Conversations newly allowed at round t: max(0, b(t) - b(t - 1))."""
    if t < 1:
        raise ValueError("rounds start at t = 1")
    return max(0, sched.budget(t) - sched.budget(t - 1))


def interleave_positions(count: int, rounds: int) -> np.ndarray:
    """
    Spread ``count`` events over ``rounds`` rounds, at most one per round.

    Positions are floor(j * rounds / count). When count > rounds the events
    take the first ``count`` rounds instead, which callers flag as overflow.
    """
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    if count > rounds:
        return np.arange(count, dtype=np.int64)
    return (np.arange(count, dtype=np.int64) * rounds) // count
