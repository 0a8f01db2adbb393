"""Scalar schedules for learning rate and teacher momentum."""

import math
from dataclasses import dataclass

from ..errors import StepOutOfRange


@dataclass(frozen=True)
class ScheduleSpec:
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_schedule(step: int, spec: ScheduleSpec) -> float:
    """Half-cosine from spec.start at step 0 to spec.end at spec.total_steps."""
    if not 0 <= step <= spec.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {spec.total_steps}]")
    w = (math.cos(math.pi * step / spec.total_steps) + 1.0) / 2.0
    return spec.end + (spec.start - spec.end) * w


def warmup_cosine_schedule(step: int, spec: ScheduleSpec, warmup_frac: float = 0.13) -> float:
    """Linear ramp 0 -> spec.start over the first warmup_frac of steps, then
    cosine decay spec.start -> spec.end over the remainder."""
    if not 0 <= step <= spec.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {spec.total_steps}]")
    warmup_steps = int(round(warmup_frac * spec.total_steps))
    if step < warmup_steps:
        return spec.start * step / warmup_steps
    tail = ScheduleSpec(spec.start, spec.end, max(1, spec.total_steps - warmup_steps))
    return cosine_schedule(step - warmup_steps, tail)


def exp_decay_schedule(step: int, spec: ScheduleSpec) -> float:
    """Geometric interpolation spec.start -> spec.end; both endpoints must be > 0."""
    if not 0 <= step <= spec.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {spec.total_steps}]")
    if spec.start <= 0 or spec.end <= 0:
        raise ValueError("exponential schedule needs positive endpoints")
    return spec.start * (spec.end / spec.start) ** (step / spec.total_steps)
