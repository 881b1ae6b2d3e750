"""Client-side training regimen: linear warmup followed by cosine decay."""

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class TrainSchedule:
    total_steps: int
    base_lr: float = 0.03
    warmup_steps: int = 100
    clip_norm: float = 1.0
    batch_size: int = 32

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps > self.total_steps:
            raise ConfigError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps "
                f"({self.total_steps})"
            )


def lr_at_step(schedule, step):
    """Learning rate at a given global step.

    Linear ramp from 0 to base_lr over warmup_steps, then cosine decay
    base_lr * 0.5 * (1 + cos(pi * t)) reaching exactly 0 at total_steps.
    """
    if step < 0 or step > schedule.total_steps:
        raise ConfigError(
            f"step {step} outside [0, {schedule.total_steps}]"
        )
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.base_lr if step == schedule.warmup_steps else 0.0
    t = (step - schedule.warmup_steps) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
