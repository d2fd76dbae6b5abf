"""Training schedules: learning rate, temperatures, EMA momentum, masking."""

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class DinoSchedules:
    base_lr: float = 6e-5
    warmup_steps: int = 500
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_steps: int = 0  # 0 = over total_steps
    ema_start: float = 0.992
    ema_end: float = 1.0
    head_out_dim: int = 8192
    mask_ratio_lo: float = 0.4
    mask_ratio_hi: float = 0.7
    batch_size: int = 4
    total_steps: int = 200

    def validate(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.student_temp <= 0 or self.teacher_temp_start <= 0 or self.teacher_temp_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.teacher_temp_steps < 0:
            raise ValueError("teacher_temp_steps must be >= 0")
        for m in (self.ema_start, self.ema_end):
            if not 0.0 < m <= 1.0:
                raise ValueError(f"EMA momentum must be in (0, 1], got {m}")
        if self.ema_end < self.ema_start:
            raise ValueError("ema_end must be >= ema_start")
        if not 0.0 < self.mask_ratio_lo <= self.mask_ratio_hi < 1.0:
            raise ValueError(
                f"mask ratio bounds must satisfy 0 < lo <= hi < 1, got "
                f"[{self.mask_ratio_lo}, {self.mask_ratio_hi}]"
            )
        if self.head_out_dim < 2:
            raise ValueError("head_out_dim must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(step, sched: DinoSchedules) -> float:
    """Linear warm-up to base_lr, then cosine decay to 1% of base_lr."""
    if step < sched.warmup_steps:
        return sched.base_lr * (step + 1) / sched.warmup_steps
    span = max(sched.total_steps - sched.warmup_steps, 1)
    frac = min((step - sched.warmup_steps) / span, 1.0)
    floor = 0.01
    return sched.base_lr * (floor + (1.0 - floor) * (1.0 + math.cos(math.pi * frac)) / 2.0)


def teacher_temp_at(step, sched: DinoSchedules) -> float:
    """Linear ramp from the start to the end temperature."""
    horizon = sched.teacher_temp_steps or sched.total_steps
    if step >= horizon:
        return sched.teacher_temp_end
    frac = step / horizon
    return sched.teacher_temp_start + frac * (
        sched.teacher_temp_end - sched.teacher_temp_start
    )


def ema_momentum_at(step, sched: DinoSchedules) -> float:
    """Cosine ramp from ema_start at step 0 to ema_end at total_steps."""
    frac = min(step / sched.total_steps, 1.0)
    return sched.ema_end - (sched.ema_end - sched.ema_start) * (
        1.0 + math.cos(math.pi * frac)
    ) / 2.0


def sample_mask_ratio(rng, sched: DinoSchedules) -> float:
    """Per-sample masking fraction, uniform in [lo, hi]."""
    return float(rng.uniform(sched.mask_ratio_lo, sched.mask_ratio_hi))
