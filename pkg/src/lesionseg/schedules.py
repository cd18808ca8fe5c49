"""Per-epoch (BCE, Dice) weightings for the five training strategies."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

from .errors import ContractError


class ScheduleKind(str, enum.Enum):
    BCE_ONLY = "bce"
    DICE_ONLY = "dice"
    ADD = "add"
    SOFT_FINETUNE = "soft_ft"
    HARD_FINETUNE = "hard_ft"

    @classmethod
    def parse(cls, name: str) -> "ScheduleKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown schedule {name!r}; valid names: {valid}") from None


SCHEDULE_NAMES = tuple(k.value for k in ScheduleKind)


@dataclass(frozen=True)
class LossSchedule:
    kind: ScheduleKind
    total_epochs: int
    switch_fraction: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0.0 < self.switch_fraction < 1.0:
            raise ValueError(f"switch_fraction must lie in (0, 1), got {self.switch_fraction}")

    def switch_epoch(self) -> int:
        """First epoch at which hard fine-tuning trains on Dice: ceil(fraction * N)."""
        frac = Fraction(repr(self.switch_fraction))
        return -(-frac.numerator * self.total_epochs // frac.denominator)


def weights_at(schedule: LossSchedule, epoch: int) -> tuple[float, float]:
    """(w_bce, w_dice) for ``epoch`` in ``0..N``."""
    n, big_n = int(epoch), schedule.total_epochs
    if not 0 <= n <= big_n:
        raise ContractError(f"epoch {epoch} outside 0..{big_n}")
    kind = schedule.kind
    if kind is ScheduleKind.BCE_ONLY:
        return 1.0, 0.0
    if kind is ScheduleKind.DICE_ONLY:
        return 0.0, 1.0
    if kind is ScheduleKind.ADD:
        return 1.0, 1.0
    if kind is ScheduleKind.SOFT_FINETUNE:
        return (big_n - n) / big_n, n / big_n
    # strict n < fraction * N, evaluated in exact rational arithmetic
    return (1.0, 0.0) if n < schedule.switch_epoch() else (0.0, 1.0)
