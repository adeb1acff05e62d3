"""Price-responsive deadband (PR-DB): hysteresis off-peak, always off on-peak."""

from __future__ import annotations

from dataclasses import dataclass

from .ewh import EwhParams, EwhState, PriceSchedule


@dataclass(frozen=True)
class DeadbandConfig:
    setpoint: float = 120.0
    halfwidth: float = 5.0

    def __post_init__(self):
        if self.halfwidth <= 0:
            raise ValueError("halfwidth must be positive")

    def check(self, params: EwhParams) -> None:
        if self.setpoint - self.halfwidth < params.temp_lower_T - 10:
            raise ValueError("deadband reaches more than 10 F below the comfort threshold")
        if self.setpoint + self.halfwidth > params.temp_upper_Tbar:
            raise ValueError("deadband exceeds the temperature cap")

    @property
    def lower(self) -> float:
        return self.setpoint - self.halfwidth

    @property
    def upper(self) -> float:
        return self.setpoint + self.halfwidth


def prdb_act(state: EwhState, minute: int, config: DeadbandConfig, schedule: PriceSchedule,
             previous: bool) -> bool:
    if schedule.is_peak(minute):
        return False
    if state.temp_T < config.lower:
        return True
    if state.temp_T > config.upper:
        return False
    return previous


class PrdbController:
    """Stateful wrapper holding the previous command for the hysteresis."""

    name = "PR-DB"

    def __init__(self, schedule: PriceSchedule, config: DeadbandConfig = DeadbandConfig()):
        self.schedule = schedule
        self.config = config
        self.previous = False

    def reset(self, demand=None) -> None:
        self.previous = False

    def act(self, state: EwhState) -> bool:
        self.previous = prdb_act(state, state.minute_of_day, self.config, self.schedule, self.previous)
        return self.previous
