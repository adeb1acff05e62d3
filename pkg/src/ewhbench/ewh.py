"""
Single-node electric water heater: thermal dynamics, step reward and the
episodic environment every controller is run against.

Temperature update over one step of length dt (hours)::

    R' = 1 / (G + B),   B = 8.34 * D_gph,   Q = 3412.14 * P_kw
    T+ = T * exp(-dt / (R' C)) + (R' G T_out + R' T_in B + R' Q) * (1 - exp(-dt / (R' C)))

Units: temperatures in degF, power in kW, demand in gal/min at the
environment boundary (gal/hr inside the thermal step).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

BTU_PER_KWH = 3412.14
LB_PER_GAL = 8.34
MINUTES_PER_DAY = 1440
# Admissible overshoot of the upper temperature bound (floating-point slack).
SAFETY_TOL = 1e-9


@dataclass(frozen=True)
class EwhParams:
    tank_volume: float = 40.0  # gal
    surface_area: float = 24.0  # ft^2
    shell_R: float = 15.0  # ft^2 degF hr / BTU
    inlet_temp_Tin: float = 60.0
    ambient_temp_Tout: float = 70.0
    rated_power_Pon: float = 4.5  # kW
    temp_lower_T: float = 115.0
    temp_upper_Tbar: float = 140.0
    dt_minutes: float = 1.0

    def __post_init__(self):
        for name in ("tank_volume", "surface_area", "shell_R", "inlet_temp_Tin",
                     "ambient_temp_Tout", "rated_power_Pon", "temp_lower_T", "temp_upper_Tbar"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.inlet_temp_Tin < self.temp_lower_T < self.temp_upper_Tbar:
            raise ValueError("require Tin < temp_lower_T < temp_upper_Tbar")
        if self.dt_minutes < 0:
            raise ValueError("dt_minutes must be non-negative")

    @property
    def shell_conductance_G(self) -> float:
        """BTU/(hr degF) lost through the tank shell."""
        return self.surface_area / self.shell_R

    @property
    def thermal_capacity_C(self) -> float:
        return LB_PER_GAL * self.tank_volume


@dataclass(frozen=True)
class PriceSchedule:
    offpeak_rate: float = 0.1
    onpeak_rate: float = 1.0
    peak_start_minute: int = 840
    peak_end_minute: int = 1140
    discomfort_rate_rc: float = 0.5

    def __post_init__(self):
        if not self.onpeak_rate > self.offpeak_rate > 0:
            raise ValueError("require onpeak_rate > offpeak_rate > 0")
        if not 0 <= self.peak_start_minute < self.peak_end_minute <= MINUTES_PER_DAY:
            raise ValueError("require 0 <= peak_start < peak_end <= 1440")
        if self.discomfort_rate_rc < 0:
            raise ValueError("discomfort_rate_rc must be non-negative")

    def is_peak(self, minute_of_day: int) -> bool:
        m = minute_of_day % MINUTES_PER_DAY
        return self.peak_start_minute <= m < self.peak_end_minute

    def rate(self, minute_of_day: int) -> float:
        return self.onpeak_rate if self.is_peak(minute_of_day) else self.offpeak_rate

    def rates(self, start_minute: int, n: int) -> np.ndarray:
        return np.array([self.rate(start_minute + k) for k in range(n)])


@dataclass(frozen=True)
class EnvConfig:
    episode_minutes: int = MINUTES_PER_DAY
    discount: float = 1.0
    min_downtime_DT: int = 10
    control_block_minutes: int = 10

    def __post_init__(self):
        if self.control_block_minutes <= 0 or self.episode_minutes % self.control_block_minutes:
            raise ValueError("control_block_minutes must divide episode_minutes")
        if not 0 <= self.min_downtime_DT <= self.episode_minutes:
            raise ValueError("min_downtime_DT must lie in [0, episode_minutes]")
        if self.discount != 1.0:
            raise ValueError("only undiscounted episodes (discount=1) are supported")


@dataclass(frozen=True)
class EwhState:
    temp_T: float
    heater_on: bool
    minutes_since_off: int
    minute_of_day: int
    cold_temp_Tc: float
    # most recent observed draw (gal/min); the current minute's draw is not known in advance
    demand_gpm: float = 0.0

    @classmethod
    def make(cls, temp_T: float, params: EwhParams, heater_on: bool = False,
             minutes_since_off: int = 10, minute_of_day: int = 0, demand_gpm: float = 0.0):
        return cls(temp_T, heater_on, minutes_since_off, minute_of_day,
                   max(0.0, params.temp_lower_T - temp_T), demand_gpm)


def initial_state(params: EwhParams, config: EnvConfig, temp_T: float = 120.0) -> EwhState:
    """Warm start, heater off and free to switch on."""
    return EwhState.make(temp_T, params, minutes_since_off=config.min_downtime_DT)


def step_coefficients(D_gph: float, params: EwhParams, dt_minutes: float | None = None):
    """Return ``(decay, eq0, rq)`` for one step at demand ``D_gph``.

    ``decay`` is exp(-dt/(R'C)), ``eq0`` the equilibrium temperature with the
    heater off and ``rq`` = R' (degF per BTU/hr of heat input).
    """
    dt = params.dt_minutes if dt_minutes is None else dt_minutes
    G = params.shell_conductance_G
    B = LB_PER_GAL * D_gph
    rp = 1.0 / (G + B)
    decay = math.exp(-(dt / 60.0) / (rp * params.thermal_capacity_C))
    eq0 = rp * G * params.ambient_temp_Tout + rp * params.inlet_temp_Tin * B
    return decay, eq0, rp


def thermal_step(T: float, P: float, D: float, params: EwhParams, dt_minutes: float | None = None) -> float:
    """Advance tank temperature one step. ``D`` is the draw in gal/hr."""
    if D < 0 or not math.isfinite(D):
        raise ValueError(f"demand must be a finite non-negative flow, got {D}")
    if not 0 <= P <= params.rated_power_Pon:
        raise ValueError(f"power {P} outside [0, {params.rated_power_Pon}]")
    decay, eq0, rp = step_coefficients(D, params, dt_minutes)
    eq = eq0 + rp * (BTU_PER_KWH * P)
    return T * decay + eq * (1.0 - decay)


def step_reward(state_next: EwhState, P: float, D_gpm: float, schedule: PriceSchedule,
                minute_of_day: int) -> float:
    return -(schedule.rate(minute_of_day) * P + schedule.discomfort_rate_rc * D_gpm * state_next.cold_temp_Tc)


def env_step(state: EwhState, action: bool, D: float, params: EwhParams, schedule: PriceSchedule,
             config: EnvConfig) -> tuple[EwhState, float]:
    """One minute of simulation with downtime and safety masking.

    ``D`` is the draw in gal/hr; the reward is charged on gal/min.
    """
    on = bool(action) and (state.heater_on or state.minutes_since_off >= config.min_downtime_DT)
    if on:
        T_next = thermal_step(state.temp_T, params.rated_power_Pon, D, params)
        if T_next > params.temp_upper_Tbar + SAFETY_TOL:
            on = False
    if not on:
        T_next = thermal_step(state.temp_T, 0.0, D, params)
    P = params.rated_power_Pon if on else 0.0
    since_off = 0 if on else min(state.minutes_since_off + 1, config.min_downtime_DT)
    D_gpm = D / 60.0
    nxt = EwhState(T_next, on, since_off, (state.minute_of_day + 1) % MINUTES_PER_DAY,
                   max(0.0, params.temp_lower_T - T_next), D_gpm)
    return nxt, step_reward(nxt, P, D_gpm, schedule, state.minute_of_day)


class Controller(Protocol):
    name: str

    def act(self, state: EwhState) -> bool: ...


@dataclass
class Trajectory:
    """Minute-resolution record of one episode.

    ``temps`` has one more entry than the per-step arrays (it includes the
    initial temperature).
    """

    temps: np.ndarray
    actions: np.ndarray  # commanded (pre-mask)
    power: np.ndarray  # applied kW
    demand_gpm: np.ndarray
    price_band: np.ndarray  # 1 on-peak, 0 off-peak
    rewards: np.ndarray
    start_minute: int = 0
    per_action_seconds: list[float] = field(default_factory=list)
    controller: str = ""

    @property
    def cost(self) -> float:
        return -math.fsum(self.rewards)

    def heater_on(self) -> np.ndarray:
        return self.power > 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["minute", "temp_F", "action", "power_kW", "demand_gpm", "price_band", "reward"])
            for k in range(len(self.rewards)):
                w.writerow([self.start_minute + k, repr(float(self.temps[k + 1])), int(self.actions[k]),
                            repr(float(self.power[k])), repr(float(self.demand_gpm[k])),
                            int(self.price_band[k]), repr(float(self.rewards[k]))])

    @classmethod
    def from_csv(cls, path: str | Path, initial_temp: float) -> "Trajectory":
        rows = list(csv.DictReader(open(path, newline="")))
        col = lambda k, t=float: np.array([t(r[k]) for r in rows])  # noqa: E731
        return cls(temps=np.concatenate([[initial_temp], col("temp_F")]),
                   actions=col("action", int).astype(bool), power=col("power_kW"),
                   demand_gpm=col("demand_gpm"), price_band=col("price_band", int),
                   rewards=col("reward"), start_minute=int(rows[0]["minute"]) if rows else 0)


class ControllerError(RuntimeError):
    def __init__(self, block: int, cause: BaseException):
        super().__init__(f"controller failed at block {block}: {cause!r}")
        self.block = block


def rollout(controller: Controller, demand, params: EwhParams, schedule: PriceSchedule,
            config: EnvConfig, initial: EwhState | None = None,
            clock: Callable[[], float] = time.perf_counter) -> Trajectory:
    """Run one episode, querying ``controller`` once per control block.

    ``demand`` is a sequence (or :class:`~ewhbench.demand.DemandTrace`) of
    gal/min values, one per minute. If the controller has a ``reset`` method
    it is called with the demand first (perfect-forecast controllers need it).
    """
    values = np.asarray(getattr(demand, "values", demand), dtype=float)
    tau = config.episode_minutes
    if len(values) < tau:
        raise ValueError(f"demand has {len(values)} minutes, episode needs {tau}")
    state = initial if initial is not None else initial_state(params, config)
    if hasattr(controller, "reset"):
        controller.reset(values[:tau])
    temps = np.empty(tau + 1)
    temps[0] = state.temp_T
    actions = np.zeros(tau, dtype=bool)
    power = np.zeros(tau)
    bands = np.zeros(tau, dtype=int)
    rewards = np.zeros(tau)
    timings = []
    start = state.minute_of_day
    action = False
    for k in range(tau):
        if k % config.control_block_minutes == 0:
            t0 = clock()
            try:
                action = bool(controller.act(state))
            except Exception as exc:
                raise ControllerError(k // config.control_block_minutes, exc) from exc
            timings.append(clock() - t0)
        bands[k] = schedule.is_peak(state.minute_of_day)
        state, r = env_step(state, action, values[k] * 60.0, params, schedule, config)
        temps[k + 1] = state.temp_T
        actions[k] = action
        power[k] = params.rated_power_Pon if state.heater_on else 0.0
        rewards[k] = r
    return Trajectory(temps, actions, power, values[:tau].copy(), bands, rewards, start, timings,
                      getattr(controller, "name", type(controller).__name__))


def downtime_violations(power: Sequence[float], min_downtime: int, history_off: int | None = None) -> list[int]:
    """Minutes at which the heater switches on after fewer than ``min_downtime`` off minutes.

    ``history_off`` is the number of consecutive off minutes before the first
    step (``None`` means unconstrained).
    """
    bad = []
    off_run = min_downtime if history_off is None else history_off
    prev_on = False
    for k, p in enumerate(power):
        on = p > 0
        if on and not prev_on and off_run < min_downtime:
            bad.append(k)
        off_run = 0 if on else off_run + 1
        prev_on = on
    return bad


class FixedSchedule:
    """Replays a per-block on/off sequence (used for exactness checks)."""

    def __init__(self, blocks: Sequence[bool], name: str = "fixed"):
        self.blocks = [bool(b) for b in blocks]
        self.name = name
        self._i = 0

    def reset(self, demand):
        self._i = 0

    def act(self, state: EwhState) -> bool:
        b = self.blocks[self._i] if self._i < len(self.blocks) else False
        self._i += 1
        return b


class AlwaysOff:
    name = "always-off"

    def act(self, state: EwhState) -> bool:
        return False


def with_temp(state: EwhState, temp_T: float, params: EwhParams) -> EwhState:
    return replace(state, temp_T=temp_T, cold_temp_Tc=max(0.0, params.temp_lower_T - temp_T))
