"""Evolution-strategies policy search for on/off water-heater control.

The policy is a small tanh network mapping five normalised features
(temperature, cold deficit, peak flag, last observed draw, time of day) to a
logit; the heater is commanded on when the logit is strictly positive.

Training uses mirrored Gaussian perturbations and centered ranks. Fitness is
the probability-weighted total reward over a set of single-day demand
scenarios, computed by a batched simulator that reproduces
:func:`ewhbench.ewh.rollout` bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .demand import ScenarioSet
from .ewh import (BTU_PER_KWH, MINUTES_PER_DAY, SAFETY_TOL, EnvConfig, EwhParams, EwhState,
                  PriceSchedule, initial_state, step_coefficients)

log = logging.getLogger(__name__)

N_FEATURES = 5
FORMAT = "ewhbench-policy"


@dataclass(frozen=True)
class Normalizer:
    """Fixed ``(x - shift) / scale`` for (T, Tc, peak flag, draw gal/min, fraction of day)."""
    scale: tuple[float, ...] = (140.0, 140.0, 1.0, 5.0, 1.0)
    shift: tuple[float, ...] = (0.0,) * N_FEATURES

    def __post_init__(self):
        if len(self.scale) != N_FEATURES or not all(s > 0 for s in self.scale):
            raise ValueError(f"normalizer needs {N_FEATURES} positive scales")
        if len(self.shift) != N_FEATURES or not all(math.isfinite(s) for s in self.shift):
            raise ValueError(f"normalizer needs {N_FEATURES} finite shifts")


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    layers: tuple[int, ...] = (N_FEATURES, 64, 64, 1)
    normalizer: Normalizer = Normalizer()

    def __post_init__(self):
        if self.layers[0] != N_FEATURES or self.layers[-1] != 1 or min(self.layers) < 1:
            raise ValueError(f"layers must run {N_FEATURES} -> ... -> 1, got {self.layers}")
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (n_params(self.layers),):
            raise ValueError(f"theta has shape {theta.shape}, architecture {self.layers} "
                             f"needs ({n_params(self.layers)},)")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, layers: tuple[int, ...] = (N_FEATURES, 64, 64, 1), normalizer: Normalizer = Normalizer()):
        return cls(np.zeros(n_params(layers)), layers, normalizer)

    @classmethod
    def init(cls, seed: int, layers: tuple[int, ...] = (N_FEATURES, 64, 64, 1),
             normalizer: Normalizer = Normalizer()) -> "PolicyParams":
        """Hidden weights N(0, 1/fan_in); zero biases and output layer.

        A zero output layer puts the starting logit at exactly 0 everywhere, so
        perturbations of either sign change behaviour and ranks are informative.
        """
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        parts = []
        shapes = list(zip(layers[:-1], layers[1:]))
        for li, (fan_in, fan_out) in enumerate(shapes):
            w = rng.standard_normal(fan_in * fan_out) / math.sqrt(fan_in)
            parts.append(np.zeros_like(w) if li == len(shapes) - 1 else w)
            parts.append(np.zeros(fan_out))
        return cls(np.concatenate(parts), layers, normalizer)

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(theta, self.layers, self.normalizer)


def n_params(layers: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layers[:-1], layers[1:]))


def _unpack(thetas: np.ndarray, layers: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a (P, n_params) stack into per-layer (W (P, in, out), b (P, out))."""
    out, at = [], 0
    P = thetas.shape[0]
    for a, b in zip(layers[:-1], layers[1:]):
        W = thetas[:, at:at + a * b].reshape(P, a, b)
        at += a * b
        out.append((W, thetas[:, at:at + b]))
        at += b
    return out


def forward(weights, x: np.ndarray) -> np.ndarray:
    """Logits for features ``x`` of shape (P, M, 5); returns (P, M).

    Products are accumulated one input at a time so every output element sees
    the same sequence of roundings whatever the batch shape.
    """
    h = x
    last = len(weights) - 1
    for li, (W, b) in enumerate(weights):
        acc = np.broadcast_to(b[:, None, :], h.shape[:2] + (b.shape[1],)).copy()
        for i in range(W.shape[1]):
            acc = acc + h[:, :, i, None] * W[:, None, i, :]
        h = acc if li == last else np.tanh(acc)
    return h[:, :, 0]


def features(T, Tc, peak, D_gpm, minute, normalizer: Normalizer) -> np.ndarray:
    """Stack normalised features along a trailing axis (inputs broadcast)."""
    T = np.asarray(T, dtype=float)
    cols = np.broadcast_arrays(T, np.asarray(Tc, float), np.asarray(peak, float),
                               np.asarray(D_gpm, float), np.asarray(minute / MINUTES_PER_DAY, float))
    s, m = normalizer.scale, normalizer.shift
    return np.stack([(c - m[j]) / s[j] for j, c in enumerate(cols)], axis=-1)


def state_features(state: EwhState, schedule: PriceSchedule, normalizer: Normalizer) -> np.ndarray:
    return features(state.temp_T, state.cold_temp_Tc, 1.0 if schedule.is_peak(state.minute_of_day) else 0.0,
                    state.demand_gpm, state.minute_of_day % MINUTES_PER_DAY, normalizer)


def policy_logit(policy: PolicyParams, state: EwhState, schedule: PriceSchedule) -> float:
    x = state_features(state, schedule, policy.normalizer)
    return float(forward(_unpack(policy.theta[None], policy.layers), x[None, None])[0, 0])


def policy_act(policy: PolicyParams, state: EwhState, schedule: PriceSchedule) -> bool:
    """On iff the logit is strictly positive (a zero logit means off)."""
    return policy_logit(policy, state, schedule) > 0.0


class EsController:
    name = "ES"

    def __init__(self, policy: PolicyParams, schedule: PriceSchedule):
        self.policy = policy
        self.schedule = schedule
        self._weights = _unpack(policy.theta[None], policy.layers)

    def act(self, state: EwhState) -> bool:
        x = state_features(state, self.schedule, self.policy.normalizer)
        return bool(forward(self._weights, x[None, None])[0, 0] > 0.0)


# ---------------------------------------------------------------------------
# batched episodes

@dataclass(frozen=True)
class EpisodeTables:
    """Per-minute coefficients for N single-day scenarios, all starting from one state."""
    decay: np.ndarray  # (N, tau)
    eq0: np.ndarray
    rp: np.ndarray
    D_gpm: np.ndarray  # draw as the simulator charges it
    rate: np.ndarray  # (tau,)
    peak: np.ndarray  # (tau,) float 0/1
    probs: np.ndarray
    params: EwhParams
    schedule: PriceSchedule
    env: EnvConfig
    initial: EwhState

    @property
    def n_scenarios(self) -> int:
        return self.decay.shape[0]


def episode_tables(scenarios: ScenarioSet | np.ndarray, params: EwhParams, schedule: PriceSchedule,
                   env: EnvConfig, initial: EwhState | None = None, probs=None) -> EpisodeTables:
    if isinstance(scenarios, ScenarioSet):
        X, probs = scenarios.matrix(), np.asarray(scenarios.probs, float)
    else:
        X = np.atleast_2d(np.asarray(scenarios, float))
        probs = np.full(len(X), 1.0 / len(X)) if probs is None else np.asarray(probs, float)
    tau = env.episode_minutes
    if X.shape[1] < tau:
        raise ValueError(f"scenarios have {X.shape[1]} minutes, episode needs {tau}")
    X = X[:, :tau]
    init = initial if initial is not None else initial_state(params, env)
    coef = np.empty((3,) + X.shape)
    D_gph = X * 60.0
    for n in range(X.shape[0]):
        for k in range(tau):
            coef[:, n, k] = step_coefficients(float(D_gph[n, k]), params)
    start = init.minute_of_day
    minutes = [(start + k) % MINUTES_PER_DAY for k in range(tau)]
    return EpisodeTables(coef[0], coef[1], coef[2], D_gph / 60.0,
                         np.array([schedule.rate(m) for m in minutes]),
                         np.array([1.0 if schedule.is_peak(m) else 0.0 for m in minutes]),
                         probs, params, schedule, env, init)


def batch_returns(thetas: np.ndarray, layers: Sequence[int], normalizer: Normalizer,
                  tables: EpisodeTables) -> np.ndarray:
    """Total reward of each policy row on each scenario, shape (P, N)."""
    thetas = np.atleast_2d(np.asarray(thetas, np.float64))
    weights = _unpack(thetas, layers)
    P, N = thetas.shape[0], tables.n_scenarios
    prm, env = tables.params, tables.env
    tau = env.episode_minutes
    init = tables.initial
    Pon = prm.rated_power_Pon
    heat = BTU_PER_KWH * Pon
    cap = prm.temp_upper_Tbar + SAFETY_TOL
    rc = tables.schedule.discomfort_rate_rc
    Tl = prm.temp_lower_T
    DT = env.min_downtime_DT

    T = np.full((P, N), init.temp_T)
    Tc = np.full((P, N), init.cold_temp_Tc)
    on = np.full((P, N), bool(init.heater_on))
    since = np.full((P, N), init.minutes_since_off)
    D_obs = np.full((P, N), init.demand_gpm)
    act = np.zeros((P, N), dtype=bool)
    rewards = np.empty((P, N, tau))
    for k in range(tau):
        minute = (init.minute_of_day + k) % MINUTES_PER_DAY
        if k % env.control_block_minutes == 0:
            x = features(T, Tc, tables.peak[k], D_obs, minute, normalizer)
            act = forward(weights, x) > 0.0
        d, e0, r = tables.decay[:, k], tables.eq0[:, k], tables.rp[:, k]
        want = act & (on | (since >= DT))
        T_on = T * d + (e0 + r * heat) * (1.0 - d)
        T_off = T * d + (e0 + r * 0.0) * (1.0 - d)
        on = want & ~(T_on > cap)
        T = np.where(on, T_on, T_off)
        since = np.where(on, 0, np.minimum(since + 1, DT))
        gap = Tl - T
        Tc = np.where(gap > 0.0, gap, 0.0)
        D_obs = np.broadcast_to(tables.D_gpm[:, k], (P, N))
        power = np.where(on, Pon, 0.0)
        rewards[:, :, k] = -(tables.rate[k] * power + rc * D_obs * Tc)
    out = np.empty((P, N))
    for p in range(P):
        for n in range(N):
            out[p, n] = math.fsum(rewards[p, n])
    return out


def weighted_fitness(returns: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Probability-weighted mean over the scenario axis, summed in scenario order."""
    returns = np.atleast_2d(returns)
    total = np.zeros(returns.shape[0])
    for n, p in enumerate(probs):
        total = total + p * returns[:, n]
    return total


def fitness(policy: PolicyParams, tables: EpisodeTables) -> float:
    f = weighted_fitness(batch_returns(policy.theta[None], policy.layers, policy.normalizer, tables),
                         tables.probs)
    return float(f[0])


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EsConfig:
    pairs: int = 32
    sigma: float = 0.05
    step_size: float = 0.02
    iterations: int = 300
    seed: int = 0
    hidden: int = 64
    workers: int = 1

    def __post_init__(self):
        if self.pairs < 1:
            raise ValueError("pairs must be >= 1")
        if not self.sigma > 0 or not self.step_size > 0:
            raise ValueError("sigma and step_size must be positive")
        if self.iterations < 0 or self.hidden < 1 or self.workers < 1:
            raise ValueError("iterations >= 0, hidden >= 1, workers >= 1 required")

    @property
    def layers(self) -> tuple[int, ...]:
        return (N_FEATURES, self.hidden, self.hidden, 1)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    mean: float  # population mean fitness
    best: float  # running best of the centre fitness
    centre: float


@dataclass
class TrainResult:
    policy: PolicyParams
    history: list[HistoryRow] = field(default_factory=list)

    @property
    def final_fitness(self) -> float:
        return self.history[-1].centre if self.history else math.nan


class FitnessError(RuntimeError):
    def __init__(self, iteration: int, detail: str):
        super().__init__(f"non-finite fitness at iteration {iteration}: {detail}")
        self.iteration = iteration


def centered_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks mapped onto [-0.5, 0.5]; ties share their average rank."""
    x = np.asarray(x, float)
    if len(x) < 2:
        return np.zeros(len(x))
    return (rankdata(x, method="average") - 1.0) / (len(x) - 1) - 0.5


def perturbation(seed: int, iteration: int, pair: int, size: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, pair])).standard_normal(size)


def es_step(theta: np.ndarray, eps: np.ndarray, f_plus: np.ndarray, f_minus: np.ndarray,
            sigma: float, step_size: float) -> np.ndarray:
    """One mirrored-sampling update; pairs are reduced in index order."""
    n = len(eps)
    ranks = centered_ranks(np.concatenate([f_plus, f_minus]))
    g = np.zeros_like(theta)
    for i in range(n):
        g = g + (ranks[i] - ranks[n + i]) * eps[i]
    return theta + step_size / (2 * n * sigma) * g


def _evaluate_chunk(args):
    thetas, layers, normalizer, tables = args
    return weighted_fitness(batch_returns(thetas, layers, normalizer, tables), tables.probs)


class _Evaluator:
    def __init__(self, layers, normalizer, tables, workers: int):
        self.layers, self.normalizer, self.tables = layers, normalizer, tables
        self.workers = workers
        self.pool = ProcessPoolExecutor(workers) if workers > 1 else None

    def __call__(self, thetas: np.ndarray) -> np.ndarray:
        if self.pool is None:
            return _evaluate_chunk((thetas, self.layers, self.normalizer, self.tables))
        chunks = np.array_split(np.arange(len(thetas)), self.workers)
        jobs = [(thetas[c], self.layers, self.normalizer, self.tables) for c in chunks if len(c)]
        return np.concatenate(list(self.pool.map(_evaluate_chunk, jobs)))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def es_train(config: EsConfig, tables: EpisodeTables, init: PolicyParams | None = None,
             objective: Callable[[np.ndarray], np.ndarray] | None = None,
             progress: Callable[[HistoryRow], None] | None = None) -> TrainResult:
    """Train from ``init`` (default: seeded random weights).

    ``objective`` replaces the simulator fitness with any function of a
    (P, n_params) stack returning P fitness values (for surrogate problems).
    The returned policy is the last iterate.
    """
    policy = init if init is not None else PolicyParams.init(config.seed, config.layers)
    theta = policy.theta.copy()
    size = len(theta)
    evaluator = None
    if objective is None:
        evaluator = _Evaluator(policy.layers, policy.normalizer, tables, config.workers)
        objective = evaluator
    history: list[HistoryRow] = []
    best = -math.inf
    try:
        for it in range(config.iterations + 1):
            if it < config.iterations:
                eps = np.stack([perturbation(config.seed, it, i, size) for i in range(config.pairs)])
                pop = np.concatenate([theta[None], theta + config.sigma * eps, theta - config.sigma * eps])
            else:
                pop = theta[None]
            f = np.asarray(objective(pop), float)
            if not np.all(np.isfinite(f)):
                raise FitnessError(it, f"{int((~np.isfinite(f)).sum())} of {len(f)} evaluations")
            centre = float(f[0])
            best = max(best, centre)
            row = HistoryRow(it, float(np.mean(f[1:])) if len(f) > 1 else centre, best, centre)
            history.append(row)
            if progress is not None:
                progress(row)
            if it < config.iterations:
                n = config.pairs
                theta = es_step(theta, eps, f[1:1 + n], f[1 + n:], config.sigma, config.step_size)
    finally:
        if evaluator is not None:
            evaluator.close()
    return TrainResult(policy.with_theta(theta), history)


def write_history(history: Sequence[HistoryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean", "best", "centre"])
        for r in history:
            w.writerow([r.iteration, repr(r.mean), repr(r.best), repr(r.centre)])


def read_history(path: str | Path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [HistoryRow(int(r["iteration"]), float(r["mean"]), float(r["best"]), float(r["centre"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# policy files: one JSON header line, then little-endian float64 payload

def save_policy(policy: PolicyParams, path: str | Path) -> None:
    payload = policy.theta.astype("<f8").tobytes()
    header = {"format": FORMAT, "version": 1, "layers": list(policy.layers), "activation": "tanh",
              "normalizer": {"scale": list(policy.normalizer.scale), "shift": list(policy.normalizer.shift)},
              "n_params": len(policy.theta),
              "dtype": "<f8", "sha256": hashlib.sha256(payload).hexdigest()}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_policy(path: str | Path) -> PolicyParams:
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing policy header")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: unreadable policy header") from exc
    if header.get("format") != FORMAT or header.get("dtype") != "<f8":
        raise ValueError(f"{path}: not an {FORMAT} file")
    layers = tuple(int(v) for v in header["layers"])
    expected = n_params(layers)
    if header.get("n_params") != expected or len(payload) != 8 * expected:
        raise ValueError(f"{path}: payload has {len(payload) // 8} values, architecture {layers} needs {expected}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ValueError(f"{path}: checksum mismatch")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    norm = header["normalizer"]
    return PolicyParams(theta, layers, Normalizer(tuple(float(v) for v in norm["scale"]),
                                                  tuple(float(v) for v in norm["shift"])))
