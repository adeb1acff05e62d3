"""
Hot-water demand traces: a small stochastic end-use generator, CSV I/O and
scenario-set construction (historical window, k-means representatives,
probability-weighted mean forecast).

The generator draws events per fixture from a time-inhomogeneous Poisson
process (hour-of-day weights) scaled by a household activity factor drawn
once per day, so that day-to-day totals are strongly over-dispersed the way
measured residential use is.
"""

from __future__ import annotations

import configparser
import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

MINUTES_PER_DAY = 1440
FIXTURE_ORDER = ("faucet", "shower", "bathtub", "clothes_washer", "dish_washer")


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class DemandTrace:
    values: np.ndarray  # gal/min, one entry per minute
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or len(v) == 0 or len(v) % MINUTES_PER_DAY:
            raise DemandError(f"trace length must be a positive multiple of {MINUTES_PER_DAY}, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DemandError("demand values must be finite and non-negative")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    @property
    def days(self) -> int:
        return len(self.values) // MINUTES_PER_DAY

    def daily_gallons(self) -> np.ndarray:
        return self.values.reshape(self.days, MINUTES_PER_DAY).sum(axis=1)


@dataclass(frozen=True)
class Fixture:
    name: str
    events_per_day: float
    duration_median_min: float
    duration_sigma: float  # lognormal shape
    intensity_gpm: float
    intensity_sd: float
    profile: tuple[float, ...]  # 24 hour-of-day weights

    def __post_init__(self):
        if self.events_per_day < 0:
            raise DemandError(f"{self.name}: negative event rate")
        if self.duration_median_min <= 0 or self.intensity_gpm <= 0 or self.duration_sigma < 0 or self.intensity_sd < 0:
            raise DemandError(f"{self.name}: distributions need positive support")
        p = np.asarray(self.profile, dtype=float)
        if p.shape != (24,) or np.any(p < 0) or p.sum() <= 0:
            raise DemandError(f"{self.name}: profile must be 24 non-negative weights")
        object.__setattr__(self, "profile", tuple(p / p.sum()))


@dataclass(frozen=True)
class FixtureModel:
    fixtures: tuple[Fixture, ...]
    # gamma shape for the per-day activity multiplier; inf disables it
    day_activity_shape: float = 2.5

    @classmethod
    def default(cls) -> "FixtureModel":
        text = resources.files("ewhbench").joinpath("data/default.ini").read_text()
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls.from_config(cp)

    @classmethod
    def from_config(cls, cp: configparser.ConfigParser) -> "FixtureModel":
        fixtures = []
        for sec in cp.sections():
            if not sec.startswith("fixture."):
                continue
            s = cp[sec]
            fixtures.append(Fixture(
                name=sec.split(".", 1)[1],
                events_per_day=s.getfloat("events_per_day"),
                duration_median_min=s.getfloat("duration_median_min"),
                duration_sigma=s.getfloat("duration_sigma"),
                intensity_gpm=s.getfloat("intensity_gpm"),
                intensity_sd=s.getfloat("intensity_sd"),
                profile=tuple(float(x) for x in s["profile"].split(",")),
            ))
        shape = cp.getfloat("demand", "day_activity_shape", fallback=2.5)
        return cls(tuple(fixtures), shape)

    def scaled(self, factor: float) -> "FixtureModel":
        return FixtureModel(tuple(Fixture(f.name, f.events_per_day * factor, f.duration_median_min,
                                          f.duration_sigma, f.intensity_gpm, f.intensity_sd, f.profile)
                                  for f in self.fixtures), self.day_activity_shape)


def generate_demand(fixtures: FixtureModel, days: int, seed: int) -> DemandTrace:
    if days < 1:
        raise DemandError("days must be >= 1")
    rng = np.random.default_rng(seed)
    n = days * MINUTES_PER_DAY
    out = np.zeros(n)
    shape = fixtures.day_activity_shape
    for d in range(days):
        activity = rng.gamma(shape, 1.0 / shape) if np.isfinite(shape) else 1.0
        for f in fixtures.fixtures:
            count = rng.poisson(f.events_per_day * activity)
            if count == 0:
                continue
            hours = rng.choice(24, size=count, p=np.asarray(f.profile))
            starts = d * MINUTES_PER_DAY + hours * 60 + rng.integers(0, 60, size=count)
            dur = np.maximum(1, np.rint(f.duration_median_min * rng.lognormal(0.0, f.duration_sigma, count))).astype(int)
            flow = np.maximum(0.1 * f.intensity_gpm, rng.normal(f.intensity_gpm, f.intensity_sd, count))
            for s, L, q in zip(starts, dur, flow):
                out[s:min(s + L, n)] += q
    return DemandTrace(out, label=f"seed{seed}")


def save_trace(trace: DemandTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["minute_index", "gpm"])
        for i, v in enumerate(trace.values):
            w.writerow([i, repr(float(v))])


def load_trace(path: str | Path, label: str | None = None) -> DemandTrace:
    path = Path(path)
    values = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and row[0].strip() == "minute_index":
                continue
            if len(row) != 2:
                raise DemandError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                idx, v = int(row[0]), float(row[1])
            except ValueError as exc:
                raise DemandError(f"{path}:{lineno}: malformed row {row}") from exc
            if idx != len(values):
                raise DemandError(f"{path}:{lineno}: minute index {idx} out of sequence")
            if v < 0:
                raise DemandError(f"{path}:{lineno}: negative demand {v}")
            values.append(v)
    if not values:
        raise DemandError(f"{path}: empty trace")
    return DemandTrace(np.array(values), label=label if label is not None else path.stem)


def split_days(trace: DemandTrace) -> list[DemandTrace]:
    v = trace.values
    return [DemandTrace(v[i * MINUTES_PER_DAY:(i + 1) * MINUTES_PER_DAY].copy(), f"{trace.label}:d{i}")
            for i in range(trace.days)]


def concat(traces: Sequence[DemandTrace], label: str = "") -> DemandTrace:
    return DemandTrace(np.concatenate([t.values for t in traces]), label)


@dataclass(frozen=True)
class ScenarioSet:
    traces: tuple[DemandTrace, ...]
    probs: np.ndarray = field(default=None)

    def __post_init__(self):
        traces = tuple(self.traces)
        if not traces:
            raise DemandError("scenario set needs at least one trace")
        if any(t.days != 1 for t in traces):
            raise DemandError("scenarios must be single days")
        p = np.full(len(traces), 1.0 / len(traces)) if self.probs is None else np.asarray(self.probs, float)
        if p.shape != (len(traces),) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise DemandError("scenario probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "traces", traces)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return len(self.traces)

    def matrix(self) -> np.ndarray:
        return np.stack([t.values for t in self.traces])

    def to_json(self, path: str | Path) -> None:
        """Write ``path`` plus one CSV per trace in the same directory."""
        path = Path(path)
        refs = []
        for i, t in enumerate(self.traces):
            ref = f"{path.stem}_s{i}.csv"
            save_trace(t, path.parent / ref)
            refs.append({"file": ref, "label": t.label})
        path.write_text(json.dumps({"probs": [float(p) for p in self.probs], "traces": refs}, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioSet":
        path = Path(path)
        doc = json.loads(path.read_text())
        traces = [load_trace(path.parent / r["file"], r.get("label")) for r in doc["traces"]]
        return cls(tuple(traces), np.array(doc["probs"]))


def historical_scenarios(days: Sequence[DemandTrace], n: int) -> ScenarioSet:
    if not 1 <= n <= len(days):
        raise DemandError(f"need 1 <= n <= {len(days)}, got {n}")
    return ScenarioSet(tuple(days[-n:]))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # exact enough for assignment; recomputed the same way everywhere for determinism
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(X)))]
    d2 = _sq_dists(X, X[centers]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center
            cand = [i for i in range(len(X)) if i not in centers]
            centers.append(cand[0])
        else:
            centers.append(int(rng.choice(len(X), p=d2 / total)))
        d2 = np.minimum(d2, _sq_dists(X, X[centers[-1:]])[:, 0])
    return X[centers].copy()


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    wcss_history: list[float]
    representatives: list[int]  # day indices, one per cluster
    iterations: int


def kmeans(X: np.ndarray, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on the rows of ``X``.

    Ties go to the lowest index; an emptied cluster is re-seeded with the
    point farthest from its current center.
    """
    X = np.asarray(X, dtype=float)
    m = len(X)
    if not 1 <= k <= m:
        raise DemandError(f"k={k} must lie in [1, {m}]")
    rng = np.random.default_rng(seed)
    C = _plusplus(X, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, C)
        new = D.argmin(axis=1)  # argmin returns the first (lowest) index on ties
        for j in range(k):
            if not np.any(new == j):
                own = D[np.arange(m), new]
                far = int(np.argmax(own))
                new[far] = j
        history.append(float(D[np.arange(m), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
    D = _sq_dists(X, C)
    reps = []
    for j in range(k):
        members = np.flatnonzero(labels == j)
        reps.append(int(members[np.argmin(D[members, j])]))
    return KMeansResult(labels, C, history, reps, it)


def kmeans_scenarios(days: Sequence[DemandTrace], k: int, seed: int) -> ScenarioSet:
    if k > len(days):
        raise DemandError(f"k={k} exceeds the {len(days)} available days")
    res = kmeans(np.stack([d.values for d in days]), k, seed)
    return ScenarioSet(tuple(days[i] for i in sorted(res.representatives)))


def mean_forecast(scenarios: ScenarioSet) -> DemandTrace:
    acc = np.zeros(MINUTES_PER_DAY)
    for p, t in zip(scenarios.probs, scenarios.traces):
        acc += p * t.values
    return DemandTrace(np.maximum(acc, 0.0), label="mean-forecast")
