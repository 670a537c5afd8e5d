"""Sinusoid regression tasks ``y = amplitude * sin(frequency * x)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import rng as rngmod


@dataclass(frozen=True)
class EnvironmentConfig:
    amplitude_range: tuple[float, float] = (0.1, 5.0)
    frequency_range: tuple[float, float] = (0.0, math.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)
    m: int = 5
    n: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("amplitude_range", "frequency_range", "x_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must satisfy low < high, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.m < 0 or self.n < 0:
            raise ValueError("m and n must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SineTask:
    alpha: float
    beta: float

    def __call__(self, x):
        return evaluate_target(self, x)


@dataclass(frozen=True)
class Episode:
    task: SineTask
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    @property
    def m(self) -> int:
        return len(self.support_x)

    @property
    def n(self) -> int:
        return len(self.query_x)

    def to_json(self) -> dict:
        return {
            "alpha": self.task.alpha,
            "beta": self.task.beta,
            "support": [[float(x), float(y)] for x, y in zip(self.support_x, self.support_y)],
            "query": [[float(x), float(y)] for x, y in zip(self.query_x, self.query_y)],
        }

    @classmethod
    def from_json(cls, d: dict) -> Episode:
        sup = np.asarray(d["support"], dtype=np.float64).reshape(-1, 2)
        qry = np.asarray(d["query"], dtype=np.float64).reshape(-1, 2)
        return cls(
            SineTask(float(d["alpha"]), float(d["beta"])),
            sup[:, 0].copy(), sup[:, 1].copy(), qry[:, 0].copy(), qry[:, 1].copy(),
        )


def sample_task(env: EnvironmentConfig, rng: np.random.Generator) -> SineTask:
    alpha = rng.uniform(*env.amplitude_range)
    beta = rng.uniform(*env.frequency_range)
    return SineTask(float(alpha), float(beta))


def evaluate_target(task: SineTask, x):
    return task.alpha * np.sin(task.beta * np.asarray(x, dtype=np.float64))


def sample_episode(
    task: SineTask,
    m: int,
    n: int,
    env: EnvironmentConfig,
    rng: np.random.Generator,
    query_rng: np.random.Generator | None = None,
) -> Episode:
    """Draw ``m`` support and ``n`` query inputs uniformly from the x-range.

    With ``query_rng`` the query set comes from its own stream, so the support
    draw does not depend on ``n``.
    """
    if m < 0 or n < 0:
        raise ValueError(f"m and n must be non-negative, got m={m}, n={n}")
    if m + n < 1:
        raise ValueError("an episode needs at least one point")
    lo, hi = env.x_range
    xs = rng.uniform(lo, hi, size=m)
    xq = (query_rng or rng).uniform(lo, hi, size=n)
    return Episode(task, xs, evaluate_target(task, xs), xq, evaluate_target(task, xq))


def task_episode(
    env: EnvironmentConfig,
    purpose: int,
    index: int,
    m: int | None = None,
    n: int | None = None,
) -> Episode:
    """The ``index``-th episode of a task stream, reproducible from the seed alone."""
    m = env.m if m is None else m
    n = env.n if n is None else n
    seed = env.seed
    task = sample_task(env, rngmod.stream(seed, purpose, index, rngmod.TASK_PARAMS))
    return sample_episode(
        task, m, n, env,
        rngmod.stream(seed, purpose, index, rngmod.SUPPORT),
        rngmod.stream(seed, purpose, index, rngmod.QUERY),
    )


def episodes(
    env: EnvironmentConfig, purpose: int, count: int, start: int = 0
) -> Iterator[Episode]:
    for i in range(start, start + count):
        yield task_episode(env, purpose, i)
