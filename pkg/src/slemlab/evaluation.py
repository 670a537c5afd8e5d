"""Meta-test transfer error and the strategy x T x (m, n) x seed grid."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod
from .bilevel import TrainConfig, meta_train, meta_test_adapt_batch
from .model import MetaLearner
from .regularizers import GRID_STRATEGIES, RegularizerSpec, head_activation, norm_weight, strategy
from .tasks import EnvironmentConfig, task_episode

DEFAULT_T_GRID = (100, 1000, 3333, 10000)
DEFAULT_MN_GRID = ((1, 5), (5, 1), (5, 5))
DEFAULT_SEEDS = (0, 1, 2)
N_TEST_TASKS = 600


@dataclass
class TransferResult:
    mean: float
    losses: np.ndarray
    w_norms: np.ndarray
    max_head_norm: float
    steps: np.ndarray

    @property
    def mean_w_norm(self) -> float:
        return float(np.mean(self.w_norms))


def _evaluate_range(h: MetaLearner, env: EnvironmentConfig, lam: float, lr: float,
                    start: int, stop: int, m: int, n: int):
    eps = [task_episode(env, rngmod.TEST_TASKS, i, m, n) for i in range(start, stop)]
    ys = np.stack([e.support_y for e in eps])
    yq = np.stack([e.query_y for e in eps])
    # features task by task: a stacked matmul can round differently with batch size
    zs = np.stack([h.features(e.support_x) for e in eps])
    zq = np.stack([h.features(e.query_x) for e in eps])
    res = meta_test_adapt_batch(zs, ys, lam, lr)
    r = np.einsum("bnd,bd->bn", zq, res.w) - yq
    losses = np.mean(r * r, axis=1)
    head = max(np.max(np.linalg.norm(zs, axis=2), initial=0.0),
               np.max(np.linalg.norm(zq, axis=2), initial=0.0))
    return losses, np.linalg.norm(res.w, axis=1), float(head), res.steps


def _evaluate_chunk(args):
    return _evaluate_range(*args)


def transfer_error(
    h: MetaLearner,
    env: EnvironmentConfig,
    n_test_tasks: int = N_TEST_TASKS,
    reg: RegularizerSpec | None = None,
    m: int | None = None,
    n: int | None = None,
    lr: float = 0.01,
    workers: int = 1,
    chunk: int | None = None,
) -> TransferResult:
    """Mean query loss of learners adapted on fresh tasks with ``h`` frozen.

    Test task ``i`` is drawn from its own stream, so the result does not depend
    on ``workers`` or ``chunk``; per-task losses are reduced in index order.
    """
    if n_test_tasks < 1:
        raise ValueError("n_test_tasks must be >= 1")
    reg = reg or RegularizerSpec()
    if head_activation(reg) != h.head:
        raise ValueError(
            f"regularizer expects a {head_activation(reg)} head but the meta-learner has {h.head}"
        )
    m = env.m if m is None else m
    n = env.n if n is None else n
    if m < 1 or n < 1:
        raise ValueError("meta-test needs m >= 1 and n >= 1")
    lam = norm_weight(reg, "test")
    chunk = chunk or n_test_tasks
    jobs = [(h, env, lam, lr, s, min(s + chunk, n_test_tasks), m, n)
            for s in range(0, n_test_tasks, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_evaluate_chunk, jobs))
    else:
        parts = [_evaluate_chunk(j) for j in jobs]
    losses = np.concatenate([p[0] for p in parts])
    return TransferResult(
        float(np.mean(losses)),
        losses,
        np.concatenate([p[1] for p in parts]),
        max(p[2] for p in parts),
        np.concatenate([p[3] for p in parts]),
    )


@dataclass(frozen=True)
class Cell:
    strategy: str
    T: int
    m: int
    n: int
    seed: int

    @property
    def key(self) -> str:
        return f"{self.strategy.replace('+', '-')}_T{self.T}_m{self.m}_n{self.n}_s{self.seed}"


def grid_cells(
    strategies: Sequence[str] = GRID_STRATEGIES,
    t_grid: Sequence[int] = DEFAULT_T_GRID,
    mn_grid: Sequence[tuple[int, int]] = DEFAULT_MN_GRID,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> list[Cell]:
    return [Cell(s, t, m, n, seed)
            for s in strategies for t in t_grid for (m, n) in mn_grid for seed in seeds]


@dataclass
class CellResult:
    strategy: str
    T: int
    m: int
    n: int
    seed: int
    transfer_error: float
    mean_w_norm: float
    max_head_norm: float
    sigma_min_buffer: float
    final_train_query_loss: float

    def to_json(self) -> dict:
        return asdict(self)


def run_cell(cell: Cell, base: TrainConfig | None = None,
             n_test_tasks: int = N_TEST_TASKS, test_m: int | None = None,
             test_n: int | None = None) -> CellResult:
    """Meta-train one configuration and measure its transfer error."""
    base = base or TrainConfig()
    reg = strategy(cell.strategy)
    cfg = replace(base, T=cell.T, m=cell.m, n=cell.n, seed=cell.seed, regularizer=reg,
                  sigma_log_every=0)
    trained = meta_train(cfg)
    res = transfer_error(trained.h, cfg.env(), n_test_tasks, reg, test_m, test_n, cfg.inner_lr)
    tail = trained.log[-min(100, len(trained.log)):]
    return CellResult(
        cell.strategy, cell.T, cell.m, cell.n, cell.seed,
        res.mean, res.mean_w_norm, res.max_head_norm,
        trained.buffer.sigma_min(),
        float(np.mean([r.query_loss for r in tail])),
    )


@dataclass
class TransferReport:
    strategy: str
    T: int
    m: int
    n: int
    seeds: list[int]
    per_seed: list[float]
    mean: float
    std: float
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(results: Iterable[CellResult]) -> list[TransferReport]:
    """Group cell results by (strategy, T, m, n); order follows first appearance."""
    groups: dict[tuple, list[CellResult]] = {}
    for r in results:
        groups.setdefault((r.strategy, r.T, r.m, r.n), []).append(r)
    reports = []
    for (s, t, m, n), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.seed)
        errs = [r.transfer_error for r in rs]
        reports.append(TransferReport(
            s, t, m, n, [r.seed for r in rs], errs, float(np.mean(errs)), _std(errs),
            {
                "mean_w_norm": float(np.mean([r.mean_w_norm for r in rs])),
                "max_head_norm": float(max(r.max_head_norm for r in rs)),
                "sigma_min_buffer": float(np.mean([r.sigma_min_buffer for r in rs])),
            },
        ))
    return reports


def _run_cell_job(args):
    cell, base, n_test_tasks = args
    return run_cell(cell, base, n_test_tasks)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_grid(
    cells: Sequence[Cell],
    base: TrainConfig | None = None,
    n_test_tasks: int = N_TEST_TASKS,
    out_dir: str | Path | None = None,
    workers: int = 1,
    stamp: dict | None = None,
) -> tuple[list[CellResult], list[TransferReport]]:
    """Run every cell; with ``out_dir``, completed cell files are reused, not recomputed."""
    base = base or TrainConfig()
    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)
    done: dict[Cell, CellResult] = {}
    todo = []
    for c in cells:
        path = cell_dir / f"{c.key}.json" if cell_dir else None
        if path is not None and path.exists():
            d = json.loads(path.read_text())
            _check_stamp(path, d.get("stamp", {}), stamp or {})
            done[c] = CellResult(**d["result"])
        else:
            todo.append(c)
    jobs = [(c, base, n_test_tasks) for c in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = pool.map(_run_cell_job, jobs)
            for c, r in zip(todo, results):
                done[c] = r
                _persist_cell(cell_dir, c, r, stamp)
    else:
        for c, job in zip(todo, jobs):
            r = _run_cell_job(job)
            done[c] = r
            _persist_cell(cell_dir, c, r, stamp)
    ordered = [done[c] for c in cells]
    reports = aggregate(ordered)
    if out_dir is not None:
        write_results(Path(out_dir), ordered, reports, stamp)
    return ordered, reports


def _check_stamp(path: Path, stored: dict, current: dict) -> None:
    key = "cell_config_hash"
    if key in current and stored.get(key) != current[key]:
        raise ValueError(
            f"{path} was produced with a different training/eval configuration "
            f"({stored.get(key)} != {current[key]}); use a fresh output directory"
        )


def _persist_cell(cell_dir, cell: Cell, result: CellResult, stamp: dict | None) -> None:
    if cell_dir is None:
        return
    payload = {"stamp": stamp or {}, "cell": asdict(cell), "result": result.to_json()}
    _write_atomic(cell_dir / f"{cell.key}.json", json.dumps(payload, indent=2, sort_keys=True))


def results_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "T", "m", "n", "seed", "transfer_error"])
    for r in results:
        w.writerow([r.strategy, r.T, r.m, r.n, r.seed, repr(r.transfer_error)])
    return buf.getvalue()


def figure_csv(reports: Sequence[TransferReport], m: int, n: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "T", "mean", "std"])
    for r in reports:
        if (r.m, r.n) == (m, n):
            w.writerow([r.strategy, r.T, repr(r.mean), repr(r.std)])
    return buf.getvalue()


def write_results(out: Path, results: Sequence[CellResult],
                  reports: Sequence[TransferReport], stamp: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    header = "".join(f"# {k}: {v}\n" for k, v in sorted((stamp or {}).items()))
    _write_atomic(out / "results.csv", header + results_csv(results))
    summary = {"stamp": stamp or {}, "reports": [r.to_json() for r in reports]}
    _write_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    for m, n in sorted({(r.m, r.n) for r in reports}):
        _write_atomic(out / f"curve_m{m}_n{n}.csv", header + figure_csv(reports, m, n))
