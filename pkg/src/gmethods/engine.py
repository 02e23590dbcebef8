"""Monte Carlo driver: sample, classify zero events, estimate, persist.

Each iteration is seeded from ``(base_seed, scenario_label, iteration)``, so
the raw-results CSV is identical for any worker count. Records are written in
scenario-then-iteration order as they arrive from an ordered pool map.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import signal
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .dgm import Scenario, ZeroEventStatus, classify_zero_events, generate_sample
from .estimators import (CausalData, CausalEstimate, Method, Scale, Status, _failed, estimate_all)
from .matching import Estimand
from .rng import derive_seed

RAW_COLUMNS = ("scenario_label", "iteration", "method", "estimand", "scale", "point", "se", "ci_low",
               "ci_high", "status", "zero_event")
EXCLUDED = "excluded"
DEFAULT_TIME_LIMIT = 60.0


@dataclass(frozen=True)
class ExperimentPlan:
    scenarios: tuple
    nsim: int
    methods: tuple = tuple(Method)
    estimands: tuple = tuple(Estimand)
    scales: tuple = tuple(Scale)
    base_seed: int = 2024
    time_limit: Optional[float] = DEFAULT_TIME_LIMIT
    max_optimal_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "estimands", tuple(Estimand(e) for e in self.estimands))
        object.__setattr__(self, "scales", tuple(Scale(s) for s in self.scales))
        if int(self.nsim) < 1:
            raise ValueError("nsim must be at least 1")
        if not (self.scenarios and self.methods and self.estimands and self.scales):
            raise ValueError("scenarios, methods, estimands and scales must be non-empty")
        labels = [s.label for s in self.scenarios]
        if len(set(labels)) != len(labels):
            raise ValueError("scenario labels must be unique")

    def to_dict(self) -> dict:
        return {
            "scenarios": [s.to_dict() for s in self.scenarios],
            "nsim": int(self.nsim),
            "methods": [m.value for m in self.methods],
            "estimands": [e.value for e in self.estimands],
            "scales": [s.value for s in self.scales],
            "base_seed": int(self.base_seed),
            "time_limit": self.time_limit,
            "max_optimal_size": self.max_optimal_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        d["scenarios"] = tuple(Scenario.from_dict(s) for s in d["scenarios"])
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def n_cells(self) -> int:
        return len(self.methods) * len(self.estimands) * len(self.scales)


@dataclass
class IterationRecord:
    scenario_label: str
    iteration: int
    zero_event: ZeroEventStatus
    estimates: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def excluded(self) -> bool:
        return self.zero_event is not ZeroEventStatus.NONE


class IterationTimeout(Exception):
    pass


class _Alarm:
    """SIGALRM-based cap; a no-op off the main thread or without SIGALRM."""

    def __init__(self, seconds):
        self.seconds = seconds
        self.active = (seconds is not None and seconds > 0 and hasattr(signal, "setitimer")
                       and threading.current_thread() is threading.main_thread())

    def _fire(self, signum, frame):
        raise IterationTimeout()

    def __enter__(self):
        if self.active:
            self._old = signal.signal(signal.SIGALRM, self._fire)
            signal.setitimer(signal.ITIMER_REAL, self.seconds)
        return self

    def __exit__(self, *exc):
        if self.active:
            signal.setitimer(signal.ITIMER_REAL, 0)
            signal.signal(signal.SIGALRM, self._old)
        return False


def _estimate(data, plan):
    kw = dict(estimands=plan.estimands, scales=plan.scales, max_optimal_size=plan.max_optimal_size)
    try:
        return estimate_all(data, methods=plan.methods, **kw)
    except IterationTimeout:
        raise
    except Exception:
        # isolate the failing method so the others still report
        out = []
        for m in plan.methods:
            try:
                out.extend(estimate_all(data, methods=[m], **kw))
            except IterationTimeout:
                raise
            except Exception:
                for e in plan.estimands:
                    out.extend(_failed(m, e, plan.scales))
        return out


def run_iteration(plan: ExperimentPlan, scenario: Scenario, iteration: int) -> IterationRecord:
    t0 = time.perf_counter()
    sample = generate_sample(scenario, derive_seed(plan.base_seed, scenario.label, iteration))
    status = classify_zero_events(sample)
    estimates = []
    if status is ZeroEventStatus.NONE:
        data = CausalData.from_sample(sample)
        try:
            with _Alarm(plan.time_limit):
                estimates = _estimate(data, plan)
        except IterationTimeout:
            estimates = [est for m in plan.methods for e in plan.estimands for est in _failed(m, e, plan.scales)]
    return IterationRecord(scenario.label, iteration, status, estimates, time.perf_counter() - t0)


def _task(args):
    plan, scenario, iteration = args
    return run_iteration(plan, scenario, iteration)


def iter_records(plan: ExperimentPlan, workers: int = 1, chunksize: int = 8) -> Iterator[IterationRecord]:
    """Records in scenario-then-iteration order, whatever the worker count."""
    tasks = ((plan, s, i) for s in plan.scenarios for i in range(int(plan.nsim)))
    if workers <= 1:
        yield from map(_task, tasks)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_task, tasks, chunksize=chunksize)


def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def record_rows(plan: ExperimentPlan, rec: IterationRecord) -> list:
    """CSV rows for one record; excluded iterations get one placeholder row per cell."""
    if rec.excluded:
        return [(rec.scenario_label, rec.iteration, m.value, e.value, s.value, "nan", "nan", "nan", "nan",
                 EXCLUDED, rec.zero_event.value)
                for m in plan.methods for e in plan.estimands for s in plan.scales]
    order = {(m, e, s): k for k, (m, e, s) in enumerate(
        (m, e, s) for m in plan.methods for e in plan.estimands for s in plan.scales)}
    ests = sorted(rec.estimates, key=lambda c: order[(c.method, c.estimand, c.scale)])
    return [(rec.scenario_label, rec.iteration, c.method.value, c.estimand.value, c.scale.value, _fmt(c.point),
             _fmt(c.se), _fmt(c.ci_low), _fmt(c.ci_high), c.status.value, rec.zero_event.value) for c in ests]


def manifest(plan: ExperimentPlan, n_records: int) -> dict:
    return {
        "plan": plan.to_dict(),
        "base_seed": int(plan.base_seed),
        "n_records": n_records,
        "versions": {"gmethods": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }


def run_experiment(plan: ExperimentPlan, out_csv=None, workers: int = 1, manifest_path=None) -> dict:
    """Run the plan, streaming rows to ``out_csv`` if given.

    Returns counts: ``records``, ``rows`` and ``zero_event`` per status.
    """
    counts = {"records": 0, "rows": 0, "zero_event": {z.value: 0 for z in ZeroEventStatus}}
    fh = open(out_csv, "w", newline="") if out_csv is not None else None
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer:
            writer.writerow(RAW_COLUMNS)
        for rec in iter_records(plan, workers):
            rows = record_rows(plan, rec)
            counts["records"] += 1
            counts["rows"] += len(rows)
            counts["zero_event"][rec.zero_event.value] += 1
            if writer:
                writer.writerows(rows)
    finally:
        if fh:
            fh.close()
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(manifest(plan, counts["records"]), indent=2) + "\n")
    return counts


def records_frame(plan: ExperimentPlan, records: Iterable[IterationRecord]):
    import pandas as pd

    rows = [r for rec in records for r in record_rows(plan, rec)]
    df = pd.DataFrame(rows, columns=RAW_COLUMNS)
    for c in ("point", "se", "ci_low", "ci_high"):
        df[c] = df[c].astype(float)
    return df


def read_records(path):
    import pandas as pd

    return pd.read_csv(path, keep_default_na=False, na_values=["nan"])
