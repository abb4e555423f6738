"""Seed-deterministic Monte Carlo batches over a scenario.

Trial ``i`` always uses ``derive_seed(base_seed, i)`` and trials are grouped
into fixed-size chunks (``mc.chunk``) that are simulated as one lock-step
batch each. Chunks go to worker processes, but the chunk layout never depends
on the worker count, so results are bitwise identical for any ``workers``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .barrier import diffusion_lie
from .sde import IntegrationFault, derive_seed, simulate_lanes

log = logging.getLogger(__name__)

WORKERS_ENV = "RISKGATE_WORKERS"


class TrialFault(RuntimeError):
    """A trial's integration failed; carries what is needed to replay it."""

    def __init__(self, message: str, trial: int, seed: int):
        super().__init__(message, trial, seed)
        self.message = message
        self.trial = trial
        self.seed = seed

    def __str__(self):
        return self.message


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, workers)


def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("need at least one trial")
    z = NormalDist().inv_cdf(0.5 + confidence / 2.0)
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class BatchResult:
    scenario: str
    N: int
    base_seed: int
    barrier_names: list[str]
    seeds: np.ndarray  # (N,) uint64
    stopped: np.ndarray  # (N,) bool
    tau: np.ndarray  # (N,) exit time, nan when safe
    exit_barrier: np.ndarray  # (N,) index into barrier_names, -1 when safe
    max_barrier: np.ndarray  # (N, n_barriers)
    infeasible_steps: np.ndarray  # (N,)
    tags: list[str] | None = None
    theory: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def unsafe(self) -> int:
        return int(self.stopped.sum())

    @property
    def rho(self) -> float:
        return self.unsafe / self.N

    @property
    def interval(self) -> tuple[float, float]:
        return wilson_interval(self.unsafe, self.N)

    @property
    def infeasible(self) -> int:
        return int(self.infeasible_steps.sum())

    def outcome_counts(self) -> dict[str, int]:
        if self.tags is None:
            return {"safe": self.N - self.unsafe, "unsafe": self.unsafe}
        counts: dict[str, int] = {}
        for tag in self.tags:
            counts[tag] = counts.get(tag, 0) + 1
        return dict(sorted(counts.items()))

    def trials_digest(self) -> str:
        """SHA-256 over every per-trial array, for bitwise replay checks."""
        h = hashlib.sha256()
        for arr in (self.seeds.astype("<u8"), self.stopped.astype("u1"), self.tau.astype("<f8"),
                    self.exit_barrier.astype("<i8"), self.max_barrier.astype("<f8"),
                    self.infeasible_steps.astype("<i8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        if self.tags is not None:
            h.update("\n".join(self.tags).encode())
        return h.hexdigest()

    def max_barrier_summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for j, name in enumerate(self.barrier_names):
            col = self.max_barrier[:, j]
            out[name] = {"median": float(np.median(col)), "p95": float(np.percentile(col, 95)),
                         "max": float(col.max())}
        return out

    def to_dict(self) -> dict:
        lo, hi = self.interval
        return {
            "scenario": self.scenario,
            "N": self.N,
            "base_seed": self.base_seed,
            "unsafe": self.unsafe,
            "rho": self.rho,
            "wilson95": [lo, hi],
            "infeasible_steps": self.infeasible,
            "outcomes": self.outcome_counts(),
            "exits_by_barrier": {name: int((self.exit_barrier == j).sum())
                                 for j, name in enumerate(self.barrier_names)},
            "max_barrier": self.max_barrier_summary(),
            "theory": self.theory,
            "trials_sha256": self.trials_digest(),
            "config": self.config,
        }

    def to_json(self) -> str:
        """Deterministic serialization: no timestamps or worker counts."""
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def maxb_rows(self):
        for i in range(self.N):
            for j, name in enumerate(self.barrier_names):
                yield (i, int(self.seeds[i]), name, repr(float(self.max_barrier[i, j])),
                       int(self.stopped[i]), "" if np.isnan(self.tau[i]) else repr(float(self.tau[i])))

    def maxb_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "seed", "barrier", "maxB", "stopped", "tau"])
        w.writerows(self.maxb_rows())
        return buf.getvalue()

    def histogram(self, barrier: str | int = 0, bins: int = 50, range_=(0.0, 1.0)):
        """Histogram counts of per-trial max B for one barrier."""
        if self.N == 0:
            raise ValueError("no trials to histogram")
        j = self.barrier_names.index(barrier) if isinstance(barrier, str) else int(barrier)
        return np.histogram(np.clip(self.max_barrier[:, j], *range_), bins=bins, range=range_)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ----------------------------------------------------------------------------
# chunk execution
# ----------------------------------------------------------------------------


def _rebuild(kind: str, config: dict):
    from .scenarios import KINDS

    # build-time checks already ran in the parent process
    return KINDS[kind](config, verify=False)


def _chunks(N: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, N)) for a in range(0, N, size)]


def _run_chunk(kind: str, config: dict, start: int, seeds: list[int], eta_levels=None):
    scenario = _rebuild(kind, config)
    setup = scenario.setup(seeds)
    observers = []
    eta = None
    if eta_levels is not None:
        eta = {name: np.full(len(levels), -np.inf) for name, levels in eta_levels.items()}
        monitored = [b for b in setup.monitored if b.name in eta_levels]

        def watch(k, t, X, active):
            s = setup.model.diffusion(X)
            for b in monitored:
                bv = b.value(X)
                norm = np.linalg.norm(diffusion_lie(b, X, s), axis=1)
                for i, mu in enumerate(eta_levels[b.name]):
                    inside = active & (bv < mu)
                    if inside.any():
                        eta[b.name][i] = max(eta[b.name][i], float(norm[inside].max()))

        observers.append(watch)
    try:
        out = simulate_lanes(setup.model, setup.controller, setup.monitored, setup.x0, scenario.T,
                             scenario.dt, seeds, observers=observers, exit_test=scenario.exit_test)
    except IntegrationFault as exc:
        lane = exc.lane if exc.lane is not None else 0
        raise TrialFault(f"integration fault in trial {start + lane} (seed {seeds[lane]}): {exc}",
                         start + lane, seeds[lane]) from exc
    if eta is not None:
        # the final grid state is never passed to observers; include it
        X = out.final_state
        s = setup.model.diffusion(X)
        for b in monitored:
            bv = b.value(X)
            norm = np.linalg.norm(diffusion_lie(b, X, s), axis=1)
            for i, mu in enumerate(eta_levels[b.name]):
                inside = (~out.stopped) & (bv < mu)
                if inside.any():
                    eta[b.name][i] = max(eta[b.name][i], float(norm[inside].max()))
    tags = scenario.classify(out, setup)
    return out, tags, eta


def _map_chunks(scenario, N: int, base_seed: int, workers: int, eta_levels=None):
    seeds = [derive_seed(base_seed, i) for i in range(N)]
    jobs = [(scenario.kind, scenario.config, a, seeds[a:b], eta_levels) for a, b in _chunks(N, scenario.chunk)]
    if workers <= 1 or len(jobs) == 1:
        return seeds, [_run_chunk(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        # map preserves submission order, so the reduction is ordered by trial index
        return seeds, list(pool.map(_run_chunk, *zip(*jobs)))


def run_batch(scenario, N: int | None = None, base_seed: int | None = None,
              workers: int | None = None) -> BatchResult:
    """Run ``N`` trials of ``scenario`` (defaults from its ``mc`` section)."""
    N = scenario.N if N is None else int(N)
    base_seed = scenario.base_seed if base_seed is None else int(base_seed)
    workers = default_workers() if workers is None else int(workers)
    if N < 1:
        raise ValueError("need N >= 1")
    seeds, parts = _map_chunks(scenario, N, base_seed, workers)
    outs = [p[0] for p in parts]
    tags = None
    if parts[0][1] is not None:
        tags = [t for p in parts for t in p[1]]
    names = list(scenario.barrier_names)
    return BatchResult(
        scenario=scenario.name,
        N=N,
        base_seed=base_seed,
        barrier_names=names,
        seeds=np.asarray(seeds, dtype=np.uint64),
        stopped=np.concatenate([o.stopped for o in outs]),
        tau=np.concatenate([o.tau for o in outs]),
        exit_barrier=np.concatenate([o.exit_barrier for o in outs]),
        max_barrier=np.vstack([o.max_barrier for o in outs]),
        infeasible_steps=np.concatenate([o.infeasible_steps for o in outs]),
        tags=tags,
        theory=scenario.theory(),
        config=scenario.config,
    )


@dataclass
class EtaEstimate:
    """Per-barrier, per-level maximum of ``|L_sigma B|`` over visited states
    inside each sub-level set; ``None`` where a level was never visited."""

    N: int
    base_seed: int
    levels: dict[str, tuple[float, ...]]
    eta: dict[str, list[float | None]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["barrier", "level", "mu", "eta"])
        for name, levels in self.levels.items():
            for i, mu in enumerate(levels):
                val = self.eta[name][i]
                w.writerow([name, i + 1, repr(mu), "" if val is None else repr(val)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"N": self.N, "base_seed": self.base_seed,
                "levels": {k: list(v) for k, v in self.levels.items()}, "eta": self.eta}


def estimate_eta(scenario, N: int | None = None, levels: dict | Sequence[float] | None = None,
                 base_seed: int | None = None, workers: int | None = None) -> EtaEstimate:
    """Empirical ``eta_i = max |L_sigma B(x)|`` over states visited with
    ``B(x) < mu_i``, across all trials and all grid times."""
    N = scenario.N if N is None else int(N)
    base_seed = scenario.base_seed if base_seed is None else int(base_seed)
    workers = default_workers() if workers is None else int(workers)
    if N < 1:
        raise ValueError("need N >= 1")
    if not scenario.barrier_names:
        raise ValueError("scenario has no barriers")
    if levels is None:
        levels = scenario.eta_levels() or {name: (1.0,) for name in scenario.barrier_names}
    elif not isinstance(levels, dict):
        levels = {name: tuple(levels) for name in scenario.barrier_names}
    levels = {k: tuple(float(m) for m in v) for k, v in levels.items()}
    _, parts = _map_chunks(scenario, N, base_seed, workers, eta_levels=levels)
    eta: dict[str, list[float | None]] = {}
    for name, mus in levels.items():
        best = np.max(np.vstack([p[2][name] for p in parts]), axis=0)
        vals = []
        for i, v in enumerate(best):
            if np.isfinite(v):
                vals.append(float(v))
            else:
                warnings.warn(f"{name}: level {i + 1} (mu = {mus[i]}) was never visited; eta absent",
                              stacklevel=2)
                vals.append(None)
        eta[name] = vals
    return EtaEstimate(N, base_seed, levels, eta)


# ----------------------------------------------------------------------------
# reporting
# ----------------------------------------------------------------------------


def write_results(result: BatchResult, root: str | Path = "results", eta: EtaEstimate | None = None,
                  stamp: str | None = None) -> Path:
    """Write ``<root>/<scenario>/<stamp>/{batch.json, maxB.csv[, eta.csv]}``."""
    stamp = stamp or datetime.now().strftime("%Y%m%dT%H%M%S")
    out = Path(root) / result.scenario / stamp
    out.mkdir(parents=True, exist_ok=True)
    (out / "batch.json").write_text(result.to_json() + "\n")
    (out / "maxB.csv").write_text(result.maxb_csv())
    if eta is not None:
        (out / "eta.csv").write_text(eta.to_csv())
    return out


REPORT_COLUMNS = ("scenario", "N", "predicted_rho", "measured_rho", "wilson_lo", "wilson_hi", "unsafe",
                  "gamma", "eta", "infeasible_steps", "outcomes")


def summarize(results: Sequence[BatchResult]) -> dict:
    """Theory-vs-measurement table as ``{"rows": [...], "csv": str}``."""
    if not results:
        raise ValueError("need at least one result")
    rows = []
    for r in results:
        lo, hi = r.interval
        th = r.theory
        gamma = th.get("gamma")
        rows.append({
            "scenario": r.scenario,
            "N": r.N,
            "predicted_rho": th.get("predicted_rho"),
            "measured_rho": r.rho,
            "wilson_lo": lo,
            "wilson_hi": hi,
            "unsafe": r.unsafe,
            "gamma": gamma if not isinstance(gamma, dict) else None,
            "eta": th.get("eta"),
            "infeasible_steps": r.infeasible,
            "outcomes": {k: v / r.N for k, v in r.outcome_counts().items()},
        })
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([json.dumps(row[c], sort_keys=True) if isinstance(row[c], dict) else row[c]
                    for c in REPORT_COLUMNS])
    return {"rows": _jsonable(rows), "csv": buf.getvalue()}


def render_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Plain-text table for ``--pretty`` output."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        if isinstance(v, dict):
            return ", ".join(f"{k}={fmt(x)}" for k, x in v.items())
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
