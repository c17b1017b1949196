"""Makespan-minimizing schedules for flexible job shop instances.

Three routes are provided:

* ``exact``: depth-first branch and bound that enumerates semi-active
  schedules in nondecreasing start-time order, pruning with a job-chain and a
  machine-load bound.
* ``heuristic``: earliest-completion-time list scheduling, then first-improvement
  local search over (reassign one operation, swap adjacent operations) with
  seeded restarts.
* ``brute_force_oracle``: memoized exhaustive enumeration of every append order
  and machine choice, for tiny instances only.  It shares no pruning logic
  with the exact search and is meant for cross-checking it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from .model import Assignment, ModelError, Optimality, Schedule, WorkloadInstance, validate_instance

ORACLE_MAX_OPS = 9


class SolverStatus(str, Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"
    INFEASIBLE_BUDGET = "infeasible_budget"


@dataclass(frozen=True)
class SolverConfig:
    time_limit_ms: int = 10_000
    mode: str = "auto"  # exact | heuristic | auto
    seed: int = 0
    exact_max_ops: int = 12
    restarts: int = 8
    warm_start: bool = True

    def __post_init__(self):
        if self.time_limit_ms <= 0:
            raise ValueError("time_limit_ms must be positive")
        if self.mode not in ("exact", "heuristic", "auto"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


@dataclass(frozen=True)
class SolverResult:
    schedule: Schedule | None
    status: SolverStatus
    explored_nodes: int
    lower_bound: int

    @property
    def makespan(self) -> int | None:
        return None if self.schedule is None else self.schedule.makespan


class _Dense:
    """Integer view of an instance with jobs and machines in lexicographic order."""

    def __init__(self, instance: WorkloadInstance):
        self.jobs = sorted(instance.job_ids)
        self.machines = sorted(instance.machine_ids)
        self.k = instance.num_stages
        self.dur = [[[instance.duration(j, q + 1, m) for m in self.machines] for q in range(self.k)]
                    for j in self.jobs]
        self.n = len(self.jobs)
        self.m = len(self.machines)
        # remaining optimistic work of job j from stage q (0-based) onwards
        self.min_rest = [[sum(min(self.dur[a][r]) for r in range(q, self.k)) for q in range(self.k + 1)]
                         for a in range(self.n)]

    @property
    def num_ops(self) -> int:
        return self.n * self.k

    def to_schedule(self, placed, optimality, lower_bound) -> Schedule:
        """``placed`` maps (job idx, stage idx) -> (machine idx, start)."""
        per_machine: dict[str, list[Assignment]] = {m: [] for m in self.machines}
        for (a, q), (b, start) in placed.items():
            per_machine[self.machines[b]].append(
                Assignment(start, self.jobs[a], q + 1, self.dur[a][q][b]))
        return Schedule.build(per_machine, optimality, lower_bound)


def lower_bound(instance: WorkloadInstance) -> int:
    """max(longest chain under per-stage minima, ceil(total optimistic work / M))."""
    if not instance.jobs:
        return 0
    d = _Dense(instance)
    chain = max(d.min_rest[a][0] for a in range(d.n))
    total = sum(d.min_rest[a][0] for a in range(d.n))
    return max(chain, -(-total // d.m))


# --------------------------------------------------------------------------
# heuristic

def _decode(d: _Dense, order: list[int], assign: list[list[int]]):
    """Semi-active decode of a job-index sequence; returns (makespan, placed)."""
    nxt = [0] * d.n
    jr = [0] * d.n
    mr = [0] * d.m
    placed = {}
    for a in order:
        q = nxt[a]
        b = assign[a][q]
        start = jr[a] if jr[a] > mr[b] else mr[b]
        end = start + d.dur[a][q][b]
        jr[a] = mr[b] = end
        nxt[a] = q + 1
        placed[(a, q)] = (b, start)
    return max(mr, default=0), placed


def _span(d: _Dense, order: list[int], assign: list[list[int]]) -> int:
    nxt = [0] * d.n
    jr = [0] * d.n
    mr = [0] * d.m
    for a in order:
        q = nxt[a]
        b = assign[a][q]
        end = (jr[a] if jr[a] > mr[b] else mr[b]) + d.dur[a][q][b]
        jr[a] = mr[b] = end
        nxt[a] = q + 1
    return max(mr, default=0)


def _dispatch(d: _Dense) -> tuple[list[int], list[list[int]]]:
    """Earliest-completion-time list scheduling; ties by (job id, machine id)."""
    nxt = [0] * d.n
    jr = [0] * d.n
    mr = [0] * d.m
    order: list[int] = []
    assign = [[0] * d.k for _ in range(d.n)]
    for _ in range(d.num_ops):
        best = None
        for a in range(d.n):
            q = nxt[a]
            if q == d.k:
                continue
            for b in range(d.m):
                end = max(jr[a], mr[b]) + d.dur[a][q][b]
                if best is None or end < best[0]:
                    best = (end, a, b)
        end, a, b = best
        q = nxt[a]
        assign[a][q] = b
        order.append(a)
        jr[a] = mr[b] = end
        nxt[a] = q + 1
    return order, assign


def _local_search(d: _Dense, order, assign, span, deadline) -> tuple[list[int], list[list[int]], int]:
    order = list(order)
    assign = [list(row) for row in assign]
    improved = True
    while improved and time.perf_counter() < deadline:
        improved = False
        # reassign one operation
        stage_of = [0] * d.n
        for a in order:
            q = stage_of[a]
            stage_of[a] += 1
            cur = assign[a][q]
            for b in range(d.m):
                if b == cur:
                    continue
                assign[a][q] = b
                cand = _span(d, order, assign)
                if cand < span:
                    span, improved = cand, True
                    break
                assign[a][q] = cur
            if improved:
                break
        if improved:
            continue
        # swap adjacent operations of different jobs
        for i in range(len(order) - 1):
            if order[i] == order[i + 1]:
                continue
            order[i], order[i + 1] = order[i + 1], order[i]
            cand = _span(d, order, assign)
            if cand < span:
                span, improved = cand, True
                break
            order[i], order[i + 1] = order[i + 1], order[i]
    return order, assign, span


def _perturb(d: _Dense, order, assign, rng: np.random.Generator):
    order = list(order)
    assign = [list(row) for row in assign]
    moves = max(1, d.num_ops // 5)
    for _ in range(moves):
        a = int(rng.integers(d.n))
        q = int(rng.integers(d.k))
        assign[a][q] = int(rng.integers(d.m))
        if len(order) > 1:
            i = int(rng.integers(len(order) - 1))
            if order[i] != order[i + 1]:
                order[i], order[i + 1] = order[i + 1], order[i]
    return order, assign


def _heuristic(d: _Dense, config: SolverConfig, deadline: float):
    order, assign = _dispatch(d)
    span = _span(d, order, assign)
    order, assign, span = _local_search(d, order, assign, span, deadline)
    rng = np.random.default_rng(config.seed)
    best = (span, order, assign)
    for _ in range(config.restarts):
        if time.perf_counter() >= deadline:
            break
        o, asg = _perturb(d, best[1], best[2], rng)
        o, asg, s = _local_search(d, o, asg, _span(d, o, asg), deadline)
        if s < best[0]:
            best = (s, o, asg)
    return best


# --------------------------------------------------------------------------
# exact

class _BranchAndBound:
    def __init__(self, d: _Dense, incumbent: int | None, deadline: float):
        self.d = d
        self.best = incumbent
        self.best_placed = None
        self.deadline = deadline
        self.nodes = 0
        self.expired = False
        self.nxt = [0] * d.n
        self.jr = [0] * d.n
        self.mr = [0] * d.m
        self.rest = sum(d.min_rest[a][0] for a in range(d.n))
        self.placed: dict[tuple[int, int], tuple[int, int]] = {}

    def bound(self, t: int, span: int) -> int:
        d = self.d
        lb = span
        for a in range(d.n):
            q = self.nxt[a]
            if q < d.k:
                v = max(self.jr[a], t) + d.min_rest[a][q]
                if v > lb:
                    lb = v
        load = self.rest + sum(r if r > t else t for r in self.mr)
        v = -(-load // d.m)
        return v if v > lb else lb

    def search(self, t: int, last_job: int, span: int, remaining: int) -> None:
        self.nodes += 1
        if time.perf_counter() >= self.deadline:
            self.expired = True
            return
        d = self.d
        if remaining == 0:
            if self.best is None or span < self.best:
                self.best = span
                self.best_placed = dict(self.placed)
            return
        if self.best is not None and self.bound(t, span) >= self.best:
            return
        children = []
        for a in range(d.n):
            q = self.nxt[a]
            if q == d.k:
                continue
            for b in range(d.m):
                start = self.jr[a] if self.jr[a] > self.mr[b] else self.mr[b]
                if start < t or (start == t and a <= last_job):
                    continue
                children.append((start + d.dur[a][q][b], start, a, b))
        children.sort()
        for end, start, a, b in children:
            if self.best is not None and end >= self.best:
                continue
            q = self.nxt[a]
            old_jr, old_mr = self.jr[a], self.mr[b]
            self.jr[a] = self.mr[b] = end
            self.nxt[a] = q + 1
            self.rest -= min(d.dur[a][q])
            self.placed[(a, q)] = (b, start)
            self.search(start, a, end if end > span else span, remaining - 1)
            del self.placed[(a, q)]
            self.rest += min(d.dur[a][q])
            self.nxt[a] = q
            self.jr[a], self.mr[b] = old_jr, old_mr
            if self.expired:
                return


def solve(instance: WorkloadInstance, config: SolverConfig | None = None) -> SolverResult:
    config = config or SolverConfig()
    report = validate_instance(instance)
    if not report.ok:
        raise ModelError("invalid instance: " + "; ".join(str(v) for v in report.violations))
    if not instance.jobs:
        empty = Schedule.build({m: [] for m in instance.machine_ids}, Optimality.OPTIMAL, 0)
        return SolverResult(empty, SolverStatus.OPTIMAL, 0, 0)

    deadline = time.perf_counter() + config.time_limit_ms / 1000.0
    d = _Dense(instance)
    root_lb = lower_bound(instance)
    mode = config.mode
    if mode == "auto":
        mode = "exact" if d.num_ops <= config.exact_max_ops else "heuristic"

    incumbent = None
    placed = None
    if mode == "heuristic" or config.warm_start:
        span, order, assign = _heuristic(d, config, deadline if mode == "heuristic" else float("inf"))
        incumbent, placed = _decode(d, order, assign)
        assert incumbent == span

    if mode == "heuristic":
        status = SolverStatus.OPTIMAL if incumbent == root_lb else SolverStatus.FEASIBLE
        opt = Optimality.OPTIMAL if status is SolverStatus.OPTIMAL else Optimality.FEASIBLE
        return SolverResult(d.to_schedule(placed, opt, root_lb), status, 0, root_lb)

    bnb = _BranchAndBound(d, incumbent, deadline)
    if incumbent is None or incumbent > root_lb:
        bnb.search(-1, -1, 0, d.num_ops)
    if bnb.best_placed is not None:
        placed = bnb.best_placed
    if placed is None:
        return SolverResult(None, SolverStatus.INFEASIBLE_BUDGET, bnb.nodes, root_lb)
    if bnb.expired:
        return SolverResult(d.to_schedule(placed, Optimality.FEASIBLE, root_lb),
                            SolverStatus.FEASIBLE, bnb.nodes, root_lb)
    span = bnb.best
    return SolverResult(d.to_schedule(placed, Optimality.OPTIMAL, span),
                        SolverStatus.OPTIMAL, bnb.nodes, span)


def brute_force_oracle(instance: WorkloadInstance) -> int:
    """Optimal makespan by exhaustive enumeration; at most nine operations."""
    n_ops = len(instance.operations())
    if n_ops > ORACLE_MAX_OPS:
        raise ModelError(f"oracle size limit: {n_ops} operations > {ORACLE_MAX_OPS}")
    if n_ops == 0:
        return 0
    k = instance.num_stages
    dur = [[[instance.duration(j, q + 1, m) for m in instance.machine_ids] for q in range(k)]
           for j in instance.job_ids]
    n, n_m = len(dur), len(instance.machine_ids)

    def canonical(progress, job_ready, mach_ready) -> int:
        live = [r for p, r in zip(progress, job_ready) if p < k]
        if not live:
            return max(mach_ready)
        # nothing can start before both some unfinished job and some machine are
        # ready, so every ready time below that point is equivalent to it; the
        # state is kept relative to it as well
        base = max(min(live), min(mach_ready))
        jr = tuple((r - base if r > base else 0) if p < k else -1 for p, r in zip(progress, job_ready))
        mr = tuple(r - base if r > base else 0 for r in mach_ready)
        return base + best(progress, jr, mr)

    @lru_cache(maxsize=None)
    def best(progress: tuple, job_ready: tuple, mach_ready: tuple) -> int:
        # translation-invariant state: times relative to the earliest unfinished job
        result = None
        for a in range(n):
            q = progress[a]
            if q == k:
                continue
            nxt = progress[:a] + (q + 1,) + progress[a + 1:]
            ready = job_ready[a]
            row = dur[a][q]
            for b in range(n_m):
                mb = mach_ready[b]
                end = (ready if ready > mb else mb) + row[b]
                value = canonical(nxt, job_ready[:a] + (end,) + job_ready[a + 1:],
                                  mach_ready[:b] + (end,) + mach_ready[b + 1:])
                if result is None or value < result:
                    result = value
        return result

    return canonical((0,) * n, (0,) * n, (0,) * n_m)


def dispatch_schedule(instance: WorkloadInstance) -> Schedule:
    """The list-scheduling seed alone, before local search."""
    d = _Dense(instance)
    order, assign = _dispatch(d)
    _, placed = _decode(d, order, assign)
    return d.to_schedule(placed, Optimality.FEASIBLE, lower_bound(instance))
