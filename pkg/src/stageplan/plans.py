"""Compile schedules into per-machine execution plans, plus the greedy baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .model import (
    ExecutionPlan,
    ModelError,
    PlanStatement,
    Schedule,
    StatementKind,
    WorkloadInstance,
    check_schedule,
    dump_plan,
    schedule_makespan,
    validate_instance,
)

BEGIN = PlanStatement(StatementKind.BEGIN)
END = PlanStatement(StatementKind.END)


@dataclass(frozen=True)
class GreedyResult:
    plans: tuple[ExecutionPlan, ...]
    assignment: Mapping[str, str]
    job_costs: Mapping[tuple[str, str], int]
    predicted_makespan: int
    order: tuple[tuple[str, str], ...] = ()


def compile_fjsp_plans(instance: WorkloadInstance, schedule: Schedule) -> list[ExecutionPlan]:
    """One plan per machine, operations in start-time order.

    Stage q > 1 is preceded by WAIT on itself and stage q < K is followed by
    SIGNAL on the job's next stage.
    """
    report = check_schedule(instance, schedule)
    if not report.ok:
        raise ModelError("invalid schedule: " + "; ".join(str(v) for v in report.violations))
    k = instance.num_stages
    plans = []
    for mach_id in sorted(instance.machine_ids):
        entries = sorted(schedule.assignments.get(mach_id, ()), key=lambda a: (a.start, a.job, a.stage))
        stmts = [BEGIN]
        for a in entries:
            if a.stage > 1:
                stmts.append(PlanStatement(StatementKind.WAIT, (a.job, a.stage)))
            stmts.append(PlanStatement(StatementKind.EXEC, (a.job, a.stage)))
            if a.stage + 1 <= k:
                stmts.append(PlanStatement(StatementKind.SIGNAL, (a.job, a.stage + 1)))
        stmts.append(END)
        starts = {(a.job, a.stage): a.start for a in entries}
        plans.append(ExecutionPlan(mach_id, tuple(stmts), starts))
    return plans


def job_costs(instance: WorkloadInstance) -> dict[tuple[str, str], int]:
    """Total time of every job run wholly on each machine."""
    k = instance.num_stages
    return {(j, m): sum(instance.duration(j, q, m) for q in range(1, k + 1))
            for j in instance.job_ids for m in instance.machine_ids}


def greedy_plans(instance: WorkloadInstance) -> GreedyResult:
    """Whole-job assignment in rounds of at most one job per machine.

    Within a round every unassigned job picks its fastest still-available
    machine; the globally cheapest (job, machine) pair is committed and both
    leave the round.  Ties resolve on (cost, job id, machine id).
    """
    report = validate_instance(instance)
    if not report.ok:
        raise ModelError("invalid instance: " + "; ".join(str(v) for v in report.violations))
    w = job_costs(instance)
    unassigned = sorted(instance.job_ids)
    machines = sorted(instance.machine_ids)
    assignment: dict[str, str] = {}
    order: list[tuple[str, str]] = []
    while unassigned:
        available = list(machines)
        while unassigned and available:
            candidates = []
            for j in unassigned:
                fastest = min(available, key=lambda m: (w[(j, m)], m))
                candidates.append((w[(j, fastest)], j, fastest))
            _, job, mach = min(candidates)
            assignment[job] = mach
            order.append((job, mach))
            unassigned.remove(job)
            available.remove(mach)

    k = instance.num_stages
    per_machine: dict[str, list[PlanStatement]] = {m: [BEGIN] for m in machines}
    for job, mach in order:
        per_machine[mach].extend(PlanStatement(StatementKind.EXEC, (job, q)) for q in range(1, k + 1))
    plans = []
    for m in machines:
        plans.append(ExecutionPlan(m, tuple(per_machine[m] + [END])))
    loads = {m: 0 for m in machines}
    for job, mach in order:
        loads[mach] += w[(job, mach)]
    return GreedyResult(tuple(plans), assignment, w, max(loads.values(), default=0), tuple(order))


def predicted_makespan(instance: WorkloadInstance, plans_or_schedule) -> int:
    """Makespan predicted from the time matrix.

    For a schedule this is its makespan.  For plans it is the largest
    per-machine sum of executed durations, which is exact for plans without
    cross-machine waits (the greedy strategy).
    """
    if isinstance(plans_or_schedule, Schedule):
        return schedule_makespan(plans_or_schedule)
    if isinstance(plans_or_schedule, GreedyResult):
        return plans_or_schedule.predicted_makespan
    plans: Iterable[ExecutionPlan] = plans_or_schedule
    best = 0
    for plan in plans:
        if any(s.kind is StatementKind.WAIT for s in plan.statements):
            raise ModelError("plans with WAIT need simulation to predict a makespan")
        load = sum(instance.duration(j, q, plan.machine_id) for j, q in plan.exec_ops())
        best = max(best, load)
    return best


def plan_filename(run_id: str, machine_id: str) -> str:
    return f"{run_id}.{machine_id}.plan"


def write_plans(out_dir: Path, run_id: str, plans: Iterable[ExecutionPlan]) -> dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for plan in plans:
        name = plan_filename(run_id, plan.machine_id)
        (out_dir / name).write_text(dump_plan(plan))
        files[plan.machine_id] = name
    return files


def write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
