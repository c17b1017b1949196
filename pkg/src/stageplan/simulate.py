"""Deterministic discrete-event interpreter for execution plans."""

from __future__ import annotations

import heapq
from typing import Iterable

from .model import ExecutionPlan, Op, StatementKind, WorkloadInstance, check_plan_set
from .trace import ExecutionTrace, OpRecord, PerturbationModel, make_trace, realize


class SimulationError(RuntimeError):
    pass


class DeadlockError(SimulationError):
    def __init__(self, blocked: dict[str, Op]):
        self.blocked = blocked
        desc = ", ".join(f"{m} waits {j}.{q}" for m, (j, q) in sorted(blocked.items()))
        super().__init__(f"deadlock: {desc}")


def simulate(plans: Iterable[ExecutionPlan], instance: WorkloadInstance,
             perturb: PerturbationModel | None = None) -> ExecutionTrace:
    """Run every plan on a simulated clock.

    Each machine walks its statements in order.  EXEC advances the machine
    clock by the realized duration, SIGNAL stamps the current clock onto its
    operand, and WAIT holds the machine until that stamp exists.  Events are
    processed in (time, machine id) order.
    """
    plans = sorted(plans, key=lambda p: p.machine_id)
    report = check_plan_set(plans)
    if not report.ok:
        dangling = [v for v in report.violations if v.kind == "dangling wait"]
        if dangling:
            raise SimulationError("dangling wait: " + ", ".join(f"{v.job}.{v.stage}" for v in dangling))
        raise SimulationError("invalid plans: " + "; ".join(str(v) for v in report.violations))

    ops = [op for p in plans for op in p.exec_ops()]
    for plan in plans:
        for job, stage in plan.exec_ops():
            if (job, stage, plan.machine_id) not in instance.times:
                raise SimulationError(f"no duration for {job}.{stage} on {plan.machine_id}")
    factors = (perturb or PerturbationModel()).factors(ops)

    by_id = {p.machine_id: p for p in plans}
    pos = {m: 0 for m in by_id}
    clock = {m: 0 for m in by_id}
    finished: dict[str, int] = {}
    signals: dict[Op, int] = {}
    waiting: dict[Op, list[str]] = {}
    blocked: dict[str, Op] = {}
    records: list[OpRecord] = []
    queue = [(0, m) for m in sorted(by_id)]
    heapq.heapify(queue)

    while queue:
        t, m = heapq.heappop(queue)
        clock[m] = max(clock[m], t)
        stmts = by_id[m].statements
        while pos[m] < len(stmts):
            s = stmts[pos[m]]
            if s.kind is StatementKind.BEGIN:
                pos[m] += 1
            elif s.kind is StatementKind.WAIT:
                if s.operand not in signals:
                    waiting.setdefault(s.operand, []).append(m)
                    blocked[m] = s.operand
                    break
                blocked.pop(m, None)
                clock[m] = max(clock[m], signals[s.operand])
                pos[m] += 1
            elif s.kind is StatementKind.EXEC:
                job, stage = s.operand
                dur = realize(instance.duration(job, stage, m), factors[s.operand])
                start = clock[m]
                clock[m] = start + dur
                records.append(OpRecord(start, m, job, stage, clock[m]))
                pos[m] += 1
                heapq.heappush(queue, (clock[m], m))
                break
            elif s.kind is StatementKind.SIGNAL:
                signals[s.operand] = clock[m]
                for w in waiting.pop(s.operand, []):
                    heapq.heappush(queue, (clock[m], w))
                pos[m] += 1
            else:  # END
                finished[m] = clock[m]
                pos[m] += 1

    if len(finished) != len(by_id):
        raise DeadlockError({m: op for m, op in blocked.items() if m not in finished})
    return make_trace(records, sorted(by_id), 0, max(finished.values(), default=0))
