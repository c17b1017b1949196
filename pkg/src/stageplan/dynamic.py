"""Master-worker baseline: whole jobs go to the first free machine, no predictions."""

from __future__ import annotations

import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field

from .fsexec import SyncNamespace, create_marker, now_ms
from .model import ModelError, Op, WorkloadInstance, validate_instance
from .trace import ExecutionTrace, OpRecord, PerturbationModel, make_trace, realize

log = logging.getLogger(__name__)

DEFAULT_POLL_S = 30.0


@dataclass(frozen=True)
class DynamicResult:
    trace: ExecutionTrace
    assignment: dict[str, str]
    failed_jobs: tuple[str, ...] = field(default=())

    @property
    def makespan(self) -> int:
        return self.trace.makespan

    @property
    def partial(self) -> bool:
        return bool(self.failed_jobs)


def dynamic_run(instance: WorkloadInstance, poll_interval_s: float = DEFAULT_POLL_S,
                backend: str = "simulated", perturb: PerturbationModel | None = None,
                sync: SyncNamespace | None = None, command_template: str | None = None) -> DynamicResult:
    if backend == "simulated":
        return _simulated(instance, poll_interval_s, perturb)
    if backend == "real":
        if sync is None or command_template is None:
            raise ValueError("real backend needs a sync namespace and a command template")
        return _real(instance, poll_interval_s, sync, command_template)
    raise ValueError(f"unknown backend {backend!r}")


def _simulated(instance: WorkloadInstance, poll_interval_s: float,
               perturb: PerturbationModel | None) -> DynamicResult:
    report = validate_instance(instance)
    if not report.ok:
        raise ModelError("invalid instance: " + "; ".join(str(v) for v in report.violations))
    poll = int(round(poll_interval_s * 1000))
    factors = (perturb or PerturbationModel()).factors(instance.operations())
    k = instance.num_stages
    machines = instance.machine_ids
    busy_until = {m: 0 for m in machines}
    t = 0
    records: list[OpRecord] = []
    assignment: dict[str, str] = {}
    for job in instance.job_ids:
        while True:
            free = next((m for m in machines if busy_until[m] <= t), None)
            if free is not None:
                break
            soonest = min(busy_until.values())
            if poll <= 0:
                t = soonest
            else:
                t += poll * -(-(soonest - t) // poll)
        assignment[job] = free
        clock = t
        for q in range(1, k + 1):
            dur = realize(instance.duration(job, q, free), factors[(job, q)])
            records.append(OpRecord(clock, free, job, q, clock + dur))
            clock += dur
        busy_until[free] = clock
    end = max((r.end for r in records), default=0)
    return DynamicResult(make_trace(records, machines, 0, end), assignment)


def _real(instance: WorkloadInstance, poll_interval_s: float, sync: SyncNamespace,
          template: str) -> DynamicResult:
    sync.ensure()
    k = instance.num_stages
    machines = instance.machine_ids
    begin = now_ms()
    procs: list[subprocess.Popen] = []
    assignment: dict[str, str] = {}
    for job in instance.job_ids:
        while True:
            free = next((m for m in machines if not sync.busy_path(m).exists()), None)
            if free is not None and create_marker(sync.busy_path(free), job):
                break
            time.sleep(poll_interval_s)
        assignment[job] = free
        log.info("assign %s -> %s", job, free)
        procs.append(subprocess.Popen([
            sys.executable, "-m", "stageplan.worker",
            "--root", str(sync.root), "--run-id", sync.run_id, "--machine", free,
            "--job", job, "--stages", str(k), "--template", template,
        ]))
    for p in procs:
        p.wait()
    end = now_ms()

    records: list[OpRecord] = []
    failed: list[Op] = []
    failed_jobs: list[str] = []
    for job, mach in assignment.items():
        timing = sync.run_dir / f"{job}.timing.json"
        doc = json.loads(timing.read_text()) if timing.exists() else {"stages": [], "failed": 1}
        for stage, start, stop in doc["stages"]:
            records.append(OpRecord(start - begin, mach, job, stage, stop - begin))
        if doc.get("failed") is not None:
            failed.append((job, doc["failed"]))
            failed_jobs.append(job)
    trace = make_trace(records, machines, 0, end - begin, failed)
    return DynamicResult(trace, assignment, tuple(sorted(failed_jobs)))
