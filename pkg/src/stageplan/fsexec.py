"""Plan execution against a shared directory.

Cross-machine ordering is carried entirely by marker files under
``<root>/<run_id>/``:

* ``<job>.<stage>.done``   created by SIGNAL(job, stage); awaited by WAIT(job, stage)
* ``<job>.<stage>.failed`` stage failed or was abandoned; downstream waits abort
* ``<job>.complete``       the job's last stage finished
* ``<machine>.busy``       a dynamic-strategy worker holds the machine

Markers are created with O_CREAT|O_EXCL so a second creation fails loudly.
"""

from __future__ import annotations

import logging
import os
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

from .model import ExecutionPlan, Op, StatementKind
from .trace import MachineTrace, OpRecord

log = logging.getLogger(__name__)

DEFAULT_WAIT_POLL_MS = 1_000
DEFAULT_WAIT_TIMEOUT_MS = 86_400_000


class ExecutionError(RuntimeError):
    def __init__(self, message: str, operand: Op | None = None, trace: MachineTrace | None = None):
        super().__init__(message)
        self.operand = operand
        self.trace = trace


class StageFailed(ExecutionError):
    pass


class WaitTimeout(ExecutionError):
    pass


class UpstreamFailed(ExecutionError):
    pass


class DuplicateSignal(ExecutionError):
    pass


def now_ms() -> int:
    return time.time_ns() // 1_000_000


@dataclass(frozen=True)
class SyncNamespace:
    root: Path
    run_id: str

    @property
    def run_dir(self) -> Path:
        return Path(self.root) / self.run_id

    def ensure(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def done_path(self, op: Op) -> Path:
        return self.run_dir / f"{op[0]}.{op[1]}.done"

    def failed_path(self, op: Op) -> Path:
        return self.run_dir / f"{op[0]}.{op[1]}.failed"

    def complete_path(self, job: str) -> Path:
        return self.run_dir / f"{job}.complete"

    def busy_path(self, machine: str) -> Path:
        return self.run_dir / f"{machine}.busy"


def create_marker(path: Path, content: str = "") -> bool:
    """Atomically create ``path``; False if it already exists."""
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
    except FileExistsError:
        return False
    with os.fdopen(fd, "w") as fh:
        fh.write(content)
    return True


def render_command(template: str, job: str, stage: int, run_id: str) -> str:
    return (template.replace("{job}", job).replace("{stage}", str(stage))
            .replace("{run_id}", run_id))


def run_stage(template: str, job: str, stage: int, run_id: str) -> int:
    cmd = render_command(template, job, stage, run_id)
    log.info("exec %s.%s: %s", job, stage, cmd)
    return subprocess.run(cmd, shell=True).returncode


def _is_terminal(plan: ExecutionPlan, i: int) -> bool:
    """EXEC at i is a job's last stage when no SIGNAL or EXEC of its next stage follows."""
    job, stage = plan.statements[i].operand
    if i + 1 >= len(plan.statements):
        return True
    nxt = plan.statements[i + 1]
    return not (nxt.kind in (StatementKind.SIGNAL, StatementKind.EXEC) and nxt.operand == (job, stage + 1))


def _abandon(plan: ExecutionPlan, sync: SyncNamespace, i: int, failed: Op | None) -> None:
    """Mark the failed stage and every stage this plan would still have signaled."""
    if failed is not None:
        create_marker(sync.failed_path(failed))
    for s in plan.statements[i + 1:]:
        if s.kind is StatementKind.SIGNAL:
            create_marker(sync.failed_path((s.operand[0], s.operand[1] - 1)))


def execute_real(plan: ExecutionPlan, sync: SyncNamespace, command_template: str,
                 wait_poll_ms: int = DEFAULT_WAIT_POLL_MS,
                 wait_timeout_ms: int = DEFAULT_WAIT_TIMEOUT_MS) -> MachineTrace:
    """Interpret one machine's plan, launching a shell command per EXEC."""
    sync.ensure()
    trace = MachineTrace(plan.machine_id)
    for i, s in enumerate(plan.statements):
        kind = s.kind
        if kind is StatementKind.BEGIN:
            trace.begin_ms = now_ms()
        elif kind is StatementKind.WAIT:
            job, stage = s.operand
            done = sync.done_path(s.operand)
            upstream = sync.failed_path((job, stage - 1))
            deadline = time.monotonic() + wait_timeout_ms / 1000.0
            while not done.exists():
                if upstream.exists():
                    _abandon(plan, sync, i, None)
                    raise UpstreamFailed(f"upstream of {job}.{stage} failed", s.operand, trace)
                if time.monotonic() >= deadline:
                    _abandon(plan, sync, i, None)
                    raise WaitTimeout(f"timed out waiting for {job}.{stage}", s.operand, trace)
                time.sleep(min(wait_poll_ms / 1000.0, max(0.0, deadline - time.monotonic())))
        elif kind is StatementKind.EXEC:
            job, stage = s.operand
            start = now_ms()
            code = run_stage(command_template, job, stage, sync.run_id)
            end = now_ms()
            if code != 0:
                _abandon(plan, sync, i, s.operand)
                raise StageFailed(f"stage {job}.{stage} exited with status {code}", s.operand, trace)
            trace.records.append(OpRecord(start, plan.machine_id, job, stage, end))
            if _is_terminal(plan, i) and not create_marker(sync.complete_path(job)):
                raise DuplicateSignal(f"duplicate signal: {job}.complete exists", s.operand, trace)
        elif kind is StatementKind.SIGNAL:
            if not create_marker(sync.done_path(s.operand)):
                raise DuplicateSignal(f"duplicate signal: {s.operand[0]}.{s.operand[1]}", s.operand, trace)
            trace.signals[s.operand] = now_ms()
        elif kind is StatementKind.END:
            trace.end_ms = now_ms()
    return trace
