"""Shared data model: workloads, schedules, execution plans, and their checks.

All durations and timestamps are integer milliseconds.  Identifiers are
strings; wherever an ordering is needed for tie-breaking it is lexicographic
on the identifier.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

Op = tuple[str, int]  # (job id, 1-based stage index)


class ModelError(ValueError):
    """Raised on malformed input files or impossible requests."""


@dataclass(frozen=True)
class OperationSpec:
    index: int
    name: str = ""


@dataclass(frozen=True)
class Job:
    id: str
    operations: tuple[OperationSpec, ...]
    features: Mapping[str, float] | None = None

    @property
    def num_stages(self) -> int:
        return len(self.operations)

    @classmethod
    def with_stages(cls, job_id: str, k: int, features=None, stage_names=None) -> "Job":
        names = list(stage_names) if stage_names else [""] * k
        ops = tuple(OperationSpec(q + 1, names[q]) for q in range(k))
        return cls(job_id, ops, dict(features) if features is not None else None)


@dataclass(frozen=True)
class Machine:
    id: str
    machine_type: str = "default"


class TimeMatrix:
    """Read-only map (job, stage, machine) -> duration in ms."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[tuple[str, int, str], int] | None = None):
        self._entries = {k: int(v) for k, v in (entries or {}).items()}

    def __getitem__(self, key: tuple[str, int, str]) -> int:
        return self._entries[key]

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def get(self, key, default=None):
        return self._entries.get(key, default)

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeMatrix) and self._entries == other._entries

    def __repr__(self) -> str:
        return f"TimeMatrix({len(self._entries)} entries)"


@dataclass(frozen=True)
class WorkloadInstance:
    jobs: tuple[Job, ...]
    machines: tuple[Machine, ...]
    times: TimeMatrix | None = None

    def __post_init__(self):
        object.__setattr__(self, "jobs", tuple(self.jobs))
        object.__setattr__(self, "machines", tuple(self.machines))

    @property
    def num_stages(self) -> int:
        return self.jobs[0].num_stages if self.jobs else 0

    @property
    def job_ids(self) -> list[str]:
        return [j.id for j in self.jobs]

    @property
    def machine_ids(self) -> list[str]:
        return [m.id for m in self.machines]

    def operations(self) -> list[Op]:
        return [(j.id, q) for j in self.jobs for q in range(1, j.num_stages + 1)]

    def duration(self, job: str, stage: int, machine: str) -> int:
        return self.times[(job, stage, machine)]

    def with_times(self, times: TimeMatrix) -> "WorkloadInstance":
        return WorkloadInstance(self.jobs, self.machines, times)

    def dense_times(self) -> np.ndarray:
        """Array [job, stage, machine] following instance order."""
        n, k, m = len(self.jobs), self.num_stages, len(self.machines)
        out = np.zeros((n, k, m), dtype=np.int64)
        for a, job in enumerate(self.jobs):
            for q in range(k):
                for b, mach in enumerate(self.machines):
                    out[a, q, b] = self.times[(job.id, q + 1, mach.id)]
        return out


@dataclass(frozen=True, order=True)
class Assignment:
    start: int
    job: str
    stage: int
    duration: int

    @property
    def end(self) -> int:
        return self.start + self.duration


class Optimality(str, Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible"


@dataclass(frozen=True)
class Schedule:
    assignments: Mapping[str, tuple[Assignment, ...]]
    makespan: int = 0
    optimality: Optimality = Optimality.FEASIBLE
    lower_bound: int = 0

    @classmethod
    def build(cls, per_machine: Mapping[str, Iterable[Assignment]], optimality=Optimality.FEASIBLE,
              lower_bound: int = 0) -> "Schedule":
        assignments = {
            m: tuple(sorted(entries, key=lambda a: (a.start, a.job, a.stage)))
            for m, entries in sorted(per_machine.items())
        }
        span = max((a.end for seq in assignments.values() for a in seq), default=0)
        return cls(assignments, span, Optimality(optimality), lower_bound)

    def entries(self) -> list[tuple[str, Assignment]]:
        return [(m, a) for m, seq in self.assignments.items() for a in seq]

    def placement(self) -> dict[Op, tuple[str, Assignment]]:
        return {(a.job, a.stage): (m, a) for m, a in self.entries()}


class StatementKind(str, Enum):
    BEGIN = "BEGIN"
    EXEC = "EXEC"
    WAIT = "WAIT"
    SIGNAL = "SIGNAL"
    END = "END"


@dataclass(frozen=True)
class PlanStatement:
    kind: StatementKind
    operand: Op | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StatementKind(self.kind))
        bare = self.kind in (StatementKind.BEGIN, StatementKind.END)
        if bare and self.operand is not None:
            raise ModelError(f"{self.kind.value} takes no operand")
        if not bare:
            if self.operand is None:
                raise ModelError(f"{self.kind.value} requires an operand")
            job, stage = self.operand
            object.__setattr__(self, "operand", (str(job), int(stage)))

    def __str__(self) -> str:
        if self.operand is None:
            return self.kind.value
        return f"{self.kind.value} {self.operand[0]}.{self.operand[1]}"


@dataclass(frozen=True)
class ExecutionPlan:
    machine_id: str
    statements: tuple[PlanStatement, ...]
    # nominal start times from the schedule; reporting only, never enforced
    nominal_starts: Mapping[Op, int] = field(default_factory=dict, compare=False)

    def exec_ops(self) -> list[Op]:
        return [s.operand for s in self.statements if s.kind is StatementKind.EXEC]


# --------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    machine: str | None = None
    job: str | None = None
    stage: int | None = None

    def __str__(self) -> str:
        locus = ", ".join(
            f"{k}={v}" for k, v in (("machine", self.machine), ("job", self.job), ("stage", self.stage))
            if v is not None
        )
        return f"{self.kind}: {self.message}" + (f" [{locus}]" if locus else "")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def validate_instance(instance: WorkloadInstance, require_times: bool = True) -> ValidationReport:
    out: list[Violation] = []
    seen: set[str] = set()
    for job in instance.jobs:
        if not job.id or any(c.isspace() for c in job.id) or "," in job.id:
            out.append(Violation("invalid id", f"bad job id {job.id!r}", job=job.id))
        if job.id in seen:
            out.append(Violation("duplicate job", f"job id {job.id!r} repeated", job=job.id))
        seen.add(job.id)
        if job.num_stages < 1:
            out.append(Violation("empty job", "job has no operations", job=job.id))
        if [op.index for op in job.operations] != list(range(1, job.num_stages + 1)):
            out.append(Violation("stage indices", "operation indices must be 1..K", job=job.id))
    depths = {job.num_stages for job in instance.jobs}
    if len(depths) > 1:
        out.append(Violation("variable depth", f"jobs have differing stage counts {sorted(depths)}"))

    seen = set()
    for mach in instance.machines:
        if not mach.id or any(c.isspace() for c in mach.id) or "," in mach.id:
            out.append(Violation("invalid id", f"bad machine id {mach.id!r}", machine=mach.id))
        if mach.id in seen:
            out.append(Violation("duplicate machine", f"machine id {mach.id!r} repeated", machine=mach.id))
        seen.add(mach.id)
        if not mach.machine_type:
            out.append(Violation("machine type", "empty machine_type", machine=mach.id))
    if instance.jobs and not instance.machines:
        out.append(Violation("no machines", "instance has jobs but no machines"))

    if instance.times is None:
        if require_times:
            out.append(Violation("no time source", "instance carries no time matrix"))
        return ValidationReport(tuple(out))

    expected = {(j.id, q, m.id) for j in instance.jobs for q in range(1, j.num_stages + 1)
                for m in instance.machines}
    for job_id, stage, mach_id in sorted(expected - set(instance.times)):
        out.append(Violation("incomplete time matrix", "missing duration",
                             machine=mach_id, job=job_id, stage=stage))
    for job_id, stage, mach_id in sorted(set(instance.times) - expected):
        out.append(Violation("unknown time entry", "entry outside jobs x stages x machines",
                             machine=mach_id, job=job_id, stage=stage))
    for (job_id, stage, mach_id), dur in sorted(instance.times.items()):
        if dur <= 0:
            out.append(Violation("non-positive duration", f"duration {dur} ms",
                                 machine=mach_id, job=job_id, stage=stage))
    return ValidationReport(tuple(out))


def schedule_makespan(schedule: Schedule) -> int:
    ends = [a.end for _, a in schedule.entries()]
    if not ends:
        raise ModelError("empty schedule")
    return max(ends)


def check_schedule(instance: WorkloadInstance, schedule: Schedule) -> ValidationReport:
    out: list[Violation] = []
    machines = set(instance.machine_ids)
    wanted = set(instance.operations())
    placed: dict[Op, list[tuple[str, Assignment]]] = {}

    for mach_id, seq in sorted(schedule.assignments.items()):
        if mach_id not in machines:
            out.append(Violation("unknown machine", "schedule uses unknown machine", machine=mach_id))
        ordered = sorted(seq, key=lambda a: (a.start, a.job, a.stage))
        for a in ordered:
            placed.setdefault((a.job, a.stage), []).append((mach_id, a))
            if a.start < 0:
                out.append(Violation("negative start", f"start {a.start}", mach_id, a.job, a.stage))
            if (a.job, a.stage) not in wanted:
                out.append(Violation("unknown operation", "operation not in instance", mach_id, a.job, a.stage))
                continue
            if mach_id in machines:
                expected = instance.duration(a.job, a.stage, mach_id)
                if a.duration != expected:
                    out.append(Violation("duration mismatch", f"{a.duration} ms != {expected} ms",
                                         mach_id, a.job, a.stage))
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.start < prev.end:
                out.append(Violation("machine overlap",
                                     f"{prev.job}.{prev.stage} ends {prev.end} after "
                                     f"{cur.job}.{cur.stage} starts {cur.start}",
                                     mach_id, cur.job, cur.stage))

    for job_id, stage in sorted(wanted):
        hits = placed.get((job_id, stage), [])
        if not hits:
            out.append(Violation("operation unscheduled", "operation missing from schedule",
                                 job=job_id, stage=stage))
        elif len(hits) > 1:
            out.append(Violation("operation duplicated", f"scheduled {len(hits)} times",
                                 job=job_id, stage=stage))

    for job in instance.jobs:
        for q in range(2, job.num_stages + 1):
            before, after = placed.get((job.id, q - 1)), placed.get((job.id, q))
            if not before or not after:
                continue
            if after[0][1].start < before[0][1].end:
                out.append(Violation("precedence", f"stage {q} starts {after[0][1].start} before "
                                     f"stage {q - 1} ends {before[0][1].end}",
                                     after[0][0], job.id, q))
    return ValidationReport(tuple(out))


def chain_lower_bound(instance: WorkloadInstance) -> int:
    """Longest job chain when every stage takes its fastest machine."""
    best = 0
    for job in instance.jobs:
        total = sum(min(instance.duration(job.id, q, m) for m in instance.machine_ids)
                    for q in range(1, job.num_stages + 1))
        best = max(best, total)
    return best


def random_instance(rng: np.random.Generator, n_jobs: int, n_machines: int, n_stages: int,
                    low: int = 1, high: int = 9, unit_ms: int = 1000,
                    machine_types: Iterable[str] | None = None) -> WorkloadInstance:
    """Instance with durations drawn uniformly from {low..high} x unit_ms."""
    types = list(machine_types) if machine_types is not None else None
    jobs = [Job.with_stages(f"J{i + 1}", n_stages) for i in range(n_jobs)]
    machines = [Machine(f"m{b + 1}", types[b % len(types)] if types else f"type{b + 1}")
                for b in range(n_machines)]
    draws = rng.integers(low, high + 1, size=(n_jobs, n_stages, n_machines))
    times = {(j.id, q + 1, m.id): int(draws[a, q, b]) * unit_ms
             for a, j in enumerate(jobs) for q in range(n_stages) for b, m in enumerate(machines)}
    return WorkloadInstance(jobs, machines, TimeMatrix(times))


# --------------------------------------------------------------------------
# file formats

def instance_to_dict(instance: WorkloadInstance) -> dict:
    jobs = []
    for job in instance.jobs:
        entry: dict = {"id": job.id, "stages": job.num_stages}
        names = [op.name for op in job.operations]
        if any(names):
            entry["stage_names"] = names
        if job.features is not None:
            entry["features"] = {k: job.features[k] for k in job.features}
        jobs.append(entry)
    doc: dict = {
        "machines": [{"id": m.id, "type": m.machine_type} for m in instance.machines],
        "jobs": jobs,
    }
    if instance.times is not None:
        doc["times"] = {
            job.id: {
                m.id: [instance.times.get((job.id, q, m.id)) for q in range(1, job.num_stages + 1)]
                for m in instance.machines
            }
            for job in instance.jobs
        }
    return doc


def instance_from_dict(doc: Mapping, default_stages: int | None = None,
                       default_stage_names=None) -> WorkloadInstance:
    for section in ("machines", "jobs"):
        if section not in doc:
            raise ModelError(f"workload: missing section {section!r}")
    try:
        machines = [Machine(str(m["id"]), str(m.get("type", m.get("machine_type", "default"))))
                    for m in doc["machines"]]
        jobs = []
        for j in doc["jobs"]:
            if "stages" in j:
                k = int(j["stages"])
                names = j.get("stage_names")
            elif default_stages is not None:
                k, names = default_stages, default_stage_names
            else:
                raise KeyError("stages")
            feats = j.get("features")
            if feats is not None:
                feats = {str(n): float(v) for n, v in feats.items()}
            jobs.append(Job.with_stages(str(j["id"]), k, feats, names))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"workload: malformed entry ({exc})") from None

    times = None
    if doc.get("times") is not None:
        entries = {}
        try:
            for job_id, per_machine in doc["times"].items():
                for mach_id, durations in per_machine.items():
                    for q, dur in enumerate(durations, start=1):
                        if dur is not None:
                            entries[(str(job_id), q, str(mach_id))] = int(dur)
        except (AttributeError, TypeError, ValueError) as exc:
            raise ModelError(f"workload: malformed times ({exc})") from None
        times = TimeMatrix(entries)
    return WorkloadInstance(jobs, machines, times)


def dump_instance(instance: WorkloadInstance) -> str:
    return json.dumps(instance_to_dict(instance), indent=2, sort_keys=False) + "\n"


def load_instance(text: str, default_stages: int | None = None, default_stage_names=None) -> WorkloadInstance:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"workload: not valid JSON ({exc})") from None
    return instance_from_dict(doc, default_stages, default_stage_names)


def dump_plan(plan: ExecutionPlan) -> str:
    return "".join(f"{s}\n" for s in plan.statements)


def parse_statement(line: str) -> PlanStatement:
    parts = line.split()
    if not parts:
        raise ModelError("empty plan line")
    try:
        kind = StatementKind(parts[0])
    except ValueError:
        raise ModelError(f"unknown plan statement {parts[0]!r}") from None
    if kind in (StatementKind.BEGIN, StatementKind.END):
        if len(parts) != 1:
            raise ModelError(f"{kind.value} takes no operand: {line!r}")
        return PlanStatement(kind)
    if len(parts) != 2 or "." not in parts[1]:
        raise ModelError(f"expected '{kind.value} <job>.<stage>': {line!r}")
    job, _, stage = parts[1].rpartition(".")
    if not job or not stage.isdigit() or int(stage) < 1:
        raise ModelError(f"bad operand in {line!r}")
    return PlanStatement(kind, (job, int(stage)))


def load_plan(machine_id: str, text: str) -> ExecutionPlan:
    stmts = tuple(parse_statement(line) for line in text.splitlines() if line.strip())
    return ExecutionPlan(machine_id, stmts)


SCHEDULE_HEADER = ("machine", "job", "stage", "start_ms", "duration_ms")


def dump_schedule(schedule: Schedule) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCHEDULE_HEADER)
    for mach_id, a in schedule.entries():
        writer.writerow((mach_id, a.job, a.stage, a.start, a.duration))
    return buf.getvalue()


def load_schedule(text: str, machines: Iterable[str] = (), optimality=Optimality.FEASIBLE,
                  lower_bound: int = 0) -> Schedule:
    """Parse a schedule CSV; ``machines`` adds empty entries for idle machines."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SCHEDULE_HEADER:
        raise ModelError(f"schedule: expected header {','.join(SCHEDULE_HEADER)}")
    per_machine: dict[str, list[Assignment]] = {m: [] for m in machines}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(SCHEDULE_HEADER):
            raise ModelError(f"schedule line {lineno}: expected 5 fields")
        mach_id, job, stage, start, dur = row
        try:
            per_machine.setdefault(mach_id, []).append(Assignment(int(start), job, int(stage), int(dur)))
        except ValueError:
            raise ModelError(f"schedule line {lineno}: non-integer field") from None
    return Schedule.build(per_machine, optimality, lower_bound)



def check_plan(plan: ExecutionPlan, num_stages: int | None = None) -> ValidationReport:
    """Structural checks on one plan: framing and WAIT/EXEC/SIGNAL adjacency."""
    out: list[Violation] = []
    stmts = plan.statements
    kinds = [s.kind for s in stmts]
    m = plan.machine_id
    if not stmts or kinds[0] is not StatementKind.BEGIN or kinds[-1] is not StatementKind.END:
        out.append(Violation("framing", "plan must start with BEGIN and end with END", machine=m))
    if kinds.count(StatementKind.BEGIN) != 1 or kinds.count(StatementKind.END) != 1:
        out.append(Violation("framing", "exactly one BEGIN and one END required", machine=m))
    for i, s in enumerate(stmts):
        if s.kind is StatementKind.WAIT:
            nxt = stmts[i + 1] if i + 1 < len(stmts) else None
            if nxt is None or nxt.kind is not StatementKind.EXEC or nxt.operand != s.operand:
                out.append(Violation("wait adjacency", f"{s} not followed by its EXEC",
                                     m, s.operand[0], s.operand[1]))
            if s.operand[1] == 1:
                out.append(Violation("wait on first stage", f"{s} has no upstream stage",
                                     m, s.operand[0], 1))
        elif s.kind is StatementKind.SIGNAL:
            prev = stmts[i - 1] if i > 0 else None
            if (prev is None or prev.kind is not StatementKind.EXEC
                    or prev.operand != (s.operand[0], s.operand[1] - 1)):
                out.append(Violation("signal adjacency", f"{s} not preceded by EXEC of the prior stage",
                                     m, s.operand[0], s.operand[1]))
    return ValidationReport(tuple(out))


def check_plan_set(plans: Iterable[ExecutionPlan]) -> ValidationReport:
    """Cross-plan checks: every WAIT has exactly one matching SIGNAL, no EXEC repeats."""
    plans = list(plans)
    out: list[Violation] = []
    for plan in plans:
        out.extend(check_plan(plan).violations)
    signals: dict[Op, int] = {}
    execs: dict[Op, int] = {}
    for plan in plans:
        for s in plan.statements:
            if s.kind is StatementKind.SIGNAL:
                signals[s.operand] = signals.get(s.operand, 0) + 1
            elif s.kind is StatementKind.EXEC:
                execs[s.operand] = execs.get(s.operand, 0) + 1
    for plan in plans:
        for s in plan.statements:
            if s.kind is StatementKind.WAIT and signals.get(s.operand, 0) == 0:
                out.append(Violation("dangling wait", f"{s} is never signaled",
                                     plan.machine_id, s.operand[0], s.operand[1]))
    for op, count in sorted(signals.items()):
        if count > 1:
            out.append(Violation("duplicate signal", f"{op[0]}.{op[1]} signaled {count} times",
                                 job=op[0], stage=op[1]))
    for op, count in sorted(execs.items()):
        if count > 1:
            out.append(Violation("operation duplicated", f"{op[0]}.{op[1]} executed {count} times",
                                 job=op[0], stage=op[1]))
    return ValidationReport(tuple(out))
