"""Execution traces, duration perturbation, and run-level metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import Op, ValidationReport, Violation


@dataclass(frozen=True, order=True)
class OpRecord:
    start: int
    machine: str
    job: str
    stage: int
    end: int

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ExecutionTrace:
    records: tuple[OpRecord, ...]
    machines: tuple[str, ...]
    begin: int = 0
    end: int = 0
    failed: tuple[Op, ...] = ()

    @property
    def makespan(self) -> int:
        return self.end - self.begin

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def busy_intervals(self) -> dict[str, list[tuple[int, int]]]:
        out: dict[str, list[tuple[int, int]]] = {m: [] for m in self.machines}
        for r in sorted(self.records):
            out.setdefault(r.machine, []).append((r.start, r.end))
        return out

    def utilization(self) -> dict[str, float]:
        span = self.makespan
        return {m: (sum(e - s for s, e in iv) / span if span > 0 else 0.0)
                for m, iv in self.busy_intervals().items()}

    def by_op(self) -> dict[Op, OpRecord]:
        return {(r.job, r.stage): r for r in self.records}


def make_trace(records: Iterable[OpRecord], machines: Iterable[str], begin: int | None = None,
               end: int | None = None, failed: Iterable[Op] = ()) -> ExecutionTrace:
    recs = tuple(sorted(records))
    begin = 0 if begin is None else begin
    if end is None:
        end = max((r.end for r in recs), default=begin)
    return ExecutionTrace(recs, tuple(machines), begin, end, tuple(sorted(failed)))


def check_trace(trace: ExecutionTrace) -> ValidationReport:
    """Precedence and machine-exclusivity checks on realized times."""
    out: list[Violation] = []
    for m, intervals in trace.busy_intervals().items():
        for (s0, e0), (s1, e1) in zip(intervals, intervals[1:]):
            if s1 < e0:
                out.append(Violation("machine overlap", f"[{s0},{e0}) overlaps [{s1},{e1})", machine=m))
    ops = trace.by_op()
    for (job, stage), rec in sorted(ops.items()):
        prev = ops.get((job, stage - 1))
        if prev is not None and rec.start < prev.end:
            out.append(Violation("precedence", f"starts {rec.start} before stage {stage - 1} ends {prev.end}",
                                 rec.machine, job, stage))
    return ValidationReport(tuple(out))


@dataclass(frozen=True)
class PerturbationModel:
    """Multiplicative noise on nominal durations, one factor per operation."""

    kind: str = "none"  # none | uniform | lognormal
    lo: float = 1.0
    hi: float = 1.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "uniform", "lognormal"):
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.kind == "uniform" and not (0 < self.lo <= self.hi):
            raise ValueError("uniform factor needs 0 < lo <= hi")
        if self.kind == "lognormal" and self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @classmethod
    def uniform(cls, lo: float, hi: float, seed: int = 0) -> "PerturbationModel":
        return cls("uniform", lo=lo, hi=hi, seed=seed)

    @classmethod
    def lognormal(cls, sigma: float, seed: int = 0) -> "PerturbationModel":
        return cls("lognormal", sigma=sigma, seed=seed)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "PerturbationModel":
        """``none``, ``uniform:LO,HI`` or ``lognormal:SIGMA``."""
        kind, _, args = text.partition(":")
        try:
            if kind == "none":
                return cls()
            if kind == "uniform":
                lo, hi = (float(x) for x in args.split(","))
                return cls.uniform(lo, hi, seed)
            if kind == "lognormal":
                return cls.lognormal(float(args), seed)
        except ValueError:
            pass
        raise ValueError(f"bad perturbation spec {text!r}")

    def describe(self) -> str:
        if self.kind == "uniform":
            return f"uniform:{self.lo:g},{self.hi:g}"
        if self.kind == "lognormal":
            return f"lognormal:{self.sigma:g}"
        return "none"

    def factors(self, ops: Iterable[Op]) -> dict[Op, float]:
        """Factors drawn in sorted operation order, so they do not depend on placement."""
        ops = sorted(set(ops))
        if self.kind == "none":
            return {op: 1.0 for op in ops}
        rng = np.random.default_rng(self.seed)
        if self.kind == "uniform":
            draws = rng.uniform(self.lo, self.hi, size=len(ops)) if self.hi > self.lo \
                else np.full(len(ops), self.lo)
        else:
            draws = np.exp(rng.normal(0.0, self.sigma, size=len(ops)))
        return {op: float(f) for op, f in zip(ops, draws)}


def realize(nominal_ms: int, factor: float) -> int:
    if factor == 1.0:
        return nominal_ms
    return max(1, int(math.floor(nominal_ms * factor + 0.5)))


def relative_error(predicted_ms: float, actual_ms: float) -> float:
    """Percent error of a predicted makespan against the realized one."""
    if actual_ms <= 0:
        raise ValueError("relative error needs a positive actual makespan")
    return 100.0 * abs(predicted_ms - actual_ms) / actual_ms


def truncate2(value: float) -> float:
    """Two-decimal truncation used for reported percentages."""
    return math.floor(value * 100 + 1e-9) / 100


# --------------------------------------------------------------------------
# output files

TRACE_HEADER = ("machine", "job", "stage", "start_ms", "end_ms")


def dump_trace(trace: ExecutionTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in sorted(trace.records, key=lambda r: (r.machine, r.start, r.job, r.stage)):
        w.writerow((r.machine, r.job, r.stage, r.start, r.end))
    return buf.getvalue()


def load_trace(text: str, machines: Iterable[str] = ()) -> ExecutionTrace:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_HEADER:
        raise ValueError("trace: bad header")
    recs = [OpRecord(int(s), m, j, int(q), int(e)) for m, j, q, s, e in (row for row in reader if row)]
    names = list(dict.fromkeys(list(machines) + sorted({r.machine for r in recs})))
    return make_trace(recs, names)


def summarize(trace: ExecutionTrace, predicted_ms: int | None = None, extra: Mapping | None = None) -> dict:
    util = trace.utilization()
    busy = {m: sum(e - s for s, e in iv) for m, iv in trace.busy_intervals().items()}
    doc: dict = {
        "makespan_ms": trace.makespan,
        "operations": len(trace.records),
        "busy_ms": busy,
        "utilization": {m: round(u, 6) for m, u in util.items()},
        "partial": trace.partial,
        "failed": [f"{j}.{q}" for j, q in trace.failed],
    }
    if predicted_ms is not None:
        doc["predicted_makespan_ms"] = predicted_ms
        if trace.makespan > 0:
            doc["relative_error_pct"] = truncate2(relative_error(predicted_ms, trace.makespan))
    if extra:
        doc.update(extra)
    return doc


def dump_summary_json(summary: Mapping) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def format_summary(summary: Mapping) -> str:
    lines = [f"makespan        {summary['makespan_ms']} ms"]
    if "predicted_makespan_ms" in summary:
        lines.append(f"predicted       {summary['predicted_makespan_ms']} ms")
    if "relative_error_pct" in summary:
        lines.append(f"relative error  {summary['relative_error_pct']:.2f} %")
    if summary.get("partial"):
        lines.append(f"FAILED          {', '.join(summary['failed'])}")
    lines.append(f"{'machine':<10}{'busy_ms':>10}{'utilization':>13}")
    for m in summary["utilization"]:
        lines.append(f"{m:<10}{summary['busy_ms'][m]:>10}{summary['utilization'][m]:>13.3f}")
    return "\n".join(lines) + "\n"


@dataclass
class MachineTrace:
    """Wall-clock record of one machine's plan run (epoch milliseconds)."""

    machine_id: str
    begin_ms: int = 0
    end_ms: int = 0
    records: list[OpRecord] = field(default_factory=list)
    signals: dict[Op, int] = field(default_factory=dict)

    @property
    def makespan(self) -> int:
        return self.end_ms - self.begin_ms


def merge_machine_traces(traces: Iterable[MachineTrace], failed: Iterable[Op] = ()) -> ExecutionTrace:
    """Combine per-machine wall-clock traces onto a common zero."""
    traces = list(traces)
    if not traces:
        return make_trace([], [])
    zero = min(t.begin_ms for t in traces)
    recs = [OpRecord(r.start - zero, r.machine, r.job, r.stage, r.end - zero)
            for t in traces for r in t.records]
    return make_trace(recs, [t.machine_id for t in traces], 0, max(t.end_ms for t in traces) - zero,
                      failed)
