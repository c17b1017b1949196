from pathlib import Path

import pytest

from stageplan.model import (
    Assignment,
    Job,
    Machine,
    Schedule,
    TimeMatrix,
    WorkloadInstance,
    load_instance,
)

ROOT = Path(__file__).resolve().parents[1]
EXAMPLE1_PATH = ROOT / "workloads" / "example1.json"

# per job: per stage: seconds on (m1, m2, m3)
EXAMPLE1_SECONDS = {
    "J1": [(3, 2, 5), (2, 4, 4), (4, 3, 1)],
    "J2": [(3, 3, 4), (1, 5, 3), (2, 2, 5)],
    "J3": [(3, 2, 5), (5, 3, 3), (3, 2, 4)],
}


def build_instance(seconds: dict, machines=("m1", "m2", "m3"), types=None, unit=1000) -> WorkloadInstance:
    k = len(next(iter(seconds.values())))
    types = types or ["gpu-a"] * len(machines)
    times = {(j, q + 1, m): rows[q][b] * unit
             for j, rows in seconds.items() for q in range(k) for b, m in enumerate(machines)}
    return WorkloadInstance([Job.with_stages(j, k) for j in seconds],
                            [Machine(m, t) for m, t in zip(machines, types)], TimeMatrix(times))


@pytest.fixture
def example1() -> WorkloadInstance:
    return build_instance(EXAMPLE1_SECONDS)


def example2_schedule(inst: WorkloadInstance) -> Schedule:
    """Makespan-8 schedule whose m1 row is the published S1."""
    rows = {
        "m1": [("J3", 1, 0), ("J1", 2, 3), ("J2", 2, 5), ("J2", 3, 6)],
        "m2": [("J1", 1, 1), ("J3", 2, 3), ("J3", 3, 6)],
        "m3": [("J2", 1, 0), ("J1", 3, 5)],
    }
    per_machine = {
        m: [Assignment(s * 1000, j, q, inst.duration(j, q, m)) for j, q, s in entries]
        for m, entries in rows.items()
    }
    return Schedule.build(per_machine)


@pytest.fixture
def example2(example1) -> Schedule:
    return example2_schedule(example1)
