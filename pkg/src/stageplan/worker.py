"""Worker wrapper for the dynamic strategy: run one whole job, then free the machine."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .fsexec import SyncNamespace, create_marker, now_ms, run_stage


def run_job(sync: SyncNamespace, machine: str, job: str, stages: int, template: str) -> int:
    timings = []
    failed = None
    try:
        for q in range(1, stages + 1):
            start = now_ms()
            code = run_stage(template, job, q, sync.run_id)
            stop = now_ms()
            if code != 0:
                failed = q
                create_marker(sync.failed_path((job, q)))
                break
            timings.append((q, start, stop))
        if failed is None:
            create_marker(sync.complete_path(job))
        (sync.run_dir / f"{job}.timing.json").write_text(
            json.dumps({"machine": machine, "stages": timings, "failed": failed}))
    finally:
        sync.busy_path(machine).unlink(missing_ok=True)
    return 0 if failed is None else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="stageplan.worker")
    ap.add_argument("--root", required=True)
    ap.add_argument("--run-id", required=True)
    ap.add_argument("--machine", required=True)
    ap.add_argument("--job", required=True)
    ap.add_argument("--stages", type=int, required=True)
    ap.add_argument("--template", required=True)
    args = ap.parse_args(argv)
    sync = SyncNamespace(Path(args.root), args.run_id)
    return run_job(sync, args.machine, args.job, args.stages, args.template)


if __name__ == "__main__":
    sys.exit(main())
