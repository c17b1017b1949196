"""Command-line driver: train -> plan -> run, plus the dynamic baseline and comparisons."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import predictor as pred
from .dynamic import DEFAULT_POLL_S, dynamic_run
from .fsexec import DEFAULT_WAIT_POLL_MS, DEFAULT_WAIT_TIMEOUT_MS, ExecutionError, SyncNamespace, execute_real
from .model import (
    ModelError,
    TimeMatrix,
    WorkloadInstance,
    dump_instance,
    dump_schedule,
    load_instance,
    load_plan,
    random_instance,
    validate_instance,
)
from .plans import compile_fjsp_plans, greedy_plans, write_manifest, write_plans
from .seeds import derive_seed
from .simulate import SimulationError, simulate
from .solver import SolverConfig, SolverStatus, solve
from .trace import (
    MachineTrace,
    OpRecord,
    PerturbationModel,
    dump_summary_json,
    dump_trace,
    format_summary,
    merge_machine_traces,
    summarize,
)

log = logging.getLogger("stageplan")

STAGE_MODES = {"one_stage": ("full",), "two_stage": ("align", "call")}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# shared helpers

def _read(path: str | Path, what: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p.read_text()


def _parse_hyperparams(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise CliError(f"hyperparameter must be key=value: {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def _load_workload(args, need_times: bool = True) -> tuple[WorkloadInstance, str]:
    names = STAGE_MODES.get(getattr(args, "stage_mode", None) or "", None)
    instance = load_instance(_read(args.workload, "workload"),
                             len(names) if names else None, names)
    source = "explicit"
    if getattr(args, "model", None):
        model = pred.load_model(_read(args.model, "model file"))
        times = pred.build_time_matrix(model, instance.jobs, instance.machines, instance.num_stages,
                                       impute=getattr(args, "impute", False))
        instance, source = instance.with_times(times), "model"
    elif instance.times is None:
        if not instance.jobs:
            instance = instance.with_times(TimeMatrix({}))
        elif need_times:
            raise CliError("no time source: workload has no times and no --model was given")
    if need_times:
        report = validate_instance(instance)
        if not report.ok:
            raise CliError("invalid workload: " + "; ".join(str(v) for v in report.violations))
    return instance, source


def _solver_config(args) -> SolverConfig:
    return SolverConfig(time_limit_ms=args.time_limit_ms, mode=args.solver_mode,
                        seed=derive_seed(args.seed, "solver"))


def _perturbation(args, *labels) -> PerturbationModel:
    try:
        return PerturbationModel.parse(args.perturb, derive_seed(args.seed, "perturb", *labels))
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _write_report(out: Path, summary: dict, trace) -> None:
    (out / "trace.csv").write_text(dump_trace(trace))
    (out / "summary.json").write_text(dump_summary_json(summary))
    (out / "summary.txt").write_text(format_summary(summary))


# --------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    if not Path(args.table).is_file():
        raise CliError(f"training table not found: {args.table}")
    table = pred.ingest_training_table(args.table)
    hp = _parse_hyperparams(args.hp)
    model = pred.train(table, args.kind, hp, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(pred.dump_model(model))

    rows = []
    if args.k:
        metrics = pred.evaluate_kfold(table, args.kind, hp, args.k, args.seed)
        for (mt, stage), m in sorted(metrics.items()):
            rows.append({"machine_type": mt, "stage": stage, "rows": m.rows, "folds": m.folds,
                         "r2": m.r2, "mse_s2": m.mse, "mae_s": m.mae})
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["machine_type", "stage", "rows", "folds", "r2", "mse_s2", "mae_s"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "r2": repr(r["r2"]), "mse_s2": repr(r["mse_s2"]), "mae_s": repr(r["mae_s"])})
    (out / "metrics.csv").write_text(buf.getvalue())
    (out / "metrics.json").write_text(json.dumps({"kind": args.kind, "k": args.k, "seed": args.seed,
                                                  "groups": rows}, indent=2, sort_keys=True) + "\n")
    lines = [f"{'machine_type':<14}{'stage':>6}{'rows':>6}{'R2':>9}{'MSE(s^2)':>14}{'MAE(s)':>11}"]
    for r in rows:
        lines.append(f"{r['machine_type']:<14}{r['stage']:>6}{r['rows']:>6}{r['r2']:>9.4f}"
                     f"{r['mse_s2']:>14.3f}{r['mae_s']:>11.3f}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_plan(args) -> int:
    instance, source = _load_workload(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": args.run_id,
        "strategy": args.strategy,
        "stages": instance.num_stages,
        "machines": sorted(instance.machine_ids),
        "time_source": source,
        "workload": "workload.json",
    }
    if args.strategy == "fjsp":
        result = solve(instance, _solver_config(args))
        if result.schedule is None:
            raise CliError(f"solver produced no schedule within {args.time_limit_ms} ms")
        plans = compile_fjsp_plans(instance, result.schedule)
        (out / "schedule.csv").write_text(dump_schedule(result.schedule))
        manifest.update({
            "schedule": "schedule.csv",
            "predicted_makespan_ms": result.schedule.makespan,
            "solver": {"status": result.status.value, "lower_bound_ms": result.lower_bound,
                       "explored_nodes": result.explored_nodes, "mode": args.solver_mode},
            "nominal_starts": {p.machine_id: {f"{j}.{q}": s for (j, q), s in sorted(p.nominal_starts.items())}
                               for p in plans},
        })
    else:
        result = greedy_plans(instance)
        plans = list(result.plans)
        manifest.update({
            "predicted_makespan_ms": result.predicted_makespan,
            "assignment": [[j, m] for j, m in result.order],
        })
    (out / "workload.json").write_text(dump_instance(instance))
    manifest["plan_files"] = write_plans(out, args.run_id, plans)
    write_manifest(out / "manifest.json", manifest)
    status = manifest.get("solver", {}).get("status", "n/a")
    print(f"{args.strategy}: predicted makespan {manifest['predicted_makespan_ms']} ms, status {status}")
    return 0


def _load_manifest(path: str):
    manifest = json.loads(_read(path, "manifest"))
    base = Path(path).parent
    plans = []
    for mach_id, name in sorted(manifest["plan_files"].items()):
        plans.append(load_plan(mach_id, _read(base / name, "plan file")))
    instance = load_instance(_read(base / manifest["workload"], "workload"))
    return manifest, plans, instance


def _machine_trace_doc(t: MachineTrace) -> dict:
    return {"machine": t.machine_id, "begin_ms": t.begin_ms, "end_ms": t.end_ms,
            "records": [[r.job, r.stage, r.start, r.end] for r in t.records],
            "signals": {f"{j}.{q}": ts for (j, q), ts in sorted(t.signals.items())}}


def _machine_trace_from_doc(doc: dict) -> MachineTrace:
    t = MachineTrace(doc["machine"], doc["begin_ms"], doc["end_ms"])
    t.records = [OpRecord(s, doc["machine"], j, q, e) for j, q, s, e in doc["records"]]
    return t


def cmd_run(args) -> int:
    manifest, plans, instance = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predicted = manifest.get("predicted_makespan_ms")
    extra = {"strategy": manifest["strategy"], "backend": args.backend}

    if args.backend == "simulated":
        perturb = _perturbation(args)
        extra["perturbation"] = perturb.describe()
        try:
            trace = simulate(plans, instance, perturb)
        except SimulationError as exc:
            raise CliError(str(exc)) from None
        summary = summarize(trace, predicted, extra)
        _write_report(out, summary, trace)
        print(format_summary(summary), end="")
        return 0

    if not args.sync_root or args.template is None:
        raise CliError("real backend needs --sync-root and --template")
    sync = SyncNamespace(Path(args.sync_root), manifest["run_id"])
    if args.machine:
        plan = next((p for p in plans if p.machine_id == args.machine), None)
        if plan is None:
            raise CliError(f"manifest has no plan for machine {args.machine!r}")
        try:
            t = execute_real(plan, sync, args.template, args.wait_poll_ms, args.wait_timeout_ms)
            code = 0
            failed_op = None
        except ExecutionError as exc:
            print(f"error: {exc}", file=sys.stderr)
            t, code = exc.trace or MachineTrace(args.machine), 1
            failed_op = list(exc.operand) if exc.operand else None
        doc = _machine_trace_doc(t)
        doc["ok"] = code == 0
        doc["failed_op"] = failed_op
        (out / f"machine.{args.machine}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return code

    # every machine as its own local process, coordinated only through the sync root
    procs = []
    for plan in plans:
        cmd = [sys.executable, "-m", "stageplan", "run", "--manifest", str(args.manifest),
               "--backend", "real", "--sync-root", str(args.sync_root), "--template", args.template,
               "--machine", plan.machine_id, "--out", str(out),
               "--wait-poll-ms", str(args.wait_poll_ms), "--wait-timeout-ms", str(args.wait_timeout_ms)]
        procs.append(subprocess.Popen(cmd))
    codes = [p.wait() for p in procs]
    docs = []
    for plan in plans:
        path = out / f"machine.{plan.machine_id}.json"
        if not path.is_file():
            raise CliError(f"machine {plan.machine_id} wrote no trace ({path})")
        docs.append(json.loads(path.read_text()))
    failed = [tuple(d["failed_op"]) for d in docs if d.get("failed_op")]
    trace = merge_machine_traces([_machine_trace_from_doc(d) for d in docs], failed)
    extra["failed_machines"] = [d["machine"] for d in docs if not d["ok"]]
    summary = summarize(trace, predicted, extra)
    _write_report(out, summary, trace)
    print(format_summary(summary), end="")
    return 0 if all(c == 0 for c in codes) else 1


def cmd_dynamic(args) -> int:
    real = args.backend == "real"
    instance, _ = _load_workload(args, need_times=not real)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sync = None
    if real:
        if not args.sync_root or args.template is None:
            raise CliError("real backend needs --sync-root and --template")
        sync = SyncNamespace(Path(args.sync_root), args.run_id)
    perturb = _perturbation(args)
    result = dynamic_run(instance, args.poll, args.backend, perturb, sync, args.template)
    extra = {"strategy": "dynamic", "backend": args.backend, "poll_interval_s": args.poll,
             "perturbation": perturb.describe(),
             "assignment": [[j, m] for j, m in result.assignment.items()]}
    summary = summarize(result.trace, None, extra)
    _write_report(out, summary, result.trace)
    print(format_summary(summary), end="")
    return 1 if result.partial else 0


def compare_instance(instance: WorkloadInstance, config: SolverConfig, perturb: PerturbationModel,
                     poll_s: float) -> dict:
    """Simulated makespans of the three strategies on one instance."""
    res = solve(instance, config)
    fjsp_trace = simulate(compile_fjsp_plans(instance, res.schedule), instance, perturb)
    greedy = greedy_plans(instance)
    greedy_trace = simulate(greedy.plans, instance, perturb)
    dyn = dynamic_run(instance, poll_s, "simulated", perturb)
    f, g, d = fjsp_trace.makespan, greedy_trace.makespan, dyn.makespan
    return {
        "fjsp_status": res.status.value,
        "fjsp_predicted_ms": res.schedule.makespan,
        "fjsp_ms": f,
        "greedy_predicted_ms": greedy.predicted_makespan,
        "greedy_ms": g,
        "dynamic_ms": d,
        "speedup_vs_greedy": round(g / f, 6) if f else None,
        "speedup_vs_dynamic": round(d / f, 6) if f else None,
    }


COMPARE_COLUMNS = ("trial", "jobs", "machines", "stages", "fjsp_status", "fjsp_predicted_ms", "fjsp_ms",
                   "greedy_predicted_ms", "greedy_ms", "dynamic_ms", "speedup_vs_greedy",
                   "speedup_vs_dynamic")


def cmd_compare(args) -> int:
    if (args.workload is None) == (args.random is None):
        raise CliError("give exactly one of --workload or --random N,M,K")
    if args.random is not None:
        try:
            dims = [int(x) for x in args.random.split(",")]
            n, m, k = dims
        except ValueError:
            raise CliError(f"--random expects N,M,K, got {args.random!r}") from None
        base = None
    else:
        base, _ = _load_workload(args)
    config = _solver_config(args)
    rows = []
    for trial in range(args.trials):
        if base is None:
            rng = np.random.default_rng(derive_seed(args.seed, "instance", trial))
            instance = random_instance(rng, n, m, k)
        else:
            instance = base
        perturb = _perturbation(args, trial)
        row = {"trial": trial, "jobs": len(instance.jobs), "machines": len(instance.machines),
               "stages": instance.num_stages}
        row.update(compare_instance(instance, config, perturb, args.poll))
        rows.append(row)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (out / "comparison.csv").write_text(buf.getvalue())
    proven = [r for r in rows if r["fjsp_status"] == SolverStatus.OPTIMAL.value]
    agg = {
        "trials": len(rows),
        "proven_optimal": len(proven),
        "mean_speedup_vs_greedy": (round(float(np.mean([r["speedup_vs_greedy"] for r in rows])), 6)
                                   if rows else None),
        "mean_speedup_vs_dynamic": (round(float(np.mean([r["speedup_vs_dynamic"] for r in rows])), 6)
                                    if rows else None),
        "fjsp_le_greedy_when_optimal": all(r["fjsp_predicted_ms"] <= r["greedy_predicted_ms"] for r in proven),
    }
    (out / "comparison.json").write_text(json.dumps({"rows": rows, "aggregate": agg}, indent=2,
                                                    sort_keys=True) + "\n")
    lines = [f"{'trial':>5} {'fjsp':>10} {'greedy':>10} {'dynamic':>10} {'vs greedy':>10} {'vs dynamic':>11}  status"]
    for r in rows:
        lines.append(f"{r['trial']:>5} {r['fjsp_ms']:>10} {r['greedy_ms']:>10} {r['dynamic_ms']:>10} "
                     f"{r['speedup_vs_greedy']:>9.2f}x {r['speedup_vs_dynamic']:>10.2f}x  {r['fjsp_status']}")
    if rows:
        lines.append(f"mean speedup: {agg['mean_speedup_vs_greedy']:.2f}x vs greedy, "
                     f"{agg['mean_speedup_vs_dynamic']:.2f}x vs dynamic")
    text = "\n".join(lines) + "\n"
    (out / "comparison.txt").write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stageplan", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    def solver_flags(p):
        p.add_argument("--solver-mode", choices=("exact", "heuristic", "auto"), default="auto")
        p.add_argument("--time-limit-ms", type=int, default=10_000)

    def workload_flags(p, required=True):
        p.add_argument("--workload", required=required)
        p.add_argument("--model", help="predictor model file; fills the time matrix")
        p.add_argument("--impute", action="store_true", help="mean-impute missing features")
        p.add_argument("--stage-mode", choices=tuple(STAGE_MODES),
                       help="pipeline depth for jobs that do not state their stage count")

    p = sub.add_parser("train", help="fit stage-time models and cross-validate them")
    p.add_argument("--table", required=True)
    p.add_argument("--kind", choices=pred.KINDS, default="tree_ensemble")
    p.add_argument("--hp", action="append", metavar="KEY=VALUE")
    p.add_argument("--k", type=int, default=10, help="cross-validation folds (0 skips)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="generate execution plans")
    workload_flags(p)
    p.add_argument("--strategy", choices=("fjsp", "greedy"), default="fjsp")
    p.add_argument("--run-id", default="run")
    solver_flags(p)
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="execute plans from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", choices=("simulated", "real"), default="simulated")
    p.add_argument("--perturb", default="none", help="none | uniform:LO,HI | lognormal:SIGMA")
    p.add_argument("--sync-root")
    p.add_argument("--template", help="stage command with {job} {stage} {run_id} placeholders")
    p.add_argument("--machine", help="run only this machine's plan (real backend)")
    p.add_argument("--wait-poll-ms", type=int, default=DEFAULT_WAIT_POLL_MS)
    p.add_argument("--wait-timeout-ms", type=int, default=DEFAULT_WAIT_TIMEOUT_MS)
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("dynamic", help="master-worker baseline")
    workload_flags(p)
    p.add_argument("--backend", choices=("simulated", "real"), default="simulated")
    p.add_argument("--poll", type=float, default=DEFAULT_POLL_S, help="master poll interval (s)")
    p.add_argument("--perturb", default="none")
    p.add_argument("--sync-root")
    p.add_argument("--template")
    p.add_argument("--run-id", default="dynamic")
    common(p)
    p.set_defaults(func=cmd_dynamic)

    p = sub.add_parser("compare", help="fjsp vs greedy vs dynamic, simulated")
    workload_flags(p, required=False)
    p.add_argument("--random", metavar="N,M,K", help="generate a random instance per trial")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--perturb", default="none")
    p.add_argument("--poll", type=float, default=DEFAULT_POLL_S)
    solver_flags(p)
    common(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ModelError, pred.PredictorError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
