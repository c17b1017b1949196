"""Stage execution-time regression, one model per (machine type, stage).

Two model kinds are available:

``tree_ensemble``
    Bagged CART regression trees.  Each tree sees a bootstrap sample of the
    group's rows and, at every split, a random subset of the features; leaves
    hold the mean duration and the ensemble averages its trees.

``linear``
    Least squares with an L1 penalty, fitted by cyclic coordinate descent on
    standardized features.

Durations are fitted in milliseconds.  Cross-validation metrics are reported
in seconds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .model import Job, Machine, TimeMatrix
from .seeds import derive_seed

FEATURE_NAMES = (
    "size_mb", "avg_read_length", "avg_insert_size", "spots", "bases", "unique_reads",
    "pct_duplicates", "per_base_quality", "per_base_content", "per_base_n_content",
    "per_seq_gc_content", "overrepresented_reads",
)
META_COLUMNS = ("machine_type", "stage", "duration_ms")
KINDS = ("tree_ensemble", "linear")

TREE_DEFAULTS = {"n_trees": 100, "max_depth": 10, "bootstrap_fraction": 1.0,
                 "max_features": None, "min_samples_leaf": 2}
LINEAR_DEFAULTS = {"alpha": 0.01, "max_iter": 100_000, "tol": 1e-10}

Group = tuple[str, int]


class PredictorError(ValueError):
    pass


class SchemaError(PredictorError):
    pass


class ParseError(PredictorError):
    pass


class DataError(PredictorError):
    pass


class FeatureMismatch(PredictorError):
    pass


class NoModelForGroup(PredictorError):
    pass


def check_features(values: Mapping[str, float]) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise DataError(f"invariant violation: feature {name} is not finite")
    if "size_mb" in values and not values["size_mb"] > 0:
        raise DataError(f"invariant violation: size_mb must be > 0, got {values['size_mb']}")
    if "pct_duplicates" in values and not 0 <= values["pct_duplicates"] <= 100:
        raise DataError(f"invariant violation: pct_duplicates must be in [0, 100], got {values['pct_duplicates']}")


@dataclass(frozen=True)
class TrainingTable:
    feature_names: tuple[str, ...]
    features: np.ndarray  # (rows, features) float64
    machine_types: tuple[str, ...]
    stages: tuple[int, ...]
    durations: np.ndarray  # (rows,) int64, ms

    def __len__(self) -> int:
        return len(self.durations)

    def groups(self) -> dict[Group, np.ndarray]:
        out: dict[Group, list[int]] = {}
        for i, key in enumerate(zip(self.machine_types, self.stages)):
            out.setdefault(key, []).append(i)
        return {key: np.asarray(idx) for key, idx in sorted(out.items())}

    @classmethod
    def from_rows(cls, feature_names: Iterable[str], rows: Iterable[tuple[Mapping[str, float], str, int, int]]):
        names = tuple(feature_names)
        feats, types, stages, durs = [], [], [], []
        for fv, mt, stage, dur in rows:
            check_features(fv)
            if dur <= 0:
                raise DataError(f"invalid duration {dur}")
            feats.append([float(fv[n]) for n in names])
            types.append(str(mt))
            stages.append(int(stage))
            durs.append(int(dur))
        return cls(names, np.asarray(feats, dtype=float).reshape(len(durs), len(names)),
                   tuple(types), tuple(stages), np.asarray(durs, dtype=np.int64))

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.feature_names) + list(META_COLUMNS))
            for i in range(len(self)):
                w.writerow([repr(float(x)) for x in self.features[i]]
                           + [self.machine_types[i], self.stages[i], int(self.durations[i])])


def ingest_training_table(path) -> TrainingTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError(f"schema error: {path} is empty")
        header = [h.strip() for h in header]
        for col in META_COLUMNS:
            if col not in header:
                raise SchemaError(f"schema error: missing column {col!r}")
        names = [h for h in header if h not in META_COLUMNS]
        if not names:
            raise SchemaError("schema error: no feature columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"parse error: row {lineno} has {len(row)} cells, expected {len(header)}")
            cells = dict(zip(header, (c.strip() for c in row)))
            fv = {}
            for col in names + ["stage", "duration_ms"]:
                try:
                    fv[col] = float(cells[col])
                except ValueError:
                    raise ParseError(f"parse error: row {lineno} column {col!r}: {cells[col]!r}") from None
            stage, dur = fv.pop("stage"), fv.pop("duration_ms")
            if stage != int(stage) or stage < 1:
                raise ParseError(f"parse error: row {lineno} column 'stage': {cells['stage']!r}")
            if not cells["machine_type"]:
                raise ParseError(f"parse error: row {lineno} column 'machine_type' is empty")
            if dur <= 0:
                raise DataError(f"invalid duration: row {lineno} has {cells['duration_ms']}")
            try:
                check_features(fv)
            except DataError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            rows.append((fv, cells["machine_type"], int(stage), int(round(dur))))
    if not rows:
        raise SchemaError(f"schema error: {path} has no data rows")
    return TrainingTable.from_rows(names, rows)


# --------------------------------------------------------------------------
# regression tree

def _build_tree(X: np.ndarray, y: np.ndarray, active: np.ndarray, rng: np.random.Generator,
                max_depth: int, min_leaf: int, mtry: int) -> dict:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def new_node(val: float) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(val)
        return len(value) - 1

    def grow(idx: np.ndarray, depth: int) -> int:
        ys = y[idx]
        node = new_node(float(ys.mean()))
        n = len(idx)
        if depth >= max_depth or n < 2 * min_leaf or len(active) == 0:
            return node
        cand = rng.choice(active, size=min(mtry, len(active)), replace=False)
        xs = X[np.ix_(idx, cand)]
        order = np.argsort(xs, axis=0, kind="stable")
        xs_sorted = np.take_along_axis(xs, order, axis=0)
        ys_sorted = (ys - ys.mean())[order]
        csum = np.cumsum(ys_sorted, axis=0)
        csq = np.cumsum(ys_sorted ** 2, axis=0)
        total, total_sq = csum[-1], csq[-1]
        nl = np.arange(1, n)[:, None].astype(float)
        nr = n - nl
        sse = (csq[:-1] - csum[:-1] ** 2 / nl) + ((total_sq - csq[:-1]) - (total - csum[:-1]) ** 2 / nr)
        valid = xs_sorted[1:] > xs_sorted[:-1]
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
        if not valid.any():
            return node
        sse = np.where(valid, sse, np.inf)
        flat = int(np.argmin(sse.T))  # feature-major: first sampled feature wins ties
        c, pos = divmod(flat, n - 1)
        parent_sse = float(total_sq[0] - total[0] ** 2 / n)
        if not parent_sse - sse[pos, c] > 1e-9 * max(1.0, abs(parent_sse)):
            return node
        thr = float((xs_sorted[pos, c] + xs_sorted[pos + 1, c]) / 2.0)
        f = int(cand[c])
        go_left = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return {"feature": feature, "threshold": threshold, "left": left, "right": right, "value": value}


def _tree_predict(tree: Mapping, x: np.ndarray) -> float:
    node = 0
    feat, thr = tree["feature"], tree["threshold"]
    while feat[node] >= 0:
        node = tree["left"][node] if x[feat[node]] <= thr[node] else tree["right"][node]
    return tree["value"][node]


def _fit_forest(X: np.ndarray, y: np.ndarray, hp: Mapping, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    # constant columns can never split; excluding them keeps the random
    # stream, and so the fitted forest, independent of their presence
    active = np.flatnonzero(X.max(axis=0) > X.min(axis=0)) if len(X) else np.array([], dtype=int)
    mtry = hp["max_features"] or max(1, math.ceil(len(active) / 3))
    n = len(y)
    n_boot = max(1, int(round(hp["bootstrap_fraction"] * n)))
    trees = []
    for _ in range(hp["n_trees"]):
        sample = rng.integers(0, n, size=n_boot)
        trees.append(_build_tree(X[sample], y[sample], active, rng, hp["max_depth"],
                                 hp["min_samples_leaf"], mtry))
    return {"trees": trees}


def _forest_predict(params: Mapping, x: np.ndarray) -> float:
    trees = params["trees"]
    return float(sum(_tree_predict(t, x) for t in trees) / len(trees))


# --------------------------------------------------------------------------
# L1-penalized least squares

def _fit_lasso(X: np.ndarray, y: np.ndarray, hp: Mapping) -> dict:
    n, p = X.shape
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    live = scale > 0
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - mean[live]) / scale[live]
    y_mean = float(y.mean())
    yc = y - y_mean
    gram = Z.T @ Z / n
    corr = Z.T @ yc / n
    alpha, tol = hp["alpha"], hp["tol"]
    b = np.zeros(p)
    for _ in range(hp["max_iter"]):
        biggest = 0.0
        for j in np.flatnonzero(live):
            rho = corr[j] - gram[j] @ b + gram[j, j] * b[j]
            new = math.copysign(max(abs(rho) - alpha, 0.0), rho) / gram[j, j]
            biggest = max(biggest, abs(new - b[j]))
            b[j] = new
        if biggest <= tol * max(1.0, float(np.abs(b).max())):
            break
    coef = np.zeros(p)
    coef[live] = b[live] / scale[live]
    intercept = y_mean - float(coef @ mean)
    return {"coef": [float(c) for c in coef], "intercept": intercept}


def _lasso_predict(params: Mapping, x: np.ndarray) -> float:
    return float(np.dot(params["coef"], x) + params["intercept"])


# --------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class PredictorModel:
    kind: str
    hyperparams: Mapping
    seed: int
    feature_names: tuple[str, ...]
    groups: Mapping[Group, dict]
    feature_means: tuple[float, ...] = ()
    ranges: Mapping[Group, tuple[int, int]] = field(default_factory=dict)

    def group_keys(self) -> list[Group]:
        return sorted(self.groups)


def resolve_hyperparams(kind: str, hyperparams: Mapping | None) -> dict:
    if kind not in KINDS:
        raise PredictorError(f"unknown model kind {kind!r}")
    base = dict(TREE_DEFAULTS if kind == "tree_ensemble" else LINEAR_DEFAULTS)
    for key, val in (hyperparams or {}).items():
        if key not in base:
            raise PredictorError(f"unknown hyperparameter {key!r} for {kind}")
        base[key] = val
    return base


def _fit_group(kind: str, X: np.ndarray, y: np.ndarray, hp: Mapping, seed: int) -> dict:
    if kind == "tree_ensemble":
        return _fit_forest(X, y, hp, seed)
    return _fit_lasso(X, y, hp)


def _raw_predict(kind: str, params: Mapping, x: np.ndarray) -> float:
    val = _forest_predict(params, x) if kind == "tree_ensemble" else _lasso_predict(params, x)
    return max(1.0, val) if math.isfinite(val) else 1.0


def train(table: TrainingTable, kind: str = "tree_ensemble", hyperparams: Mapping | None = None,
          seed: int = 0) -> PredictorModel:
    hp = resolve_hyperparams(kind, hyperparams)
    groups = table.groups()
    for (mt, stage), idx in groups.items():
        if len(idx) < 2:
            raise DataError(f"insufficient data: group ({mt}, stage {stage}) has {len(idx)} row(s)")
    fitted, ranges = {}, {}
    y_all = table.durations.astype(float)
    for (mt, stage), idx in groups.items():
        fitted[(mt, stage)] = _fit_group(kind, table.features[idx], y_all[idx], hp,
                                         derive_seed(seed, "train", mt, stage))
        ranges[(mt, stage)] = (int(table.durations[idx].min()), int(table.durations[idx].max()))
    means = tuple(float(v) for v in table.features.mean(axis=0))
    return PredictorModel(kind, hp, int(seed), table.feature_names, fitted, means, ranges)


def _vector(model: PredictorModel, features: Mapping[str, float], impute: bool) -> np.ndarray:
    out = []
    for i, name in enumerate(model.feature_names):
        if name in features:
            out.append(float(features[name]))
        elif impute:
            out.append(model.feature_means[i])
        else:
            raise FeatureMismatch(f"feature mismatch: missing {name!r}")
    return np.asarray(out)


def predict(model: PredictorModel, features: Mapping[str, float], machine_type: str, stage: int,
            impute: bool = False) -> int:
    """Predicted duration in whole milliseconds, at least 1."""
    params = model.groups.get((machine_type, int(stage)))
    if params is None:
        raise NoModelForGroup(f"no model for group ({machine_type}, stage {stage})")
    x = _vector(model, features, impute)
    return max(1, int(math.floor(_raw_predict(model.kind, params, x) + 0.5)))


def build_time_matrix(model: PredictorModel, jobs: Iterable[Job], machines: Iterable[Machine], k: int,
                      impute: bool = False) -> TimeMatrix:
    entries = {}
    machines = list(machines)
    for job in jobs:
        for q in range(1, k + 1):
            for mach in machines:
                try:
                    entries[(job.id, q, mach.id)] = predict(model, job.features or {}, mach.machine_type, q,
                                                            impute)
                except PredictorError as exc:
                    raise type(exc)(f"{exc} [job={job.id}, stage={q}, machine={mach.id}]") from None
    return TimeMatrix(entries)


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class RegressionMetrics:
    r2: float
    mse: float  # s^2
    mae: float  # s
    rows: int = 0
    folds: int = 0


def regression_metrics(y_true, y_pred) -> tuple[float, float, float]:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    resid = y_true - y_pred
    ss_res = float(resid @ resid)
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return r2, ss_res / len(y_true), float(np.abs(resid).mean())


def evaluate_kfold(table: TrainingTable, kind: str = "tree_ensemble", hyperparams: Mapping | None = None,
                   k: int = 10, seed: int = 0) -> dict[Group, RegressionMetrics]:
    if k < 2:
        raise PredictorError("k must be >= 2")
    hp = resolve_hyperparams(kind, hyperparams)
    groups = table.groups()
    for (mt, stage), idx in groups.items():
        if len(idx) < k:
            raise DataError(f"insufficient data for k folds: group ({mt}, stage {stage}) "
                            f"has {len(idx)} rows, k={k}")
    y_all = table.durations.astype(float)
    out = {}
    for (mt, stage), idx in groups.items():
        rng = np.random.default_rng(derive_seed(seed, "kfold", mt, stage))
        folds = np.array_split(rng.permutation(idx), k)
        scores = []
        for f, test in enumerate(folds):
            fit_rows = np.concatenate([folds[g] for g in range(k) if g != f])
            params = _fit_group(kind, table.features[fit_rows], y_all[fit_rows], hp,
                                derive_seed(seed, "fold", mt, stage, f))
            pred = [_raw_predict(kind, params, table.features[i]) for i in test]
            scores.append(regression_metrics(y_all[test] / 1000.0, np.asarray(pred) / 1000.0))
        r2, mse, mae = (float(np.mean([s[i] for s in scores])) for i in range(3))
        out[(mt, stage)] = RegressionMetrics(r2, mse, mae, len(idx), k)
    return out


# --------------------------------------------------------------------------
# persistence

def model_to_dict(model: PredictorModel) -> dict:
    return {
        "format": "stageplan-predictor/1",
        "kind": model.kind,
        "hyperparams": dict(model.hyperparams),
        "seed": model.seed,
        "feature_names": list(model.feature_names),
        "feature_means": list(model.feature_means),
        "groups": [
            {"machine_type": mt, "stage": stage, "range": list(model.ranges.get((mt, stage), ())),
             "params": model.groups[(mt, stage)]}
            for mt, stage in model.group_keys()
        ],
    }


def model_from_dict(doc: Mapping) -> PredictorModel:
    if doc.get("format") != "stageplan-predictor/1":
        raise PredictorError("not a stageplan predictor model file")
    groups, ranges = {}, {}
    for g in doc["groups"]:
        key = (g["machine_type"], int(g["stage"]))
        groups[key] = g["params"]
        if g.get("range"):
            ranges[key] = tuple(g["range"])
    return PredictorModel(doc["kind"], doc["hyperparams"], int(doc["seed"]), tuple(doc["feature_names"]),
                          groups, tuple(doc["feature_means"]), ranges)


def dump_model(model: PredictorModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":")) + "\n"


def load_model(text: str) -> PredictorModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PredictorError(f"model file is not valid JSON ({exc})") from None
    return model_from_dict(doc)


def synthetic_table(rng: np.random.Generator, rows: int, duration_fn, noise: tuple[float, float] | None = None,
                    machine_types: Iterable[str] = ("gpu",), stages: Iterable[int] = (1,)) -> TrainingTable:
    """Random feature rows over the canonical feature set with durations from ``duration_fn``.

    ``duration_fn`` maps a feature dict to milliseconds; ``noise`` multiplies it
    by a U(lo, hi) factor.
    """
    out = []
    combos = [(mt, q) for mt in machine_types for q in stages]
    for i in range(rows):
        size = float(rng.uniform(200, 2000))
        read_len = float(rng.uniform(100, 250))
        spots = float(rng.uniform(1e6, 2e7))
        fv = {
            "size_mb": size,
            "avg_read_length": read_len,
            "avg_insert_size": float(rng.uniform(200, 600)),
            "spots": spots,
            "bases": float(spots * read_len * rng.uniform(0.9, 1.1) / 1e6),
            "unique_reads": float(spots * rng.uniform(0.6, 0.95)),
            "pct_duplicates": float(rng.uniform(2, 40)),
            "per_base_quality": float(rng.integers(0, 3)),
            "per_base_content": float(rng.integers(0, 3)),
            "per_base_n_content": float(rng.integers(0, 3)),
            "per_seq_gc_content": float(rng.integers(0, 3)),
            "overrepresented_reads": float(rng.integers(0, 3)),
        }
        mt, q = combos[i % len(combos)]
        dur = duration_fn(fv)
        if noise is not None:
            dur *= rng.uniform(*noise)
        out.append((fv, mt, q, max(1, int(round(dur)))))
    return TrainingTable.from_rows(FEATURE_NAMES, out)
