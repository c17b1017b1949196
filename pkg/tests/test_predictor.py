import numpy as np
import pytest

from stageplan import predictor as pred
from stageplan.model import Job, Machine
from stageplan.predictor import (
    DataError,
    FeatureMismatch,
    NoModelForGroup,
    ParseError,
    SchemaError,
    TrainingTable,
    build_time_matrix,
    dump_model,
    evaluate_kfold,
    ingest_training_table,
    load_model,
    predict,
    regression_metrics,
    synthetic_table,
    train,
)

FAST_TREES = {"n_trees": 20}


def linear10(fv):
    return 10.0 * fv["size_mb"]


def table_with(rows, names=("size_mb", "bases")):
    return TrainingTable.from_rows(names, rows)


def integer_size_table(n=40, types=("gpu",)):
    rows = []
    for i in range(n):
        size = 100 + 37 * i
        rows.append(({"size_mb": size, "bases": float((i * 7919) % 101)}, types[i % len(types)], 1, 10 * size))
    return table_with(rows)


def fv_of(table, i):
    return dict(zip(table.feature_names, table.features[i]))


# -- ingest -----------------------------------------------------------------

def test_ingest_80_rows(tmp_path):
    table = synthetic_table(np.random.default_rng(0), 80, linear10)
    path = tmp_path / "t.csv"
    table.write_csv(path)
    back = ingest_training_table(path)
    assert len(back) == 80
    assert back.feature_names == pred.FEATURE_NAMES
    np.testing.assert_array_equal(back.features, table.features)
    np.testing.assert_array_equal(back.durations, table.durations)


def test_ingest_empty(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("")
    with pytest.raises(SchemaError, match="schema error"):
        ingest_training_table(path)


def test_ingest_missing_column(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("size_mb,machine_type,stage\n1,gpu,1\n")
    with pytest.raises(SchemaError, match="duration_ms"):
        ingest_training_table(path)


def test_ingest_non_numeric(tmp_path):
    path = tmp_path / "n.csv"
    path.write_text("size_mb,machine_type,stage,duration_ms\n1,gpu,1,5\nabc,gpu,1,5\n")
    with pytest.raises(ParseError, match=r"row 3 column 'size_mb'"):
        ingest_training_table(path)


def test_ingest_bad_duration(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("size_mb,machine_type,stage,duration_ms\n1,gpu,1,0\n")
    with pytest.raises(DataError, match="invalid duration"):
        ingest_training_table(path)


def test_ingest_pct_duplicates_range(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("size_mb,pct_duplicates,machine_type,stage,duration_ms\n10,150,gpu,1,5\n")
    with pytest.raises(DataError, match="invariant violation"):
        ingest_training_table(path)


# -- linear -----------------------------------------------------------------

def test_linear_exact_fit():
    table = integer_size_table()
    model = train(table, "linear")
    for i in range(len(table)):
        assert abs(predict(model, fv_of(table, i), "gpu", 1) - table.durations[i]) <= 1
    assert predict(model, {"size_mb": 500, "bases": 3.0}, "gpu", 1) == 5000


def test_linear_matches_least_squares_oracle():
    rng = np.random.default_rng(4)
    X = rng.uniform(1, 100, size=(60, 3))
    y = X @ np.array([30.0, -5.0, 12.0]) + 2000 + rng.normal(0, 50, size=60)
    rows = [({"a": x[0], "b": x[1], "c": x[2]}, "gpu", 1, int(round(v))) for x, v in zip(X, y)]
    table = TrainingTable.from_rows(("a", "b", "c"), rows)
    model = train(table, "linear", {"alpha": 0.0})
    A = np.column_stack([table.features, np.ones(len(table))])
    coef, *_ = np.linalg.lstsq(A, table.durations.astype(float), rcond=None)
    params = model.groups[("gpu", 1)]
    np.testing.assert_allclose(params["coef"], coef[:3], rtol=1e-6)
    np.testing.assert_allclose(params["intercept"], coef[3], rtol=1e-6)


def test_linear_large_penalty_predicts_mean():
    table = integer_size_table()
    model = train(table, "linear", {"alpha": 1e12})
    assert model.groups[("gpu", 1)]["coef"] == [0.0, 0.0]
    assert predict(model, {"size_mb": 1, "bases": 1}, "gpu", 1) == round(table.durations.mean())


# -- tree ensemble ------------------------------------------------------------

def test_tree_determinism_seed7():
    table = synthetic_table(np.random.default_rng(1), 60, linear10)
    a = dump_model(train(table, "tree_ensemble", {"n_trees": 100}, seed=7))
    b = dump_model(train(table, "tree_ensemble", {"n_trees": 100}, seed=7))
    assert a == b
    assert a != dump_model(train(table, "tree_ensemble", {"n_trees": 100}, seed=8))


def test_two_machine_types_two_groups():
    table = integer_size_table(types=("a100", "v100"))
    model = train(table, "tree_ensemble", FAST_TREES)
    assert model.group_keys() == [("a100", 1), ("v100", 1)]


def test_constant_durations():
    rows = [({"size_mb": 1 + i, "bases": i % 3}, "gpu", 1, 4000) for i in range(10)]
    model = train(table_with(rows), "tree_ensemble", FAST_TREES)
    assert predict(model, {"size_mb": 777, "bases": 1}, "gpu", 1) == 4000


def test_missing_feature():
    model = train(integer_size_table(), "tree_ensemble", FAST_TREES)
    with pytest.raises(FeatureMismatch, match="bases"):
        predict(model, {"size_mb": 5}, "gpu", 1)
    assert predict(model, {"size_mb": 500}, "gpu", 1, impute=True) >= 1


def test_unknown_group():
    model = train(integer_size_table(), "linear")
    with pytest.raises(NoModelForGroup):
        predict(model, {"size_mb": 5, "bases": 1}, "tpu", 1)


def test_insufficient_rows_per_group():
    rows = [({"size_mb": 1, "bases": 1}, "gpu", 1, 10), ({"size_mb": 2, "bases": 1}, "gpu", 1, 20),
            ({"size_mb": 1, "bases": 1}, "gpu", 2, 10)]
    with pytest.raises(DataError, match=r"insufficient data.*stage 2"):
        train(table_with(rows), "linear")


def test_tree_predictions_stay_in_training_range():
    rng = np.random.default_rng(2)
    table = synthetic_table(rng, 80, linear10, noise=(0.5, 1.5))
    model = train(table, "tree_ensemble", FAST_TREES)
    lo, hi = table.durations.min(), table.durations.max()
    probe = synthetic_table(np.random.default_rng(3), 50, lambda fv: 1.0)
    for i in range(len(probe)):
        fv = fv_of(probe, i)
        fv["size_mb"] *= 10  # well outside the training range
        assert lo <= predict(model, fv, "gpu", 1) <= hi


def test_constant_column_changes_nothing():
    base = synthetic_table(np.random.default_rng(5), 60, linear10, noise=(0.9, 1.1))
    names = base.feature_names + ("constant",)
    rows = [({**fv_of(base, i), "constant": 3.0}, "gpu", 1, int(base.durations[i])) for i in range(len(base))]
    wider = TrainingTable.from_rows(names, rows)
    probe = synthetic_table(np.random.default_rng(6), 20, linear10)
    for kind in ("tree_ensemble", "linear"):
        m1 = train(base, kind, FAST_TREES if kind == "tree_ensemble" else None, seed=3)
        m2 = train(wider, kind, FAST_TREES if kind == "tree_ensemble" else None, seed=3)
        for i in range(len(probe)):
            fv = fv_of(probe, i)
            assert predict(m1, fv, "gpu", 1) == predict(m2, {**fv, "constant": 3.0}, "gpu", 1)


def test_single_split_is_best_split():
    """A depth-1 tree over all features picks the SSE-minimizing split found by brute force."""
    rng = np.random.default_rng(8)
    X = rng.uniform(0, 10, size=(30, 3))
    y = np.where(X[:, 1] > 6, 50.0, 10.0) + rng.normal(0, 1, size=30)
    tree = pred._build_tree(X, y, np.arange(3), np.random.default_rng(0), max_depth=1, min_leaf=2, mtry=3)

    best = None
    for f in range(3):
        values = np.unique(X[:, f])
        for lo, hi in zip(values, values[1:]):
            thr = (lo + hi) / 2
            left, right = y[X[:, f] <= thr], y[X[:, f] > thr]
            if len(left) < 2 or len(right) < 2:
                continue
            sse = ((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum()
            if best is None or sse < best[0] - 1e-9:
                best = (sse, f, thr)
    assert tree["feature"][0] == best[1]
    assert tree["threshold"][0] == pytest.approx(best[2])
    assert tree["value"][tree["left"][0]] == pytest.approx(y[X[:, best[1]] <= best[2]].mean())


# -- evaluation -------------------------------------------------------------

def test_metrics_hand_values():
    r2, mse, mae = regression_metrics([1, 2, 3], [1, 2, 4])
    assert (r2, mse, mae) == (0.5, pytest.approx(1 / 3), pytest.approx(1 / 3))


def test_kfold_noiseless_linear():
    table = synthetic_table(np.random.default_rng(0), 100, linear10)
    (m,) = evaluate_kfold(table, "linear", k=10, seed=0).values()
    assert m.r2 >= 0.999 and m.folds == 10 and m.rows == 100


def test_kfold_pure_noise():
    noise = np.random.default_rng(42).uniform(1000, 9000, size=100)
    it = iter(noise)
    table = synthetic_table(np.random.default_rng(1), 100, lambda fv: next(it))
    for kind in ("linear", "tree_ensemble"):
        (m,) = evaluate_kfold(table, kind, FAST_TREES if kind == "tree_ensemble" else None, k=10).values()
        assert m.r2 <= 0.2


def test_kfold_too_few_rows():
    rows = [({"size_mb": i + 1, "bases": 1}, "gpu", 1, 10 * (i + 1)) for i in range(5)]
    with pytest.raises(DataError, match="insufficient data for k folds"):
        evaluate_kfold(table_with(rows), "linear", k=10)


def test_kfold_deterministic():
    table = synthetic_table(np.random.default_rng(0), 40, linear10, noise=(0.9, 1.1))
    a = evaluate_kfold(table, "tree_ensemble", FAST_TREES, k=5, seed=2)
    assert a == evaluate_kfold(table, "tree_ensemble", FAST_TREES, k=5, seed=2)


# -- time matrix and persistence ---------------------------------------------

def test_build_time_matrix_shapes():
    table = integer_size_table(types=("a100", "v100"))
    rows = [(fv_of(table, i), table.machine_types[i], q, int(table.durations[i]) * q)
            for i in range(len(table)) for q in (1, 2)]
    table2 = TrainingTable.from_rows(table.feature_names, rows)
    model = train(table2, "tree_ensemble", FAST_TREES)
    jobs = [Job.with_stages("j1", 2, {"size_mb": 300, "bases": 5}),
            Job.with_stages("j2", 2, {"size_mb": 900, "bases": 50})]
    machines = [Machine("m1", "a100"), Machine("m2", "a100"), Machine("m3", "v100")]
    tm = build_time_matrix(model, jobs, machines[:2], 2)
    assert len(tm) == 8 and all(v >= 1 for _, v in tm.items())
    tm3 = build_time_matrix(model, jobs, machines, 2)
    for j in ("j1", "j2"):
        for q in (1, 2):
            assert tm3[(j, q, "m1")] == tm3[(j, q, "m2")]


def test_build_time_matrix_constant_and_locus():
    rows = [({"size_mb": 1 + i, "bases": 1}, "gpu", q, 4000) for i in range(6) for q in (1, 2)]
    model = train(table_with(rows), "linear")
    tm = build_time_matrix(model, [Job.with_stages("j", 2, {"size_mb": 5, "bases": 1})],
                           [Machine("m", "gpu")], 2)
    assert set(v for _, v in tm.items()) == {4000}
    with pytest.raises(NoModelForGroup, match=r"job=j, stage=1, machine=x"):
        build_time_matrix(model, [Job.with_stages("j", 2, {"size_mb": 5, "bases": 1})],
                          [Machine("x", "tpu")], 2)


@pytest.mark.parametrize("kind", ["linear", "tree_ensemble"])
def test_model_round_trip(kind):
    table = synthetic_table(np.random.default_rng(0), 30, linear10, noise=(0.9, 1.1))
    model = train(table, kind, FAST_TREES if kind == "tree_ensemble" else None, seed=1)
    text = dump_model(model)
    back = load_model(text)
    assert dump_model(back) == text
    for i in range(5):
        assert predict(back, fv_of(table, i), "gpu", 1) == predict(model, fv_of(table, i), "gpu", 1)


def test_unknown_hyperparameter():
    with pytest.raises(pred.PredictorError):
        train(integer_size_table(), "linear", {"depth": 3})
