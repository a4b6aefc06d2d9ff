import numpy as np
import pytest

from tractfeat import DegenerateInputError
from tractfeat.regression import (
    Dataset,
    ForestSpec,
    MissingSubjectError,
    build_datasets,
    clamp_round_mrs,
    derive_seed,
    drop_zero_variance,
    evaluation_metrics,
    loocv_evaluate,
    predict_mrs,
    rf_importance,
    rf_predict,
    rf_train,
    rfe_loocv,
    zscore_apply,
    zscore_fit,
)


def test_zscore_hand_arithmetic():
    X = np.array([[1.0], [2.0], [3.0]])
    s = zscore_fit(X)
    got = zscore_apply(s, X).ravel()
    assert np.allclose(got, [-1.2247, 0.0, 1.2247], atol=1e-4)  # sigma = sqrt(2/3)


def test_zscore_constant_column_zeroes():
    X = np.array([[0.1, 5.0], [0.1, 6.0], [0.1, 7.0]])
    s = zscore_fit(X)
    out = zscore_apply(s, X)
    assert np.all(out[:, 0] == 0.0)


def test_zscore_train_mean_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(2.0, 3.0, size=(20, 4))
    s = zscore_fit(X)
    out = zscore_apply(s, X)
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-9)


def test_drop_zero_variance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 3))
    _, kept = drop_zero_variance(X)
    assert np.array_equal(kept, [0, 1, 2])
    X2 = X.copy()
    X2[:, 1] = 3.0
    out, kept = drop_zero_variance(X2)
    assert np.array_equal(kept, [0, 2])
    assert out.shape == (5, 2)
    allc = np.full((4, 3), 7.0)
    out, kept = drop_zero_variance(allc)
    assert out.shape == (4, 0) and len(kept) == 0


def step_data(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(n, 1))
    y = np.where(x[:, 0] < 0, 0.0, 4.0)
    return x, y


def test_forest_constant_target():
    X = np.linspace(0, 1, 10)[:, None]
    y = np.full(10, 2.0)
    f = rf_train(X, y, ForestSpec(n_trees=50, rng_seed=3))
    assert np.allclose(rf_predict(f, X), 2.0)


def test_forest_step_function_mse():
    X, y = step_data()
    f = rf_train(X, y, ForestSpec(rng_seed=0))
    Xt, yt = step_data(seed=99)
    pred = rf_predict(f, Xt)
    mse = np.mean((pred - yt) ** 2)
    assert mse < 0.1
    assert np.all(pred >= y.min()) and np.all(pred <= y.max())


def test_forest_depth_bound():
    X, y = step_data(80)
    for depth in (1, 2, 3):
        f = rf_train(X, y, ForestSpec(n_trees=40, max_depth=depth, rng_seed=1))
        assert max(f.tree_depths()) <= depth


def test_forest_determinism():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 5))
    y = rng.uniform(0, 4, size=50)
    a = rf_train(X, y, ForestSpec(rng_seed=42))
    b = rf_train(X, y, ForestSpec(rng_seed=42))
    probe = rng.normal(size=(20, 5))
    assert np.array_equal(rf_predict(a, probe), rf_predict(b, probe))
    c = rf_train(X, y, ForestSpec(rng_seed=43))
    assert not np.array_equal(rf_predict(a, probe), rf_predict(c, probe))


def test_forest_too_few_samples():
    with pytest.raises(DegenerateInputError):
        rf_train(np.zeros((1, 2)), np.zeros(1))


def test_rounding_rule():
    assert clamp_round_mrs(2.4) == 2
    assert clamp_round_mrs(2.5) == 3  # half away from zero
    assert clamp_round_mrs(4.7) == 4  # clamp
    assert clamp_round_mrs(-0.6) == 0
    assert clamp_round_mrs(0.49999) == 0
    rng = np.random.default_rng(0)
    for v in rng.uniform(-3, 8, size=2000):
        assert 0 <= clamp_round_mrs(v) <= 4


def test_predict_mrs_constant_forest():
    X = np.linspace(0, 1, 10)[:, None]
    f = rf_train(X, np.full(10, 2.4), ForestSpec(n_trees=20, rng_seed=0))
    assert predict_mrs(f, np.array([0.5])) == 2


def test_importance_informative_feature_wins():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(120, 6))
    y = 2.0 + 1.5 * X[:, 2]
    f = rf_train(X, y, ForestSpec(rng_seed=0))
    imp = rf_importance(f)
    assert np.argmax(imp) == 2
    assert imp[2] > max(np.delete(imp, 2))
    assert imp.sum() == pytest.approx(1.0)


def test_importance_constant_target_zero():
    X = np.linspace(0, 1, 20)[:, None]
    f = rf_train(X, np.full(20, 1.0), ForestSpec(n_trees=30, rng_seed=0))
    assert np.array_equal(rf_importance(f), [0.0])


def make_dataset(m=40, d=6, seed=0, informative=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(m, d))
    y = np.clip(np.round(2.0 + 1.6 * X[:, informative]), 0, 4).astype(int)
    ids = [f"sub-{i:03d}" for i in range(m)]
    return Dataset(X, y, [f"f{i}" for i in range(d)], ids)


def test_rfe_returns_single_dim():
    data = make_dataset(d=1)
    sel, curve = rfe_loocv(data, ForestSpec(n_trees=40, rng_seed=0))
    assert np.array_equal(sel, [0])
    assert len(curve) == 1


def test_rfe_curve_has_d_entries_and_min_matches():
    data = make_dataset(m=24, d=4, seed=3)
    spec = ForestSpec(n_trees=40, rng_seed=1)
    sel, curve = rfe_loocv(data, spec)
    assert len(curve) == 4
    assert [k for k, _ in curve] == [4, 3, 2, 1]
    maes = [m for _, m in curve]
    best = min(maes)
    # returned subset's cardinality matches a curve entry achieving the minimum
    matching = [k for k, m in curve if m == best]
    assert len(sel) == min(matching)


def test_rfe_recovers_informative_dim():
    hits = 0
    for seed in range(10):
        data = make_dataset(m=40, d=6, seed=seed, informative=0)
        sel, _ = rfe_loocv(data, ForestSpec(n_trees=60, rng_seed=seed))
        hits += int(0 in sel)
    assert hits >= 8


def test_rfe_empty_dimensions_error():
    data = make_dataset(m=6, d=2)
    empty = Dataset(np.empty((6, 0)), data.y, [], data.subject_ids)
    with pytest.raises(DegenerateInputError):
        rfe_loocv(empty, ForestSpec(n_trees=10))


def test_metrics_hand_checks():
    acc, mae, std = evaluation_metrics([3, 3], [3, 2])
    assert (acc, mae, std) == (0.5, 0.5, 0.5)
    acc, mae, std = evaluation_metrics([0, 1, 2, 3], [0, 1, 2, 3])
    assert (acc, mae, std) == (1.0, 0.0, 0.0)
    acc, mae, std = evaluation_metrics([4, 0], [0, 4])
    assert (acc, mae, std) == (0.0, 4.0, 0.0)
    acc, mae, std = evaluation_metrics([2, 2, 2, 2], [2, 3, 1, 2])
    assert acc == 0.5 and mae == 0.5 and std == 0.5
    acc, mae, std = evaluation_metrics([1, 2, 3], [1, 2, 0])
    assert acc == pytest.approx(2 / 3)
    assert mae == pytest.approx(1.0)
    assert std == pytest.approx(np.sqrt(2.0))  # errors [0, 0, 3], pop var 2


def test_loocv_perfect_feature():
    rng = np.random.default_rng(7)
    m = 30
    y = rng.integers(0, 5, size=m)
    X = np.stack([y.astype(float)], axis=1)  # the target itself
    data = Dataset(X, y, ["f0"], [f"s{i:02d}" for i in range(m)])
    rep = loocv_evaluate(data, ForestSpec(n_trees=60, rng_seed=0))
    assert rep.accuracy == 1.0
    assert rep.mae_mean == 0.0 and rep.mae_std == 0.0
    assert all(t == p for _, t, p in rep.per_subject)


def test_loocv_subject_order_invariance():
    data = make_dataset(m=16, d=3, seed=9)
    spec = ForestSpec(n_trees=40, rng_seed=5)
    rep1 = loocv_evaluate(data, spec)
    perm = np.random.default_rng(0).permutation(16)
    data2 = Dataset(data.X[perm], data.y[perm],
                    data.feature_names, [data.subject_ids[i] for i in perm])
    rep2 = loocv_evaluate(data2, spec)
    assert rep1.accuracy == rep2.accuracy
    assert rep1.mae_mean == rep2.mae_mean
    assert rep1.mae_std == rep2.mae_std
    assert dict((s, (t, p)) for s, t, p in rep1.per_subject) == \
        dict((s, (t, p)) for s, t, p in rep2.per_subject)


def test_loocv_fold_isolation():
    from tractfeat.regression import _fold_train_indices
    ids = [f"s{i}" for i in range(8)]
    seen = set()
    for i in range(8):
        train = _fold_train_indices(ids, i)
        assert i not in train
        assert len(train) == 7
        seen.add(tuple(train))
    assert len(seen) == 8  # every fold trains on a different set


def test_derive_seed_stable():
    assert derive_seed(0, "sub-001") == derive_seed(0, "sub-001")
    assert derive_seed(0, "sub-001") != derive_seed(1, "sub-001")
    assert derive_seed(0, "sub-001") != derive_seed(0, "sub-002")


def test_build_datasets(tmp_path):
    feats = tmp_path / "features.tsv"
    feats.write_text(
        "subject_id\tT_1\tT_2\tVS_1\tVS_2\tvol\tcx\tcy\tcz\tmaj\tmin\tratio\tsolid\tround\tsurf\n"
        + "\n".join(
            f"sub-{i:02d}\t{i}\t0.5\t{i * 2}\t0\t{i * 3}\t1\t2\t3\t4\t2\t2\t0.9\t0.7\t30"
            for i in range(6)) + "\n")
    clin = tmp_path / "clinical.tsv"
    clin.write_text("subject_id\tmRS\tdays_to_mRS\n" + "\n".join(
        f"sub-{i:02d}\t{i % 5}\t{85 + i}" for i in range(6)) + "\n")
    ds = build_datasets(feats, clin)
    assert set(ds) == {"tractographic", "volumetric", "spatial",
                       "morphological", "volumetric_spatial"}
    assert ds["tractographic"].X.shape == (6, 2)
    assert ds["volumetric"].X.shape == (6, 1)
    assert ds["spatial"].X.shape == (6, 3)
    assert ds["morphological"].X.shape == (6, 6)
    assert list(ds["volumetric"].X[:, 0]) == [0, 3, 6, 9, 12, 15]
    assert list(ds["tractographic"].y) == [0, 1, 2, 3, 4, 0]


def test_build_datasets_window_filter(tmp_path):
    feats = tmp_path / "features.tsv"
    feats.write_text("subject_id\tT_1\tvol\n"
                     "a\t1\t2\nb\t3\t4\nc\t5\t6\nd\t7\t8\n")
    clin = tmp_path / "clinical.tsv"
    clin.write_text("subject_id\tmRS\tdays_to_mRS\n"
                    "a\t1\t90\nb\t2\t50\nc\t3\t100\nd\t4\t101\n")
    ds = build_datasets(feats, clin)
    assert ds["volumetric"].subject_ids == ["a", "c"]  # b, d outside [80, 100]


def test_build_datasets_missing_subject(tmp_path):
    feats = tmp_path / "features.tsv"
    feats.write_text("subject_id\tT_1\tvol\na\t1\t2\nzz\t3\t4\n")
    clin = tmp_path / "clinical.tsv"
    clin.write_text("subject_id\tmRS\tdays_to_mRS\na\t1\t90\n")
    with pytest.raises(MissingSubjectError) as exc:
        build_datasets(feats, clin)
    assert exc.value.subject_id == "zz"
