import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eyelearn.dataio import DatasetManifest, ManifestEntry
from eyelearn.evaluation import (
    DegenerateFitError,
    EvalConfig,
    MetricsReport,
    SingularSystemError,
    accuracy,
    downstream_sweep,
    f1,
    linear_svc_fit,
    linear_svc_fit_predict,
    mae,
    metrics,
    pearson_matrix,
    permutation,
    r2,
    read_report,
    ridge_fit,
    ridge_fit_predict,
    split_indices,
    splitmix64,
    write_matrix_csv,
)


def test_splitmix64_reference_outputs():
    # published reference stream for seed 0
    state, a = splitmix64(0)
    state, b = splitmix64(state)
    assert a == 0xE220A8397B1DCDAF
    assert b == 0x6E789E6AA1B965F4


def test_permutation_is_deterministic_permutation():
    p = permutation(50, 123)
    assert sorted(p.tolist()) == list(range(50))
    assert np.array_equal(p, permutation(50, 123))
    assert not np.array_equal(p, permutation(50, 124))


def test_split_sizes_and_disjoint():
    tr, te = split_indices(10, 0.3, 0)
    assert len(tr) == 3 and len(te) == 7
    assert set(tr) | set(te) == set(range(10)) and not set(tr) & set(te)
    a = split_indices(10, 0.3, 0, 1, 0)[0]
    b = split_indices(10, 0.3, 0, 0, 1)[0]
    assert not (np.array_equal(tr, a) and np.array_equal(tr, b))
    with pytest.raises(ValueError):
        split_indices(3, 0.1, 0)


# ridge


def _normal_equations(x, y, lam):
    mu, sd = x.mean(0), x.std(0)
    xs = (x - mu) / sd
    xc, yc = xs - xs.mean(0), y - y.mean()
    coef = np.linalg.inv(xc.T @ xc + lam * np.eye(x.shape[1])) @ xc.T @ yc
    return lambda t: ((t - mu) / sd - xs.mean(0)) @ coef + y.mean()


@pytest.mark.parametrize("seed", range(5))
def test_ridge_matches_normal_equations(seed):
    rng = np.random.default_rng(seed)
    x, y, t = rng.normal(size=(20, 5)), rng.normal(size=20), rng.normal(size=(7, 5))
    got = ridge_fit_predict(x, y, t, 0.7)
    assert np.max(np.abs(got - _normal_equations(x, y, 0.7)(t))) <= 1e-8


def test_ridge_interpolates_square_system():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(6, 6)), rng.normal(size=6)
    pred = ridge_fit_predict(x, y, x, 0.0, fit_intercept=False, standardize=False)
    assert np.max(np.abs(pred - y)) <= 1e-9


def test_ridge_huge_lambda_predicts_mean():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(30, 4)), rng.normal(size=30) + 5
    coef, *_ = ridge_fit(x, y, 1e12)
    assert np.max(np.abs(coef)) <= 1e-3
    assert np.max(np.abs(ridge_fit_predict(x, y, rng.normal(size=(5, 4)), 1e12) - y.mean())) <= 1e-3


def test_ridge_singular_at_zero_lambda():
    x = np.ones((5, 3))
    x[:, 0] = np.arange(5)
    x[:, 1] = 2 * x[:, 0]
    with pytest.raises(SingularSystemError):
        ridge_fit(x, np.arange(5.0), 0.0)
    with pytest.raises(ValueError):
        ridge_fit(x, np.arange(5.0), -1.0)


# svc


def _blobs(seed=0, n=40):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 2)) * 0.3 + [2.0, 2.0]
    b = rng.normal(size=(n, 2)) * 0.3 - [2.0, 2.0]
    return np.vstack([a, b]), np.array([1] * n + [0] * n)


def test_svc_separable_blobs():
    x, y = _blobs()
    assert accuracy(y, linear_svc_fit_predict(x, y, x)) == 1.0


def test_svc_deterministic():
    x, y = _blobs(1)
    w1, *_ = linear_svc_fit(x, y)
    w2, *_ = linear_svc_fit(x, y)
    assert np.array_equal(w1, w2)


def test_svc_single_class():
    with pytest.raises(DegenerateFitError):
        linear_svc_fit(np.zeros((4, 2)), np.ones(4, dtype=int))
    with pytest.raises(ValueError):
        linear_svc_fit(np.zeros((4, 2)), np.array([0, 1, 2, 1]))


# metrics


def test_perfect_predictions():
    y = np.array([0.0, 1.0, 3.0, 2.0])
    assert mae(y, y) == 0 and r2(y, y) == 1.0
    lab = np.array([0, 1, 1, 0])
    assert accuracy(lab, lab) == 1.0 and f1(lab, lab) == 1.0


def test_mean_predictor_r2_zero():
    y = np.array([1.0, 2.0, 4.0, 5.0])
    assert r2(y, np.full(4, y.mean())) == 0.0


def test_hand_computed_classification():
    y, p = np.array([0, 1, 1]), np.array([0, 1, 0])
    assert accuracy(y, p) == pytest.approx(2 / 3)
    assert f1(y, p) == pytest.approx(2 / 3)


def test_hand_computed_regression():
    y, p = np.array([1.0, 2.0, 3.0]), np.array([1.5, 2.0, 2.0])
    assert mae(y, p) == pytest.approx(0.5)
    # ss_res = 0.25 + 0 + 1, ss_tot = 2
    assert r2(y, p) == pytest.approx(1 - 1.25 / 2)


def test_guard_cases():
    assert r2(np.ones(3), np.array([1.0, 2.0, 3.0])) is None
    assert f1(np.zeros(4, int), np.zeros(4, int)) == 0.0
    with pytest.raises(ValueError):
        mae([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        metrics([1], [1], "nope")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_classification_metrics_bounded(pairs):
    y, p = np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])
    for v in (accuracy(y, p), f1(y, p)):
        assert 0.0 <= v <= 1.0 and not math.isnan(v)


# sweep


def _manifest(n, seed=0):
    rng = np.random.default_rng(seed)
    health = rng.uniform(size=n)
    entries = [ManifestEntry(1000 + i, 0, float(20 * h - 18 + rng.normal()), int(h < 0.4), float(h)) for i, h in enumerate(health)]
    emb = np.column_stack([health + 0.05 * rng.normal(size=n), rng.normal(size=(n, 3))])
    return DatasetManifest(entries), np.arange(1000, 1000 + n), emb


def test_sweep_reproducible_bytes(tmp_path):
    man, ids, emb = _manifest(60)
    cfg = EvalConfig(ratios=(0.5,), repeats=2, svc_epochs=200)
    downstream_sweep(ids, emb, man, cfg).write_csv(tmp_path / "a.csv")
    downstream_sweep(ids, emb, man, cfg).write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rep = read_report(tmp_path / "a.csv")
    assert len(rep.rows) == 4


def test_sweep_row_structure_and_ranges():
    man, ids, emb = _manifest(80, 1)
    cfg = EvalConfig(ratios=(0.3, 0.7), repeats=3, svc_epochs=300)
    rep = downstream_sweep(ids[::-1], emb[::-1], man, cfg)
    assert len(rep.task_rows()) == 2 * 2
    for r in rep.rows:
        assert r["n"] == 3
        if r["metric"] in ("acc", "f1"):
            assert 0 <= r["mean"] <= 1
        if r["metric"] == "mae":
            assert r["mean"] >= 0
        if r["metric"] == "r2":
            assert r["mean"] <= 1
    # the embedding carries the latent, so both probes do well
    assert rep.get("md", 0.7, "r2")["mean"] > 0.8
    assert rep.get("glaucoma", 0.7, "acc")["mean"] > 0.85


def test_sweep_missing_ids():
    man, ids, emb = _manifest(10)
    with pytest.raises(KeyError):
        downstream_sweep(ids[:-1], emb[:-1], man, EvalConfig(ratios=(0.5,), repeats=1))


def test_report_undefined_round_trip(tmp_path):
    rep = MetricsReport([{"method": "m", "task": "md", "ratio": 0.5, "metric": "r2", "mean": None, "std": None, "n": 0}])
    rep.write_csv(tmp_path / "r.csv")
    assert "undefined" in (tmp_path / "r.csv").read_text()
    assert read_report(tmp_path / "r.csv").rows == rep.rows


def test_eval_config_validation():
    for bad in (EvalConfig(ratios=(0.0,)), EvalConfig(ratios=(1.0,)), EvalConfig(repeats=0)):
        with pytest.raises(ValueError):
            bad.validate()


# correlation


def test_pearson_symmetric_unit_diagonal():
    v = np.random.default_rng(0).normal(size=(5, 30))
    c, undefined = pearson_matrix(v)
    assert not undefined
    assert np.max(np.abs(c - c.T)) <= 1e-12
    assert np.all(np.diag(c) == 1.0)
    assert np.allclose(c, np.corrcoef(v), atol=1e-12)


def test_pearson_flags_constant_rows(tmp_path):
    v = np.vstack([np.ones(5), np.arange(5.0), np.arange(5.0) ** 2])
    c, undefined = pearson_matrix(v)
    assert undefined == [0]
    assert np.isnan(c[0, 1]) and c[1, 2] > 0.9
    write_matrix_csv(tmp_path / "c.csv", [7, 8, 9], c)
    assert "undefined" in (tmp_path / "c.csv").read_text()
