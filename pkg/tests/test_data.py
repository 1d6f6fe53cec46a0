from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survflow import data as sd
from survflow.metrics import ks_distance


def test_weibull_sampler_law():
    s = sd.weibull_sample(1.5, 2.0, np.random.default_rng(0), 100_000)
    assert ks_distance(s, lambda t: sd.weibull_cdf(t, 1.5, 2.0)) < 1.63 / math.sqrt(1e5)


def test_weibull_cdf_values():
    assert abs(sd.weibull_cdf(2.0, 1.5, 2.0) - (1 - math.exp(-1))) < 1e-15
    assert sd.weibull_cdf(0.0, 3.0, 1.0) == 0.0


def test_generator_consistency_and_censoring_rate():
    spec = sd.SyntheticSpec(n=3000, d=10, beta_seed=0, censor_target=0.8)
    ds = sd.generate_synthetic(spec, np.random.default_rng(1), debug=True)
    assert len(ds) == 3000 and ds.n_features == 10
    np.testing.assert_array_equal(ds.time, np.minimum(ds.raw_t, ds.raw_c))
    np.testing.assert_array_equal(ds.event, (ds.raw_t <= ds.raw_c).astype(int))
    assert 0.78 <= ds.censoring_rate <= 0.82
    assert ds.X.min() >= 0 and ds.X.max() <= 1


def test_generator_deterministic():
    spec = sd.SyntheticSpec(n=50, d=3)
    a = sd.generate_synthetic(spec, np.random.default_rng(2))
    b = sd.generate_synthetic(sd.SyntheticSpec(n=50, d=3), np.random.default_rng(2))
    assert a.time.tobytes() == b.time.tobytes() and a.X.tobytes() == b.X.tobytes()


def test_single_component_conditional_mean():
    spec = sd.SyntheticSpec(d=4, p=1.0, censor_target=None)
    x = np.full(4, 0.5)
    T = sd.sample_event_times(spec, x, np.random.default_rng(3), m=40_000)[:, 0]
    a, b = spec.betas[0] @ x, spec.betas[1] @ x
    mean = b * math.gamma(1 + 1 / a)
    assert abs(T.mean() - mean) < 3 * T.std() / math.sqrt(T.size)


def test_event_survival_matches_samples():
    spec = sd.SyntheticSpec(d=3, censor_target=None)
    x = np.array([0.2, 0.9, 0.4])
    T = sd.sample_event_times(spec, x, np.random.default_rng(4), m=20_000)[:, 0]
    d = ks_distance(T, lambda t: 1 - sd.event_survival(spec, np.asarray(t)[:, None], x)[:, 0])
    assert d < 1.63 / math.sqrt(2e4)


@pytest.mark.parametrize("kw", [dict(d=0), dict(p=1.5), dict(betas=-np.ones((6, 2)), d=2),
                                dict(censor_target=1.0), dict(betas=np.ones((5, 2)), d=2)])
def test_invalid_spec(kw):
    with pytest.raises(sd.InvalidSpec):
        sd.SyntheticSpec(**kw)


def test_portfolio_covariates():
    X, labels, centers = sd.generate_portfolio_covariates(10, 200, np.random.default_rng(5))
    assert X.shape == (200, 10) and centers.shape == (10, 10)
    assert np.all(np.bincount(labels) == 20)
    within = np.concatenate([X[labels == k] - centers[k] for k in range(10)])
    assert abs(within.std() - 0.1) < 0.02
    X2, _, _ = sd.generate_portfolio_covariates(10, 200, np.random.default_rng(5))
    assert X.tobytes() == X2.tobytes()


def test_portfolio_center_spread():
    rng = np.random.default_rng(6)
    centers = np.concatenate([sd.generate_portfolio_covariates(10, 20, rng)[2] for _ in range(100)])
    # variance of U[0,1] is 1/12; 10^4 values give a standard error near 0.0008
    assert abs(centers.var() - 1 / 12) < 0.004


def test_csv_handcrafted(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("time,event,age,bp\n1.5,1,40,120.5\n2,0,55,130\n0.25,1,61,110\n")
    ds = sd.load_csv(p)
    np.testing.assert_array_equal(ds.time, [1.5, 2.0, 0.25])
    np.testing.assert_array_equal(ds.event, [1, 0, 1])
    np.testing.assert_array_equal(ds.X, [[40, 120.5], [55, 130], [61, 110]])
    assert ds.feature_names == ["age", "bp"]
    assert abs(ds.censoring_rate - 1 / 3) < 1e-15


def test_csv_round_trip_bitwise(tmp_path):
    ds = sd.generate_synthetic(sd.SyntheticSpec(n=40, d=3), np.random.default_rng(7), debug=True)
    p = tmp_path / "s.csv"
    sd.write_csv(ds, p, debug=True)
    back = sd.load_csv(p)
    assert back.time.tobytes() == ds.time.tobytes()
    assert back.X.tobytes() == ds.X.tobytes()
    assert back.event.tolist() == ds.event.tolist()
    q = tmp_path / "s2.csv"
    sd.write_csv(back, q)
    sd.write_csv(sd.load_csv(q), tmp_path / "s3.csv")
    assert q.read_bytes() == (tmp_path / "s3.csv").read_bytes()


@pytest.mark.parametrize("body,exc,row,col", [
    ("time,event,x\n1,2,3\n", sd.ParseError, 2, "event"),
    ("time,event,x\n1,1,3\n-1,0,2\n", sd.NonPositiveTime, 3, "time"),
    ("time,event,x\n1,1,abc\n", sd.ParseError, 2, "x"),
    ("time,event,x\n1,1\n", sd.ParseError, 2, None),
    ("time,x\n1,1\n", sd.MissingColumn, None, "event"),
])
def test_csv_errors(tmp_path, body, exc, row, col):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(exc) as info:
        sd.load_csv(p)
    assert info.value.row == row
    assert info.value.column == col


def test_split_partition_and_stratification():
    ds = sd.generate_synthetic(sd.SyntheticSpec(n=2000, d=3), np.random.default_rng(8))
    tr, va, te = sd.split(ds, 0.7, np.random.default_rng(9), valid_fraction=0.15)
    assert len(tr) + len(va) + len(te) == len(ds)
    assert len(set(tr.time) & set(te.time)) == 0 and len(set(tr.time) & set(va.time)) == 0
    for part in (tr, va, te):
        assert abs(part.censoring_rate - ds.censoring_rate) < 0.02
    tr2, _, _ = sd.split(ds, 0.7, np.random.default_rng(9), valid_fraction=0.15)
    assert tr.time.tobytes() == tr2.time.tobytes()


def test_split_empty_test():
    ds = sd.generate_synthetic(sd.SyntheticSpec(n=30, d=2), np.random.default_rng(10))
    tr, va, te = sd.split(ds, 1.0, np.random.default_rng(0))
    assert len(tr) == 30 and len(va) == 0 and len(te) == 0
    assert te.n_features == 2
    with pytest.raises(ValueError):
        sd.split(ds, 0.8, np.random.default_rng(0), valid_fraction=0.5)


def test_standardization_constant_column():
    ds = sd.Dataset(np.ones(3), np.ones(3), np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))
    mean, scale = ds.standardization()
    np.testing.assert_allclose(mean, [2.0, 5.0])
    np.testing.assert_allclose(scale, [math.sqrt(2 / 3), 1.0])


@settings(max_examples=30, deadline=None)
@given(shape=st.floats(0.3, 5.0), scale=st.floats(0.1, 10.0), seed=st.integers(0, 1000))
def test_weibull_sampler_positive_and_monotone_cdf(shape, scale, seed):
    s = sd.weibull_sample(shape, scale, np.random.default_rng(seed), 100)
    assert np.all(s > 0)
    c = sd.weibull_cdf(np.sort(s), shape, scale)
    assert np.all(np.diff(c) >= 0)
