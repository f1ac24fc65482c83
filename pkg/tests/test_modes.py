import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ambireg.errors import NumericError, ParameterError
from ambireg.geometry import Pose, pose_vector
from ambireg.modes import (Gmm, _em, _kmeanspp_resp, aic, detect_modes, fit_gmm, is_multimodal,
                           n_free_params)


def two_clusters(rng, n_each=2000, sep_sigma=10.0, sigma=0.1):
    direction = rng.normal(size=5)
    direction /= np.linalg.norm(direction)
    ma = rng.normal(size=5)
    mb = ma + sep_sigma * sigma * direction
    x = np.vstack([ma + sigma * rng.standard_normal((n_each, 5)),
                   mb + sigma * rng.standard_normal((n_each, 5))])
    return x, ma, mb, sigma


def lao_mixture(rng, lao_a, n=4096, sd=0.02):
    va = pose_vector(Pose(5.0, -3.0, 2.0, lao_a, 4.0))
    vb = pose_vector(Pose(5.0, -3.0, 2.0, lao_a + 180.0, 4.0))
    pick = rng.random(n) < 0.5
    return np.where(pick[:, None], va, vb) + sd * rng.standard_normal((n, 5))


def test_k1_closed_form(rng):
    x = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    g = fit_gmm(x, 1)
    mean = x.mean(axis=0)
    cov = (x - mean).T @ (x - mean) / len(x)
    assert np.max(np.abs(g.means[0] - mean)) < 1e-10
    assert np.max(np.abs(g.covariances[0] - cov)) < 1e-10
    assert g.weights.tolist() == [1.0]
    ref = -0.5 * np.sum(np.einsum("ij,jk,ik->i", x - mean, np.linalg.inv(cov), x - mean)) \
        - 0.5 * len(x) * (np.linalg.slogdet(cov)[1] + 5 * math.log(2 * math.pi))
    assert g.log_likelihood == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_two_cluster_recovery(seed):
    rng = np.random.default_rng(seed)
    x, ma, mb, sigma = two_clusters(rng)
    g = fit_gmm(x, 2, seed=seed)
    order = np.argsort([np.linalg.norm(m - ma) for m in g.means])
    assert np.linalg.norm(g.means[order[0]] - ma) < 0.1 * sigma
    assert np.linalg.norm(g.means[order[1]] - mb) < 0.1 * sigma
    assert np.all(np.abs(g.weights - 0.5) <= 0.02)
    assert abs(g.weights.sum() - 1.0) < 1e-12


def test_nesting_on_unimodal(rng):
    x = rng.standard_normal((2000, 5))
    g1, g2 = fit_gmm(x, 1), fit_gmm(x, 2)
    assert g2.log_likelihood >= g1.log_likelihood - 1e-8
    assert g2.log_likelihood - g1.log_likelihood < 30


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(50, 400))
def test_nesting_property(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5)) * rng.uniform(0.1, 2, size=5)
    if rng.random() < 0.5:
        x[: n // 3, 0] += rng.uniform(1, 6)
    assert fit_gmm(x, 2, seed).log_likelihood >= fit_gmm(x, 1, seed).log_likelihood - 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_em_monotone(seed):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(size=(300, 5)), rng.normal(loc=1.5, size=(200, 5))])
    g = _em(x, _kmeanspp_resp(x, 2, rng), tol=0.0, max_iter=60)
    trace = np.array(g.ll_trace)
    assert len(trace) > 2
    assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[1:]))


def test_covariance_floor(rng):
    x = rng.normal(size=(200, 5))
    x[:, 2] = 1.0
    g = fit_gmm(x, 1)
    assert np.linalg.eigvalsh(g.covariances[0]).min() >= 1e-6 * (1 - 1e-9)
    x = np.vstack([x, x + 5])
    g = fit_gmm(x, 2)
    for c in g.covariances:
        assert np.linalg.eigvalsh(c).min() >= 1e-6 * (1 - 1e-9)


def test_input_errors(rng):
    with pytest.raises(ParameterError):
        fit_gmm(rng.normal(size=(49, 5)), 1)
    with pytest.raises(ParameterError):
        fit_gmm(np.full((60, 5), np.nan), 1)
    with pytest.raises(ParameterError):
        fit_gmm(rng.normal(size=(60, 5)), 3)


def test_all_restarts_failing_raises(monkeypatch, rng):
    import ambireg.modes as modes

    def boom(*a, **k):
        raise NumericError("x")

    monkeypatch.setattr(modes, "_em", boom)
    with pytest.raises(NumericError):
        fit_gmm(rng.normal(size=(60, 5)), 2)


def test_parameter_counts_and_aic():
    assert n_free_params(1) == 20
    assert n_free_params(2) == 41
    g1 = Gmm(1, np.ones(1), np.zeros((1, 5)), np.eye(5)[None], -100.0)
    g2 = Gmm(2, np.full(2, 0.5), np.zeros((2, 5)), np.stack([np.eye(5)] * 2), -50.0)
    assert aic(g1, 10) == 240.0
    assert aic(g2, 10) == 182.0
    g1.log_likelihood = 7.5
    assert aic(g1) == 40 - 15.0


def test_decision_rule_oracle():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        a1, a2 = rng.normal(scale=5000, size=2)
        th = float(rng.choice([0.0, 2000.0, rng.uniform(0, 5000), math.inf]))
        if rng.random() < 0.1:
            a2 = a1 - th
        assert is_multimodal(a1, a2, th) is bool(a2 < a1 - th)


@settings(max_examples=200, deadline=None)
@given(a1=st.floats(-1e6, 1e6), a2=st.floats(-1e6, 1e6), th=st.floats(0, 1e5))
def test_decision_rule_property(a1, a2, th):
    assert is_multimodal(a1, a2, th) == (a2 < a1 - th)


def test_permutation_invariance(rng):
    x = lao_mixture(rng, 10.0, n=600, sd=0.05)
    a = detect_modes(x, threshold=50, seed=3)
    b = detect_modes(x[rng.permutation(len(x))], threshold=50, seed=3)
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.mode_vectors, b.mode_vectors)


def test_unimodal_gaussian_is_unimodal():
    rng = np.random.default_rng(4)
    x = pose_vector(Pose(1, 2, 3, 20, -5)) + 0.05 * rng.standard_normal((4096, 5))
    r = detect_modes(x, seed=0)
    assert r.label == "uni-modal"
    assert len(r.mode_poses) == 1 and r.mode_weights == [1.0]
    assert np.array_equal(r.mode_vectors[0], r.single_vector)
    assert r.aic2 >= r.aic1 - 2000


@pytest.mark.parametrize("lao", [-10.0, 0.0, 15.0, 60.0])
def test_flip_mixture_is_multimodal(lao):
    rng = np.random.default_rng(int(lao) + 100)
    r = detect_modes(lao_mixture(rng, lao), seed=1)
    assert r.label == "multi-modal"
    assert r.aic2 < r.aic1 - 2000
    laos = sorted(p.lao for p in r.mode_poses)
    assert abs(laos[0] - lao) < 2.0
    assert abs(laos[1] - (lao + 180.0)) < 2.0
    assert r.mode_weights[0] >= r.mode_weights[1]
    assert abs(sum(r.mode_weights) - 1.0) < 1e-12


def test_infinite_threshold_is_unimodal(rng):
    r = detect_modes(lao_mixture(rng, 5.0), threshold=math.inf)
    assert r.label == "uni-modal"
    assert r.single_pose == r.mode_poses[0]


def test_report_serializes(rng):
    import json
    r = detect_modes(lao_mixture(rng, 5.0))
    d = json.loads(json.dumps(r.to_dict()))
    assert set(d) == {"label", "aic1", "aic2", "threshold", "mode_poses", "mode_weights", "single_pose"}
    assert len(d["mode_poses"]) == 2
