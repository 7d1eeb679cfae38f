"""Risk estimators, variance experiment, firing-rate maps, early exit."""

import numpy as np
import pytest

from spikedistill.analysis import (
    ToyDistribution, bayes_distilled_risk, early_exit_eval, empirical_risk,
    population_risk, sfr_map, toy2_distribution, variance_experiment, write_pgm,
)
from spikedistill.network import NetworkSpec, StageSpec, build_network, strip_weak_classifier


def small_net(seed=0):
    spec = NetworkSpec(
        stages=[StageSpec((3,)), StageSpec((4,), pool=True), StageSpec((4,), pool=True)],
        input_channels=1, input_size=8, num_classes=4, attach_stage=1,
    )
    return build_network(spec, seed=seed)


# ---------------------------------------------------------------------------
# risk estimators


def test_empirical_risk_examples():
    assert empirical_risk([0], [[0.1, 0.9]]) == pytest.approx(0.1)
    assert empirical_risk([0, 1], [[0.0, 0.0], [0.0, 0.0]]) == 0.0
    # constant loss vector (ln L per class): label-independent
    lnl = float(np.log(3))
    assert empirical_risk([2, 0, 1], [[lnl] * 3] * 3) == pytest.approx(lnl)


def test_empirical_risk_validation():
    with pytest.raises(ValueError):
        empirical_risk([0, 1], [[0.1, 0.9]])
    with pytest.raises(ValueError):
        empirical_risk([2], [[0.1, 0.9]])


def test_distilled_risk_one_hot_equals_empirical():
    labels = np.array([0, 1, 1, 0])
    losses = np.array([[0.2, 0.8], [0.5, 0.1], [0.3, 0.4], [0.9, 0.0]])
    probs = np.eye(2)[labels]
    assert bayes_distilled_risk(probs, losses) == pytest.approx(empirical_risk(labels, losses))


def test_distilled_risk_uniform_probs_constant():
    c = np.array([0.4, 0.6, 0.2])
    losses = np.broadcast_to(c, (5, 3))
    probs = np.full((5, 3), 1.0 / 3.0)
    assert bayes_distilled_risk(probs, losses) == pytest.approx(c.mean())


def test_distilled_risk_validation():
    with pytest.raises(ValueError):
        bayes_distilled_risk([[0.5, 0.6]], [[1.0, 0.0]])  # not a probability row
    with pytest.raises(ValueError):
        bayes_distilled_risk([[0.5, 0.5]], [[1.0, 0.0], [0.0, 1.0]])


def test_toy2_population_risk():
    # contexts p* = (0.7, 0.3) and (0.2, 0.8), losses (1,0) and (0,1):
    # per-context risks 0.7 and 0.8, equal weights -> 0.75
    dist = toy2_distribution()
    losses = [[1.0, 0.0], [0.0, 1.0]]
    assert population_risk(dist, losses) == pytest.approx(0.75)
    assert bayes_distilled_risk(dist.class_probs, losses) == pytest.approx(0.75)


def test_toy_distribution_validation():
    with pytest.raises(ValueError):
        ToyDistribution(class_probs=[[0.5, 0.6]], context_weights=[1.0])
    with pytest.raises(ValueError):
        ToyDistribution(class_probs=[[0.5, 0.5]], context_weights=[0.9])


# ---------------------------------------------------------------------------
# variance experiment


def test_variance_one_hot_estimators_coincide():
    dist = ToyDistribution(class_probs=[[1.0, 0.0], [0.0, 1.0]], context_weights=[0.5, 0.5])
    report = variance_experiment(dist, [[1.0, 0.0], [0.0, 1.0]], n=20, m=200, seed=0)
    assert report.variance_ratio == pytest.approx(1.0)
    assert report.empirical_mean == pytest.approx(report.distilled_mean)


def test_variance_reduction_and_consistency():
    report = variance_experiment(toy2_distribution(), [[1.0, 0.0], [0.0, 1.0]], n=50, m=2000, seed=1)
    assert report.variance_ratio < 0.9
    for mean, var in ((report.empirical_mean, report.empirical_var),
                      (report.distilled_mean, report.distilled_var)):
        se = np.sqrt(var / report.m)
        assert abs(mean - 0.75) < 3 * se


def test_variance_single_context_uniform_losses():
    # one context, deterministic labels: both estimators are the same constant
    dist = ToyDistribution(class_probs=[[1.0, 0.0]], context_weights=[1.0])
    report = variance_experiment(dist, [[0.3, 0.9]], n=10, m=50, seed=2)
    assert report.empirical_var == pytest.approx(0.0)
    assert report.variance_ratio == pytest.approx(1.0)


def test_variance_experiment_validation():
    with pytest.raises(ValueError):
        variance_experiment(toy2_distribution(), [[1.0, 0.0], [0.0, 1.0]], n=1, m=10)


def test_risk_report_csv_rows():
    report = variance_experiment(toy2_distribution(), [[1.0, 0.0], [0.0, 1.0]], n=10, m=20, seed=3)
    rows = list(report.csv_rows())
    assert rows[0] == ("estimator", "mean", "variance")
    assert {r[0] for r in rows[1:]} == {"empirical", "distilled", "variance_ratio", "population_risk"}


# ---------------------------------------------------------------------------
# firing-rate maps


def test_sfr_zero_input_zero_map():
    net = small_net()
    x = np.zeros((4, 1, 8, 8), dtype=np.float32)
    rate_map, mean_rate = sfr_map(net, x, 3, stage=0)
    assert rate_map.shape == (8, 8)
    assert np.all(rate_map == 0.0)
    assert mean_rate == 0.0


def test_sfr_bounds_and_permutation_invariance():
    net = small_net(seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 1, 8, 8)).astype(np.float32)
    map_a, rate_a = sfr_map(net, x, 2, stage=1)
    assert map_a.min() >= 0.0 and map_a.max() <= 1.0
    perm = rng.permutation(6)
    map_b, rate_b = sfr_map(net, x[perm], 2, stage=1)
    np.testing.assert_allclose(map_a, map_b, atol=1e-6)
    assert rate_a == pytest.approx(rate_b)


def test_sfr_invalid_stage():
    net = small_net()
    with pytest.raises(ValueError):
        sfr_map(net, np.zeros((2, 1, 8, 8), dtype=np.float32), 1, stage=3)


def test_write_pgm(tmp_path):
    path = tmp_path / "map.pgm"
    write_pgm(path, np.array([[0.0, 0.5], [1.0, 0.25]]))
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert data[-4:] == bytes([0, 128, 255, 64])


# ---------------------------------------------------------------------------
# early exit


def eval_dataset(n=16, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 4, n)
    return x, y


def test_early_exit_thresholds():
    net = small_net(seed=2)
    dataset = eval_dataset()
    full, weak, blended, frac = early_exit_eval(net, dataset, 2, confidence_threshold=1.01)
    assert blended == full and frac == 0.0
    full0, weak0, blended0, frac0 = early_exit_eval(net, dataset, 2, confidence_threshold=0.0)
    assert blended0 == weak0 and frac0 == 1.0
    assert full0 == full and weak0 == weak


def test_early_exit_no_threshold():
    net = small_net(seed=3)
    full, weak, blended, frac = early_exit_eval(net, eval_dataset(), 2)
    assert blended == full and frac == 0.0


def test_early_exit_requires_weak_head():
    net = strip_weak_classifier(small_net())
    with pytest.raises(ValueError):
        early_exit_eval(net, eval_dataset(), 2)
