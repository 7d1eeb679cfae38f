"""Training loop: SGD rules, LR schedule, baseline reduction, determinism."""

import numpy as np
import pytest

import spikedistill.tensor as tz
from spikedistill.datasets import synth_dataset
from spikedistill.losses import DistillConfig, task_loss
from spikedistill.network import NetworkSpec, StageSpec, build_network, forward_timesteps
from spikedistill.training import (
    DivergenceError, MomentumState, TrainConfig, evaluate, lr_at, sgd_update,
    train_loop, train_step,
)
from spikedistill.tensor import ParamSet, Tape, Tensor

TOL = 1e-9


def tiny_spec():
    return NetworkSpec(
        stages=[StageSpec((3,)), StageSpec((4,), pool=True), StageSpec((4,), pool=True)],
        input_channels=1, input_size=8, num_classes=4, attach_stage=1,
    )


def bars_batch(n=8, seed=0):
    x, y = synth_dataset("bars", n, noise=0.05, seed=seed)
    return x, y


# ---------------------------------------------------------------------------
# config / schedule


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_lr_schedule():
    cfg = TrainConfig()  # lr 0.1, step 30, gamma 0.1
    assert abs(lr_at(0, cfg) - 0.1) < TOL
    assert abs(lr_at(29, cfg) - 0.1) < TOL
    assert abs(lr_at(30, cfg) - 0.01) < TOL
    assert abs(lr_at(65, cfg) - 0.001) < TOL
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


# ---------------------------------------------------------------------------
# sgd_update


def _one_param(value, grad, decay=True):
    params = ParamSet()
    t = params.add("p", Tensor(np.asarray(value, dtype=np.float64)), decay=decay)
    t.grad = np.asarray(grad, dtype=np.float64)
    return params, t


def test_sgd_plain_gradient_descent():
    params, t = _one_param([1.0, 2.0], [0.5, -0.5])
    sgd_update(params, MomentumState(params), lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(t.data, [0.95, 2.05], atol=TOL)


def test_sgd_zero_grad_no_motion():
    params, t = _one_param([1.0], [0.0])
    sgd_update(params, MomentumState(params), lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_allclose(t.data, [1.0], atol=TOL)


def test_sgd_two_steps_constant_grad():
    # v1 = g, v2 = mu*g + g; displacement = lr*g*(2 + mu)
    g, mu, lr = 0.4, 0.9, 0.05
    params, t = _one_param([1.0], [g])
    ms = MomentumState(params)
    sgd_update(params, ms, lr=lr, momentum=mu, weight_decay=0.0)
    t.grad = np.array([g])
    sgd_update(params, ms, lr=lr, momentum=mu, weight_decay=0.0)
    np.testing.assert_allclose(t.data, [1.0 - lr * g * (2 + mu)], atol=TOL)


def test_sgd_weight_decay_and_exclusion():
    # decay=True folds wd*param into the velocity; decay=False skips it
    params, t = _one_param([2.0], [0.0], decay=True)
    sgd_update(params, MomentumState(params), lr=0.1, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(t.data, [2.0 - 0.1 * 0.5 * 2.0], atol=TOL)
    params, t = _one_param([2.0], [0.0], decay=False)
    sgd_update(params, MomentumState(params), lr=0.1, momentum=0.0, weight_decay=0.5)
    np.testing.assert_allclose(t.data, [2.0], atol=TOL)


def test_bn_shift_tagged_no_decay():
    net = build_network(tiny_spec(), seed=0)
    assert not net.params.meta("stage0.conv0.bn.shift")["decay"]
    assert net.params.meta("stage0.conv0.bn.gamma")["decay"]


# ---------------------------------------------------------------------------
# baseline reduction


def test_baseline_reduction_matches_vanilla_step():
    # alpha=beta=0 with T_s=T_t must update exactly like a per-timestep-CE step
    x, y = bars_batch(8, seed=1)
    dc = DistillConfig(t_student=2, t_teacher=2, alpha=0.0, beta=0.0)
    tc = TrainConfig(lr=0.05, momentum=0.9, weight_decay=1e-4, epochs=1, batch_size=8)

    net_a = build_network(tiny_spec(), seed=5)
    train_step(net_a, (x, y), dc, tc, MomentumState(net_a.params), lr=tc.lr)

    net_b = build_network(tiny_spec(), seed=5)
    ms = MomentumState(net_b.params)
    net_b.params.zero_grad()
    with Tape():
        rec = forward_timesteps(net_b, x, 2, training=True, include_weak=False)
        loss = task_loss(rec.final_logits, y)
        tz.backward(loss, net_b.params)
    sgd_update(net_b.params, ms, tc.lr, tc.momentum, tc.weight_decay)

    for name, t in net_a.params.items():
        np.testing.assert_allclose(t.data, net_b.params[name].data, atol=TOL, err_msg=name)


# ---------------------------------------------------------------------------
# train_step behaviour


def test_overfit_single_batch():
    x, y = bars_batch(8, seed=2)
    net = build_network(tiny_spec(), seed=0)
    dc = DistillConfig(t_student=2, t_teacher=3)
    tc = TrainConfig(lr=0.05, momentum=0.0, weight_decay=0.0, epochs=1, batch_size=8)
    ms = MomentumState(net.params)
    losses = [train_step(net, (x, y), dc, tc, ms).total for _ in range(50)]
    assert losses[-1] < losses[0]
    assert min(losses[-5:]) < min(losses[:5])


def test_train_step_returns_breakdown():
    x, y = bars_batch(6, seed=3)
    net = build_network(tiny_spec(), seed=1)
    dc = DistillConfig(t_student=1, t_teacher=2, alpha=0.5, beta=0.25)
    bd = train_step(net, (x, y), dc, TrainConfig(epochs=1, batch_size=6), MomentumState(net.params), lr=0.01)
    assert abs(bd.total - (bd.task + 0.5 * bd.tsd + 0.25 * bd.ssd)) < 1e-5
    assert bd.tsd >= 0.0 and bd.ssd >= 0.0 and bd.task >= 0.0


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_detection():
    x, y = bars_batch(4, seed=4)
    net = build_network(tiny_spec(), seed=2)
    net.params["head.w"].data[:] = 1e20  # force an overflowing distillation term
    dc = DistillConfig(t_student=1, t_teacher=2)
    with pytest.raises(DivergenceError):
        train_step(net, (x, y), dc, TrainConfig(epochs=1, batch_size=4), MomentumState(net.params))


def test_weak_branch_skipped_when_unused():
    x, y = bars_batch(4, seed=5)
    net = build_network(tiny_spec(), seed=3)
    dc = DistillConfig(t_student=1, t_teacher=2, alpha=1.0, beta=0.0)
    before = net.params["weak.fc.w"].data.copy()
    train_step(net, (x, y), dc, TrainConfig(lr=0.1, weight_decay=0.0, epochs=1, batch_size=4),
               MomentumState(net.params))
    # no SSD term: weak parameters receive no gradient and (wd=0) do not move
    np.testing.assert_allclose(net.params["weak.fc.w"].data, before, atol=TOL)


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_memorized_sample():
    x, y = bars_batch(8, seed=6)
    net = build_network(tiny_spec(), seed=0)
    dc = DistillConfig(t_student=2, t_teacher=3)
    tc = TrainConfig(lr=0.05, weight_decay=0.0, epochs=1, batch_size=8)
    ms = MomentumState(net.params)
    for _ in range(60):
        train_step(net, (x, y), dc, tc, ms)
    acc, weak_acc = evaluate(net, (x, y), 2)
    assert acc == 1.0
    assert 0.0 <= weak_acc <= 1.0


def test_evaluate_runs_exactly_ts_steps():
    x, y = bars_batch(8, seed=7)
    net = build_network(tiny_spec(), seed=0)
    before = net.steps_executed
    evaluate(net, (x, y), 2)  # one batch of 8
    assert net.steps_executed - before == 2


def test_evaluate_empty_dataset():
    net = build_network(tiny_spec(), seed=0)
    with pytest.raises(ValueError):
        evaluate(net, (np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=int)), 1)


def test_evaluate_matches_stripped_network():
    from spikedistill.network import strip_weak_classifier
    x, y = bars_batch(12, seed=8)
    net = build_network(tiny_spec(), seed=4)
    acc, _ = evaluate(net, (x, y), 2)
    acc_stripped, weak = evaluate(strip_weak_classifier(net), (x, y), 2)
    assert acc == acc_stripped
    assert np.isnan(weak)


# ---------------------------------------------------------------------------
# full loop determinism


def _loop(seed):
    x, y = synth_dataset("bars", 24, noise=0.05, seed=9)
    xt, yt = synth_dataset("bars", 8, noise=0.05, seed=10)
    net = build_network(tiny_spec(), seed=seed)
    dc = DistillConfig(t_student=1, t_teacher=2)
    tc = TrainConfig(lr=0.05, epochs=3, batch_size=8, seed=seed)
    return train_loop(net, (x, y), (xt, yt), dc, tc)


def test_loop_determinism():
    rows_a = _loop(11)
    rows_b = _loop(11)
    assert len(rows_a) == len(rows_b) == 6  # train + test per epoch
    for ra, rb in zip(rows_a, rows_b):
        for f in ("epoch", "split", "task_loss", "tsd_loss", "ssd_loss", "total_loss",
                  "accuracy", "weak_accuracy"):
            va, vb = getattr(ra, f), getattr(rb, f)
            if isinstance(va, float) and np.isnan(va):
                assert np.isnan(vb)
            else:
                assert va == vb, f
