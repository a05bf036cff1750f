import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcnn.config import AugmentationPolicy, NetworkConfig, RunConfig, Schedule
from hcnn.data import standardize_pair, synth_dataset
from hcnn.errors import NumericError
from hcnn.model import (buffer_shapes, calibrate_buffers, forward, init_buffers, init_params,
                        param_shapes, predict)
from hcnn.nn import softmax_cross_entropy
from hcnn.tensor import translate
from hcnn.train import (OptimizerState, StaleActivationsError, augment, backward, evaluate,
                        sgd_step, train)
from oracles import central_difference

NO_AUG = AugmentationPolicy(enabled=False)


# --- optimizer ----------------------------------------------------------------

def _one(v):
    return {"w": np.array([float(v)])}


def test_sgd_zero_gradient_no_decay_is_identity():
    params = {"w": np.array([1.0, -2.0])}
    state = OptimizerState.zeros(params, lr=0.1, weight_decay=0.0)
    new, _ = sgd_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(new["w"], params["w"])


def test_sgd_single_step():
    state = OptimizerState.zeros(_one(1), lr=0.1, weight_decay=0.0)
    new, state = sgd_step(_one(1), _one(1), state)
    assert new["w"][0] == pytest.approx(0.9)
    assert state.velocity["w"][0] == pytest.approx(-0.1)


def test_sgd_velocity_accumulates():
    params, state = _one(1), OptimizerState.zeros(_one(1), lr=0.1, weight_decay=0.0)
    for _ in range(2):
        params, state = sgd_step(params, _one(1), state)
    assert state.velocity["w"][0] == pytest.approx(-0.1 * (1 + 0.9))


def test_sgd_weight_decay_term():
    state = OptimizerState.zeros(_one(2), lr=0.5, weight_decay=2e-4)
    new, state = sgd_step(_one(2), _one(0), state)
    assert state.velocity["w"][0] == pytest.approx(-0.5 * 2e-4 * 2)
    assert new["w"][0] == pytest.approx(2 - 0.5 * 2e-4 * 2)


def test_weight_decay_touches_every_parameter_and_no_buffer():
    cfg = NetworkConfig.toy()
    params = init_params(cfg, np.random.default_rng(0), np.float64)
    params = {k: v + 1.0 for k, v in params.items()}  # no zeros
    state = OptimizerState.zeros(params, lr=0.1)
    new, _ = sgd_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state)
    assert set(new) == set(param_shapes(cfg))
    assert not set(new) & set(buffer_shapes(cfg))
    for k in params:
        assert np.all(np.abs(new[k]) < np.abs(params[k])), k


def test_sgd_does_not_mutate_inputs():
    params = _one(1)
    state = OptimizerState.zeros(params, lr=0.1)
    sgd_step(params, _one(1), state)
    assert params["w"][0] == 1.0 and state.velocity["w"][0] == 0.0


# --- backward -----------------------------------------------------------------

def _toy_batch(seed=0, cfg=None, n=2):
    cfg = cfg or NetworkConfig.toy()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, np.float64)
    params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in params.items()}
    x = rng.standard_normal((n, cfg.N, cfg.N, 3))
    y = rng.integers(0, cfg.num_classes, n)
    return cfg, params, x, y


def test_backward_scale_doubles_gradients():
    cfg, params, x, y = _toy_batch()
    acts = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
    _, g1 = backward(acts, params, cfg, y)
    _, g2 = backward(acts, params, cfg, y, scale=2.0)
    assert list(g1) == list(param_shapes(cfg))
    for k in g1:
        np.testing.assert_array_equal(g2[k], 2 * g1[k])


def test_backward_rejects_stale_activations():
    cfg, params, x, y = _toy_batch()
    acts = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
    new, _ = sgd_step(params, backward(acts, params, cfg, y)[1], OptimizerState.zeros(params, 0.1))
    with pytest.raises(StaleActivationsError):
        backward(acts, new, cfg, y)


@pytest.mark.parametrize("variant", ["standard", "plus"])
@pytest.mark.parametrize("boundary", ["periodic", "zero"])
def test_backward_matches_finite_differences_sampled(variant, boundary):
    cfg = NetworkConfig.toy(variant=variant, boundary=boundary)
    cfg, params, x, y = _toy_batch(1, cfg)

    def loss():
        acts = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
        return softmax_cross_entropy(acts.logits, y)[0]

    acts = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
    _, grads = backward(acts, params, cfg, y)
    rng = np.random.default_rng(2)
    for name, g in grads.items():
        idx = rng.choice(g.size, min(3, g.size), replace=False)
        num = central_difference(loss, params[name], indices=idx)
        for i in idx:
            ana = g.reshape(-1)[i]
            assert abs(num[int(i)] - ana) <= 1e-5 * max(1.0, abs(ana)), name


def test_unreachable_taps_have_zero_gradient():
    # a 1x1 image with zero padding only ever meets the centre spatial tap
    cfg = NetworkConfig(J=6, K=8, Q=4, N=1, attribute_support=(3, 5), stride_depths=(4,))
    cfg, params, x, y = _toy_batch(3, cfg, n=3)
    acts = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
    _, grads = backward(acts, params, cfg, y)
    mask = np.ones((3, 3), bool)
    mask[1, 1] = False
    for name in ["w1", "w2"] + [f"h{j}" for j in range(3, cfg.J)]:
        assert np.all(grads[name][mask] == 0), name
        assert np.any(grads[name][1, 1] != 0), name


def test_backward_from_spliced_depth():
    cfg, params, x, y = _toy_batch(4)
    full = forward(x, params, cfg, init_buffers(cfg, np.float64), training=True)
    part = forward(full.xs[3], params, cfg, init_buffers(cfg, np.float64), training=True, start=3)
    _, g_full = backward(full, params, cfg, y)
    _, g_part = backward(part, params, cfg, y)
    assert set(g_part) == {k for k in g_full if k[-1].isdigit() and int(k.lstrip("whgbetamma")) > 3}
    for k in g_part:
        np.testing.assert_allclose(g_part[k], g_full[k], rtol=1e-12)


# --- augmentation -------------------------------------------------------------

def test_augment_disabled_or_trivial_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 6, 6, 3))
    assert augment(x, NO_AUG, np.random.default_rng(0)) is x
    still = AugmentationPolicy(max_shift=0, flip_prob=0.0)
    np.testing.assert_array_equal(augment(x, still, np.random.default_rng(0)), x)
    flip = AugmentationPolicy(max_shift=0, flip_prob=1.0)
    np.testing.assert_array_equal(augment(x, flip, np.random.default_rng(0)), x[:, :, ::-1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 7), st.floats(0, 1))
def test_augment_is_zero_fill_shift_then_flip(seed, max_shift, p):
    x = np.random.default_rng(seed).standard_normal((4, 6, 6, 3))
    policy = AugmentationPolicy(max_shift=max_shift, flip_prob=p)
    got = augment(x, policy, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(4, 2))
    flips = rng.random(4) < p
    for i in range(4):
        want = translate(translate(x[i], 0, shifts[i, 0], "zero"), 1, shifts[i, 1], "zero")
        if flips[i]:
            want = want[:, ::-1]
        np.testing.assert_array_equal(got[i], want)


# --- training loop ------------------------------------------------------------

def _easy(n=200, size=8, seed=0):
    train_set, test_set = standardize_pair(synth_dataset("easy", n, seed, 10, size),
                                           synth_dataset("easy", 100, seed + 1, 10, size, "test"))
    return train_set, test_set


def test_easy_set_is_memorized_quickly():
    train_set, test_set = _easy()
    run = RunConfig(network=NetworkConfig.toy(), schedule=Schedule(lr=0.05, epochs=100),
                    augmentation=NO_AUG)
    result = train(train_set, test_set, run, progress=lambda r: r["train_acc"] == 1.0)
    assert result.records[-1]["train_acc"] == 1.0
    assert result.model.step < 300
    # running averages lag after so few steps; recalibrate before evaluating
    model = result.model
    model.buffers = calibrate_buffers(train_set.images, model.params, model.config)
    acc, _ = evaluate(model, train_set)
    assert acc >= 0.99


def test_loss_decreases_over_first_steps_for_most_seeds():
    monotone = 0
    for seed in range(10):
        train_set, _ = standardize_pair(synth_dataset("gratings", 50, seed, 10, 8))
        run = RunConfig(network=NetworkConfig.toy(), seed=seed, augmentation=NO_AUG,
                        schedule=Schedule(lr=0.05, epochs=11, batch_size=50))
        losses = np.array(train(train_set, None, run).step_losses)
        assert np.all(np.isfinite(losses))
        monotone += bool(np.all(np.diff(losses) <= 0))
    assert monotone >= 9


def test_non_finite_loss_aborts_with_step():
    train_set, _ = _easy(20)
    train_set.images[3, 0, 0, 0] = np.nan
    run = RunConfig(network=NetworkConfig.toy(), schedule=Schedule(epochs=1, batch_size=10),
                    augmentation=NO_AUG)
    with pytest.raises(NumericError, match="step 0"):
        train(train_set, None, run)


def test_training_is_byte_reproducible(tmp_path):
    train_set, test_set = _easy(60)
    run = RunConfig(network=NetworkConfig.toy(), schedule=Schedule(lr=0.05, epochs=2,
                                                                   batch_size=20))
    outs = []
    for name in ("a", "b"):
        train(train_set, test_set, run, str(tmp_path / name))
        outs.append(((tmp_path / name / "checkpoint.hcnn").read_bytes(),
                     (tmp_path / name / "metrics.jsonl").read_bytes()))
    assert outs[0] == outs[1]
    other = train(train_set, test_set, RunConfig(network=run.network, schedule=run.schedule, seed=1))
    assert other.step_losses != train(train_set, test_set, run).step_losses


def test_metrics_log_and_checkpoints(tmp_path):
    train_set, test_set = _easy(40)
    run = RunConfig(network=NetworkConfig.toy(), schedule=Schedule(lr=0.05, epochs=3,
                                                                   batch_size=20),
                    checkpoint_every=2, log_wall_time=True)
    result = train(train_set, test_set, run, str(tmp_path))
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1, 2]
    assert set(lines[0]) == {"epoch", "step", "lr", "train_loss", "train_acc", "test_acc",
                             "wall_ms"}
    assert lines[-1]["step"] == 6 == result.model.step
    acc, preds = evaluate(result.model, test_set)
    assert acc == lines[-1]["test_acc"]
    assert np.array_equal(preds, predict(test_set.images, result.model.params, run.network,
                                         result.model.buffers)[0])


def test_schedule_rate_and_max_steps():
    sched = Schedule()
    assert [sched.rate(e) for e in (0, 39, 40, 80, 239)] == pytest.approx(
        [0.25, 0.25, 0.025, 0.0025, 0.25e-5])
    train_set, _ = _easy(40)
    run = RunConfig(network=NetworkConfig.toy(), schedule=Schedule(epochs=10, batch_size=10,
                                                                   max_steps=6))
    result = train(train_set, None, run)
    assert result.model.step == 6 and len(result.records) == 2
