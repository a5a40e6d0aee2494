import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ntm_lab import autodiff as ad
from ntm_lab.autodiff import Parameter, Tape, backward
from ntm_lab.ntm import NtmConfig
from ntm_lab.tasks import TaskConfig, gen_copy, collate
from ntm_lab.training import (
    AdamState, EmptyMaskError, NonFiniteError, TrainConfig, Trainer, adam_step, bits_per_sequence,
    clip_by_global_norm, evaluate, masked_bce_loss, train,
)

TINY_NTM = NtmConfig(N=8, W=4, controller_units=16)
TINY_TASK = TaskConfig("copy", bits=3, len_range=(1, 3))


def tiny_cfg(**kw):
    base = dict(task=TINY_TASK, ntm=TINY_NTM, batch_size=4, total_steps=20, eval_every=10, eval_examples=16)
    base.update(kw)
    return TrainConfig(**base)


def checksum(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


# -- loss -----------------------------------------------------------------

def test_zero_logits_give_ln2():
    y = np.random.default_rng(0).integers(0, 2, (2, 5, 3)).astype(float)
    loss = masked_bce_loss(np.zeros((2, 5, 3)), y, np.ones((2, 5)))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_saturated_correct_logits_give_tiny_loss():
    y = np.random.default_rng(1).integers(0, 2, (2, 5, 3)).astype(float)
    assert masked_bce_loss(np.where(y == 1, 20.0, -20.0), y, np.ones((2, 5))).item() < 1e-8


def test_masked_step_contributes_nothing():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(1, 4, 3))
    y = rng.integers(0, 2, (1, 4, 3)).astype(float)
    mask = np.array([[1.0, 0.0, 1.0, 1.0]])
    z2 = z.copy()
    z2[0, 1] = 1e3  # garbage on the masked step
    assert masked_bce_loss(z, y, mask).item() == masked_bce_loss(z2, y, mask).item()
    p = Parameter(z, "z")
    with Tape() as tape:
        loss = masked_bce_loss(p, y, mask)
    assert not backward(tape, loss, [p])["z"][0, 1].any()


def test_loss_matches_direct_formula():
    rng = np.random.default_rng(3)
    z = rng.normal(scale=4, size=(3, 6, 2))
    y = rng.integers(0, 2, z.shape).astype(float)
    mask = rng.integers(0, 2, (3, 6)).astype(float)
    mask[0, 0] = 1
    s = 1 / (1 + np.exp(-z))
    per = -(y * np.log(s) + (1 - y) * np.log(1 - s))
    ref = (per * mask[..., None]).sum() / (mask.sum() * 2)
    assert masked_bce_loss(z, y, mask).item() == pytest.approx(ref, rel=1e-12)


def test_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        masked_bce_loss(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), np.zeros((1, 3)))


def test_loss_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        masked_bce_loss(np.zeros((1, 3, 2)), np.zeros((1, 3, 3)), np.ones((1, 3)))


# -- bits per sequence ------------------------------------------------------

def test_perfect_prediction_has_zero_bits():
    y = np.random.default_rng(4).integers(0, 2, (4, 5, 3)).astype(float)
    assert bits_per_sequence(np.where(y == 1, 1.0, -1.0), y, np.ones((4, 5))) == 0.0


def test_one_wrong_bit_in_batch_of_four():
    y = np.random.default_rng(5).integers(0, 2, (4, 5, 3)).astype(float)
    z = np.where(y == 1, 1.0, -1.0)
    z[2, 3, 1] *= -1
    assert bits_per_sequence(z, y, np.ones((4, 5))) == 0.25


def test_zero_logits_count_against_zero_targets():
    y = np.array([[[0.0, 1.0, 0.0, 1.0]]])
    assert bits_per_sequence(np.zeros_like(y), y, np.ones((1, 1))) == 2.0


def test_bits_ignore_masked_steps():
    y = np.zeros((1, 2, 3))
    z = np.ones((1, 2, 3))
    assert bits_per_sequence(z, y, np.array([[1.0, 0.0]])) == 3.0


# -- clipping -------------------------------------------------------------

def test_small_norm_unchanged():
    g = {"a": np.array([6.0, 8.0])}
    np.testing.assert_array_equal(clip_by_global_norm(g)["a"], g["a"])


def test_boundary_norm_is_inclusive():
    g = {"a": np.array([30.0, 40.0])}
    np.testing.assert_array_equal(clip_by_global_norm(g, 50.0)["a"], [30.0, 40.0])


def test_norm_100_is_halved():
    g = {"a": np.array([60.0]), "b": np.array([[80.0, 0.0]])}
    out = clip_by_global_norm(g, 50.0)
    np.testing.assert_allclose(out["a"], [30.0])
    np.testing.assert_allclose(out["b"], [[40.0, 0.0]])


def test_non_finite_gradient_names_parameter():
    g = {"ok": np.ones(2), "bad": np.array([1.0, np.nan])}
    with pytest.raises(NonFiniteError) as info:
        clip_by_global_norm(g, 50.0, step=7)
    assert info.value.name == "bad" and info.value.step == 7
    assert info.value.record()["name"] == "bad"


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)),
       st.floats(0.1, 100))
def test_clipped_norm_never_exceeds_bound(g, max_norm):
    out = clip_by_global_norm({"g": g}, max_norm)
    assert np.sqrt((out["g"] ** 2).sum()) <= max_norm + 1e-9


# -- Adam -----------------------------------------------------------------

def adam_oracle(p, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written from the recurrence with plain floats."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


def test_adam_first_step_example():
    p = Parameter([1.0], "p")
    adam_step({"p": p}, {"p": np.array([4.0])}, AdamState.for_params({"p": p}), lr=1e-3)
    assert p.data[0] == pytest.approx(0.999, abs=1e-9)


def test_adam_zero_gradient_keeps_params():
    p = Parameter([1.0, -2.0], "p")
    state = AdamState.for_params({"p": p})
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 1


def test_adam_five_steps_on_square_match_oracle():
    p = Parameter([1.0], "p")
    state = AdamState.for_params({"p": p})
    got = []
    for _ in range(5):
        with Tape() as tape:
            loss = ad.sum_(p * p)
        adam_step({"p": p}, backward(tape, loss, [p]), state, lr=1e-3)
        got.append(p.data[0])
    np.testing.assert_allclose(got, adam_oracle(1.0, lambda x: 2 * x, 5), rtol=0, atol=1e-12)
    assert all(v.min() >= 0 for v in state.v.values())


def test_adam_shape_mismatch_rejected():
    p = Parameter([1.0], "p")
    with pytest.raises(ad.ShapeError):
        adam_step({"p": p}, {"p": np.zeros(2)}, AdamState.for_params({"p": p}))


# -- config, loop and evaluation -------------------------------------------

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.max_grad_norm, cfg.batch_size, cfg.eval_every, cfg.eval_examples) == \
        (1e-3, 50.0, 32, 200, 640)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(eval_every=30, total_steps=20),
                                dict(model="gru"), dict(max_grad_norm=0)])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        tiny_cfg(**kw)


def test_lr_zero_leaves_params_identical():
    trainer = Trainer(tiny_cfg(learning_rate=0.0))
    before = checksum(trainer.params)
    trainer.train_step()
    assert checksum(trainer.params) == before


def test_evaluate_is_pure_and_deterministic():
    trainer = Trainer(tiny_cfg())
    trainer.train_step()
    before = checksum(trainer.params)
    adam_before = {k: v.copy() for k, v in trainer.adam.m.items()}
    a = evaluate(trainer.model, TINY_TASK, 40, seed=3)
    b = evaluate(trainer.model, TINY_TASK, 40, seed=3)
    assert a == b
    assert checksum(trainer.params) == before
    assert all(np.array_equal(adam_before[k], trainer.adam.m[k]) for k in adam_before)


def test_evaluate_chunking_does_not_change_result():
    model = Trainer(tiny_cfg()).model
    a = evaluate(model, TINY_TASK, 30, seed=1, chunk=7)
    b = evaluate(model, TINY_TASK, 30, seed=1, chunk=30)
    assert a[1] == b[1]
    assert a[0] == pytest.approx(b[0], rel=1e-12)


def test_zero_output_model_scores_ln2():
    class Zero:
        def forward(self, inputs, rng=None):
            return ad.Tensor(np.zeros(inputs.shape[:2] + (TINY_TASK.output_dim,)))

    loss, _ = evaluate(Zero(), TINY_TASK, 64)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_single_eval_point():
    result = train(tiny_cfg(total_steps=200, eval_every=200, batch_size=2, eval_examples=8))
    assert len(result.curve) == 1 and result.curve[0].step == 200 and result.ok


def test_same_seed_runs_are_identical():
    a, b = train(tiny_cfg()), train(tiny_cfg())
    assert [(p.step, p.val_loss, p.val_bits_per_seq) for p in a.curve] == \
        [(p.step, p.val_loss, p.val_bits_per_seq) for p in b.curve]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = train(tiny_cfg(seed=1))
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


@pytest.mark.parametrize("scheme", ["constant", "learned", "random"])
def test_every_scheme_trains_finitely(scheme):
    cfg = tiny_cfg(ntm=NtmConfig(N=8, W=4, controller_units=16, init_scheme=scheme))
    result = train(cfg)
    assert result.ok and len(result.curve) == 2
    assert all(np.isfinite(v).all() for v in result.params.values())


def test_lstm_baseline_trains():
    result = train(tiny_cfg(model="lstm", lstm_units=8, lstm_layers=2))
    assert result.ok and result.curve[-1].val_bits_per_seq >= 0


def test_stop_when_ends_run_early():
    trainer = Trainer(tiny_cfg(total_steps=40))
    result = trainer.run(stop_when=lambda point: point.step >= 10)
    assert result.steps == 10 and len(result.curve) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_parameter_aborts_with_record():
    trainer = Trainer(tiny_cfg())
    name = next(iter(trainer.params))
    trainer.params[name].data[...] = np.nan
    result = trainer.run()
    assert not result.ok
    assert result.failure["step"] == 1


def test_overfits_a_fixed_batch():
    cfg = tiny_cfg(learning_rate=1e-2, batch_size=4)
    trainer = Trainer(cfg)
    rng = np.random.default_rng(0)
    batch = collate([gen_copy(TINY_TASK, rng) for _ in range(4)])
    losses = [trainer.train_step(batch) for _ in range(500)]
    assert losses[49] < losses[0]
    assert min(losses) < 0.01
