import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rprm.models import Model, ModelConfig, ModelKind
from rprm.numerics import (
    NonFiniteError,
    OptimizerState,
    ParameterStore,
    adam_step,
    backward,
    checkpoint_bytes,
    clip_grad_norm,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from tests.helpers import random_sequence


def square(store, with_grad):
    x = store["x"]
    return float(np.sum(x * x)), ({"x": 2 * x} if with_grad else None)


def softmax_ce(store, with_grad):
    z = store["z"]
    m = z.max()
    logp = z - m - np.log(np.sum(np.exp(z - m)))
    loss = -logp[0]
    if not with_grad:
        return loss, None
    g = np.exp(logp)
    g[0] -= 1.0
    return loss, {"z": g}


def store_with(**slots):
    s = ParameterStore()
    for k, v in slots.items():
        s.add(k, v)
    return s


def test_backward_square():
    s = store_with(x=3.0)
    assert backward(square, s) == 9.0
    assert s.grads["x"] == 6.0


def test_backward_softmax_uniform_point():
    s = store_with(z=np.zeros(3))
    backward(softmax_ce, s)
    np.testing.assert_allclose(s.grads["z"], [-2 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_backward_accumulates():
    s = store_with(x=np.array([1.5, -2.0]))
    backward(square, s)
    once = s.grads["x"].copy()
    backward(square, s)
    np.testing.assert_array_equal(s.grads["x"], 2 * once)


def test_backward_names_non_finite():
    s = store_with(x=1.0)
    with pytest.raises(NonFiniteError, match="loss"):
        backward(lambda st, g: (float("nan"), {"x": np.zeros(())}), s)


def test_grad_check_quadratic_exact():
    rep = grad_check(square, store_with(x=1.0), h=1e-5)
    assert rep.max_rel_error["x"] < 1e-8


def test_grad_check_independent_slot_zero_error():
    s = store_with(x=2.0, unused=np.ones(3))
    rep = grad_check(square, s)
    assert rep.max_rel_error["unused"] == 0.0


def test_grad_check_detects_wrong_gradient():
    rep = grad_check(lambda st, g: (float(st["x"] ** 2), {"x": 3 * st["x"]} if g else None), store_with(x=1.0))
    assert not rep.ok


def test_grad_check_restores_values():
    s = store_with(x=np.array([0.3, -0.7]))
    before = s["x"].copy()
    grad_check(square, s)
    np.testing.assert_array_equal(s["x"], before)
    assert not s.grads["x"].any()


def test_rprm_two_review_gradient():
    rng = np.random.default_rng(0)
    seq = random_sequence(rng, 2, 10)
    model = Model.init(ModelConfig(ModelKind.RPRM, d=4, e=4, V=10), seed=0, scale=0.5)
    rep = grad_check(model.objective([seq]), model.store, fd_dtype=np.longdouble)
    assert rep.ok, rep.max_rel_error


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(list(ModelKind)))
def test_every_loss_matches_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    seqs = [random_sequence(rng, int(rng.integers(2, 5)), 6) for _ in range(2)]
    model = Model.init(ModelConfig(kind, d=3, e=2, V=6), seed=seed, scale=0.5)
    for name in model.store.names():
        x = model.store[name]
        x[...] = rng.uniform(-0.5, 0.5, x.shape)
    rep = grad_check(model.objective(seqs), model.store, fd_dtype=np.longdouble)
    assert rep.ok, rep.max_rel_error


def test_clip_grad_norm():
    s = store_with(a=np.zeros(2), b=0.0)
    s.grads["a"][:] = [3.0, 0.0]
    s.grads["b"][...] = 4.0
    assert clip_grad_norm(s, 1.0)
    assert s.grad_norm() == pytest.approx(1.0)
    assert not clip_grad_norm(s, 5.0)


# ------------------------------------------------------------------- Adam


def test_adam_first_step_is_lr_sign():
    s = store_with(x=np.array([1.0, 1.0, 1.0]))
    s.grads["x"][:] = [0.5, -3.0, 1e-3]
    opt = OptimizerState(lr=1e-3)
    adam_step(s, opt)
    np.testing.assert_allclose(s["x"] - 1.0, [-1e-3, 1e-3, -1e-3], rtol=1e-4)
    assert opt.step == 1
    assert not s.grads["x"].any()


def test_adam_zero_gradient_identity():
    s = store_with(x=np.array([0.2, -0.4]), y=1.5)
    before = {k: v.copy() for k, v in s.values.items()}
    opt = OptimizerState()
    for _ in range(5):
        adam_step(s, opt)
    for k in before:
        np.testing.assert_array_equal(s[k], before[k])


def test_adam_deterministic_trajectory():
    def run():
        s = store_with(x=np.array([1.0, -2.0, 0.5]))
        opt = OptimizerState(lr=0.05)
        traj = []
        for _ in range(20):
            backward(square, s)
            adam_step(s, opt)
            traj.append(s["x"].copy())
        return np.array(traj)

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()
    assert np.abs(a[-1]).max() < 1.5


def test_adam_non_finite_update_leaves_store():
    s = store_with(x=1.0, y=2.0)
    s.grads["y"][...] = np.nan
    with pytest.raises(NonFiniteError, match="y"):
        adam_step(s, OptimizerState())
    assert s["x"] == 1.0 and s["y"] == 2.0


# -------------------------------------------------------------- checkpoint


def test_checkpoint_byte_round_trip(tmp_path):
    model = Model.init(ModelConfig(ModelKind.RPRM, d=3, e=2, V=5), seed=1)
    opt = OptimizerState(lr=0.01)
    backward(model.objective([random_sequence(np.random.default_rng(1), 3, 5)]), model.store)
    adam_step(model.store, opt)
    save_checkpoint(tmp_path / "a.json", model.store, opt, {"k": 1})
    store, opt2, meta = load_checkpoint(tmp_path / "a.json")
    assert meta == {"k": 1}
    assert checkpoint_bytes(store, opt2, meta) == (tmp_path / "a.json").read_bytes()
    for k in model.store:
        np.testing.assert_array_equal(store[k], model.store[k])
    assert store.names() == model.store.names()


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.json")
