from __future__ import annotations

import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import finite_difference_check

from wpnav.errors import (BadMagic, ChecksumFail, DivergedTraining, NonFiniteGradient, NonFiniteInput,
                          NoRecordedForward, ShapeMismatch, VersionMismatch)
from wpnav.nncore import (MLP, AdamState, Dense, Parameter, Tensor, adam_apply, clip_grad_norm,
                          concat, dense_forward, global_grad_norm, load_checkpoint, minimum, no_grad,
                          orthogonal, read_checkpoint, save_checkpoint, softmax, take_rows,
                          write_checkpoint)
from wpnav.nncore.checkpoint import FORMAT_VERSION, MAGIC


def param(values, name="p"):
    return Parameter(np.array(values, dtype=np.float64), name=name)


# -- dense layers -----------------------------------------------------------------

def test_identity_layer_passes_input_through():
    x = np.array([0.3, -1.2, 4.0])
    out = dense_forward(x, param(np.eye(3)), param(np.zeros(3)), "identity")
    assert np.array_equal(out.data, x)


def test_scalar_tanh_layer():
    out = dense_forward(np.array([0.0]), param([[2.0]]), param([1.0]), "tanh")
    assert out.data[0] == pytest.approx(0.76159, abs=1e-5)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dense_forward(np.ones(4), param(np.ones((3, 2))), param(np.zeros(2)))


@pytest.mark.parametrize("activation", ["tanh", "relu", "sigmoid", "identity"])
def test_dense_jvp_matches_finite_differences(activation):
    rng = np.random.default_rng(0)
    W, b = param(rng.standard_normal((5, 4))), param(rng.standard_normal(4))
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    v = rng.standard_normal(5)
    h = 1e-5
    f = lambda xs: dense_forward(xs, W, b, activation).data
    fd = (f(x.data + h * v) - f(x.data - h * v)) / (2 * h)
    # analytic J v from the recorded backward: row i of J is d out_i / dx
    out = dense_forward(x, W, b, activation)
    jac = np.stack([out._backward(np.eye(4)[i])[0] for i in range(4)])
    jvp = jac @ v
    rel = np.abs(jvp - fd) / np.maximum(np.maximum(np.abs(jvp), np.abs(fd)), 1e-6)
    assert rel.max() <= 1e-6


def test_orthogonal_init():
    q = orthogonal(np.random.default_rng(0), 6, 4)
    assert np.allclose(q.T @ q, np.eye(4), atol=1e-12)
    q = orthogonal(np.random.default_rng(0), 4, 6, gain=2.0)
    assert np.allclose(q @ q.T, 4.0 * np.eye(4), atol=1e-12)


def test_relu_layers_use_sqrt2_gain():
    layer = Dense(8, 8, "relu", np.random.default_rng(0), "l")
    assert np.allclose(layer.weight.data.T @ layer.weight.data, 2.0 * np.eye(8), atol=1e-12)
    assert not layer.bias.data.any()


# -- softmax ----------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), 1 / 3, atol=1e-15)
    assert np.allclose(softmax([1.0, 2.0, 3.0]), [0.09003, 0.24473, 0.66524], atol=5e-6)
    ref = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert np.allclose(softmax([1.0, 2.0, 3.0]), ref, atol=1e-15)


@given(st.floats(-1e3, 1e3), st.floats(-20, 20))
def test_softmax_shift_invariance(c, k):
    assert np.allclose(softmax([c, c + k, c]), softmax([0.0, k, 0.0]), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
def test_softmax_normalizes(x):
    p = softmax(x)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


@pytest.mark.parametrize("bad", [[0.0, np.nan], [np.inf, 0.0], [-np.inf, 1.0]])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NonFiniteInput):
        softmax(bad)


# -- backward ---------------------------------------------------------------------

def test_sum_of_params_has_unit_gradients():
    a, b = param(np.ones((2, 3))), param(np.ones(4))
    (a.sum() + b.sum()).backward()
    assert np.all(a.grad == 1.0) and np.all(b.grad == 1.0)


def test_zero_times_network_has_zero_gradients():
    net = MLP([3, 5, 2], ["tanh", "identity"], np.random.default_rng(0), "n")
    (net(np.ones((4, 3))).sum() * 0.0).backward()
    assert all(not p.grad.any() for p in net.parameters())


def test_gradients_accumulate_until_zeroed():
    w = param([2.0])
    (w * w).sum().backward()
    (w * w).sum().backward()
    assert w.grad[0] == 8.0
    w.zero_grad()
    assert w.grad[0] == 0.0


def test_backward_without_forward():
    with pytest.raises(NoRecordedForward):
        Tensor(np.ones(3)).sum().backward()
    w = param([1.0])
    with no_grad():
        out = (w * 2.0).sum()
    with pytest.raises(NoRecordedForward):
        out.backward()


def test_shared_subgraph_gradient():
    w = param([3.0])
    y = w * w
    (y + y * 2.0).sum().backward()
    assert w.grad[0] == pytest.approx(18.0)


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.reshape(3, 2),
    "exp_log": lambda a, b: (a * a + 1.0).log() + (b * 0.1).exp() + (a * 0.5).expm1(),
    "pow": lambda a, b: (a * a + 1.0) ** 1.5,
    "tanh_sigmoid_relu": lambda a, b: a.tanh() + b.sigmoid() + (a - 0.1).relu(),
    "log_softmax": lambda a, b: a.log_softmax(axis=-1) * b[0],
    "softmax": lambda a, b: a.softmax(axis=-1) * b[1],
    "clip": lambda a, b: a.clip(-0.5, 0.5),
    "minimum": lambda a, b: minimum(a, b[:3]),
    "concat_index": lambda a, b: concat([a, b.reshape(2, 3)], axis=0)[1:3, :2],
    "reductions": lambda a, b: a.mean(axis=0) + b.sum(axis=0, keepdims=True),
    "take_rows": lambda a, b: take_rows(a, np.array([2, 0])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(1)
    a = param(rng.standard_normal((2, 3)), "a")
    b = param(rng.standard_normal(6) if name in ("matmul", "concat_index") else rng.standard_normal(3), "b")
    c = rng.standard_normal(OPS[name](a, b).shape)
    loss = lambda: float((OPS[name](a, b).data * c).sum())
    (OPS[name](a, b) * c).sum().backward()
    assert finite_difference_check(loss, [a, b]) <= 1e-6


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    net = MLP([4, 6, 5, 3], ["tanh", "relu", "sigmoid"], rng, "m")
    x, c = rng.standard_normal((7, 4)), rng.standard_normal((7, 3))
    (net(x) * c).sum().backward()
    assert finite_difference_check(lambda: float((net(x).data * c).sum()), net.parameters()) <= 1e-4


# -- Adam -------------------------------------------------------------------------

@given(st.floats(1e-3, 1e3), st.sampled_from([1e-3, 2.5e-4, 0.1]))
def test_adam_first_step_is_lr(g, lr):
    w = param([1.0])
    w.grad[0] = g
    adam_apply([w], AdamState(lr=lr))
    assert abs(abs(1.0 - w.data[0]) - lr) <= 0.01 * lr


def test_adam_zero_gradient():
    w = param([1.0, -2.0])
    state = AdamState()
    adam_apply([w], state)
    assert np.array_equal(w.data, [1.0, -2.0])
    assert state.t == 1
    adam_apply([w], state)
    assert state.t == 2
    assert state.m["p"].shape == w.shape


def test_adam_minimizes_square():
    w = param([1.0])
    state = AdamState(lr=0.1)
    for _ in range(100):
        (w * w).sum().backward()
        adam_apply([w], state)
    assert abs(w.data[0]) < 0.05
    assert not w.grad.any()


def test_adam_matches_reference_update():
    rng = np.random.default_rng(0)
    w = param(rng.standard_normal(5))
    ref = w.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState(lr=0.01)
    for t in range(1, 21):
        g = rng.standard_normal(5)
        w.grad[...] = g
        adam_apply([w], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(w.data, ref, rtol=1e-12, atol=1e-14)


def test_adam_rejects_non_finite_gradient():
    w = param([1.0])
    w.grad[0] = np.nan
    state = AdamState()
    with pytest.raises(NonFiniteGradient):
        adam_apply([w], state)
    assert state.t == 0 and w.data[0] == 1.0


def test_adam_detects_diverged_parameters():
    w = param([np.inf])
    w.grad[0] = 1.0
    with pytest.raises(DivergedTraining):
        adam_apply([w], AdamState())


def test_clip_grad_norm():
    a, b = param([0.0, 0.0]), param([0.0])
    a.grad[...] = [3.0, 0.0]
    b.grad[...] = [4.0]
    assert global_grad_norm([a, b]) == 5.0
    clip_grad_norm([a, b], 0.5)
    assert global_grad_norm([a, b]) == pytest.approx(0.5, rel=1e-12)


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        net = MLP([3, 8, 1], ["tanh", "identity"], rng, "d")
        x, y = rng.standard_normal((16, 3)), rng.standard_normal((16, 1))
        state = AdamState(lr=0.01)
        for _ in range(20):
            diff = net(x) - y
            (diff * diff).mean().backward()
            adam_apply(net.parameters(), state)
        return save_checkpoint(net.state_dict())
    assert run() == run()


# -- checkpoints ------------------------------------------------------------------

def sample_params():
    rng = np.random.default_rng(0)
    return {"layer.weight": rng.standard_normal((3, 4)), "layer.bias": rng.standard_normal(4),
            "scalar": np.array(2.5), "empty": np.zeros((0, 3))}


def test_checkpoint_round_trip(tmp_path):
    params = sample_params()
    blob = save_checkpoint(params, {"note": "x", "n": 3})
    loaded, meta = load_checkpoint(blob)
    assert meta == {"note": "x", "n": 3}
    assert set(loaded) == set(params)
    for k in params:
        assert loaded[k].shape == params[k].shape
        assert loaded[k].tobytes() == np.asarray(params[k], dtype=np.float64).tobytes()
    assert blob[:4] == MAGIC
    assert save_checkpoint(params, {"n": 3, "note": "x"}) == blob
    write_checkpoint(tmp_path / "c.nvc", params)
    assert set(read_checkpoint(tmp_path / "c.nvc")[0]) == set(params)


def test_truncated_checkpoint():
    blob = save_checkpoint(sample_params())
    for cut in (5, len(blob) // 2, len(blob) - 1):
        with pytest.raises(ChecksumFail):
            load_checkpoint(blob[:cut])


def test_corrupted_checkpoint():
    blob = bytearray(save_checkpoint(sample_params()))
    blob[40] ^= 0xFF
    with pytest.raises(ChecksumFail):
        load_checkpoint(bytes(blob))


def test_bad_magic(tmp_path):
    with pytest.raises(BadMagic):
        load_checkpoint(b"XXXX" + save_checkpoint({})[4:])
    with pytest.raises(BadMagic):
        read_checkpoint(tmp_path / "missing.nvc")
    with pytest.raises(BadMagic):
        load_checkpoint(b"")


def test_version_mismatch():
    blob = bytearray(save_checkpoint(sample_params())[:-4])
    struct.pack_into("<I", blob, 4, FORMAT_VERSION + 1)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with pytest.raises(VersionMismatch):
        load_checkpoint(bytes(blob))


def test_load_state_dict_checks_shapes():
    net = MLP([3, 4, 2], ["tanh", "identity"], np.random.default_rng(0), "s")
    state = net.state_dict()
    state["s.0.weight"] = np.zeros((4, 3))
    with pytest.raises(ShapeMismatch):
        net.load_state_dict(state)
    with pytest.raises(ShapeMismatch):
        net.load_state_dict({})


def test_finite_difference_helper_detects_wrong_gradient():
    w = param([1.0, 2.0])
    w.grad[...] = [0.0, 0.0]
    assert finite_difference_check(lambda: float((w.data ** 2).sum()), [w]) > 0.5
    assert math.isfinite(finite_difference_check(lambda: 0.0, [w]))


def test_adam_updates_every_parameter_of_widening_layers():
    net = MLP([3, 8, 16, 2], ["tanh", "relu", "identity"], np.random.default_rng(0), "w")
    before = net.state_dict()
    net(np.ones((4, 3))).sum().backward()
    adam_apply(net.parameters(), AdamState(lr=0.01))
    after = net.state_dict()
    for name in before:
        if name.endswith("weight"):
            assert not np.array_equal(before[name], after[name]), name
