import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hoivid.numerics import blob, gradcheck
from hoivid.numerics import tensor as T
from hoivid.numerics.optim import AdamWState, NonFiniteGradient, adamw_step
from hoivid.numerics.rng import split, stream
from hoivid.numerics.tensor import NonFiniteError, ShapeError, Tensor

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, np.eye(2)).data, a)


def test_softmax_uniform():
    assert np.allclose(T.softmax(np.zeros(3)).data, 1 / 3, atol=0, rtol=1e-15)


def test_layer_norm_constant_vector_is_zero():
    assert np.array_equal(T.layer_norm(np.full(6, 3.25)).data, np.zeros(6))


def test_grad_of_sum_is_ones():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones(3))


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.sum_(T.mul(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(T.square(x))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        T.matmul(np.ones((2, 3)), np.ones((4, 5)))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_grads_accumulate_across_sweeps():
    x = Tensor([1.5], requires_grad=True)
    T.sum_(T.scale(x, 3.0)).backward()
    T.sum_(T.scale(x, 3.0)).backward()
    assert x.grad[0] == 6.0


def test_grad_helper_leaves_dot_grad_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    x.grad = np.array([9.0, 9.0])
    (g,) = T.grad(T.sum_(T.square(x)), [x])
    assert np.array_equal(g, [2.0, 4.0])
    assert np.array_equal(x.grad, [9.0, 9.0])


def test_topological_order_parents_first():
    a = Tensor(np.ones(2), requires_grad=True)
    b = T.exp(a)
    c = T.add(b, a)
    loss = T.sum_(T.mul(c, b))
    order = T.topological_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_random_six_op_graph_matches_finite_differences():
    rng = stream(0, "six-op")
    w = rng.standard_normal((4, 3))

    def fn(x, y):
        h = T.gelu(T.matmul(x, y))
        h = T.layer_norm(T.add(h, T.tanh(h)))
        return T.sum_(T.mul(T.softmax(h), Tensor(w)))

    err = gradcheck.check(fn, [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))])
    assert err < 1e-4


def test_attention_mask_blocks_positions():
    rng = stream(1, "mask")
    q, k, v = rng.standard_normal((2, 3)), rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    mask = np.zeros((2, 4))
    mask[:, 2:] = -np.inf
    out = T.attention(q, k, v, mask).data
    ref = T.attention(q, k[:2], v[:2]).data
    assert np.allclose(out, ref, rtol=0, atol=1e-15)


@given(hnp.arrays(np.float64, (3, 5), elements=finite), st.integers(1, 4))
def test_concat_split_round_trip(x, cut):
    parts = T.split(x, [cut, 5 - cut], axis=1)
    assert np.array_equal(T.concat(parts, axis=1).data, x)


@given(hnp.arrays(np.float64, (2, 3, 4), elements=finite))
def test_reshape_round_trip(x):
    assert np.array_equal(T.reshape(T.reshape(x, (6, 4)), (2, 3, 4)).data, x)


def test_finite_checks_raise_on_overflow():
    prev = T.set_finite_checks(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            T.exp(np.array([1000.0]))
    finally:
        T.set_finite_checks(prev)


def test_op_suite_gradients():
    worst = gradcheck.run_op_suite(n_cases=3, seed=11)
    assert len(worst) >= 20
    assert max(worst.values()) < 1e-6


# -- AdamW --------------------------------------------------------------------


def _adamw_reference(p, g, m, v, t, lr, b1, b2, eps, wd):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh, vh = m / (1 - b1**t), v / (1 - b2**t)
    return p * (1 - lr * wd) - lr * mh / (np.sqrt(vh) + eps), m, v


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": Tensor(np.array([0.3, -1.2]))}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(lr=0.1))
    assert np.array_equal(p["w"].data, [0.3, -1.2])


def test_adamw_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0]))}
    st_ = adamw_step(p, {"w": np.array([1.0])}, AdamWState(lr=0.1))
    assert st_.step == 1
    assert abs(p["w"].data[0] - 0.9) < 1e-7


def test_adamw_decoupled_decay_only():
    p = {"w": Tensor(np.array([2.0]))}
    adamw_step(p, {"w": np.zeros(1)}, AdamWState(lr=0.1, weight_decay=0.1))
    assert p["w"].data[0] == pytest.approx(2.0 * 0.99, abs=1e-15)


def test_adamw_matches_reference_over_steps():
    rng = stream(3, "adamw")
    p0 = rng.standard_normal(5)
    params = {"w": Tensor(p0.copy())}
    state = AdamWState(lr=0.01, weight_decay=0.05)
    ref, m, v = p0.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 8):
        g = rng.standard_normal(5)
        adamw_step(params, {"w": g}, state)
        ref, m, v = _adamw_reference(ref, g, m, v, t, 0.01, 0.9, 0.999, 1e-8, 0.05)
    assert np.allclose(params["w"].data, ref, rtol=0, atol=1e-14)


def test_adamw_nan_aborts_and_names_param():
    params = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    state = AdamWState(lr=0.1)
    with pytest.raises(NonFiniteGradient, match="'b'"):
        adamw_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    assert state.step == 0
    assert np.array_equal(params["a"].data, np.ones(2))


# -- RNG and blobs --------------------------------------------------------------


def test_streams_are_deterministic_and_keyed():
    a = stream(5, "x", 1).standard_normal(4)
    assert np.array_equal(a, stream(5, "x", 1).standard_normal(4))
    assert not np.array_equal(a, stream(5, "x", 2).standard_normal(4))
    g1, g2 = split(5, 2, "y")
    assert not np.array_equal(g1.random(3), g2.random(3))


@settings(max_examples=60)
@given(
    st.sampled_from([np.float64, np.float32, np.uint8]),
    hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
    st.data(),
)
def test_blob_round_trip(dtype, shape, data):
    elems = st.integers(0, 255) if dtype == np.uint8 else st.floats(-1e6, 1e6, width=32)
    arr = data.draw(hnp.arrays(dtype, shape, elements=elems))
    back = blob.from_bytes(blob.to_bytes(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_blob_header_layout():
    buf = blob.to_bytes(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:6] == b"HVG3D1"
    assert buf[6] == 0 and buf[7] == 2
    assert int.from_bytes(buf[8:16], "little") == 2 and int.from_bytes(buf[16:24], "little") == 3
    assert len(buf) == 24 + 6 * 8


def test_blob_rejects_bad_magic_and_truncation():
    buf = blob.to_bytes(np.ones(4))
    with pytest.raises(blob.BlobError, match="magic"):
        blob.from_bytes(b"XXXXXX" + buf[6:])
    with pytest.raises(blob.BlobError, match="payload"):
        blob.from_bytes(buf[:-3])


def test_named_blobs(tmp_path):
    arrays = {"a.w": np.eye(2), "a.b": np.zeros(3), "other": np.ones(1)}
    blob.save_named(tmp_path, arrays)
    got = blob.load_named(tmp_path, prefix="a.")
    assert sorted(got) == ["a.b", "a.w"]
    assert np.array_equal(got["a.w"], np.eye(2))


def test_relative_error_conventions():
    assert gradcheck.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert math.isclose(gradcheck.relative_error(np.array([1.0]), np.array([0.0])), 1.0)
