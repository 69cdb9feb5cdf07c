import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from portseq import autodiff as ad
from helpers import check_op_grad, max_rel_error, numeric_grad

TOL = 1e-3


def shapes(rng, n=20, rank=2, lo=1, hi=5):
    return [tuple(int(v) for v in rng.integers(lo, hi, size=rank)) for _ in range(n)]


@pytest.mark.parametrize("name,build,prep", [
    ("add", lambda a, b: a + b, lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    ("add_broadcast", lambda a, b: a + b, lambda r, s: [r.normal(size=s), r.normal(size=s[-1:])]),
    ("sub", lambda a, b: a - b, lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    ("mul", lambda a, b: a * b, lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    ("div", lambda a, b: a / b, lambda r, s: [r.normal(size=s), r.uniform(0.5, 2.0, size=s)]),
    ("relu", ad.relu, lambda r, s: [r.normal(size=s) + np.sign(r.normal(size=s)) * 0.05]),
    ("sigmoid", ad.sigmoid, lambda r, s: [r.normal(size=s)]),
    ("tanh", ad.tanh, lambda r, s: [r.normal(size=s)]),
    ("exp", ad.exp, lambda r, s: [r.normal(size=s)]),
    ("log", ad.log, lambda r, s: [r.uniform(0.5, 2.0, size=s)]),
    ("transpose", lambda a: ad.swapaxes(a), lambda r, s: [r.normal(size=s)]),
    ("reshape", lambda a: ad.reshape(a, (-1,)), lambda r, s: [r.normal(size=s)]),
    ("sum_axis", lambda a: ad.sum(a, axis=0), lambda r, s: [r.normal(size=s)]),
    ("mean", lambda a: ad.mean(a, axis=-1, keepdims=True), lambda r, s: [r.normal(size=s)]),
    ("layer_norm", lambda a, g, b: ad.layer_norm(a, g, b),
     lambda r, s: [r.normal(size=s), r.normal(size=s[-1:]), r.normal(size=s[-1:])]),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), lambda r, s: [r.normal(size=s), r.normal(size=s)]),
    ("stack", lambda a, b: ad.stack([a, b], axis=1), lambda r, s: [r.normal(size=s), r.normal(size=s)]),
])
def test_elementwise_and_shape_gradients(name, build, prep):
    rng = np.random.default_rng(hash(name) % 2**32)
    for shape in shapes(rng):
        assert check_op_grad(build, prep(rng, shape)) <= TOL, (name, shape)


def test_matmul_and_affine_gradients():
    rng = np.random.default_rng(1)
    for _ in range(20):
        b, n, k, m = (int(v) for v in rng.integers(1, 5, size=4))
        assert check_op_grad(ad.matmul, [rng.normal(size=(b, n, k)), rng.normal(size=(b, k, m))]) <= TOL
        assert check_op_grad(ad.affine, [rng.normal(size=(b, n, k)), rng.normal(size=(k, m)),
                                         rng.normal(size=m)]) <= TOL


def random_mask(rng, shape):
    m = rng.random(shape) < 0.6
    m[..., 0] |= ~m.any(axis=-1)
    return m


def test_masked_softmax_gradients():
    rng = np.random.default_rng(2)
    for shape in shapes(rng, lo=1, hi=6):
        mask = random_mask(rng, shape)
        assert check_op_grad(lambda x: ad.softmax_masked(x, mask), [rng.normal(size=shape)]) <= TOL
        # masked-out log entries are constants (0.0), so the probe never sees them move
        assert check_op_grad(lambda x: ad.log_softmax_masked(x, mask), [rng.normal(size=shape)]) <= TOL


def test_mean_masked_and_embedding_gradients():
    rng = np.random.default_rng(3)
    for b, length, d in shapes(rng, rank=3):
        mask = random_mask(rng, (b, length))
        assert check_op_grad(lambda x: ad.mean_masked(x, mask), [rng.normal(size=(b, length, d))]) <= TOL
        idx = rng.integers(0, 4, size=(b, length))
        assert check_op_grad(lambda t: ad.embedding_lookup(t, idx), [rng.normal(size=(4, d))]) <= TOL


def test_lstm_cell_gradients():
    rng = np.random.default_rng(4)
    for b, d_in, d in shapes(rng, rank=3):
        arrays = [rng.normal(size=(b, d_in)), rng.normal(size=(b, d)), rng.normal(size=(b, d)),
                  rng.normal(size=(d_in, 4 * d)) * 0.5, rng.normal(size=(d, 4 * d)) * 0.5,
                  rng.normal(size=4 * d)]
        assert check_op_grad(lambda *t: ad.lstm_cell_step(*t)[0], arrays) <= TOL
        assert check_op_grad(lambda *t: ad.lstm_cell_step(*t)[1], arrays) <= TOL


def test_where_and_take_gradients():
    rng = np.random.default_rng(5)
    for shape in shapes(rng):
        cond = rng.random(shape) < 0.5
        assert check_op_grad(lambda a, b: ad.where(cond, a, b), [rng.normal(size=shape), rng.normal(size=shape)]) <= TOL
        idx = rng.integers(0, shape[0], size=7)
        assert check_op_grad(lambda a: ad.take(a, idx), [rng.normal(size=shape)]) <= TOL


def test_dropout_gradient_uses_the_same_mask():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 7))
    assert check_op_grad(lambda t: ad.dropout(t, 0.3, True, key=(1, 2, 3, 4)), [x]) <= TOL


def test_straight_through_routes_gradient_to_soft_branch():
    soft = ad.Tensor(np.array([[0.2, 0.8]]), requires_grad=True)
    out = ad.straight_through(np.array([[0.0, 1.0]]), soft)
    np.testing.assert_array_equal(out.data, [[0.0, 1.0]])
    ad.sum(out * np.array([[3.0, 5.0]])).backward()
    np.testing.assert_array_equal(soft.grad, [[3.0, 5.0]])


def test_layer_norm_of_constant_vector_is_zero():
    out = ad.layer_norm(ad.Tensor(np.full((2, 6), 4.2)))
    assert np.abs(out.data).max() <= 1e-3


def test_softmax_single_feasible_entry():
    out = ad.softmax_masked(np.array([5.0, 9.0, 1.0]), np.array([True, False, False]))
    np.testing.assert_array_equal(out.data, [1.0, 0.0, 0.0])


def test_all_false_mask_is_rejected():
    with pytest.raises(ad.MaskError):
        ad.softmax_masked(np.zeros((2, 3)), np.array([[True, False, False], [False, False, False]]))
    with pytest.raises(ad.MaskError):
        ad.mean_masked(np.zeros((1, 3, 2)), np.zeros((1, 3), dtype=bool))


def test_mean_masked_full_mask_is_row_mean():
    rows = np.arange(12.0).reshape(1, 4, 3)
    out = ad.mean_masked(rows, np.ones((1, 4), dtype=bool))
    np.testing.assert_allclose(out.data, rows.mean(axis=1))


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.mean_masked(np.zeros((2, 3, 4)), np.ones((2, 4), dtype=bool))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_masked_softmax_support_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=30.0, size=(rows, cols))
    mask = random_mask(rng, (rows, cols))
    p = ad.softmax_masked(logits, mask).data
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mean_masked_ignores_masked_rows(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5, 4))
    mask = random_mask(rng, (3, 5))
    base = ad.mean_masked(x, mask).data
    y = x.copy()
    y[~mask] = rng.normal(scale=1e6, size=y[~mask].shape)
    np.testing.assert_array_equal(ad.mean_masked(y, mask).data, base)


def test_sinusoidal_positions_closed_form():
    length, d = 7, 10
    table = ad.sinusoidal_positions(length, d)
    for pos in range(length):
        for i in range(d):
            angle = pos / 10000 ** (2 * (i // 2) / d)
            expected = math.sin(angle) if i % 2 == 0 else math.cos(angle)
            assert table[pos, i] == pytest.approx(expected, abs=1e-15)


def test_dropout_is_deterministic_per_key():
    a = ad.dropout_keep_mask((50, 50), 0.25, (7, 3, 11, 0))
    b = ad.dropout_keep_mask((50, 50), 0.25, (7, 3, 11, 0))
    c = ad.dropout_keep_mask((50, 50), 0.25, (7, 3, 12, 0))
    np.testing.assert_array_equal(a, b)
    assert (a != c).any()
    assert abs(a.mean() - 0.75) < 0.03
    x = np.ones((4, 4))
    np.testing.assert_array_equal(ad.dropout(x, 0.5, False).data, x)


def test_no_grad_builds_no_graph():
    w = ad.Parameter(np.ones(3), "w")
    with ad.no_grad():
        out = w * 2.0
    assert out._parents == () and not out.requires_grad
    assert ad.grad_enabled()


def test_backward_accumulates_shared_inputs():
    x = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    ad.sum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_checkpoint_round_trip_and_layout(tmp_path):
    params = {"a.weight": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, params, {"n_ports": 4})
    loaded, hyper = ad.load_checkpoint(path)
    assert hyper == {"n_ports": 4}
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
    raw = path.read_bytes()
    assert raw[:8] == b"PSQCKPT\0"
    version, hlen = struct.unpack("<IQ", raw[8:20])
    header = json.loads(raw[20:20 + hlen])
    assert version == 1
    assert [t["name"] for t in header["tensors"]] == ["a.weight", "b"]
    assert len(raw) == 20 + hlen + 8 * 7
    assert struct.unpack("<d", raw[-8:])[0] == np.pi


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        ad.load_checkpoint(p)


def test_numeric_grad_helper_matches_closed_form():
    x = np.array([0.3, -1.2])
    g = numeric_grad(lambda: float(np.sum(np.sin(x))), x)
    assert max_rel_error(np.cos(x), g) < 1e-8
