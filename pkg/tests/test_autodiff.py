import numpy as np
import pytest

from rldif import autodiff as ad

from gradcheck import check_gradients


def _rng():
    return np.random.default_rng(0)


def test_softmax_of_equal_logits_is_uniform():
    tape = ad.Tape()
    x = tape.const(np.full((3, 20), 1.7))
    y = ad.softmax(x)
    assert np.allclose(y.data, 0.05)


def test_layer_norm_identity_case():
    rng = _rng()
    x = rng.normal(size=(4, 8))
    x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    tape = ad.Tape()
    out = ad.layer_norm(
        tape.const(x), tape.const(np.ones((1, 8))), tape.const(np.zeros((1, 8)))
    )
    # already zero-mean unit-variance rows pass through (up to the eps guard)
    assert np.max(np.abs(out.data - x)) < 1e-4


def test_matmul_matches_triple_loop_oracle():
    rng = _rng()
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 4))
    expect = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            for k in range(7):
                expect[i, j] += a[i, k] * b[k, j]
    tape = ad.Tape()
    out = ad.matmul(tape.const(a), tape.const(b))
    assert np.max(np.abs(out.data - expect)) < 1e-12


def test_shape_mismatch_reports_both_shapes():
    tape = ad.Tape()
    a = tape.const(np.zeros((2, 3)))
    b = tape.const(np.zeros((2, 3)))
    with pytest.raises(ad.ShapeMismatch) as err:
        ad.matmul(a, b)
    assert "(2, 3)" in str(err.value)


def test_simple_square_gradient():
    tape = ad.Tape()
    x = tape.param("x", np.array([[3.0]]))
    loss = ad.multiply(x, x)
    grads = ad.backward(loss)
    assert np.allclose(grads["x"], 6.0)


def test_cross_entropy_gradient_closed_form():
    rng = _rng()
    logits_val = rng.normal(size=(6, 20))
    onehot = np.zeros((6, 20))
    onehot[np.arange(6), rng.integers(0, 20, 6)] = 1.0
    tape = ad.Tape()
    logits = tape.param("logits", logits_val)
    loss = ad.cross_entropy(logits, onehot)
    grads = ad.backward(loss)
    z = logits_val - logits_val.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert np.max(np.abs(grads["logits"] - (probs - onehot) / 6)) < 1e-12


def test_backward_requires_scalar_loss():
    tape = ad.Tape()
    x = tape.param("x", np.ones((2, 2)))
    with pytest.raises(ad.NonScalarLoss):
        ad.backward(ad.relu(x))


def test_backward_accumulates_shared_subexpressions():
    # f(x) = sum(y) + sum(y * y) with shared y = 2x; oracle duplicates the graph
    x0 = np.array([[1.5, -0.5]])

    def shared(p):
        y = ad.scale(p["x"], 2.0)
        return ad.add(ad.tsum(y), ad.tsum(ad.multiply(y, y)))

    def duplicated(p):
        y1 = ad.scale(p["x"], 2.0)
        y2 = ad.scale(p["x"], 2.0)
        return ad.add(ad.tsum(y1), ad.tsum(ad.multiply(y2, y2)))

    grads = []
    for build in (shared, duplicated):
        tape = ad.Tape()
        loss = build({"x": tape.param("x", x0)})
        grads.append(ad.backward(loss)["x"])
    assert np.array_equal(grads[0], grads[1])


def test_non_parameter_leaves_are_skipped():
    tape = ad.Tape()
    x = tape.param("x", np.ones((1, 3)))
    c = tape.const(np.full((1, 3), 2.0))
    grads = ad.backward(ad.tsum(ad.multiply(x, c)))
    assert set(grads) == {"x"}


def test_debug_mode_catches_nonfinite():
    tape = ad.Tape(debug=True)
    x = tape.const(np.array([[0.0]]))
    with pytest.raises(ad.NonFiniteValue):
        ad.log(x)


def test_grad_disabled_tape_records_nothing():
    tape = ad.Tape(grad=False)
    x = tape.param("x", np.ones((2, 2)))
    y = ad.gelu(ad.matmul(x, x))
    assert tape.nodes == []
    assert y.data.shape == (2, 2)


# ---------------------------------------------------------------------------
# randomized gradient checks, one per registered op


def _param_case(name, build, shapes, positive=()):
    rng = np.random.default_rng(hash(name) % 2**32)
    params = {}
    for pname, shape in shapes.items():
        v = rng.normal(size=shape)
        if pname in positive:
            v = np.abs(v) + 0.5
        params[pname] = v
    return params, build


OP_CASES = {
    "matmul": ({"a": (3, 4), "b": (4, 2)}, lambda p: ad.tsum(ad.matmul(p["a"], p["b"])), ()),
    "add": ({"a": (3, 4), "b": (3, 4)}, lambda p: ad.tsum(ad.gelu(ad.add(p["a"], p["b"]))), ()),
    "add_bias": ({"a": (3, 4), "b": (1, 4)}, lambda p: ad.tsum(ad.gelu(ad.add(p["a"], p["b"]))), ()),
    "scale": ({"a": (3, 4)}, lambda p: ad.tsum(ad.scale(p["a"], -2.5)), ()),
    "multiply": ({"a": (3, 4), "b": (3, 4)}, lambda p: ad.tsum(ad.multiply(p["a"], p["b"])), ()),
    "concat": (
        {"a": (3, 2), "b": (3, 4)},
        lambda p: ad.tsum(ad.gelu(ad.concat([p["a"], p["b"]], axis=1))),
        (),
    ),
    "concat_rows": (
        {"a": (2, 3), "b": (4, 3)},
        lambda p: ad.tsum(ad.gelu(ad.concat([p["a"], p["b"]], axis=0))),
        (),
    ),
    "slice_rows": ({"a": (5, 3)}, lambda p: ad.tsum(ad.gelu(ad.slice_rows(p["a"], 1, 4))), ()),
    "slice_cols": ({"a": (3, 6)}, lambda p: ad.tsum(ad.gelu(ad.slice_cols(p["a"], 2, 5))), ()),
    "relu": ({"a": (4, 4)}, lambda p: ad.tsum(ad.relu(p["a"])), ()),
    "gelu": ({"a": (4, 4)}, lambda p: ad.tsum(ad.gelu(p["a"])), ()),
    "exp": ({"a": (3, 3)}, lambda p: ad.tsum(ad.exp(p["a"])), ()),
    "log": ({"a": (3, 3)}, lambda p: ad.tsum(ad.log(p["a"])), ("a",)),
    "clip": ({"a": (4, 4)}, lambda p: ad.tsum(ad.clip(p["a"], -0.5, 0.5)), ()),
    "minimum": ({"a": (4, 4), "b": (4, 4)}, lambda p: ad.tsum(ad.minimum(p["a"], p["b"])), ()),
    "layer_norm": (
        {"a": (4, 6), "g": (1, 6), "b": (1, 6)},
        lambda p: ad.tsum(ad.gelu(ad.layer_norm(p["a"], p["g"], p["b"]))),
        (),
    ),
    "softmax": ({"a": (4, 7)}, lambda p: ad.tsum(ad.multiply(ad.softmax(p["a"]), p["a"])), ()),
    "mean": ({"a": (4, 5)}, lambda p: ad.mean(ad.gelu(p["a"])), ()),
    "sum": ({"a": (4, 5)}, lambda p: ad.tsum(ad.gelu(p["a"])), ()),
    "gather": (
        {"a": (5, 3)},
        lambda p: ad.tsum(ad.gelu(ad.gather(p["a"], np.array([0, 2, 2, 4, 1])))),
        (),
    ),
    "segment_mean": (
        {"a": (6, 3)},
        lambda p: ad.tsum(ad.gelu(ad.segment_mean(p["a"], np.array([0, 0, 1, 1, 1, 3]), 4))),
        (),
    ),
    "cross_entropy": (
        {"a": (5, 8)},
        lambda p: ad.cross_entropy(p["a"], np.eye(8)[np.array([1, 3, 0, 7, 2])]),
        (),
    ),
    "rows_matmul": (
        {"a": (4, 3)},
        lambda p: ad.tsum(
            ad.gelu(ad.rows_matmul(p["a"], np.random.default_rng(5).normal(size=(4, 3, 2))))
        ),
        (),
    ),
    "mean_of_log_softmax": (
        {"a": (3, 9)},
        lambda p: ad.mean(ad.log(ad.softmax(p["a"]))),
        (),
    ),
}


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_gradient_check_per_op(op_name):
    shapes, build, positive = OP_CASES[op_name]
    params, build = _param_case(op_name, build, shapes, positive)
    # kinked ops: nudge values away from the nondifferentiable points
    if op_name in ("relu", "clip", "minimum"):
        for v in params.values():
            v[np.abs(v) < 0.05] += 0.1
            v[np.abs(np.abs(v) - 0.5) < 0.05] += 0.1
    check_gradients(build, params, tol=1e-5)


def test_two_layer_network_gradcheck():
    rng = _rng()
    params = {
        "w1": rng.normal(size=(6, 8)) * 0.5,
        "b1": rng.normal(size=(1, 8)) * 0.1,
        "g": np.abs(rng.normal(size=(1, 8))) + 0.5,
        "beta": rng.normal(size=(1, 8)) * 0.1,
        "w2": rng.normal(size=(8, 5)) * 0.5,
        "b2": rng.normal(size=(1, 5)) * 0.1,
    }
    x = rng.normal(size=(7, 6))
    targets = np.eye(5)[rng.integers(0, 5, 7)]

    def build(p):
        h = ad.layer_norm(ad.gelu(ad.add(ad.matmul(p["x"], p["w1"]), p["b1"])), p["g"], p["beta"])
        logits = ad.add(ad.matmul(h, p["w2"]), p["b2"])
        return ad.cross_entropy(logits, targets)

    err = check_gradients(build, {**params, "x": x}, tol=1e-5)
    assert err < 1e-5


def test_segment_mean_paths_agree():
    rng = _rng()
    x = rng.normal(size=(8, 3))
    sorted_ids = np.array([0, 0, 1, 1, 2, 2, 2, 3])
    shuffled = np.array([3, 0, 1, 2, 1, 0, 2, 2])
    tape = ad.Tape()
    a = ad.segment_mean(tape.const(x), sorted_ids, 4).data
    # oracle: per-segment numpy means
    expect = np.stack([x[sorted_ids == s].mean(axis=0) for s in range(4)])
    assert np.max(np.abs(a - expect)) < 1e-14
    b = ad.segment_mean(tape.const(x), shuffled, 4).data
    expect_b = np.stack([x[shuffled == s].mean(axis=0) for s in range(4)])
    assert np.max(np.abs(b - expect_b)) < 1e-14


def test_segment_mean_empty_segment_is_zero():
    tape = ad.Tape()
    out = ad.segment_mean(tape.const(np.ones((2, 3))), np.array([0, 2]), 4)
    assert np.array_equal(out.data[1], np.zeros(3))
    assert np.array_equal(out.data[3], np.zeros(3))


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_fixed_point():
    params = {"w": np.array([[1.0, -2.0]])}
    state = ad.AdamState()
    ad.adam_step(params, {"w": np.zeros((1, 2))}, state, lr=0.1)
    assert np.array_equal(params["w"], [[1.0, -2.0]])


def test_adam_first_step_is_signed():
    params = {"w": np.array([[1.0, -2.0, 0.5]])}
    g = np.array([[0.3, -0.7, 1e-4]])
    state = ad.AdamState()
    ad.adam_step(params, {"w": g.copy()}, state, lr=0.01)
    delta = params["w"] - np.array([[1.0, -2.0, 0.5]])
    assert np.allclose(delta, -0.01 * np.sign(g), atol=1e-5)


def test_adam_converges_on_quadratic():
    x = np.array([[3.0]])
    params = {"x": x}
    state = ad.AdamState()
    for _ in range(100):
        grad = {"x": 2 * (params["x"] - 2.0)}
        ad.adam_step(params, grad, state, lr=0.1)
    assert abs(params["x"][0, 0] - 2.0) < 0.1


def test_adam_shape_mismatch():
    params = {"w": np.zeros((2, 2))}
    with pytest.raises(ad.ShapeMismatch):
        ad.adam_step(params, {"w": np.zeros((1, 2))}, ad.AdamState(), lr=0.1)


def test_adam_matches_scalar_recursion_oracle():
    # independent scalar implementation of the same recursion
    x = 3.0
    m = v = 0.0
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    xs = []
    for t in range(1, 21):
        g = 2 * (x - 2.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        xs.append(x)

    params = {"x": np.array([[3.0]])}
    state = ad.AdamState()
    mine = []
    for _ in range(20):
        ad.adam_step(params, {"x": 2 * (params["x"] - 2.0)}, state, lr=lr)
        mine.append(params["x"][0, 0])
    assert np.allclose(mine, xs, atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = _rng()
    params = {
        "layer0.w": rng.normal(size=(4, 3)),
        "layer0.b": rng.normal(size=(1, 3)),
        "head.w": rng.normal(size=(3, 2)).astype(np.float32),
    }
    meta = {"hidden": 3, "note": "fixture"}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, params, meta)
    loaded, got_meta = ad.load_checkpoint(path)
    assert got_meta == meta
    assert set(loaded) == set(params)
    for name in params:
        assert loaded[name].dtype == params[name].dtype
        assert np.array_equal(loaded[name], params[name])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)


def test_float32_tape_dtype():
    tape = ad.Tape(dtype=np.float32)
    x = tape.param("x", np.ones((2, 2)))
    y = ad.gelu(x)
    assert y.data.dtype == np.float32
