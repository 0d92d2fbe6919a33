import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rei.diffcore import (
    CheckpointFormatError,
    ReconModel,
    ShapeError,
    Tape,
    backward,
    finite_diff_grad,
    model_apply,
    ops,
    read_container,
    relative_error,
    write_container,
)
from rei.diffcore.model import layer_slices


def grad_of(fn, x):
    tape = Tape()
    v = tape.leaf(x)
    (g,) = backward(tape, fn(v), [v])
    return g


def fd(fn, x):
    return finite_diff_grad(lambda z: float(np.asarray(fn(z))), x)


def test_backward_simple_polynomial():
    x = np.array([1.0, -2.0, 3.0])
    g = grad_of(lambda v: ops.sum(ops.mul(ops.square(v), 3.0)), x)
    np.testing.assert_allclose(g, 6 * x)


def test_backward_requires_scalar():
    tape = Tape()
    v = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        backward(tape, ops.mul(v, 2.0))


def test_unreached_leaf_gets_zero_gradient():
    tape = Tape()
    a, b = tape.leaf(np.ones(2)), tape.leaf(np.ones(2))
    ga, gb = backward(tape, ops.sum(a), [a, b])
    np.testing.assert_array_equal(gb, 0.0)
    np.testing.assert_array_equal(ga, 1.0)


def test_reused_node_accumulates():
    x = np.array([0.3, 0.7])
    g = grad_of(lambda v: ops.sum(ops.mul(v, v)), x)
    np.testing.assert_allclose(g, 2 * x)


def test_log_domain_error():
    with pytest.raises(FloatingPointError):
        ops.log(np.array([1.0, 0.0]))


@pytest.mark.parametrize(
    "fn",
    [
        lambda v: ops.sum(ops.exp(ops.mul(v, 0.5))),
        lambda v: ops.sum(ops.log(ops.add(ops.square(v), 1.0))),
        lambda v: ops.dot(ops.relu(v), v),
        lambda v: ops.sum(ops.square(ops.clamp_min(v, 0.1))),
        lambda v: ops.mean(ops.mul(v, ops.reshape(ops.index(ops.reshape(v, (2, 3)), (slice(None), [2, 1, 0])), (6,)))),
        lambda v: ops.sum(ops.square(ops.concat(ops.split(ops.reshape(v, (3, 2)), [1, 2]), axis=0))),
    ],
)
def test_elementwise_ops_match_finite_differences(fn):
    x = np.array([0.4, -1.3, 2.2, 0.9, -0.35, 1.6])
    assert relative_error(grad_of(fn, x), fd(fn, x)) < 1e-7


def test_stop_gradient_blocks_flow():
    x = np.array([1.0, 2.0])
    g = grad_of(lambda v: ops.sum(ops.mul(ops.stop_gradient(v), v)), x)
    np.testing.assert_allclose(g, x)


def _conv_ref(x, w, b):
    # direct loop oracle: same padding, cross-correlation, NHWC
    n, h, wd, c = x.shape
    k, _, _, o = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((n, h, wd, o))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i:i + k, j:j + k, :]
            out[:, i, j, :] = np.einsum("nijc,ijco->no", patch, w) + b
    return out


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(ops.conv2d(x, w, b), _conv_ref(x, w, b), atol=1e-12)


def test_conv2d_gradients():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((1, 4, 4, 3))
    tape = Tape()
    xv, wv, bv = tape.leaf(x), tape.leaf(w), tape.leaf(b)
    gx, gw, gb = backward(tape, ops.dot(ops.conv2d(xv, wv, bv), r), [xv, wv, bv])
    assert relative_error(gx, fd(lambda z: np.sum(_conv_ref(z, w, b) * r), x)) < 1e-8
    assert relative_error(gw, fd(lambda z: np.sum(_conv_ref(x, z, b) * r), w)) < 1e-8
    assert relative_error(gb, fd(lambda z: np.sum(_conv_ref(x, w, z) * r), b)) < 1e-8


def test_pool_and_upsample_are_adjoint_up_to_scale():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((1, 4, 4, 2))
    c = rng.standard_normal((1, 2, 2, 2))
    lhs = np.sum(ops.avg_pool2(a) * c)
    rhs = np.sum(a * ops.upsample2(c)) / 4
    assert abs(lhs - rhs) < 1e-12


@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2]))
@settings(max_examples=15, deadline=None)
def test_model_output_shape_and_zero_init_is_identity(c, width, depth):
    model = ReconModel(c, width=width, depth=depth, seed=3)
    x = np.random.default_rng(0).random((2, c, 8, 8))
    out = model_apply(model, x)
    assert out.shape == x.shape
    # zero final layer + residual connection means the untrained net is the identity
    np.testing.assert_array_equal(out, x)


def test_model_rejects_bad_shapes():
    model = ReconModel(1, width=2, depth=2)
    with pytest.raises(ShapeError):
        model_apply(model, np.zeros((1, 2, 8, 8)))
    with pytest.raises(ShapeError):
        model_apply(model, np.zeros((1, 1, 6, 6)))
    with pytest.raises(ValueError):
        ReconModel(4)
    with pytest.raises(ValueError):
        ReconModel(1, width=16, depth=2)


def test_model_parameter_gradient_every_layer():
    model = ReconModel(1, width=2, depth=1, seed=0)
    rng = np.random.default_rng(5)
    p = model.params + 0.1 * rng.standard_normal(model.n_params)
    model = model.copy(p)
    x = rng.random((2, 1, 4, 4))
    r = rng.standard_normal(x.shape)

    def loss(params, tape=None):
        return ops.dot(model_apply(model, x, tape=tape, params=params), r)

    tape = Tape()
    pv = tape.leaf(model.params)
    (g,) = backward(tape, loss(pv), [pv])
    num = finite_diff_grad(lambda q: float(loss(q)), model.params)
    for ws, bs in layer_slices(model.layer_spec()):
        assert relative_error(g[ws], num[ws]) < 1e-6
        assert relative_error(g[bs], num[bs]) < 1e-6


def test_model_single_image_input():
    model = ReconModel(2, width=2, depth=1, seed=1)
    x = np.random.default_rng(0).random((2, 4, 4))
    assert model_apply(model, x).shape == (2, 4, 4)


def test_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi, -0.0, 1e-300])}
    write_container(tmp_path / "c.reic", {"note": "x"}, arrays)
    header, back = read_container(tmp_path / "c.reic")
    assert header["note"] == "x"
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_container_errors(tmp_path):
    p = tmp_path / "c.reic"
    write_container(p, {}, {"a": np.ones(4)})
    data = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "trunc").write_bytes(data[:-8])
    (tmp_path / "version").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    for name in ("magic", "trunc", "version"):
        with pytest.raises(CheckpointFormatError):
            read_container(tmp_path / name)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda z: 0.0, np.zeros(2), step=0)
