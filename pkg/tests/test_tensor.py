import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edlm.errors import ConfigError, NumericError, ShapeError
from edlm.gradcheck import directional_check, finite_diff_check
from edlm.tensor import (GradTape, Tensor, add, concat, cross_entropy, gelu, index, masked_softmax,
                         matmul, mean, mul, reshape, rms_norm, stop_gradient, sub, swapaxes, take,
                         tensor, transpose, tsum)

from oracles import matmul_loops, rms_norm_vec, softmax_visible


def test_matmul_identity_and_zeros():
    a = tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(tensor(np.eye(2)), a).data, a.data)
    assert np.array_equal(matmul(a, tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(tensor(a), tensor(b)).data, matmul_loops(a, b), atol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        matmul(tensor(np.ones((3, 4))), tensor(np.ones((3, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_associative(p, q, r, s, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (tensor(rng.standard_normal(sh)) for sh in ((p, q), (q, r), (r, s)))
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-10, rtol=0)


def test_masked_softmax_examples():
    p = masked_softmax(tensor([[5.0, 9.0, 1.0]]), np.array([[0, 1, 0]]))
    assert p.data.tolist() == [[0.0, 1.0, 0.0]]
    p = masked_softmax(tensor([[2.5] * 4]), np.ones((1, 4)))
    np.testing.assert_allclose(p.data, [[0.25] * 4], atol=1e-15)


def test_masked_softmax_matches_direct_formula():
    rng = np.random.default_rng(11)
    for _ in range(20):
        row = rng.standard_normal(7) * 3
        mask = rng.random(7) < 0.6
        mask[rng.integers(7)] = True
        got = masked_softmax(tensor(row[None]), mask[None]).data[0]
        np.testing.assert_allclose(got, softmax_visible(row, mask), atol=1e-12, rtol=0)


def test_masked_softmax_rejects_fully_masked_row():
    with pytest.raises(ShapeError, match="no visible entry"):
        masked_softmax(tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[1, 0], [0, 0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 10_000))
def test_masked_softmax_rows_are_distributions(rows, cols, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((rows, cols)) * 10
    mask = rng.random((rows, cols)) < 0.5
    mask[np.arange(rows), rng.integers(cols, size=rows)] = True
    p = masked_softmax(tensor(logits), mask).data
    assert (p >= 0).all()
    assert (p[~mask] == 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_rms_norm_examples():
    assert np.array_equal(rms_norm(tensor(np.zeros(5)), tensor(np.ones(5))).data, np.zeros(5))
    np.testing.assert_array_equal(rms_norm(tensor(np.ones(4)), tensor(np.ones(4)), eps=0.0).data, np.ones(4))


def test_rms_norm_matches_direct_formula():
    rng = np.random.default_rng(5)
    x, g = rng.standard_normal((3, 6)), rng.standard_normal(6)
    got = rms_norm(tensor(x), tensor(g), eps=1e-6).data
    want = np.array([rms_norm_vec(row, g, 1e-6) for row in x])
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_rms_norm_gain_mismatch():
    with pytest.raises(ShapeError):
        rms_norm(tensor(np.ones((2, 4))), tensor(np.ones(3)))


def test_tensors_are_read_only():
    t = tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_results_raise():
    with pytest.raises(NumericError):
        tensor([np.nan])
    big = tensor([1e300])
    with pytest.raises(NumericError, match="mul"):
        mul(big, big)


def test_non_participants_get_exact_zero():
    a, b = tensor([1.0, 2.0]), tensor([3.0, 4.0])
    with GradTape() as tape:
        tape.watch(a, b)
        y = tsum(a * a)
    ga, gb = tape.gradient(y, [a, b])
    assert ga.data.tolist() == [2.0, 4.0]
    assert gb.data.tolist() == [0.0, 0.0]


def test_gradient_wrt_intermediate():
    x = tensor([1.0, -2.0, 3.0])
    with GradTape() as tape:
        tape.watch(x)
        h = x * 2.0
        y = tsum(h * h)
    gh, gx = tape.gradient(y, [h, x])
    np.testing.assert_allclose(gh.data, 2 * h.data)
    np.testing.assert_allclose(gx.data, 8 * x.data)


def test_stop_gradient_blocks_flow():
    x = tensor([1.0, 2.0])
    with GradTape() as tape:
        tape.watch(x)
        y = tsum(stop_gradient(x) * x)
    np.testing.assert_allclose(tape.gradient(y, x).data, x.data)


# finite differences --------------------------------------------------------


def test_fd_quadratic():
    rep = finite_diff_check(lambda p: tsum(p["t"] * p["t"]), {"t": tensor([1.0, 2.0])}, tol=1e-6)
    assert rep.passed


def test_fd_constant_function():
    def f(p):
        return tsum(p["t"] * 0.0) + 3.0

    theta = {"t": tensor([0.3, -1.2])}
    with GradTape() as tape:
        tape.watch(theta)
        out = f(theta)
    assert (tape.gradient(out, theta)["t"].data == 0).all()
    rep = finite_diff_check(f, theta)
    assert rep.tensors[0].max_abs_err <= 1e-10


def test_fd_rejects_non_finite_objective():
    def f(p):
        return Tensor._wrap(np.array(np.inf)) if p["t"].data[0] > 1 else tsum(p["t"])

    with pytest.raises(NumericError):
        finite_diff_check(f, {"t": tensor([1.0 - 1e-6])}, h=1e-3)


def test_fd_requires_float64():
    with pytest.raises(ConfigError):
        finite_diff_check(lambda p: tsum(p["t"]), {"t": Tensor(np.ones(2), np.float32)})


def _cases(rng):
    """(name, inputs, function) triples covering every primitive."""
    a34, b34 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    ids = rng.integers(0, 5, size=(2, 3))
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True
    labels = rng.integers(0, 4, size=3)
    w = rng.random(3) + 0.1
    return [
        ("add", {"a": a34, "b": rng.standard_normal(4)}, lambda p: add(p["a"], p["b"])),
        ("sub", {"a": a34, "b": b34}, lambda p: sub(p["a"], p["b"])),
        ("mul", {"a": a34, "b": rng.standard_normal((1, 4))}, lambda p: mul(p["a"], p["b"])),
        ("scale", {"a": a34}, lambda p: p["a"] * 1.7 / 3.0),
        ("gelu", {"a": a34 * 2}, lambda p: gelu(p["a"])),
        ("matmul", {"a": a34, "b": rng.standard_normal((4, 2))}, lambda p: matmul(p["a"], p["b"])),
        ("bmm", {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((2, 4, 2))},
         lambda p: matmul(p["a"], p["b"])),
        ("bmm_shared", {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 2))},
         lambda p: matmul(p["a"], p["b"])),
        ("reshape", {"a": a34}, lambda p: reshape(p["a"], (2, 6))),
        ("transpose", {"a": rng.standard_normal((2, 3, 4))}, lambda p: transpose(p["a"], (2, 0, 1))),
        ("swapaxes", {"a": rng.standard_normal((2, 3, 4))}, lambda p: swapaxes(p["a"], 0, 2)),
        ("concat", {"a": a34, "b": rng.standard_normal((2, 4))}, lambda p: concat([p["a"], p["b"]], 0)),
        ("index", {"a": a34}, lambda p: index(p["a"], (slice(None), [0, 2, 2]))),
        ("take", {"a": rng.standard_normal((5, 3))}, lambda p: take(p["a"], ids)),
        ("sum", {"a": a34}, lambda p: tsum(p["a"], axis=1)),
        ("mean", {"a": a34}, lambda p: mean(p["a"], axis=0, keepdims=True)),
        ("rms_norm", {"a": a34, "g": rng.standard_normal(4)}, lambda p: rms_norm(p["a"], p["g"])),
        ("masked_softmax", {"a": a34}, lambda p: masked_softmax(p["a"], mask)),
        ("cross_entropy", {"a": a34}, lambda p: cross_entropy(p["a"], labels, w)),
    ]


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    proj_rng = np.random.default_rng([seed, 1])
    for name, inputs, fn in _cases(rng):
        params = {k: tensor(v) for k, v in inputs.items()}
        # a random projection makes the scalar objective depend on every output entry
        proj = tensor(proj_rng.standard_normal(fn(params).shape))
        rep = finite_diff_check(lambda p: tsum(fn(p) * proj), params, h=1e-5, tol=1e-4)
        assert rep.passed, (name, rep.lines())


def test_directional_check_covers_all_entries():
    rng = np.random.default_rng(0)
    params = {"a": tensor(rng.standard_normal((4, 5))), "g": tensor(rng.standard_normal(5))}
    checks = directional_check(lambda p: tsum(gelu(rms_norm(p["a"], p["g"]))), params, directions=4)
    assert max(c.rel_err for c in checks) < 1e-7
