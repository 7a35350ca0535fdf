import zlib

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsau import autodiff as ad
from gsau.autodiff import NumericError, ShapeError, Tensor

from oracles import central_difference, rel_error

RNG = np.random.default_rng(7)


def leaf(shape, scale=1.0, rng=RNG):
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def assert_grads(fn, inputs, tol=1e-4):
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    numeric = central_difference(lambda: float(fn(*inputs).data), [t.data for t in inputs])
    for t, g in zip(inputs, numeric):
        assert rel_error(t.grad, g) < tol, t


# ---------------------------------------------------------------- examples


def test_l2_normalize_345():
    out = ad.l2_normalize(Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]])


def test_squared_row_distance_orthonormal():
    out = ad.squared_row_distance(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]))
    np.testing.assert_allclose(out.data, [2.0])


def test_log_mean_exp_zeros():
    assert ad.log_mean_exp(Tensor([0.0, 0.0, 0.0])).item() == 0.0


def test_mean_of_squares_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.mean(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_distance_between_identical_normalized_rows_has_zero_grad():
    x = leaf((3, 4))
    loss = ad.mean(ad.squared_row_distance(ad.l2_normalize(x), ad.l2_normalize(x)))
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.zeros((3, 4)))


def test_log_mean_exp_is_stable_for_large_negative():
    v = Tensor([-1000.0, -1000.0])
    assert ad.log_mean_exp(v).item() == pytest.approx(-1000.0)


# ---------------------------------------------------------------- per-op gradients

OPS = {
    "add": (lambda a, b: ad.mean(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: ad.mean(ad.exp(ad.sub(a, b))), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mean(ad.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.mean(ad.exp(ad.scale(a, -0.7))), [(5,)]),
    "exp_log": (lambda a: ad.mean(ad.log(ad.add_scalar(ad.exp(a), 1.0))), [(2, 3)]),
    "matmul": (lambda a, b: ad.mean(ad.exp(ad.matmul(a, b))), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: ad.mean(ad.gelu(ad.matmul(a, b))), [(2, 3, 3, 4), (2, 3, 4, 5)]),
    "softmax": (lambda a, b: ad.mean(ad.mul(ad.softmax(a), b)), [(3, 5), (3, 5)]),
    "log_softmax": (lambda a, b: ad.mean(ad.mul(ad.log_softmax(a), b)), [(3, 5), (3, 5)]),
    "l2_normalize": (lambda a, b: ad.mean(ad.mul(ad.l2_normalize(a), b)), [(4, 3), (4, 3)]),
    "squared_row_distance": (lambda a, b: ad.mean(ad.squared_row_distance(a, b)), [(4, 3), (4, 3)]),
    "pairwise_sq_dist": (lambda a, b: ad.log_mean_exp(ad.scale(ad.pairwise_sq_dist(a, b), -1.0)), [(4, 3), (5, 3)]),
    "log_mean_exp": (lambda a: ad.log_mean_exp(a), [(7,)]),
    "layer_norm": (
        lambda x, g, b, w: ad.mean(ad.mul(ad.layer_norm(x, g, b), w)),
        [(2, 3, 6), (6,), (6,), (2, 3, 6)],
    ),
    "gelu": (lambda a: ad.mean(ad.gelu(a)), [(3, 4)]),
    "masked_fill": (
        lambda a: ad.mean(ad.softmax(ad.masked_fill(a, np.eye(4, dtype=bool), -1e9))),
        [(4, 4)],
    ),
    "transpose_reshape": (
        lambda a, w: ad.mean(ad.mul(ad.reshape(ad.transpose(a, (1, 0, 2)), (3, 8)), w)),
        [(2, 3, 4), (3, 8)],
    ),
    "concat": (lambda a, b: ad.log_mean_exp(ad.reshape(ad.concat([a, b], 0), (-1,))), [(2, 3), (4, 3)]),
    "add_bias": (lambda x, b: ad.mean(ad.exp(ad.add_bias(x, b))), [(2, 3, 4), (4,)]),
    "embedding_lookup": (
        lambda t: ad.mean(ad.exp(ad.embedding_lookup(t, np.array([[0, 2], [2, 2]])))),
        [(4, 3)],
    ),
    "take": (lambda t: ad.log_mean_exp(ad.take(t, np.array([0, 5, 5, 7]))), [(3, 3)]),
    "slice_rows": (lambda t: ad.mean(ad.exp(ad.slice_rows(t, 1, 3))), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    assert_grads(fn, [leaf(s, rng=rng) for s in shapes])


def test_spmm_gradient():
    adj = sp.random(5, 5, density=0.5, random_state=1, format="csr")
    x = leaf((5, 3))
    assert_grads(lambda x: ad.mean(ad.exp(ad.spmm(adj, x))), [x])


# ---------------------------------------------------------------- errors


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"add: shape mismatch \(2, 3\) vs \(3, 2\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))


def test_non_finite_output_is_an_error():
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


def test_backward_requires_scalar_on_tape():
    x = leaf((2,))
    with pytest.raises(ShapeError):
        ad.exp(x).backward()
    with pytest.raises(ValueError, match="not on the tape"):
        Tensor(1.0).backward()


def test_repeated_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.mean(ad.mul(x, x)).backward()
    ad.mean(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_no_grad_records_nothing():
    x = leaf((2, 2))
    with ad.no_grad():
        y = ad.exp(x)
    assert y.node is None and not y.requires_grad


def test_backward_visits_nodes_in_reverse_creation_order():
    x = leaf((3, 3))
    a = ad.exp(x)
    b = ad.mul(a, x)
    c = ad.add(b, a)
    loss = ad.mean(ad.add(c, b))
    seen = []
    for t in (a, b, c, loss, loss.node.inputs[0]):
        node = t.node
        orig = node.backward
        node.backward = (lambda o, s: lambda g: (seen.append(s), o(g))[1])(orig, node.seq)
    loss.backward()
    assert seen == sorted(seen, reverse=True)
    assert len(seen) == len(set(seen)) == 5


# ---------------------------------------------------------------- properties

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                     elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_l2_normalize_gives_unit_rows(x):
    out = ad.l2_normalize(Tensor(x))
    norms = np.linalg.norm(x, axis=1)
    big = norms >= 1e-12
    np.testing.assert_allclose(np.linalg.norm(out.data[big], axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(out.data[~big], x[~big])
    np.testing.assert_array_equal(out.flags, ~big)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-9)


def test_masked_fill_places_value_exactly():
    x = Tensor(RNG.normal(size=(3, 3)))
    mask = np.triu(np.ones((3, 3), dtype=bool), 1)
    out = ad.masked_fill(x, mask, -1e9)
    assert np.all(out.data[mask] == -1e9)
    np.testing.assert_array_equal(out.data[~mask], x.data[~mask])


def test_zero_row_is_constant_under_backward():
    x = Tensor(np.array([[0.0, 0.0], [1.0, 2.0]]), requires_grad=True)
    w = Tensor(np.array([[1.0, 3.0], [1.0, 1.0]]))
    ad.mean(ad.mul(ad.l2_normalize(x), w)).backward()
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])
    assert np.abs(x.grad[1]).sum() > 0


def test_forward_is_deterministic():
    def run():
        x = Tensor(np.random.default_rng(3).normal(size=(6, 5)))
        return ad.log_mean_exp(ad.scale(ad.pairwise_sq_dist(ad.l2_normalize(x), ad.l2_normalize(x)), -2.0)).data

    assert run().tobytes() == run().tobytes()


def test_precision_follows_input_dtype():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    y = ad.layer_norm(ad.gelu(x), Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)))
    assert y.dtype == np.float32
    ad.mean(ad.softmax(y)).backward()
    assert x.grad.dtype == np.float32
