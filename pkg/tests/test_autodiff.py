import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neco import autodiff as ad
from neco.autodiff import DomainError, GradTape, ShapeError, Tensor, backward, finite_difference_check


def _rand(rng, *shape):
    return rng.uniform(-2, 2, shape)


# Unary and binary primitives with a point generator that keeps them in-domain.
UNARY = {
    "neg": (ad.neg, lambda r: _rand(r, 3, 4)),
    "exp": (ad.exp, lambda r: _rand(r, 3, 4)),
    "arctan": (ad.arctan, lambda r: _rand(r, 3, 4)),
    "tanh": (ad.tanh, lambda r: _rand(r, 3, 4)),
    "sigmoid": (ad.sigmoid, lambda r: _rand(r, 3, 4)),
    "abs": (ad.abs, lambda r: r.uniform(0.1, 2, (3, 4)) * r.choice([-1, 1], (3, 4))),
    "log": (ad.log, lambda r: r.uniform(0.1, 2, (3, 4))),
    "sqrt": (ad.sqrt, lambda r: r.uniform(0.1, 2, (3, 4))),
    "power": (lambda x: ad.power(x, -0.25), lambda r: r.uniform(0.1, 2, (3, 4))),
    "maximum": (lambda x: ad.maximum(x, 0.3), lambda r: r.uniform(0.4, 2, (3, 4)) * r.choice([-1, 1], (3, 4))),
    "gelu": (ad.gelu, lambda r: _rand(r, 3, 4)),
    "transpose": (ad.transpose, lambda r: _rand(r, 3, 4)),
    "reshape": (lambda x: ad.reshape(x, (2, 6)), lambda r: _rand(r, 3, 4)),
    "sum_axis": (lambda x: ad.sum(x, axis=1), lambda r: _rand(r, 3, 4)),
    "mean": (lambda x: ad.mean(x, axis=0), lambda r: _rand(r, 3, 4)),
    "broadcast_to": (lambda x: ad.broadcast_to(x, (2, 3, 4)), lambda r: _rand(r, 3, 4)),
    "gather_rows": (lambda x: ad.gather_rows(x, [2, 0, 2]), lambda r: _rand(r, 3, 4)),
    "take_along": (lambda x: ad.take_along(x, np.array([[3, 1], [0, 2], [1, 3]])), lambda r: _rand(r, 3, 4)),
    "row_normalize": (ad.row_normalize, lambda r: _rand(r, 3, 4) + 3.0),
    "softmax": (ad.softmax, lambda r: _rand(r, 3, 4)),
}

BINARY = {
    "add": (ad.add, (3, 4), (3, 4)),
    "sub": (ad.sub, (3, 4), (3, 4)),
    "mul": (ad.mul, (3, 4), (3, 4)),
    "div": (ad.div, (3, 4), (3, 4)),
    "matmul": (ad.matmul, (3, 4), (4, 2)),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), (3, 4), (2, 4)),
}


def _weighted_scalar(out, seed):
    w = np.random.default_rng(seed).uniform(-1, 1, out.shape)
    return ad.sum(ad.mul(out, Tensor(w)))


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_finite_difference(self, name):
        fn, gen = UNARY[name]
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(10):
            err = finite_difference_check(lambda x: _weighted_scalar(fn(x), 7), Tensor(gen(rng)))
            assert err <= 1e-5, (name, err)

    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_binary_finite_difference(self, name):
        fn, sa, sb = BINARY[name]
        rng = np.random.default_rng(len(name))
        for _ in range(10):
            a = _rand(rng, *sa)
            b = _rand(rng, *sb)
            if name == "div":
                b = np.sign(b) * (np.abs(b) + 0.5)
            err_a = finite_difference_check(lambda x: _weighted_scalar(fn(x, Tensor(b)), 3), Tensor(a))
            err_b = finite_difference_check(lambda y: _weighted_scalar(fn(Tensor(a), y), 3), Tensor(b))
            assert max(err_a, err_b) <= 1e-5

    def test_linear_and_layer_norm(self):
        rng = np.random.default_rng(5)
        x, w, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)
        g, beta = _rand(rng, 4), _rand(rng, 4)
        for pt, fn in [
            (x, lambda t: _weighted_scalar(ad.linear(t, Tensor(w), Tensor(b)), 1)),
            (w, lambda t: _weighted_scalar(ad.linear(Tensor(x), t, Tensor(b)), 1)),
            (x, lambda t: _weighted_scalar(ad.layer_norm(t, Tensor(g), Tensor(beta)), 2)),
            (g, lambda t: _weighted_scalar(ad.layer_norm(Tensor(x), t, Tensor(beta)), 2)),
        ]:
            assert finite_difference_check(fn, Tensor(pt)) <= 1e-5

    def test_batched_matmul(self):
        rng = np.random.default_rng(9)
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)
        assert finite_difference_check(lambda t: _weighted_scalar(ad.matmul(t, Tensor(b)), 4), Tensor(a)) <= 1e-5
        assert finite_difference_check(lambda t: _weighted_scalar(ad.matmul(Tensor(a), t), 4), Tensor(b)) <= 1e-5


class TestExamples:
    def test_add(self):
        np.testing.assert_array_equal(ad.apply_primitive("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_identity_matmul(self):
        A = np.random.default_rng(0).normal(size=(3, 5))
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)

    def test_arctan_zero(self):
        value, (g,) = ad.grad(lambda x: ad.sum(ad.arctan(x)), Tensor([0.0]))
        assert value == 0.0 and g[0] == 1.0

    def test_sum_gradient_is_ones(self):
        _, (g,) = ad.grad(ad.sum, Tensor(np.arange(5.0)))
        np.testing.assert_array_equal(g, np.ones(5))

    def test_matmul_gradient_structure(self):
        rng = np.random.default_rng(1)
        A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        _, (gA,) = ad.grad(lambda a: ad.sum(ad.matmul(a, Tensor(B))), Tensor(A))
        np.testing.assert_allclose(gA, np.ones((3, 2)) @ B.T, atol=1e-14)
        assert finite_difference_check(lambda a: ad.sum(ad.matmul(a, Tensor(B))), Tensor(A)) <= 1e-9

    def test_steep_arctan_gradient(self):
        _, (g,) = ad.grad(lambda x: ad.sum(ad.arctan(ad.mul(x, 100.0))), Tensor(np.zeros(4)))
        np.testing.assert_allclose(g, 100.0, rtol=1e-14)

    def test_linear_function_check_is_exact(self):
        # central differences are exact for linear maps up to rounding of x +- eps
        x = np.random.default_rng(2).normal(size=7)
        assert finite_difference_check(ad.sum, Tensor(x), eps=1e-3) <= 1e-10
        assert finite_difference_check(ad.sum, Tensor(np.arange(7.0)), eps=2.0**-20) == 0.0


class TestErrors:
    def test_shape_mismatch_names_primitive_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
            ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_no_general_broadcasting(self):
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.ones((3, 4))), Tensor(np.ones(4)))

    def test_scalar_broadcast_allowed(self):
        np.testing.assert_array_equal(ad.mul(Tensor(np.ones((2, 2))), 3.0).data, 3 * np.ones((2, 2)))

    def test_log_negative_is_domain_error(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([-1.0]))

    def test_log_zero_is_floored(self):
        assert ad.log(Tensor([0.0])).data[0] == pytest.approx(math.log(1e-12))

    def test_division_by_zero(self):
        with pytest.raises(DomainError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_zero_norm_row_named(self):
        with pytest.raises(DomainError, match="1"):
            ad.row_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradTape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_empty_tape_rejected(self):
        with GradTape() as tape:
            pass
        with pytest.raises(ValueError):
            tape.backward(Tensor(1.0))


class TestTapeProperties:
    def test_unreached_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor(np.ones((2, 3)), requires_grad=True)
        with GradTape() as tape:
            loss = ad.sum(ad.mul(x, x))
        table = backward(loss, tape=tape, wrt=[y])
        np.testing.assert_array_equal(table[y.node_id].data, np.zeros((2, 3)))
        np.testing.assert_array_equal(table[x.node_id].data, [2.0, 4.0])

    def test_tape_is_topological(self):
        x = Tensor([0.5, 1.5], requires_grad=True)
        with GradTape() as tape:
            ad.sum(ad.exp(ad.mul(x, x)))
        produced = {x.node_id}
        for rec in tape.records:
            assert all(t.node_id in produced for t in rec.inputs if t.requires_grad)
            produced.add(rec.out_id)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with GradTape() as tape:
            with ad.no_grad():
                ad.exp(x)
        assert len(tape) == 0

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(4, 3))
        f = lambda x: ad.sum(ad.mul(ad.tanh(x), ad.exp(x)))
        g = lambda x: ad.sum(ad.softmax(ad.mul(x, 3.0)))
        _, (gf,) = ad.grad(f, Tensor(x0))
        _, (gg,) = ad.grad(g, Tensor(x0))
        _, (gs,) = ad.grad(lambda x: ad.add(f(x), g(x)), Tensor(x0))
        np.testing.assert_allclose(gs, gf + gg, atol=1e-12, rtol=0)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
    def test_determinism(self, x):
        fn = lambda t: ad.sum(ad.gelu(ad.matmul(t, ad.transpose(t))))
        v1, (g1,) = ad.grad(fn, Tensor(x))
        v2, (g2,) = ad.grad(fn, Tensor(x))
        assert v1 == v2
        assert np.array_equal(g1, g2)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (5,), elements=st.floats(-50, 50)))
    def test_finite_outputs(self, x):
        for fn in (ad.exp, ad.sigmoid, ad.softmax, ad.tanh, lambda t: ad.log(ad.abs(t))):
            out = fn(Tensor(np.clip(x, -50, 50)))
            assert np.all(np.isfinite(out.data))

    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert int(np.prod(t.shape)) == t.data.size
