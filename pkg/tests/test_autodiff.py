import numpy as np
import pytest

from mmunlearn.autodiff import Param, Tape, check_gradient
from mmunlearn.errors import ContractError, DimensionError, InputError

RNG = np.random.default_rng(1234)


def rand_param(shape, scale=1.0):
    return Param(RNG.standard_normal(shape) * scale)


class TestAnalyticCases:
    def test_frobenius_sq_gradient(self):
        p = Param(np.array([[1.0, 2.0]]))
        tape = Tape()
        loss = tape.frobenius_sq(tape.param(p))
        tape.backward(loss)
        assert np.array_equal(p.grad, [[2.0, 4.0]])

    def test_cosine_at_maximum_has_zero_gradient(self):
        v = np.array([[0.6, 0.8]])
        p = Param(v.copy())
        tape = Tape()
        loss = tape.cosine(tape.param(p), tape.const(v))
        tape.backward(loss)
        assert np.allclose(p.grad, 0.0, atol=1e-12)

    def test_sum_of_param_gives_ones(self):
        # loss = sum of all entries: row_mean -> 1x4 (each /3), @ones -> 1x1, *3
        p = Param(RNG.standard_normal((3, 4)))
        tape = Tape()
        node = tape.param(p)
        loss = tape.scale(tape.matmul(tape.row_mean(node), tape.const(np.ones((4, 1)))), 3.0)
        tape.backward(loss)
        assert np.allclose(p.grad, 1.0, atol=1e-12)

    def test_linearity_of_composite(self):
        p = rand_param((2, 3))
        alpha, beta = 0.7, -1.3

        def f_only(tape, params):
            return tape.frobenius_sq(tape.param(params[0]))

        def g_only(tape, params):
            return tape.frobenius_sq(tape.tanh(tape.param(params[0])))

        def combined(tape, params):
            return tape.add(tape.scale(f_only(tape, params), alpha),
                            tape.scale(g_only(tape, params), beta))

        p.zero_grad()
        t = Tape()
        t.backward(f_only(t, [p]))
        gf = p.grad.copy()
        p.zero_grad()
        t = Tape()
        t.backward(g_only(t, [p]))
        gg = p.grad.copy()
        p.zero_grad()
        t = Tape()
        t.backward(combined(t, [p]))
        assert np.allclose(p.grad, alpha * gf + beta * gg, atol=1e-12)


_weights = {}


def ensure_weights(shape):
    if shape not in _weights:
        g = np.random.default_rng(hash(shape) % (2**32))
        _weights[shape] = (g.standard_normal((1, shape[0])), g.standard_normal((shape[1], 1)))


PRIMITIVE_BUILDERS = {
    "matmul": lambda t, ps: t.matmul(t.param(ps[0]), t.param(ps[1])),
    "add": lambda t, ps: t.add(t.param(ps[0]), t.param(ps[1])),
    "scale": lambda t, ps: t.scale(t.param(ps[0]), 1.7),
    "row_mean": lambda t, ps: t.row_mean(t.param(ps[0])),
    "tanh": lambda t, ps: t.tanh(t.param(ps[0])),
    "relu": lambda t, ps: t.relu(t.param(ps[0])),
    "l2_normalize": lambda t, ps: t.l2_normalize(t.param(ps[0])),
    "cosine": lambda t, ps: t.cosine(t.param(ps[0]), t.param(ps[1])),
    "softmax_cross_entropy": lambda t, ps: t.softmax_cross_entropy(t.param(ps[0]), [1, 3]),
    "frobenius_sq": lambda t, ps: t.frobenius_sq(t.param(ps[0])),
    "log": lambda t, ps: t.log(t.param(ps[0])),
    "exp_sum": lambda t, ps: t.exp_sum(t.param(ps[0])),
}

PRIMITIVE_PARAM_SHAPES = {
    "matmul": [(3, 4), (4, 2)],
    "add": [(3, 4), (3, 4)],
    "scale": [(3, 4)],
    "row_mean": [(5, 3)],
    "tanh": [(3, 4)],
    "relu": [(3, 4)],
    "l2_normalize": [(1, 5)],
    "cosine": [(1, 5), (1, 5)],
    "softmax_cross_entropy": [(2, 6)],
    "frobenius_sq": [(3, 4)],
    "log": [(2, 3)],
    "exp_sum": [(2, 3)],
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_BUILDERS))
def test_primitive_gradients_vs_central_differences(name):
    builder = PRIMITIVE_BUILDERS[name]
    trials = 50
    rng = np.random.default_rng(abs(hash(name)) % (2**32))
    for _ in range(trials):
        params = []
        for shape in PRIMITIVE_PARAM_SHAPES[name]:
            vals = rng.standard_normal(shape)
            if name == "log":
                vals = np.abs(vals) + 0.5
            if name == "relu":
                # keep away from the kink
                vals = np.where(np.abs(vals) < 1e-3, 0.5, vals)
            params.append(Param(vals))

        def build(tape, ps, builder=builder):
            out = builder(tape, ps)
            if out.value.shape == (1, 1):
                return out
            ensure_weights(out.value.shape)
            left = tape.const(_weights[out.value.shape][0])
            right = tape.const(_weights[out.value.shape][1])
            return tape.frobenius_sq(tape.matmul(tape.matmul(left, out), right))

        err = check_gradient(build, params, h=1e-5)
        assert err <= 1e-4, f"{name}: gradient error {err}"


class TestContracts:
    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        node = tape.const(np.ones((2, 2)))
        with pytest.raises(ContractError):
            tape.backward(node)

    def test_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            tape.add(tape.const(np.ones((2, 2))), tape.const(np.ones((3, 2))))

    def test_out_of_range_target(self):
        tape = Tape()
        with pytest.raises(InputError):
            tape.softmax_cross_entropy(tape.const(np.ones((1, 4))), 9)

    def test_frozen_param_gets_zero_grad(self):
        frozen = Param(RNG.standard_normal((3, 3)), trainable=False)
        live = Param(RNG.standard_normal((3, 3)))
        tape = Tape()
        out = tape.matmul(tape.param(frozen), tape.param(live))
        loss = tape.frobenius_sq(out)
        tape.backward(loss)
        assert np.array_equal(frozen.grad, np.zeros((3, 3)))
        assert np.any(live.grad != 0)

    def test_backward_deterministic(self):
        p = Param(RNG.standard_normal((4, 4)))

        def run():
            p.zero_grad()
            tape = Tape()
            node = tape.param(p)
            loss = tape.frobenius_sq(tape.tanh(tape.matmul(node, node)))
            tape.backward(loss)
            return p.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_gradients_accumulate_on_shared_param(self):
        p = Param(np.array([[2.0]]))
        tape = Tape()
        a = tape.param(p)
        b = tape.param(p)
        loss = tape.frobenius_sq(tape.add(a, b))  # (2x)^2 -> d/dx = 8x = 16
        tape.backward(loss)
        assert np.allclose(p.grad, [[16.0]])

    def test_l2_normalize_clamps_tiny_vectors(self):
        tape = Tape()
        out = tape.l2_normalize(tape.const(np.zeros((1, 3))))
        assert np.all(np.isfinite(out.value))
