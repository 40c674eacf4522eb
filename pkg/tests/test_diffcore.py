"""Tape engine tests: forward exactness, reverse-mode gradients against
central finite differences, and the failure modes the engine must name."""

import math

import numpy as np
import pytest

from cfhvae.diffcore import (
    GradCheckReport,
    NonFiniteError,
    Param,
    ShapeError,
    Tape,
    TapeStateError,
    backward,
    forward,
    grad_check,
)


class TestForward:
    def test_affine_identity(self):
        t = Tape()
        x = t.input("x", (2,))
        w = t.const(np.eye(2))
        b = t.const(np.zeros(2))
        t.output("y", t.affine(x, w, b))
        out = forward(t, {"x": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(out["y"], [1.0, 2.0])

    def test_analytic_fixed_points(self):
        t = Tape()
        x = t.input("x", ())
        t.output("tanh", t.tanh(x))
        t.output("sigmoid", t.sigmoid(x))
        out = forward(t, {"x": np.zeros(())})
        assert out["tanh"] == 0.0
        assert out["sigmoid"] == 0.5

    def test_softplus_composition(self):
        # softplus(0) = ln 2, built from the closed primitive set
        t = Tape()
        x = t.input("x", ())
        t.output("sp", t.log(t.exp(x) + 1.0))
        out = forward(t, {"x": np.zeros(())})
        assert out["sp"] == pytest.approx(math.log(2.0), abs=1e-12)
        assert out["sp"] == pytest.approx(0.693147, abs=1e-6)

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(0)
        t = Tape()
        x = t.input("x", (4, 3))
        w = t.param(Param("w", rng.normal(size=(3, 5))))
        b = t.param(Param("b", rng.normal(size=5)))
        h = t.tanh(t.affine(x, w, b))
        loss = t.sum(t.square(h))
        t.output("loss", loss)
        xs = rng.normal(size=(4, 3))
        o1 = forward(t, {"x": xs})["loss"]
        g1 = backward(t, loss)
        o2 = forward(t, {"x": xs})["loss"]
        g2 = backward(t, loss)
        assert o1.tobytes() == o2.tobytes()
        for k in g1:
            assert g1[k].tobytes() == g2[k].tobytes()

    def test_missing_and_misshapen_inputs(self):
        t = Tape()
        t.input("x", (2,))
        t.output("y", t.square(t._inputs["x"]))
        with pytest.raises(ShapeError, match="not bound"):
            forward(t, {})
        with pytest.raises(ShapeError, match="shape"):
            forward(t, {"x": np.zeros(3)})
        with pytest.raises(ShapeError, match="unknown input"):
            forward(t, {"x": np.zeros(2), "zz": np.zeros(1)})

    def test_nonfinite_intermediate_names_node(self):
        t = Tape()
        x = t.input("x", ())
        t.output("y", t.log(x, name="bad_log"))
        with pytest.raises(NonFiniteError, match="bad_log"):
            forward(t, {"x": np.asarray(-1.0)})

    def test_shape_mismatch_at_build_names_operands(self):
        t = Tape()
        a = t.input("a", (2, 3))
        b = t.input("b", (4, 3))
        with pytest.raises(ShapeError, match="matmul"):
            t.matmul(a, b)
        with pytest.raises(ShapeError, match="add"):
            t.add(a, b)


class TestBackward:
    def test_square_derivative(self):
        t = Tape()
        x = t.param(Param("x", 3.0))
        t.output("y", t.square(x))
        forward(t, {})
        g = backward(t, "y")
        assert g["x"] == pytest.approx(6.0)

    def test_affine_weight_gradient_pattern(self):
        # d sum(W @ x) / dW with x = [1, 0] lights up the first column
        t = Tape()
        w = t.param(Param("w", np.zeros((3, 2))))
        x = t.const(np.array([1.0, 0.0]))
        t.output("s", t.sum(t.matmul(w, x)))
        forward(t, {})
        g = backward(t, "s")
        np.testing.assert_array_equal(g["w"], np.column_stack([np.ones(3), np.zeros(3)]))

    def test_shared_use_accumulates(self):
        # y = x*x + x; dy/dx = 2x + 1
        t = Tape()
        x = t.param(Param("x", 1.5))
        t.output("y", t.mul(x, x) + x)
        forward(t, {})
        g = backward(t, "y")
        assert g["x"] == pytest.approx(2 * 1.5 + 1)

    def test_gradient_linearity(self):
        # grad of (L1 + L2) equals grad L1 + grad L2, up to accumulation order
        rng = np.random.default_rng(7)
        t = Tape()
        w = t.param(Param("w", rng.normal(size=(3, 3))))
        x = t.const(rng.normal(size=(2, 3)))
        h = t.tanh(t.matmul(x, w))
        l1 = t.sum(t.square(h))
        l2 = t.mean(t.exp(t.scale(h, 0.1)))
        t.output("l1", l1)
        t.output("l2", l2)
        t.output("both", t.add(l1, l2))
        forward(t, {})
        g1 = backward(t, "l1")["w"].copy()
        g2 = backward(t, "l2")["w"].copy()
        gb = backward(t, "both")["w"]
        np.testing.assert_allclose(gb, g1 + g2, rtol=1e-12, atol=1e-15)

    def test_adjoint_buffers_mirror_value_shapes(self):
        rng = np.random.default_rng(3)
        t = Tape()
        x = t.input("x", (4, 6))
        w = t.param(Param("w", rng.normal(size=(6, 2))))
        b = t.param(Param("b", np.zeros(2)))
        parts = t.concat([t.tanh(t.affine(x, w, b)), t.sigmoid(t.affine(x, w, b))], axis=1)
        t.output("loss", t.mean(t.square(parts)))
        forward(t, {"x": rng.normal(size=(4, 6))})
        backward(t, "loss")
        assert len(t.adjoints) == len(t.values)
        for v, a in zip(t.values, t.adjoints):
            assert np.shape(v) == np.shape(a)

    def test_backward_before_forward_raises(self):
        t = Tape()
        x = t.param(Param("x", 1.0))
        t.output("y", t.square(x))
        with pytest.raises(TapeStateError, match="before forward"):
            backward(t, "y")

    def test_non_scalar_seed_rejected(self):
        t = Tape()
        x = t.param(Param("x", np.ones(3)))
        y = t.square(x)
        t.output("y", y)
        forward(t, {})
        with pytest.raises(TapeStateError, match="not scalar"):
            backward(t, y)


def _lstm_cell_graph(tape, x, h_prev, c_prev, w, b, hidden):
    """One LSTM step from the closed primitive set (gate order i, f, g, o)."""
    gates = tape.affine(tape.concat([x, h_prev], axis=1), w, b)
    i = tape.sigmoid(tape.slice(gates, 0 * hidden, 1 * hidden))
    f = tape.sigmoid(tape.slice(gates, 1 * hidden, 2 * hidden))
    g = tape.tanh(tape.slice(gates, 2 * hidden, 3 * hidden))
    o = tape.sigmoid(tape.slice(gates, 3 * hidden, 4 * hidden))
    c = tape.add(tape.mul(f, c_prev), tape.mul(i, g))
    h = tape.mul(o, tape.tanh(c))
    return h, c


class TestGradCheck:
    def test_quadratic_passes_tight(self):
        rng = np.random.default_rng(11)
        t = Tape()
        w = t.param(Param("w", rng.normal(size=(4,))))
        t.output("loss", t.sum(t.square(w - 0.5)))
        forward(t, {})
        rep = grad_check(t, epsilon=1e-6, tol=1e-6)
        assert isinstance(rep, GradCheckReport)
        assert rep.passed, str(rep)

    def test_lstm_cell_single_step(self):
        rng = np.random.default_rng(23)
        hidden, fdim, batch = 5, 3, 2
        t = Tape()
        x = t.input("x", (batch, fdim))
        w = t.param(Param("w", rng.uniform(-0.4, 0.4, size=(fdim + hidden, 4 * hidden))))
        b = t.param(Param("b", rng.uniform(-0.1, 0.1, size=4 * hidden)))
        zeros = t.const(np.zeros((batch, hidden)))
        h, c = _lstm_cell_graph(t, x, zeros, zeros, w, b, hidden)
        t.output("loss", t.sum(t.square(h)) + t.sum(t.square(c)))
        forward(t, {"x": rng.normal(size=(batch, fdim))})
        rep = grad_check(t, epsilon=1e-5, tol=1e-4)
        assert rep.passed, str(rep)

    def test_corrupted_gradient_is_localized(self):
        rng = np.random.default_rng(5)
        t = Tape()
        w = t.param(Param("w", rng.normal(size=(3,))))
        v = t.param(Param("v", rng.normal(size=(3,))))
        t.output("loss", t.sum(t.mul(w, v)))
        forward(t, {})
        backward(t, "loss")
        bad = t._params["v"][1].grad.copy()
        bad[1] += 0.1
        rep = grad_check(t, analytic_override={"v": bad})
        assert not rep.passed
        assert rep.worst_param == "v[1]"

    def test_requires_prior_forward(self):
        t = Tape()
        w = t.param(Param("w", np.ones(2)))
        t.output("loss", t.sum(t.square(w)))
        with pytest.raises(TapeStateError, match="forward"):
            grad_check(t)

    def test_mixed_primitive_composite(self):
        # touch every primitive in one scalar graph and grad-check it
        rng = np.random.default_rng(42)
        t = Tape()
        x = t.input("x", (3, 4))
        w1 = t.param(Param("w1", rng.uniform(-0.5, 0.5, size=(4, 6))))
        b1 = t.param(Param("b1", rng.uniform(-0.1, 0.1, size=6)))
        w2 = t.param(Param("w2", rng.uniform(-0.5, 0.5, size=(6, 2))))
        row = t.param(Param("row", rng.uniform(0.5, 1.5, size=6)))
        h = t.tanh(t.affine(x, w1, b1))
        h = t.mul(h, row)                       # row broadcast
        left = t.slice(h, 0, 3)
        right = t.slice(h, 3, 6)
        joined = t.concat([t.sigmoid(left), t.exp(t.scale(right, 0.3))], axis=1)
        y = t.matmul(joined, w2)
        col_means = t.mean(y, axis=0)
        per_row = t.sum(t.square(y), axis=1)
        loss = (t.sum(t.log(t.exp(col_means) + 1.0))
                + t.mean(per_row)
                + t.sum(t.sub(y, t.const(np.full((3, 2), 0.25)))))
        t.output("loss", loss)
        forward(t, {"x": rng.normal(size=(3, 4))})
        rep = grad_check(t, epsilon=1e-6, tol=1e-6)
        assert rep.passed, str(rep)


class TestParam:
    def test_grad_shape_mirrors_value(self):
        p = Param("p", np.ones((3, 2)))
        assert p.grad.shape == p.value.shape
        assert p.value.dtype == np.float64
