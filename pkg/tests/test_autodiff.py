"""Primitive-by-primitive gradient checks and tape semantics."""
import numpy as np
import pytest

from sphred.autodiff import (ContractViolation, Tape, Tensor, add, affine,
                             affine_rows, backward, concat, concat_cols, detach,
                             dot, embedding_row, exp, gather_rows, log,
                             log_softmax_values, mul, sigmoid, softmax_values,
                             softmax_xent, softmax_xent_rows, softplus,
                             stack_rows, sub, sum_all, tanh, tile_rows)
from sphred.rng import derive_rng

from conftest import finite_diff, max_grad_rel_err, rel_err


def check_op(build, arrays, floor=1e-4):
    """build(pb) -> scalar Tensor given a dict of bound leaves."""
    tape = Tape()
    pb = {k: tape.leaf(v) for k, v in arrays.items()}
    loss = build(pb)
    grads = backward(tape, loss)
    analytic = {k: grads.of(pb[k]) for k in arrays}

    def value():
        t2 = Tape()
        pb2 = {k: Tensor(v) for k, v in arrays.items()}
        return build(pb2).item()

    numeric = finite_diff(value, arrays)
    worst, where = max_grad_rel_err(analytic, numeric, floor)
    assert worst < 1e-4, f"gradient mismatch at {where}: rel={worst}"


class TestPrimitiveGradients:
    def setup_method(self):
        self.rng = derive_rng(7, "prims")

    def test_elementwise_chain(self):
        arrays = {"a": self.rng.normal(size=(5,)), "b": self.rng.normal(size=(5,))}
        check_op(lambda pb: sum_all(mul(tanh(pb["a"]), sigmoid(pb["b"]))), arrays)

    def test_add_sub_scalar_broadcast(self):
        arrays = {"a": self.rng.normal(size=(4,)), "s": np.array(0.7)}
        check_op(lambda pb: sum_all(sub(add(pb["a"], pb["s"]), mul(pb["s"], 2.0))), arrays)

    def test_softplus_exp_log(self):
        arrays = {"a": self.rng.normal(size=(6,))}
        check_op(lambda pb: sum_all(log(add(softplus(pb["a"]), 0.1))), arrays)
        check_op(lambda pb: sum_all(exp(mul(pb["a"], 0.3))), arrays)

    def test_dot_and_concat(self):
        arrays = {"a": self.rng.normal(size=(3,)), "b": self.rng.normal(size=(4,))}
        check_op(lambda pb: dot(concat([pb["a"], pb["b"]]),
                                concat([pb["b"], pb["a"]])), arrays)

    def test_affine(self):
        arrays = {"x": self.rng.normal(size=(4,)),
                  "w": self.rng.normal(size=(3, 4)),
                  "b": self.rng.normal(size=(3,))}
        check_op(lambda pb: sum_all(tanh(affine(pb["x"], pb["w"], pb["b"]))), arrays)

    def test_affine_rows(self):
        arrays = {"x": self.rng.normal(size=(5, 4)),
                  "w": self.rng.normal(size=(3, 4)),
                  "b": self.rng.normal(size=(3,))}
        check_op(lambda pb: sum_all(tanh(affine_rows(pb["x"], pb["w"], pb["b"]))), arrays)

    def test_gather_rows_accumulates_repeats(self):
        arrays = {"e": self.rng.normal(size=(6, 3))}
        ids = [2, 2, 5, 0, 2]
        check_op(lambda pb: sum_all(tanh(gather_rows(pb["e"], ids))), arrays)
        # explicit scatter-add check
        tape = Tape()
        e = tape.leaf(arrays["e"])
        out = gather_rows(e, ids)
        g = backward(tape, sum_all(out))
        assert g.of(e)[2].tolist() == [3.0, 3.0, 3.0]
        assert g.of(e)[1].tolist() == [0.0, 0.0, 0.0]

    def test_embedding_row(self):
        arrays = {"e": self.rng.normal(size=(5, 3))}
        check_op(lambda pb: sum_all(mul(embedding_row(pb["e"], 3),
                                        embedding_row(pb["e"], 3))), arrays)

    def test_tile_concat_stack(self):
        arrays = {"v": self.rng.normal(size=(3,)),
                  "m": self.rng.normal(size=(4, 2))}
        check_op(lambda pb: sum_all(tanh(concat_cols(pb["m"], tile_rows(pb["v"], 4)))),
                 arrays)
        arrays2 = {"a": self.rng.normal(size=(3,)), "b": self.rng.normal(size=(3,))}
        check_op(lambda pb: sum_all(tanh(stack_rows([pb["a"], pb["b"], pb["a"]]))),
                 arrays2)

    def test_softmax_xent(self):
        arrays = {"l": self.rng.normal(size=(7,))}
        check_op(lambda pb: softmax_xent(pb["l"], 3), arrays)

    def test_softmax_xent_rows(self):
        arrays = {"l": self.rng.normal(size=(4, 6))}
        check_op(lambda pb: softmax_xent_rows(pb["l"], [1, 0, 5, 2]), arrays)


class TestBackwardSemantics:
    def test_square_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array(3.0))
        loss = mul(x, x)
        g = backward(tape, loss)
        assert float(g.of(x)) == pytest.approx(6.0, abs=1e-12)

    def test_xent_gradient_closed_form(self):
        rng = derive_rng(3, "xent")
        logits_data = rng.normal(size=(9,))
        tape = Tape()
        logits = tape.leaf(logits_data)
        loss = softmax_xent(logits, 4)
        g = backward(tape, loss)
        p = softmax_values(logits_data)
        onehot = np.zeros(9)
        onehot[4] = 1.0
        np.testing.assert_allclose(g.of(logits), p - onehot, atol=1e-12)

    def test_unreached_leaf_gets_zero(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        y = tape.leaf(np.array([3.0, 4.0]))
        loss = sum_all(mul(x, x))
        g = backward(tape, loss)
        assert np.all(g.of(y) == 0.0)
        assert g[y.node_id].data.tolist() == [0.0, 0.0]

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        with pytest.raises(ContractViolation):
            backward(tape, mul(x, x))

    def test_backward_is_linear(self):
        rng = derive_rng(9, "linear")
        xd = rng.normal(size=(5,))

        def grads_of(a, b):
            tape = Tape()
            x = tape.leaf(xd)
            l1 = sum_all(mul(tanh(x), x))
            l2 = softmax_xent(x, 2)
            loss = add(mul(l1, a), mul(l2, b))
            return backward(tape, loss).of(x)

        g11 = grads_of(1.0, 0.0)
        g22 = grads_of(0.0, 1.0)
        mixed = grads_of(2.5, -1.5)
        np.testing.assert_allclose(mixed, 2.5 * g11 - 1.5 * g22, rtol=1e-12, atol=1e-12)

    def test_cross_tape_mixing_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones(3))
        b = t2.leaf(np.ones(3))
        with pytest.raises(ContractViolation):
            add(a, b)

    def test_detach_blocks_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array(2.0))
        y = mul(detach(mul(x, x)), x)  # d/dx treats x^2 as constant 4
        g = backward(tape, y)
        assert float(g.of(x)) == pytest.approx(4.0, abs=1e-12)

    def test_constants_mix_with_tape(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        c = Tensor(np.array([10.0, 20.0]))
        loss = sum_all(mul(x, c))
        g = backward(tape, loss)
        np.testing.assert_allclose(g.of(x), [10.0, 20.0])

    def test_tape_records_are_topological(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        y = tanh(x)
        z = mul(y, x)
        loss = sum_all(z)
        order = [r[0] for r in tape._records]
        assert order == sorted(order), "outputs must appear in creation order"
        seen = {x.node_id}
        for out_id, in_ids, _ in tape._records:
            for i in in_ids:
                if i is not None:
                    assert i < out_id, "an op consumed a node created after it"
            seen.add(out_id)
        assert loss.node_id in seen

    def test_shape_mismatch_rejected(self):
        tape = Tape()
        a = tape.leaf(np.ones(3))
        b = tape.leaf(np.ones(4))
        with pytest.raises(ContractViolation):
            add(a, b)
        with pytest.raises(ContractViolation):
            affine(a, tape.leaf(np.ones((2, 4))), tape.leaf(np.ones(2)))


class TestValueSemantics:
    def test_log_softmax_is_normalized(self, rng):
        logits = rng.normal(size=(10, 7)) * 5
        p = softmax_values(logits)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(10), atol=1e-12)
        np.testing.assert_allclose(log_softmax_values(logits), np.log(p), atol=1e-9)

    def test_sigmoid_extremes_finite(self):
        x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
        y = sigmoid(x).data
        assert np.all(np.isfinite(y))
        assert y[0] == 0.0 and y[-1] == 1.0 and y[2] == 0.5

    def test_softplus_extremes_finite(self):
        x = Tensor(np.array([-800.0, 0.0, 800.0]))
        y = softplus(x).data
        assert np.all(np.isfinite(y))
        assert y[1] == pytest.approx(np.log(2.0))
        assert y[2] == pytest.approx(800.0)

    def test_finite_outputs_on_finite_inputs(self, rng):
        x = Tensor(rng.normal(size=(50,)) * 50)
        for f in (tanh, sigmoid, softplus):
            assert np.all(np.isfinite(f(x).data))
