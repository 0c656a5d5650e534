import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qgrag.autodiff import AdamWState, Tape, Tensor, adamw_step, default_dtype, grad_check
from qgrag.autodiff import functional as F
from qgrag.errors import DetachedLoss, InvalidSegmentIds, NotScalarLoss


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def test_segment_softmax_examples():
    out = F.segment_softmax(Tensor([3.7, 3.7]), np.array([0, 0]), 1).data
    np.testing.assert_allclose(out, [0.5, 0.5])
    out = F.segment_softmax(Tensor([1.0, -2.0, 9.0]), np.array([0, 0, 1]), 2).data
    assert out[2] == 1.0


def test_segment_softmax_large_scores_stable():
    out = F.segment_softmax(t64([1000.0, 999.0, -1000.0]), np.array([0, 0, 1]), 2).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[:2].sum(), 1.0)


def test_segment_ids_validated():
    with pytest.raises(InvalidSegmentIds):
        F.segment_sum(Tensor([1.0, 2.0]), np.array([1, 0]), 2)
    with pytest.raises(InvalidSegmentIds):
        F.segment_sum(Tensor([1.0, 2.0]), np.array([0, 2]), 2)


@settings(max_examples=100)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.integers(0, 2**31 - 1))
def test_segment_softmax_sums_to_one(sizes, seed):
    ids = np.repeat(np.arange(len(sizes)), sizes)
    scores = np.random.default_rng(seed).normal(scale=10, size=ids.size)
    out = F.segment_softmax(t64(scores, False), ids, len(sizes)).data
    assert np.all(out >= 0)
    sums = np.bincount(ids, weights=out, minlength=len(sizes))
    np.testing.assert_allclose(sums[np.array(sizes) > 0], 1.0, atol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out = F.layer_norm(Tensor(np.full((2, 5), 3.0))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_dropout_identities():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(F.dropout(x, 0.0, True, rng).data, x.data)
    np.testing.assert_array_equal(F.dropout(x, 0.9, False, rng).data, x.data)
    a = F.dropout(x, 0.5, True, np.random.default_rng(3)).data
    b = F.dropout(x, 0.5, True, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)


def test_backward_examples():
    w = t64(np.arange(4.0))
    with Tape() as tape:
        loss = F.sum(w)
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones(4))

    z = t64(np.zeros(3))
    with Tape() as tape:
        loss = F.sum(F.sigmoid(z))
    tape.backward(loss)
    np.testing.assert_allclose(z.grad, 0.25)


def test_backward_errors():
    w = t64(np.ones(3))
    with Tape() as tape:
        v = F.mul(w, 2.0)
    with pytest.raises(NotScalarLoss):
        tape.backward(v)
    with Tape() as tape:
        pass
    with pytest.raises(DetachedLoss):
        tape.backward(F.sum(t64(np.ones(2), grad=False)))


def test_no_recording_outside_tape():
    w = t64(np.ones(3))
    out = F.sum(F.mul(w, w))
    assert out._backward is None or out._tape is None


def test_grad_check_quadratic_exact():
    w = t64(np.random.default_rng(0).normal(size=5))
    rep = grad_check(lambda: F.sum(F.mul(w, w)), {"w": w}, h=1e-3, tol=1e-8)
    assert rep.passed, rep.max_rel_error


def _rand(rng, *shape):
    return t64(rng.normal(size=shape))


OPS = {
    "matmul": lambda r: ((a := _rand(r, 3, 4)), (b := _rand(r, 4, 2)),
                         lambda: F.sum(F.mul(F.matmul(a, b), F.matmul(a, b)))),
    "linear": lambda r: ((x := _rand(r, 3, 4)), (w := _rand(r, 4, 5)), (b := _rand(r, 5)),
                         lambda: F.sum(F.sigmoid(F.linear(x, w, b)))),
    "layer_norm": lambda r: ((x := _rand(r, 3, 6)), (g := _rand(r, 6)), (b := _rand(r, 6)),
                             (c := t64(r.normal(size=(3, 6)), False)),
                             lambda: F.sum(F.mul(F.layer_norm(x, g, b), c))),
    "concat": lambda r: ((a := _rand(r, 2, 3)), (b := _rand(r, 2, 2)),
                         lambda: F.sum(F.sigmoid(F.concat([a, b])))),
    "segment_softmax": lambda r: ((s := _rand(r, 7)),
                                  lambda: F.sum(F.mul(F.segment_softmax(s, np.array([0, 0, 0, 1, 2, 2, 2]), 3),
                                                      t64(np.arange(7.0), False)))),
    "segment_sum": lambda r: ((v := _rand(r, 5, 2)),
                              lambda: F.sum(F.sigmoid(F.segment_sum(v, np.array([0, 0, 1, 1, 1]), 2)))),
    "embedding_lookup": lambda r: ((tb := _rand(r, 4, 3)),
                                   lambda: F.sum(F.sigmoid(F.embedding_lookup(tb, np.array([0, 2, 2, 3]))))),
    "softplus_log": lambda r: ((x := _rand(r, 6)),
                               lambda: F.sum(F.log(F.softplus(x)))),
    "mean_reshape": lambda r: ((x := _rand(r, 2, 6)),
                               lambda: F.sum(F.mean(F.sigmoid(F.reshape(x, (3, 4))), axis=0))),
    "bce_with_logits": lambda r: ((x := _rand(r, 6)),
                                  lambda: F.bce_with_logits(x, np.array([1, 0, 1, 1, 0, 0.0]))),
    "broadcast_add": lambda r: ((x := _rand(r, 3, 4)), (b := _rand(r, 4)),
                                lambda: F.sum(F.sigmoid(F.add(x, b)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    with default_dtype(np.float64):
        *tensors, f = OPS[name](np.random.default_rng(7))
        rep = grad_check(f, {str(i): t for i, t in enumerate(tensors)}, h=1e-3, tol=1e-4)
    assert rep.passed, (name, rep.max_rel_error)


def test_grad_check_kinks_refined():
    # relu of values near zero: raw stencils straddle the kink, refined ones do not
    x = t64(np.array([1e-4, -2e-4, 0.3, -0.5]))
    rep = grad_check(lambda: F.sum(F.relu(x)), {"x": x}, h=1e-3, tol=1e-4)
    assert rep.num_kinks >= 1
    assert rep.strict_worst > 1e-4
    assert rep.passed


def test_adamw_examples():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamWState()
    adamw_step(p, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamWState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_allclose(p["w"], [0.9], atol=1e-7)

    p = {"w": np.array([2.0])}
    adamw_step(p, {"w": np.array([0.0])}, AdamWState(), lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p["w"], [2.0 * (1 - 0.1 * 0.01)])


def test_forward_backward_reproducible():
    def run():
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))
        with Tape() as tape:
            h = F.dropout(F.relu(F.matmul(x, w)), 0.3, True, rng)
            loss = F.sum(F.layer_norm(h))
        tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()
