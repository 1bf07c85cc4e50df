import numpy as np
import pytest

from segmem import autodiff as ad
from segmem.errors import (
    DetachedNode,
    NonFiniteEvaluation,
    NonScalarLoss,
    ShapeMismatch,
    UnknownOp,
)


def test_matmul_identity():
    tape = ad.Tape()
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    out = ad.matmul(tape.leaf(np.eye(2)), tape.leaf(a))
    assert np.array_equal(out.data, a)


def test_sigmoid_at_zero():
    tape = ad.Tape()
    out = ad.sigmoid(tape.leaf(np.zeros((1, 1))))
    assert out.data[0, 0] == 0.5


def test_softmax_uniform_on_equal_logits():
    tape = ad.Tape()
    out = ad.softmax_rows(tape.leaf(np.zeros((1, 4))))
    assert np.allclose(out.data, 0.25, atol=0)


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(3)
    for _ in range(10):
        tape = ad.Tape()
        x = rng.normal(scale=5.0, size=(6, 9))
        out = ad.softmax_rows(tape.leaf(x)).data
        assert np.all(out > 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_backward_square_sum():
    tape = ad.Tape()
    x = tape.leaf(np.array([[3.0]]))
    loss = ad.sum_all(x * x)
    grads = tape.backward(loss)
    assert np.allclose(grads[x.node_id].data, [[6.0]])


def test_backward_mean_all():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    grads = tape.backward(ad.mean_all(x))
    assert np.allclose(grads[x.node_id].data, 0.25)


def test_backward_visits_every_node_once():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    y = ad.relu(x + x)
    loss = ad.sum_all(y)
    tape.backward(loss)
    assert tape.last_backward_visits == len(tape.nodes)


def test_backward_requires_scalar():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(NonScalarLoss):
        tape.backward(x + x)


def test_backward_rejects_foreign_tensor():
    tape = ad.Tape()
    tape.leaf(np.ones(2))
    other = ad.Tape()
    loss = ad.sum_all(other.leaf(np.ones(2)))
    with pytest.raises(DetachedNode):
        tape.backward(loss)


def test_unknown_op():
    tape = ad.Tape()
    with pytest.raises(UnknownOp):
        ad.apply("gelu", [tape.leaf(np.ones(2))])


def test_shape_mismatch():
    tape = ad.Tape()
    with pytest.raises(ShapeMismatch):
        ad.add(tape.leaf(np.ones((2, 2))), tape.leaf(np.ones((3, 2))))
    with pytest.raises(ShapeMismatch):
        ad.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((2, 3))))


def test_apply_is_deterministic():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8))
    outs = []
    for _ in range(2):
        tape = ad.Tape()
        out = ad.softmax_rows(ad.relu(tape.leaf(a)) @ tape.leaf(a))
        outs.append(out.data.copy())
    assert np.array_equal(outs[0], outs[1])


def test_log_domain_error():
    tape = ad.Tape()
    with pytest.raises(NonFiniteEvaluation):
        ad.log(tape.leaf(np.array([1.0, 0.0])))


def test_grad_check_linear_is_extremely_tight():
    err = ad.grad_check(lambda x: ad.sum_all(x), np.arange(6.0).reshape(2, 3))
    assert err < 1e-10


def _random_input(op, rng, shape):
    x = rng.normal(size=shape)
    if op == "log":
        x = np.abs(x) + 0.5
    return x


_OP_CASES = {
    "matmul": lambda t, x, r: ad.matmul(x, t.leaf(r.normal(size=(x.shape[1], 3)))),
    "add": lambda t, x, r: ad.add(x, t.leaf(r.normal(size=x.shape))),
    "sub": lambda t, x, r: ad.sub(x, t.leaf(r.normal(size=x.shape))),
    "mul_elem": lambda t, x, r: ad.mul_elem(x, t.leaf(r.normal(size=x.shape))),
    "div_elem": lambda t, x, r: ad.div_elem(x, t.leaf(np.abs(r.normal(size=x.shape)) + 1.0)),
    "scale": lambda t, x, r: ad.scale(x, -2.5),
    "relu": lambda t, x, r: ad.relu(x),
    "sigmoid": lambda t, x, r: ad.sigmoid(x),
    "log": lambda t, x, r: ad.log(x),
    "softmax_rows": lambda t, x, r: ad.softmax_rows(x),
    "mean_all": lambda t, x, r: ad.mean_all(x),
    "sum_all": lambda t, x, r: ad.sum_all(x),
    "concat_rows": lambda t, x, r: ad.concat_rows([x, t.leaf(r.normal(size=x.shape))]),
    "slice_rows": lambda t, x, r: ad.slice_rows(x, 1, x.shape[0]),
    "transpose2d": lambda t, x, r: ad.transpose2d(x),
    "reshape": lambda t, x, r: ad.reshape(x, (x.shape[1], x.shape[0])),
    "broadcast_add_row": lambda t, x, r: ad.broadcast_add_row(x, t.leaf(r.normal(size=(1, x.shape[1])))),
    "patchify2d": lambda t, x, r: ad.patchify2d(x, 2),
    "unpatchify2d": lambda t, x, r: ad.unpatchify2d(
        ad.reshape(x, (x.shape[0] * x.shape[1] // 4, 4)), 2, x.shape[0], x.shape[1]
    ),
}


@pytest.mark.parametrize("op", sorted(_OP_CASES))
def test_every_op_matches_finite_differences(op):
    # 20 seeded random shapes per op, all f64 with eps=1e-5
    build = _OP_CASES[op]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        rows = int(rng.integers(2, 7)) * 2
        cols = int(rng.integers(2, 7)) * 2
        x0 = _random_input(op, rng, (rows, cols))
        weight_rng = np.random.default_rng(seed + 1000)

        def f(x):
            r = np.random.default_rng(seed + 2000)
            out = build(x.tape, x, np.random.default_rng(seed + 1000))
            w = x.tape.leaf(r.normal(size=out.data.shape))
            return ad.sum_all(out * w) if out.data.shape != () else out

        worst = max(worst, ad.grad_check(f, x0, eps=1e-5))
    assert worst <= 1e-4, f"{op}: max_rel_err {worst}"


def test_patchify_roundtrip_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(32, 32))
    tape = ad.Tape()
    out = ad.unpatchify2d(ad.patchify2d(tape.leaf(x), 4), 4, 32, 32)
    assert np.array_equal(out.data, x)


def test_dice_bce_loss_gradcheck_8x8():
    # compose the segmentation loss on an 8x8 field and check against FD
    rng = np.random.default_rng(0)
    gt = (rng.uniform(size=(8, 8)) < 0.4).astype(np.float64)

    def f(x):
        tape = x.tape
        probs = ad.sigmoid(x)
        g = tape.leaf(gt)
        inter = ad.sum_all(probs * g)
        denom = ad.sum_all(probs) + ad.sum_all(g) + tape.const(1.0)
        dice_score = ad.div_elem(ad.scale(inter, 2.0) + tape.const(1.0), denom)
        return tape.const(1.0) - dice_score

    err = ad.grad_check(f, rng.normal(size=(8, 8)), eps=1e-5)
    assert err <= 1e-4


def test_leaf_copies_input():
    arr = np.ones((2, 2))
    tape = ad.Tape()
    leaf = tape.leaf(arr)
    arr[0, 0] = 99.0
    assert leaf.data[0, 0] == 1.0
