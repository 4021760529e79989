"""Gradient, optimizer, and random-stream checks for the autodiff core.

Every differentiable op gets a central-difference check through a closure
that rebuilds the loss from current parameter values; value-level oracles
are computed independently with plain numpy expressions.
"""

import numpy as np
import pytest
from scipy import sparse

from umgad import autodiff as ad
from umgad.errors import (
    DegenerateRow,
    GraphConsumed,
    NumericalError,
    ShapeMismatch,
)

GEN = np.random.default_rng(20240811)


def scalarize(m_var, gen):
    """Random linear functional of a matrix Var using only library ops."""
    n = m_var.value.shape[0]
    c = ad.constant(gen.normal(size=m_var.value.shape))
    rows = ad.gather_dot(m_var, c, np.arange(n), np.arange(n))
    return ad.dot(rows, ad.constant(gen.normal(size=n)))


def check(loss_fn, params, tol=1e-6):
    # Ops that index a row subset leave untouched rows with an exactly-zero
    # gradient; there the relative error is cancellation noise against the
    # checker's floor, so those callers pass tol=1e-4.
    err = ad.finite_diff_check(loss_fn, params)
    assert err < tol, f"finite-diff mismatch {err:.3e}"


# --- per-op gradient checks --------------------------------------------------


def test_add_mul_grads():
    a = ad.Parameter(GEN.normal(size=(3, 4)), "a")
    b = ad.Parameter(GEN.normal(size=(3, 4)), "b")
    gen = np.random.default_rng(0)
    check(lambda: scalarize(ad.add(a, b), np.random.default_rng(1)), [a, b])
    check(lambda: scalarize(ad.mul(a, b), np.random.default_rng(2)), [a, b])
    check(lambda: scalarize(ad.add(a, 2.5), np.random.default_rng(3)), [a])
    c = gen.normal(size=(3, 4))
    check(lambda: scalarize(ad.mul(a, c), np.random.default_rng(4)), [a])


def test_operator_sugar_matches_ops():
    a = ad.Parameter(np.array([[1.0, 2.0]]), "a")
    b = ad.Parameter(np.array([[3.0, 5.0]]), "b")
    assert np.allclose((a - b).value, [[-2.0, -3.0]])
    assert np.allclose((a - 1.0).value, [[0.0, 1.0]])
    assert np.allclose((1.0 - a).value, [[0.0, -1.0]])
    assert np.allclose((-a).value, [[-1.0, -2.0]])
    assert np.allclose((a + b).value, (b + a).value)


def test_matmul_grads_and_value():
    a = ad.Parameter(GEN.normal(size=(3, 4)), "a")
    b = ad.Parameter(GEN.normal(size=(4, 2)), "b")
    c = GEN.normal(size=(4, 2))
    out = ad.matmul(a, b)
    assert np.allclose(out.value, a.value @ b.value)
    check(lambda: scalarize(ad.matmul(a, b), np.random.default_rng(5)), [a, b])
    check(lambda: scalarize(ad.matmul(a, c), np.random.default_rng(6)), [a])
    check(lambda: scalarize(ad.matmul(a.value, b), np.random.default_rng(7)), [b])


def test_propagate_value_oracle_and_grad():
    n, f = 6, 3
    dense = (GEN.random((n, n)) < 0.4).astype(float)
    dense = np.triu(dense, 1)
    dense = dense + dense.T
    a_hat = sparse.csr_matrix(dense / (dense.sum(1, keepdims=True) + 1.0))
    h = ad.Parameter(GEN.normal(size=(n, f)), "h")
    two_hop = ad.propagate(a_hat, h, 2)
    oracle = a_hat.toarray() @ (a_hat.toarray() @ h.value)
    assert np.allclose(two_hop.value, oracle, atol=1e-12)
    check(lambda: scalarize(ad.propagate(a_hat, h, 2),
                            np.random.default_rng(8)), [h])
    assert ad.propagate(a_hat, h, 0) is h


def test_mask_rows_value_and_token_grad():
    x = GEN.normal(size=(5, 3))
    token = ad.Parameter(GEN.normal(size=(1, 3)), "token")
    rows = np.array([1, 3])
    out = ad.mask_rows(x, rows, token)
    assert np.allclose(out.value[rows], token.value[0])
    keep = np.array([0, 2, 4])
    assert np.allclose(out.value[keep], x[keep])
    check(lambda: scalarize(ad.mask_rows(x, rows, token),
                            np.random.default_rng(9)), [token])


def test_stacking_and_reduction_grads():
    xs = [ad.Parameter(GEN.normal(size=(2, 3)), f"x{i}") for i in range(4)]
    vs = [ad.Parameter(GEN.normal(size=5), f"v{i}") for i in range(3)]
    check(lambda: scalarize(ad.mean_stack(xs), np.random.default_rng(10)), xs)
    mean = ad.mean_stack(xs)
    assert np.allclose(mean.value, np.mean([x.value for x in xs], axis=0))

    def col_loss():
        stacked = ad.stack_cols(vs)  # (5, 3)
        return scalarize(stacked, np.random.default_rng(11))

    check(col_loss, vs)

    ss = [ad.Parameter(np.array(float(i + 1)), f"s{i}") for i in range(3)]
    check(lambda: ad.dot(ad.stack_scalars(ss),
                         ad.constant(np.array([0.3, -1.0, 2.0]))), ss)


def test_dot_and_softmax_vec():
    a = ad.Parameter(GEN.normal(size=4), "a")
    b = ad.Parameter(GEN.normal(size=4), "b")
    assert np.allclose(ad.dot(a, b).value, a.value @ b.value)
    check(lambda: ad.dot(a, b), [a, b])

    logits = ad.Parameter(np.array([0.0, 1.0, -2.0]), "logits")
    soft = ad.softmax_vec(logits)
    e = np.exp(logits.value - logits.value.max())
    assert np.allclose(soft.value, e / e.sum())
    assert np.isclose(soft.value.sum(), 1.0)
    check(lambda: ad.dot(ad.softmax_vec(logits),
                         ad.constant(np.array([1.0, -2.0, 0.5]))), [logits])


def test_weighted_sum_grads():
    mats = [ad.Parameter(GEN.normal(size=(3, 2)), f"m{i}") for i in range(3)]
    w = ad.Parameter(np.array([0.2, -0.5, 1.0]), "w")
    out = ad.weighted_sum(mats, w)
    oracle = sum(wi * m.value for wi, m in zip(w.value, mats))
    assert np.allclose(out.value, oracle)
    check(lambda: scalarize(ad.weighted_sum(mats, w),
                            np.random.default_rng(12)), mats + [w])


def test_row_normalize_value_and_grad():
    x = ad.Parameter(GEN.normal(size=(4, 3)) + 0.5, "x")
    out = ad.row_normalize(x)
    assert np.allclose(np.linalg.norm(out.value, axis=1), 1.0)
    check(lambda: scalarize(ad.row_normalize(x), np.random.default_rng(13)), [x])
    zero = ad.Parameter(np.zeros((2, 3)), "zero")
    with pytest.raises(DegenerateRow):
        ad.row_normalize(zero)


def test_gather_dot_variants():
    za = ad.Parameter(GEN.normal(size=(5, 3)), "za")
    zb = ad.Parameter(GEN.normal(size=(6, 3)), "zb")
    ia = np.array([0, 2, 4])
    ib = np.array([1, 5, 3])
    out = ad.gather_dot(za, zb, ia, ib)
    oracle = np.array([za.value[a] @ zb.value[b] for a, b in zip(ia, ib)])
    assert np.allclose(out.value, oracle)
    check(lambda: ad.dot(ad.gather_dot(za, zb, ia, ib),
                         ad.constant(np.array([1.0, -1.0, 0.5]))), [za, zb],
          tol=1e-4)

    ib2 = np.array([[1, 2], [0, 4], [3, 3]])  # 2-D negatives layout
    out2 = ad.gather_dot(za, zb, ia, ib2)
    oracle2 = np.array([[za.value[a] @ zb.value[b] for b in row]
                        for a, row in zip(ia, ib2)])
    assert np.allclose(out2.value, oracle2)

    def loss_2d():
        pos = ad.gather_dot(za, zb, ia, ib)
        negs = ad.gather_dot(za, zb, ia, ib2)
        return ad.softmax_nll(pos, negs)

    check(loss_2d, [za, zb], tol=1e-4)

    # same-Var on both sides: gradients from both roles must combine
    check(lambda: ad.dot(ad.gather_dot(za, za, np.array([0, 1, 2]),
                                       np.array([3, 4, 0])),
                         ad.constant(np.array([0.7, -0.2, 1.1]))), [za],
          tol=1e-4)


def test_scaled_cosine_loss_oracle_and_grad():
    x_hat = ad.Parameter(np.array([[1.0, 0.0], [0.0, 2.0], [9.0, 9.0]]), "xh")
    x = np.array([[1.0, 1.0], [0.0, 1.0], [1.0, 1.0]])
    rows = np.array([0, 1])
    out = ad.scaled_cosine_loss(x_hat, x, rows, eta=2.0)
    cos0 = 1.0 / np.sqrt(2.0)  # [1,0] vs [1,1]
    cos1 = 1.0                 # colinear
    oracle = ((1.0 - cos0) ** 2 + (1.0 - cos1) ** 2) / 2.0
    assert np.isclose(out.value, oracle, atol=1e-12)

    xh = ad.Parameter(GEN.normal(size=(6, 4)) + 0.3, "xh2")
    target = GEN.normal(size=(6, 4)) + 0.2
    pick = np.array([0, 2, 5])
    for eta in (1.0, 2.0, 3.0):
        check(lambda: ad.scaled_cosine_loss(xh, target, pick, eta), [xh],
              tol=1e-4)
    with pytest.raises(ShapeMismatch):
        ad.scaled_cosine_loss(xh, target, np.array([], dtype=int), 2.0)
    with pytest.raises(ShapeMismatch):
        ad.scaled_cosine_loss(xh, target, pick, eta=0.5)
    bad = ad.Parameter(np.zeros((2, 3)), "bad")
    with pytest.raises(DegenerateRow):
        ad.scaled_cosine_loss(bad, np.ones((2, 3)), np.array([0]), 2.0)


def test_softmax_nll_oracle_and_grad():
    pos = ad.Parameter(np.array([1.0]), "pos")
    negs = ad.Parameter(np.array([[0.0, -1.0]]), "negs")
    with_pos = ad.softmax_nll(pos, negs, include_positive=True)
    oracle = np.log(np.exp(1.0) + np.exp(0.0) + np.exp(-1.0)) - 1.0
    assert np.isclose(with_pos.value, oracle, atol=1e-12)

    pos2 = ad.Parameter(np.array([1.0]), "pos2")
    negs2 = ad.Parameter(np.array([[0.0, -1.0]]), "negs2")
    without = ad.softmax_nll(pos2, negs2, include_positive=False)
    oracle2 = np.log(np.exp(0.0) + np.exp(-1.0)) - 1.0
    assert np.isclose(without.value, oracle2, atol=1e-12)

    p = ad.Parameter(GEN.normal(size=7), "p")
    n = ad.Parameter(GEN.normal(size=(7, 4)), "n")
    check(lambda: ad.softmax_nll(p, n, include_positive=True), [p, n])
    check(lambda: ad.softmax_nll(p, n, include_positive=False), [p, n])

    # numerically stable for extreme scores
    big_p = ad.Parameter(np.array([1000.0, -1000.0]), "bp")
    big_n = ad.Parameter(np.array([[-1000.0], [1000.0]]), "bn")
    val = ad.softmax_nll(big_p, big_n).value
    assert np.isfinite(val)

    empty = ad.softmax_nll(ad.Parameter(np.zeros(0), "e"),
                           ad.Parameter(np.zeros((0, 3)), "en"))
    assert float(empty.value) == 0.0


# --- tape mechanics -----------------------------------------------------------


def test_backward_accumulates_through_shared_nodes():
    p = ad.Parameter(np.array(2.0), "p")
    # loss = p*p + p*p reuses the same intermediate twice
    sq = ad.mul(p, p)
    loss = ad.add(sq, sq)
    ad.zero_grad([p])
    ad.backward(loss)
    assert np.isclose(p.grad, 8.0)  # d(2p^2)/dp = 4p


def test_backward_is_single_use():
    p = ad.Parameter(np.array(1.0), "p")
    loss = ad.mul(p, p)
    ad.zero_grad([p])
    ad.backward(loss)
    with pytest.raises(GraphConsumed):
        ad.backward(loss)


def test_backward_requires_scalar():
    p = ad.Parameter(np.ones(3), "p")
    with pytest.raises(ShapeMismatch):
        ad.backward(ad.mul(p, 2.0))


def test_non_finite_values_rejected():
    with pytest.raises(NumericalError):
        ad.Var(np.array([1.0, np.inf]))
    with pytest.raises(NumericalError):
        ad.Var(np.array(np.nan))


def test_shape_errors():
    a = ad.Parameter(np.ones((2, 2)), "a")
    b = ad.Parameter(np.ones((2, 3)), "b")
    with pytest.raises(ShapeMismatch):
        ad.add(a, b)
    with pytest.raises(ShapeMismatch):
        ad.mul(a, b)
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ShapeMismatch):
        ad.dot(ad.Parameter(np.ones(2), "x"), ad.Parameter(np.ones(3), "y"))
    with pytest.raises(ShapeMismatch):
        ad.stack_cols([ad.Parameter(np.ones(2), "x"),
                       ad.Parameter(np.ones(3), "y")])
    with pytest.raises(ShapeMismatch):
        ad.weighted_sum([a], ad.Parameter(np.ones(2), "w"))
    with pytest.raises(ShapeMismatch):
        ad.mean_stack([])


def test_finite_diff_check_catches_a_wrong_gradient():
    p = ad.Parameter(np.array(1.5), "p")

    def broken_square():
        # deliberately wrong vjp: claims d(p^2)/dp = 3p instead of 2p
        return ad.Var(p.value * p.value, (p,),
                      lambda g: p._accum(g * 3.0 * p.value))

    err = ad.finite_diff_check(broken_square, [p])
    assert err > 0.1


# --- optimizer ----------------------------------------------------------------


def test_adamw_first_steps_match_hand_oracle():
    lr, eps = 0.1, 1e-8
    p = ad.Parameter(np.array(1.0), "p")
    opt = ad.AdamW([p], lr=lr, weight_decay=0.0, eps=eps)
    p.grad = np.array(1.0)
    opt.step()
    # bias correction makes mhat = vhat = 1 on step one
    expected1 = 1.0 - lr * 1.0 / (1.0 + eps)
    assert np.isclose(p.value, expected1, atol=1e-15)
    assert np.isclose(p.value, 0.9, atol=1e-8)

    p.grad = np.array(1.0)
    opt.step()
    m2 = 0.9 * 0.1 + 0.1 * 1.0
    v2 = 0.999 * 0.001 + 0.001 * 1.0
    mhat = m2 / (1.0 - 0.9 ** 2)
    vhat = v2 / (1.0 - 0.999 ** 2)
    expected2 = expected1 - lr * mhat / (np.sqrt(vhat) + eps)
    assert np.isclose(p.value, expected2, atol=1e-15)


def test_adamw_weight_decay_is_decoupled():
    p = ad.Parameter(np.array(1.0), "p")
    opt = ad.AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array(0.0)
    opt.step()
    # zero gradient: the only effect is the multiplicative decay 1 - lr*wd
    assert np.isclose(p.value, 0.95, atol=1e-15)


def test_adamw_state_roundtrip():
    gen = np.random.default_rng(3)
    p1 = ad.Parameter(gen.normal(size=(2, 3)), "w")
    opt1 = ad.AdamW([p1], lr=0.01, weight_decay=0.1)
    for _ in range(3):
        p1.grad = np.ones_like(p1.value)
        opt1.step()
    saved_value = p1.value.copy()
    state = opt1.state_dict()

    p2 = ad.Parameter(saved_value.copy(), "w")
    opt2 = ad.AdamW([p2], lr=0.01, weight_decay=0.1)
    opt2.load_state_dict(state)
    p1.grad = np.full_like(p1.value, 0.5)
    p2.grad = np.full_like(p2.value, 0.5)
    opt1.step()
    opt2.step()
    assert np.array_equal(p1.value, p2.value)


def test_adamw_rejects_duplicate_names():
    with pytest.raises(ShapeMismatch):
        ad.AdamW([ad.Parameter(np.array(0.0), "same"),
                  ad.Parameter(np.array(1.0), "same")])


# --- random streams -------------------------------------------------------------


def test_rngstream_determinism_and_independence():
    a1 = ad.RngStream(7, "x").generator().random(8)
    a2 = ad.RngStream(7, "x").generator().random(8)
    assert np.array_equal(a1, a2)

    b = ad.RngStream(7, "y").generator().random(8)
    assert not np.array_equal(a1, b)

    c = ad.RngStream(8, "x").generator().random(8)
    assert not np.array_equal(a1, c)


def test_rngstream_child_labels_compose():
    root = ad.RngStream(1, "epoch=3")
    child = root.child("attr_mask/k=2")
    assert child.label == "epoch=3/attr_mask/k=2"
    assert child.seed == 1
    # same address built in one go yields the same stream
    direct = ad.RngStream(1, "epoch=3/attr_mask/k=2")
    assert np.array_equal(child.generator().random(4),
                          direct.generator().random(4))


def test_rngstream_consumers_do_not_shift_each_other():
    root = ad.RngStream(0, "")
    before = root.child("keep").generator().random(5)
    _ = root.child("dropped").generator().random(1000)
    after = root.child("keep").generator().random(5)
    assert np.array_equal(before, after)
