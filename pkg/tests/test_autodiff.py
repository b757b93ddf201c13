"""Gradient and serialization checks for the tensor engine.

Expected values come from hand-derived closed forms or from the
central-difference oracle; nothing is compared against the engine itself.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embseg.autodiff import (
    DomainError,
    ShapeError,
    Tensor,
    add_bias,
    backward,
    check_gradients,
    concat,
    gather_rows,
    l2_normalize,
    load_tensor,
    matmul,
    save_tensor,
    softmax_with_temperature,
)

GRAD_TOL = 1e-4
EPS = 1e-5


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


# -- frozen forward values ----------------------------------------------------


def test_softmax_known_pair():
    out = softmax_with_temperature(Tensor([1.0, 0.0]), 1.0)
    np.testing.assert_allclose(out.data, [0.73105858, 0.26894142], atol=1e-8)


def test_softmax_rows_sum_to_one():
    x = Tensor(rng(0).normal(size=(5, 7)) * 5.0)
    out = softmax_with_temperature(x, 0.07)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-9)
    assert np.all(out.data > 0.0)


def test_softmax_extreme_logits_stay_finite():
    out = softmax_with_temperature(Tensor([[1000.0, -1000.0]]), 0.01)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-12)


def test_l2_normalize_three_four_five():
    out = l2_normalize(Tensor([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-9)


def test_l2_normalize_zero_row_rejected():
    with pytest.raises(DomainError):
        l2_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))


def test_log_non_positive_rejected():
    with pytest.raises(DomainError):
        Tensor([1.0, 0.0]).log()


def test_tau_must_be_positive():
    with pytest.raises(DomainError):
        softmax_with_temperature(Tensor([1.0, 2.0]), 0.0)
    with pytest.raises(DomainError):
        softmax_with_temperature(Tensor([1.0, 2.0]), Tensor(-0.5))


# -- hand-derived gradients ---------------------------------------------------


def test_grad_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)


def test_grad_mean_spreads_uniformly():
    x = Tensor([1.0, 5.0, -2.0, 0.5], requires_grad=True)
    backward(x.mean())
    np.testing.assert_allclose(x.grad, np.full(4, 0.25), atol=1e-12)


def test_repeated_backward_accumulates():
    x = Tensor([2.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    backward(loss)
    np.testing.assert_allclose(x.grad, [8.0], atol=1e-12)
    x.zero_grad()
    backward(loss)
    np.testing.assert_allclose(x.grad, [4.0], atol=1e-12)


def test_grad_flows_to_both_matmul_operands():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]], requires_grad=True)
    backward(matmul(a, b).sum())
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]], atol=1e-12)
    np.testing.assert_allclose(b.grad, [[1.0], [2.0]], atol=1e-12)


def test_no_grad_into_untracked_leaf():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0])
    backward((a * b).sum())
    assert b.grad is None
    np.testing.assert_allclose(a.grad, [3.0, 4.0], atol=1e-12)


def test_shared_subexpression_counts_twice():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    backward((y + y).sum())
    np.testing.assert_allclose(x.grad, [4.0], atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_constant_function_has_zero_error():
    err = check_gradients(lambda t: Tensor(1.5), Tensor([1.0, 2.0]), eps=EPS)
    assert err == 0.0


# -- shape policing -----------------------------------------------------------


def test_mismatched_add_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_row_broadcast_needs_add_bias():
    x = Tensor(np.ones((4, 3)))
    b = Tensor(np.ones(3))
    with pytest.raises(ShapeError):
        _ = x + b
    out = add_bias(x, b)
    np.testing.assert_allclose(out.data, np.full((4, 3), 2.0))


def test_matmul_requires_2d():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_gather_rows_bounds_checked():
    t = Tensor(np.arange(6.0).reshape(3, 2))
    with pytest.raises(ShapeError):
        gather_rows(t, [0, 3])


def test_concat_requires_matching_tails():
    with pytest.raises(ShapeError):
        concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))])


def test_scalar_broadcast_allowed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    backward((x * Tensor(3.0) + 1.0).sum())
    np.testing.assert_allclose(x.grad, np.full((2, 2), 3.0))


# -- finite-difference sweep over the op set -----------------------------------


def smooth_case(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    # keep entries away from relu/abs kinks and log's boundary
    x = rng(seed).uniform(0.3, 1.7, size=shape)
    signs = rng(seed + 1).choice([-1.0, 1.0], size=shape)
    return x * signs


CASES = [
    ("matmul", lambda t: matmul(t, Tensor(rng(9).normal(size=(4, 3)))).sum(), (5, 4), False),
    ("matmul_rhs", lambda t: matmul(Tensor(rng(10).normal(size=(3, 5))), t).sum(), (5, 4), False),
    ("add", lambda t: (t + Tensor(rng(11).normal(size=(4, 4)))).sum(), (4, 4), False),
    ("sub", lambda t: (Tensor(rng(12).normal(size=(4, 4))) - t).mean(), (4, 4), False),
    ("mul", lambda t: (t * Tensor(rng(13).normal(size=(6,)))).sum(), (6,), False),
    ("scalar_mul", lambda t: (t * 2.5).sum(), (3, 3), False),
    ("relu", lambda t: t.relu().sum(), (4, 5), True),
    ("exp", lambda t: t.exp().sum(), (3, 4), False),
    ("log", lambda t: (t.abs() + 0.5).log().sum(), (3, 4), True),
    ("abs", lambda t: t.abs().sum(), (4, 4), True),
    ("sum_axis", lambda t: (t.sum(axis=0) * Tensor(rng(14).normal(size=(3,)))).sum(), (5, 3), False),
    ("mean_axis", lambda t: (t.mean(axis=1) * Tensor(rng(15).normal(size=(5,)))).sum(), (5, 3), False),
    ("l2_normalize", lambda t: (l2_normalize(t) * Tensor(rng(16).normal(size=(4, 6)))).sum(), (4, 6), False),
    ("softmax", lambda t: (softmax_with_temperature(t, 0.7) * Tensor(rng(17).normal(size=(3, 5)))).sum(), (3, 5), False),
    ("gather_rows", lambda t: gather_rows(t, [2, 0, 2, 1]).sum(), (4, 3), False),
    ("slice", lambda t: t[1:3, ::2].sum(), (4, 5), False),
    ("concat", lambda t: concat([t, Tensor(rng(18).normal(size=(2, 3)))]).mean(), (3, 3), False),
    ("reshape", lambda t: (t.reshape(2, 6) * Tensor(rng(19).normal(size=(2, 6)))).sum(), (3, 4), False),
    ("add_bias", lambda t: add_bias(t, Tensor(rng(20).normal(size=(4,)))).sum(), (5, 4), False),
    ("bias_grad", lambda t: add_bias(Tensor(rng(21).normal(size=(5, 3))), t).sum(), (3,), False),
]


@pytest.mark.parametrize("name,f,shape,kinky", CASES, ids=[c[0] for c in CASES])
def test_op_matches_finite_differences(name, f, shape, kinky):
    for trial in range(5):
        x = smooth_case(100 + trial, shape) if kinky else rng(100 + trial).normal(size=shape)
        assert check_gradients(f, Tensor(x), eps=EPS) <= GRAD_TOL


def test_tau_gradient_matches_finite_differences():
    logits = rng(30).normal(size=(4, 6))

    def f(tau: Tensor) -> Tensor:
        weights = Tensor(rng(31).normal(size=(4, 6)))
        return (softmax_with_temperature(Tensor(logits), tau) * weights).sum()

    for tau0 in (0.07, 0.5, 1.3):
        assert check_gradients(f, Tensor(tau0), eps=EPS) <= GRAD_TOL


def test_check_gradients_error_scales_with_eps():
    # cubic has nonzero third derivative, so coarse steps inflate the metric
    def cubic(t: Tensor) -> Tensor:
        return (t * t * t).sum()

    coarse = check_gradients(cubic, Tensor([2.0]), eps=0.5)
    fine = check_gradients(cubic, Tensor([2.0]), eps=EPS)
    assert coarse > 1e-2
    assert fine <= GRAD_TOL
    with pytest.raises(ValueError):
        check_gradients(cubic, Tensor([2.0]), eps=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_composite_pipeline_gradcheck(seed):
    # normalize -> affine -> softmax -> masked log-likelihood, all in one graph
    def f(t: Tensor) -> Tensor:
        w = Tensor(rng(seed ^ 0x5EED).normal(size=(3, 4)))
        mask = np.zeros((2, 4))
        mask[np.arange(2), rng(seed ^ 0xA11).integers(0, 4, size=2)] = 1.0
        z = matmul(l2_normalize(t), w)
        p = softmax_with_temperature(z, 0.9)
        picked = (p.log() * Tensor(mask)).sum(axis=1)
        return -picked.mean()

    x = rng(seed).normal(size=(2, 3))
    x += np.sign(x) * 0.5  # keep rows clear of the zero-norm domain edge
    assert check_gradients(f, Tensor(x), eps=EPS) <= GRAD_TOL


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_softmax_rows_are_distributions(seed):
    x = rng(seed).normal(size=(3, 6)) * 10.0
    p = softmax_with_temperature(Tensor(x), 0.07).data
    assert np.all(p >= 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(3), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_l2_normalize_unit_norm(seed):
    x = rng(seed).normal(size=(4, 5)) + 0.1
    out = l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.ones(4), atol=1e-9)


def test_backward_is_deterministic():
    def build():
        x = Tensor(rng(42).normal(size=(6, 4)), requires_grad=True)
        w = Tensor(rng(43).normal(size=(4, 3)), requires_grad=True)
        h = matmul(x, w).relu()
        p = softmax_with_temperature(h, 0.5)
        backward((p.log() * (1.0 / 18.0)).sum() * -1.0)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = build()
    gx2, gw2 = build()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


# -- fixture serialization -----------------------------------------------------


def test_tensor_roundtrip(tmp_path):
    a = rng(7).normal(size=(3, 4, 2))
    path = tmp_path / "a.tnsr"
    save_tensor(path, a)
    back = load_tensor(path)
    assert back.shape == a.shape
    assert np.array_equal(back, a)


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "b.tnsr"
    save_tensor(path, np.array([[1.0, 2.0], [3.0, 4.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"TNSR"
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little")
    assert raw[12:16] == (2).to_bytes(4, "little")
    assert len(raw) == 16 + 4 * 8
    assert np.frombuffer(raw[16:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_scalar_tensor_roundtrip(tmp_path):
    path = tmp_path / "s.tnsr"
    save_tensor(path, np.float64(2.5))
    back = load_tensor(path)
    assert back.shape == ()
    assert float(back) == 2.5


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.tnsr"
    save_tensor(path, np.ones(4))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_tensor(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.tnsr"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(ValueError):
        load_tensor(path)
