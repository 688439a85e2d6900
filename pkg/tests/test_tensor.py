import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from moddiff.errors import ContractError, ShapeError
from moddiff.tensor import (
    as_tensor, backward, grad_check, masked_cross_entropy, masked_mse, matmul, softmax_rows,
)


def loop_matmul(a, b):
    """Naive triple loop, the reference for matmul."""
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i][r] * b[r][j]
            out[i][j] = s
    return out


def test_matmul_examples():
    a = as_tensor([[1, 2], [3, 4]])
    assert torch.equal(matmul(a, torch.eye(2, dtype=torch.float64)), a)
    assert torch.equal(matmul(a, torch.zeros(2, 3, dtype=torch.float64)), torch.zeros(2, 3, dtype=torch.float64))
    b = as_tensor([[5, 6], [7, 8]])
    expected = loop_matmul(a.tolist(), b.tolist())
    assert expected == [[19, 22], [43, 50]]
    assert matmul(a, b).tolist() == expected


def test_matmul_against_loop_oracle_16x16():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((16, 16)), rng.standard_normal((16, 16))
    ref = np.array(loop_matmul(a.tolist(), b.tolist()))
    got = matmul(as_tensor(a), as_tensor(b)).numpy()
    assert np.max(np.abs(got - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(torch.zeros(2, 3, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))


def test_softmax_examples():
    assert torch.allclose(softmax_rows(as_tensor([[0, 0, 0]])), torch.full((1, 3), 1 / 3, dtype=torch.float64),
                          atol=1e-15)
    big = softmax_rows(as_tensor([[1000.0, 0.0]]))
    assert torch.isfinite(big).all() and big[0, 0] == 1.0 and big[0, 1] < 1e-300
    e = [math.exp(1), math.exp(2), math.exp(3)]
    ref = [v / sum(e) for v in e]
    assert np.allclose(softmax_rows(as_tensor([[1, 2, 3]])).numpy()[0], ref, rtol=1e-14, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    p = softmax_rows(as_tensor([row, row[::-1]]))
    assert torch.isfinite(p).all() and (p >= 0).all()
    assert torch.all(torch.abs(p.sum(-1) - 1.0) <= 1e-12)


def test_cross_entropy_closed_forms():
    targets = torch.tensor([1, 5, 2])
    one_hot = torch.full((3, 8), -1e4, dtype=torch.float64)
    one_hot[torch.arange(3), targets] = 0.0
    assert masked_cross_entropy(one_hot, targets, [True, True, True]).item() == 0.0
    uniform = torch.zeros(3, 8, dtype=torch.float64)
    assert math.isclose(masked_cross_entropy(uniform, targets, [True, False, True]).item(), math.log(8), rel_tol=1e-14)


def test_cross_entropy_weights_and_normalizer():
    logits = torch.zeros(4, 8, dtype=torch.float64)
    w = [2.0, 0.0, 1.0, 5.0]
    mask = [True, True, True, False]
    # three selected positions, weight sum 3 over count 3
    assert math.isclose(masked_cross_entropy(logits, [0, 1, 2, 3], mask, w).item(), math.log(8), rel_tol=1e-14)
    assert math.isclose(masked_cross_entropy(logits, [0, 1, 2, 3], mask, w, normalizer=1.0).item(), 3 * math.log(8),
                        rel_tol=1e-14)


def test_cross_entropy_empty_mask_has_zero_gradient():
    logits = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    loss = masked_cross_entropy(logits, [0, 1, 2], [False] * 3)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(logits.grad, torch.zeros_like(logits))


def test_cross_entropy_contract_errors():
    with pytest.raises(ContractError):
        masked_cross_entropy(torch.zeros(2, 4, dtype=torch.float64), [0, 4], [True, True])
    with pytest.raises(ContractError):
        masked_cross_entropy(torch.zeros(2, 4, dtype=torch.float64), [0, 1], [True, True], [1.0, -1.0])
    with pytest.raises(ShapeError):
        masked_cross_entropy(torch.zeros(2, 4, dtype=torch.float64), [0, 1, 2], [True, True, True])


def test_mse_examples():
    t = torch.randn(5, 2, dtype=torch.float64)
    assert masked_mse(t, t, [True] * 5).item() == 0.0
    assert masked_mse(t + 1.0, t, [True] * 5).item() == pytest.approx(2.0, abs=1e-14)
    p = t.clone()
    p[3] += torch.tensor([3.0, 4.0], dtype=torch.float64)
    assert masked_mse(p, t, [False, False, False, True, False]).item() == pytest.approx(25.0, abs=1e-12)


def test_backward_examples():
    x = torch.randn(6, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64, requires_grad=True)
    unused = torch.randn(2, dtype=torch.float64, requires_grad=True)
    g = backward((w * x).sum(), {"w": w, "u": unused})
    assert torch.equal(g["w"], x) and torch.equal(g["u"], torch.zeros(2, dtype=torch.float64))
    g = backward((w ** 2).sum(), {"w": w})
    assert torch.allclose(g["w"], 2 * w.detach(), rtol=0, atol=0)
    with pytest.raises(ContractError):
        backward(w * 2, {"w": w})


def test_grad_check_examples():
    a = torch.randn(4, 4, dtype=torch.float64)
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (w @ a @ w) + (w ** 2).sum(), {"w": w}) < 1e-8
    assert grad_check(lambda: torch.zeros((), dtype=torch.float64) + 3.0, {"w": w}) == 0.0
    logits = torch.randn(5, 7, dtype=torch.float64, requires_grad=True)
    targets = [0, 3, 6, 2, 1]
    err = grad_check(lambda: masked_cross_entropy(logits, targets, [True] * 5, [1.0, 2.0, 0.5, 3.0, 1.0]),
                     {"logits": logits})
    assert err < 1e-5


def test_grad_check_eps_range():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    for eps in (1e-8, 1e-2):
        with pytest.raises(ContractError):
            grad_check(lambda: (w ** 2).sum(), {"w": w}, eps=eps)


def test_grad_check_detects_a_wrong_gradient():
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    assert grad_check(lambda: Wrong.apply(w), {"w": w}) > 0.1


@pytest.mark.parametrize("shape", [(7,), (3, 5), (2, 3, 4)])
def test_public_ops_gradients_on_random_inputs(shape):
    torch.manual_seed(0)
    x = torch.randn(*shape, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: (softmax_rows(x) * torch.arange(shape[-1], dtype=torch.float64)).sum(), {"x": x}) < 1e-4
    tgt = torch.zeros(shape[:-1], dtype=torch.long)
    mask = torch.ones(shape[:-1], dtype=torch.bool)
    if len(shape) > 1:
        assert grad_check(lambda: masked_cross_entropy(x, tgt, mask), {"x": x}) < 1e-4
        y = torch.randn(*shape, dtype=torch.float64)
        assert grad_check(lambda: masked_mse(x, y, mask), {"x": x}) < 1e-4


def test_determinism():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((9, 9))
    assert torch.equal(softmax_rows(matmul(as_tensor(a), as_tensor(a))), softmax_rows(matmul(as_tensor(a), as_tensor(a))))
