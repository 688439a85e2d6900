import math

import numpy as np
import pytest
import torch

from helpers import G, P, T, Z, small_model, tiny_model
from moddiff.data import Corpus, WorldSpec
from moddiff.errors import ContractError, NumericError, ShapeError
from moddiff.flow import EulerPlan, euler_integrate, euler_sample, export_latents, interpolate, rf_loss, rf_rows
from moddiff.layout import layout_of
from moddiff.tensor import grad_check
from moddiff.train import TrainConfig, build_model, eval_gen, train


def test_interpolate_examples():
    noise = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    data = torch.tensor([[2.0, 4.0]], dtype=torch.float64)
    assert torch.equal(interpolate(noise, data, 0.0), noise)
    assert torch.equal(interpolate(noise, data, 1.0), data)
    assert interpolate(noise, data, 0.5).tolist() == [[1.0, 2.0]]
    with pytest.raises(ShapeError):
        interpolate(noise, torch.zeros(2, 2, dtype=torch.float64), 0.5)
    with pytest.raises(ContractError):
        interpolate(noise, data, 1.5)


def test_interpolate_is_affine_in_t():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    for lo, hi in [(0.1, 0.7), (0.0, 1.0), (0.33, 0.34)]:
        mid = interpolate(a, b, (lo + hi) / 2)
        assert np.allclose(mid, (interpolate(a, b, lo) + interpolate(a, b, hi)) / 2, atol=1e-15)


def test_rf_rows_targets_are_consistent():
    lay = layout_of([(T, P, 2), (Z, G, 3), (T, P, 1, 1), (Z, G, 2, 1)])
    v0 = np.random.default_rng(1).standard_normal((5, 2))
    vt, target, times = rf_rows(lay, v0, np.random.default_rng(2))
    t_rows = times[lay.latent_positions()]
    # v_t + (1 - t) (v_0 - eps) recovers v_0
    assert np.allclose(vt + (1 - t_rows)[:, None] * target, v0, atol=1e-14)
    # one time per latent segment, text positions at time 1
    assert len(set(t_rows[:3])) == 1 and len(set(t_rows[3:])) == 1 and t_rows[0] != t_rows[3]
    assert (times[~lay.latent_positions()] == 1.0).all()


def test_rf_loss_zero_model_expectation():
    m = tiny_model()
    m.zero_heads()
    lay = layout_of([(T, P, 2), (Z, G, 1)])
    rng = np.random.default_rng(3)
    draws = []
    for _ in range(10_000):
        v0 = rng.standard_normal((1, 2))
        draws.append(rf_loss(v0, [1, 2], m, lay, rng).item())
    draws = np.array(draws)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - 4.0) < 3 * se


def test_rf_loss_grad_check():
    m = tiny_model(seed=4)
    lay = layout_of([(T, P, 2), (Z, G, 3)])
    v0 = np.random.default_rng(5).standard_normal((3, 2))
    err = grad_check(lambda: rf_loss(v0, [1, 2], m, lay, np.random.default_rng(6)), dict(m.named_parameters()),
                     max_per_tensor=4)
    assert err < 1e-4


def test_euler_constant_field_via_model():
    m = small_model()
    m.zero_heads()
    c = torch.tensor([0.7, -1.3], dtype=torch.float64)
    with torch.no_grad():
        m.gen_head.bias.copy_(c)
    lay = layout_of([(T, P, 2), (Z, G, 4, 0, True)])
    for k in (1, 3, 50):
        z0 = torch.from_numpy(np.random.default_rng(7).standard_normal((4, 2)))
        z = euler_sample(m, [1, 2], lay, EulerPlan(k), np.random.default_rng(7))
        assert torch.allclose(z, z0 + c, atol=1e-12)


def test_euler_order_one_convergence():
    a = np.array([1.0, -2.0])
    z0 = np.zeros(2)
    errs = {}
    for k in (8, 16, 32, 64):
        z = euler_integrate(lambda z, t: a * t, z0, EulerPlan(k))
        errs[k] = np.linalg.norm(z - (z0 + a / 2))
    for k in (8, 16, 32):
        assert 1.6 <= errs[k] / errs[2 * k] <= 2.4


def test_one_step_exact_transport():
    rng = np.random.default_rng(8)
    z0, x1 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    z = euler_integrate(lambda z, t: (x1 - z) / (1 - t), z0, EulerPlan(1))
    assert np.allclose(z, x1, atol=1e-15)


def test_euler_reports_failing_step():
    with pytest.raises(NumericError, match="step 3"):
        euler_integrate(lambda z, t: np.inf * z if t > 0.25 else z, np.ones(2), EulerPlan(10))


def test_custom_grid_validation():
    EulerPlan(2, (0.0, 0.3, 1.0))
    with pytest.raises(ContractError):
        EulerPlan(2, (0.0, 0.5, 0.4))
    with pytest.raises(ContractError):
        EulerPlan(0)


def test_cached_and_uncached_sampling_agree():
    m = small_model(seed=9)
    lay = layout_of([(T, P, 3), (Z, G, 4), (T, P, 2, 1), (Z, G, 4, 1, True)])
    prior = np.random.default_rng(1).standard_normal((4, 2))
    prompt = [1, 2, 3, 4, 5]
    a = euler_sample(m, prompt, lay, EulerPlan(10), np.random.default_rng(2), True, prior)
    b = euler_sample(m, prompt, lay, EulerPlan(10), np.random.default_rng(2), False, prior)
    assert torch.max(torch.abs(a - b)).item() <= 1e-9


def test_export_latents(tmp_path):
    path = tmp_path / "z.csv"
    export_latents(path, np.array([[0.5, -1.0], [2.0, 3.0]]), [0, 1])
    lines = path.read_text().splitlines()
    assert lines[0] == "label,z0,z1" and lines[1] == "0,0.5,-1"


def test_toy_mixture_conditional_generation():
    spec = WorldSpec(n_gen_classes=2)
    corpus = Corpus(spec, seed=0, n_und=10, n_gen=5000, n_il=10)
    model = build_model(spec, d_model=32, n_heads=2, d_head=16, n_layers=2)
    cfg = TrainConfig(steps=300, warmup=20, lr=3e-3, batch_und=0, w_und=0, batch_gen=64, log_every=0)
    train(cfg, corpus, model)
    res = eval_gen(model, spec, n_per_class=128)
    assert min(res["within_3sigma"]) >= 0.9
