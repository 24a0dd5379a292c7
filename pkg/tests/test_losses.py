"""Loss-function oracles and properties.

Every numeric expectation here is checked against an independent
recomputation (pure-python/numpy, float64) rather than against the
implementation under test.
"""

import math

import numpy as np
import pytest
import torch

from stylemuseum.lora import FrozenLoraState, cosine_similarity
from stylemuseum.losses import (
    HyperParams,
    LossReport,
    denoising_loss,
    dual_reg_loss,
    feature_reg_loss,
    mean_latent,
    softmax_kl,
    style_distillation_loss,
    total_step_loss,
    weight_reg_loss,
)

from conftest import central_diff, pick_coords, rel_err


# ----------------------------------------------------------------- oracles

def kl_oracle(p, q, tau):
    """Independent float64 softmax-KL: explicit softmax + summation loop."""
    p = np.asarray(p, dtype=np.float64).ravel() / tau
    q = np.asarray(q, dtype=np.float64).ravel() / tau
    sp = np.exp(p - p.max())
    sp /= sp.sum()
    sq = np.exp(q - q.max())
    sq /= sq.sum()
    return float(sum(spv * (math.log(spv) - math.log(sqv)) for spv, sqv in zip(sp, sq)))


def mse_oracle(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(math.fsum((x - y) ** 2 for x, y in zip(a, b)) / a.size)


# -------------------------------------------------------------- softmax_kl

def test_softmax_kl_two_term_oracle():
    p = torch.tensor([1.0, 0.0], dtype=torch.float64)
    q = torch.tensor([0.0, 1.0], dtype=torch.float64)
    got = float(softmax_kl(p, q, 1.0))
    assert rel_err(got, kl_oracle([1.0, 0.0], [0.0, 1.0], 1.0)) < 1e-14
    assert abs(got - 0.462117) < 1e-6


def test_softmax_kl_identity_is_exactly_zero():
    g = torch.Generator().manual_seed(11)
    p = torch.randn(4, 7, generator=g)
    assert float(softmax_kl(p, p.clone(), 1.0)) == 0.0


def test_softmax_kl_tau_scaling_identity():
    a = softmax_kl(torch.tensor([2.0, 0.0]), torch.tensor([0.0, 2.0]), 2.0)
    b = softmax_kl(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]), 1.0)
    assert abs(float(a) - float(b)) < 1e-7


@pytest.mark.parametrize("shape,tau", [((6,), 1.0), ((3, 5), 0.7), ((2, 4, 4), 2.5)])
def test_softmax_kl_matches_oracle(shape, tau):
    g = torch.Generator().manual_seed(hash(shape) % 2**31)
    p = torch.randn(*shape, generator=g, dtype=torch.float64)
    q = torch.randn(*shape, generator=g, dtype=torch.float64)
    assert rel_err(float(softmax_kl(p, q, tau)), kl_oracle(p.numpy(), q.numpy(), tau)) < 1e-12


def test_softmax_kl_nonnegative_and_shift_invariant():
    g = torch.Generator().manual_seed(2)
    for _ in range(20):
        p = torch.randn(10, generator=g, dtype=torch.float64)
        q = torch.randn(10, generator=g, dtype=torch.float64)
        assert float(softmax_kl(p, q, 1.0)) > 0.0
        # adding a constant to the logits leaves the softmax unchanged
        assert abs(float(softmax_kl(p, p + 3.7, 1.0))) < 1e-12


def test_softmax_probabilities_sum_to_one():
    g = torch.Generator().manual_seed(3)
    p = torch.randn(64, generator=g)
    total = float(torch.softmax(p, dim=0).sum())
    assert abs(total - 1.0) < 1e-6


def test_softmax_kl_errors():
    with pytest.raises(ValueError):
        softmax_kl(torch.ones(3), torch.ones(4), 1.0)
    with pytest.raises(ValueError):
        softmax_kl(torch.ones(3), torch.ones(3), 0.0)
    with pytest.raises(ValueError):
        softmax_kl(torch.tensor([1.0, float("nan")]), torch.ones(2), 1.0)
    with pytest.raises(ValueError):
        softmax_kl(torch.ones(0), torch.ones(0), 1.0)


def test_softmax_kl_gradient_finite_difference():
    g = torch.Generator().manual_seed(5)
    p = torch.randn(12, generator=g, dtype=torch.float64, requires_grad=True)
    q = torch.randn(12, generator=g, dtype=torch.float64, requires_grad=True)
    loss = softmax_kl(p, q, 0.8)
    gp, gq = torch.autograd.grad(loss, [p, q])
    rng = np.random.default_rng(5)
    for tensor, grad in ((p, gp), (q, gq)):
        for i in pick_coords(grad, 4, rng):
            fd = central_diff(lambda: softmax_kl(p, q, 0.8), tensor, i, 1e-5)
            assert rel_err(float(grad.view(-1)[i]), fd) < 1e-4


# ---------------------------------------------------------- denoising_loss

def test_denoising_loss_zero_and_ones():
    x = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(0))
    assert float(denoising_loss(x, x.clone())) == 0.0
    assert float(denoising_loss(torch.zeros(3, 5), torch.ones(3, 5))) == 1.0


def test_denoising_loss_matches_elementwise_oracle():
    g = torch.Generator().manual_seed(3)
    a = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    b = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    assert rel_err(float(denoising_loss(a, b)), mse_oracle(a.numpy(), b.numpy())) < 1e-12


def test_denoising_loss_reduction_convention():
    # mean over a sample's elements, then mean over the batch
    g = torch.Generator().manual_seed(4)
    a = torch.randn(3, 4, 8, 8, generator=g, dtype=torch.float64)
    b = torch.randn(3, 4, 8, 8, generator=g, dtype=torch.float64)
    per_sample = [mse_oracle(a[i].numpy(), b[i].numpy()) for i in range(3)]
    assert rel_err(float(denoising_loss(a, b)), float(np.mean(per_sample))) < 1e-12


def test_denoising_loss_shape_mismatch():
    with pytest.raises(ValueError):
        denoising_loss(torch.ones(2, 3), torch.ones(3, 2))


# -------------------------------------------------------------- mean_latent

def test_mean_latent_identical_and_hand_case():
    z = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(7))
    # four copies: the sum and the division by 4 are both exact in binary float
    assert torch.equal(mean_latent([z.clone() for _ in range(4)]), z)
    m = mean_latent([torch.tensor([[1.0, 3.0]]).reshape(1, 1, 2),
                     torch.tensor([[3.0, 1.0]]).reshape(1, 1, 2)])
    assert torch.equal(m, torch.tensor([[[2.0, 2.0]]]))


def test_mean_latent_matches_accumulation_oracle():
    g = torch.Generator().manual_seed(5)
    zs = [torch.randn(4, 8, 8, generator=g, dtype=torch.float64) for _ in range(8)]
    got = mean_latent(zs)
    stacked = np.stack([z.numpy() for z in zs])
    for idx in [(0, 0, 0), (1, 3, 2), (3, 7, 7)]:
        oracle = math.fsum(stacked[(slice(None),) + idx].tolist()) / 8.0
        assert rel_err(float(got[idx]), oracle) < 1e-14


def test_mean_latent_empty():
    with pytest.raises(ValueError):
        mean_latent([])


# ----------------------------------------------------- style distillation

def test_style_distillation_equals_kl_for_single_sample():
    g = torch.Generator().manual_seed(6)
    a = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    b = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
    assert float(style_distillation_loss(a, b, 1.3)) == float(softmax_kl(a, b, 1.3))


def test_style_distillation_batch_average():
    g = torch.Generator().manual_seed(8)
    a = torch.randn(3, 4, 4, 4, generator=g, dtype=torch.float64)
    b = torch.randn(3, 4, 4, 4, generator=g, dtype=torch.float64)
    oracle = np.mean([kl_oracle(a[i].numpy(), b[i].numpy(), 0.9) for i in range(3)])
    assert rel_err(float(style_distillation_loss(a, b, 0.9)), float(oracle)) < 1e-12


def test_style_distillation_stopgrad_blocks_mean_branch():
    a = torch.randn(1, 2, 3, 3, requires_grad=True, dtype=torch.float64)
    b = torch.randn(1, 2, 3, 3, requires_grad=True, dtype=torch.float64)
    style_distillation_loss(a, b, 1.0, stop_grad_mean=True).backward()
    assert b.grad is None or float(b.grad.abs().sum()) == 0.0
    assert a.grad is not None and float(a.grad.abs().sum()) > 0.0


def test_style_distillation_both_branches_differentiable_by_default():
    a = torch.randn(1, 2, 3, 3, requires_grad=True, dtype=torch.float64)
    b = torch.randn(1, 2, 3, 3, requires_grad=True, dtype=torch.float64)
    style_distillation_loss(a, b, 1.0).backward()
    assert float(a.grad.abs().sum()) > 0.0
    assert float(b.grad.abs().sum()) > 0.0


# ------------------------------------------------------------- weight reg

def _frozen(deltas: dict) -> FrozenLoraState:
    from collections import OrderedDict

    return FrozenLoraState(OrderedDict(deltas), rank=1, scale=1.0)


def test_weight_reg_identity_is_exactly_zero():
    # values chosen so norms and dot products are exact in float
    d = {"p": torch.tensor([[1.0, 2.0], [2.0, 0.0]]), "q": torch.tensor([[3.0, 4.0], [0.0, 0.0]])}
    prev = _frozen({k: v.clone() for k, v in d.items()})
    cur = _frozen({k: v.clone() for k, v in d.items()})
    assert float(weight_reg_loss(prev, cur)) == 0.0


def test_weight_reg_opposite_is_exactly_two():
    d = {"p": torch.tensor([[1.0, 2.0], [2.0, 0.0]])}
    prev = _frozen({k: v.clone() for k, v in d.items()})
    cur = _frozen({k: -v for k, v in d.items()})
    assert float(weight_reg_loss(prev, cur)) == 2.0


def test_weight_reg_mixed_orthogonal_and_identical():
    # layer p: orthogonal rank-1 products (cos 0); layer q: identical (cos 1)
    prev = _frozen({"p": torch.tensor([[1.0, 0.0], [0.0, 0.0]]),
                    "q": torch.tensor([[1.0, 2.0], [2.0, 0.0]])})
    cur = _frozen({"p": torch.tensor([[0.0, 1.0], [0.0, 0.0]]),
                   "q": torch.tensor([[1.0, 2.0], [2.0, 0.0]])})
    assert float(weight_reg_loss(prev, cur)) == 0.5


def test_weight_reg_structure_mismatch():
    prev = _frozen({"p": torch.ones(2, 2)})
    cur = _frozen({"x": torch.ones(2, 2)})
    with pytest.raises(ValueError):
        weight_reg_loss(prev, cur)


def test_weight_reg_bounded_and_interpolation():
    g = torch.Generator().manual_seed(9)
    a = torch.randn(3, 4, generator=g, dtype=torch.float64)
    b = torch.randn(3, 4, generator=g, dtype=torch.float64)
    prev = _frozen({"p": a})
    values = []
    for s in np.linspace(0.0, 1.0, 11):
        cur = _frozen({"p": a + float(s) * (b - a)})
        v = float(weight_reg_loss(prev, cur))
        assert -1e-9 <= v <= 2.0 + 1e-9
        values.append(v)
    assert abs(values[0]) < 1e-12
    # continuity: no huge jumps along the interpolation path
    assert max(abs(values[i + 1] - values[i]) for i in range(10)) < 0.5


class _StubLora:
    """Differentiable adapter stand-in for gradient-side checks."""

    def __init__(self, seed: int, names=("p", "q")):
        g = torch.Generator().manual_seed(seed)
        self._factors = {
            n: (
                torch.randn(3, 2, generator=g, dtype=torch.float64, requires_grad=True),
                torch.randn(4, 2, generator=g, dtype=torch.float64, requires_grad=True),
            )
            for n in names
        }

    @property
    def names(self):
        return list(self._factors.keys())

    def flatten_delta(self, name):
        a, b = self._factors[name]
        return (a @ b.T).reshape(-1)

    def params(self):
        return [t for pair in self._factors.values() for t in pair]


def test_weight_reg_gradients_flow_only_into_cur():
    prev_stub = _StubLora(1)
    prev = _frozen({n: prev_stub.flatten_delta(n).detach().reshape(3, 4) for n in prev_stub.names})
    cur = _StubLora(2)
    loss = weight_reg_loss(prev, cur)
    grads = torch.autograd.grad(loss, cur.params())
    assert all(g is not None for g in grads)
    assert sum(float(g.abs().sum()) for g in grads) > 0.0


def test_weight_reg_gradient_finite_difference():
    prev_stub = _StubLora(3)
    prev = _frozen({n: prev_stub.flatten_delta(n).detach().reshape(3, 4) for n in prev_stub.names})
    cur = _StubLora(4)
    loss = weight_reg_loss(prev, cur)
    params = cur.params()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(7)
    for p, grad in zip(params, grads):
        for i in pick_coords(grad, 3, rng):
            fd = central_diff(lambda: weight_reg_loss(prev, cur), p, i, 1e-5)
            assert rel_err(float(grad.view(-1)[i]), fd) < 1e-4


# ------------------------------------------------------------ feature reg

def test_feature_reg_matches_aggregation_oracle():
    g = torch.Generator().manual_seed(10)
    past = [torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    cur = [torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    oracle = np.mean(
        [
            np.mean([kl_oracle(p[i].numpy(), c[i].numpy(), 1.1) for i in range(2)])
            for p, c in zip(past, cur)
        ]
    )
    assert rel_err(float(feature_reg_loss(past, cur, 1.1)), float(oracle)) < 1e-12


def test_feature_reg_zero_when_models_agree():
    z = torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(1))
    assert float(feature_reg_loss([z], [z.clone()], 1.0)) == 0.0


def test_feature_reg_two_past_tasks_structure():
    zs = [torch.randn(1, 2, 3, 3) for _ in range(2)]
    out = feature_reg_loss(zs, [z + 0.1 for z in zs], 1.0)
    assert out.dim() == 0 and float(out) > 0.0


def test_feature_reg_errors():
    z = torch.randn(1, 2, 2, 2)
    with pytest.raises(ValueError):
        feature_reg_loss([], [], 1.0)
    with pytest.raises(ValueError):
        feature_reg_loss([z], [z, z], 1.0)
    with pytest.raises(ValueError):
        feature_reg_loss([z], [torch.randn(1, 2, 2, 3)], 1.0)


def test_feature_reg_gradients_only_into_cur():
    past = [torch.randn(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)]
    cur = [torch.randn(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)]
    feature_reg_loss(past, cur, 1.0).backward()
    assert past[0].grad is None or float(past[0].grad.abs().sum()) == 0.0
    assert float(cur[0].grad.abs().sum()) > 0.0


# ------------------------------------------------- composition arithmetic

def test_hyper_params_defaults_and_validation():
    h = HyperParams()
    assert (h.lambda1, h.lambda2, h.alpha, h.beta, h.tau) == (0.8, 1.0, 0.8, 1.5, 1.0)
    with pytest.raises(ValueError):
        HyperParams(tau=0.0)
    with pytest.raises(ValueError):
        HyperParams(alpha=-0.1)


def _f64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_dual_reg_arithmetic():
    h = HyperParams()
    got = float(dual_reg_loss(_f64(0.5), _f64(0.2), h))
    assert abs(got - 0.6) < 1e-12
    assert float(dual_reg_loss(_f64(0.0), _f64(0.0), h)) == 0.0


def test_total_step_loss_arithmetic():
    h = HyperParams()
    got = float(total_step_loss(_f64(1.0), _f64(0.5), _f64(0.6), h))
    assert abs(got - 2.3) < 1e-12
    assert float(total_step_loss(_f64(0.0), _f64(0.0), _f64(0.0), h)) == 0.0


def test_loss_report_total_identity():
    h = HyperParams()
    sd, sdl, w, f = 0.31, 0.12, 0.05, 0.4
    dr = h.lambda1 * w + h.lambda2 * f
    total = float(
        total_step_loss(torch.tensor(sd), torch.tensor(sdl), torch.tensor(dr), h)
    )
    report = LossReport(denoise=sd, style_distill=sdl, weight_reg=w, feature_reg=f,
                        dual_reg=dr, total=total)
    recomposed = report.denoise + h.alpha * report.style_distill + h.beta * report.dual_reg
    assert rel_err(report.total, recomposed) < 1e-6
    d = report.to_dict()
    assert set(d) == {"denoise", "style_distill", "weight_reg", "feature_reg", "dual_reg",
                      "total", "grad_norms"}


def test_cosine_similarity_conventions():
    assert float(cosine_similarity(torch.tensor([1.0, 2.0, 3.0]), torch.tensor([1.0, 2.0, 3.0]))) == pytest.approx(1.0)
    assert float(cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 0.0
    got = float(cosine_similarity(torch.tensor([1.0, 2.0]), torch.tensor([2.0, 1.0])))
    assert abs(got - 0.8) < 1e-7  # 4 / (sqrt5 * sqrt5)
    z = torch.zeros(3)
    assert float(cosine_similarity(z, z.clone())) == 1.0
    assert float(cosine_similarity(z, torch.ones(3))) == 0.0
    assert float(cosine_similarity(torch.ones(3), z)) == 0.0
    g = torch.Generator().manual_seed(12)
    for _ in range(10):
        u = torch.randn(6, generator=g)
        assert float(cosine_similarity(u, u.clone())) == pytest.approx(1.0, abs=1e-6)
        assert float(cosine_similarity(u, -u)) == pytest.approx(-1.0, abs=1e-6)
