import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from adaptrecon.mesh import icosphere
from adaptrecon.objectives import (LossParts, LossWeights, ScheduleClock, control_damping, e_min_at,
                                   edge_field, effective_mask, image_loss, lambda_field, lambda_min_at,
                                   loss_damping, normal_loss, silhouette_loss, total_loss)
from adaptrecon.remesh import E_MAX, E_MIN
from adaptrecon.solver import LAMBDA_MAX, LAMBDA_MIN


def T(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_schedule_values():
    assert loss_damping(0.2) == 0.5
    assert control_damping(0.3) == 0.5
    assert loss_damping(0.0) == pytest.approx(1 / (1 + math.exp(4)), rel=1e-12)
    assert control_damping(0.0) == pytest.approx(1 / (1 + math.exp(6)), rel=1e-12)
    assert lambda_min_at(0.0) == pytest.approx(64 * (1 - 1 / (1 + math.exp(6))))
    assert lambda_min_at(1.0) == LAMBDA_MIN
    assert e_min_at(1.0) == E_MIN


def test_schedule_ordering_and_monotonicity():
    t = np.linspace(0, 1, 1002)[1:-1]
    assert np.all(control_damping(t) < loss_damping(t))
    assert np.all(np.diff(loss_damping(t)) > 0)
    assert np.all(np.diff(lambda_min_at(t)) <= 0) and np.all(lambda_min_at(t) >= 16)
    assert np.all(np.diff(e_min_at(t)) <= 0) and np.all(e_min_at(t) >= 0.01875)
    for f in (loss_damping, control_damping):
        assert np.all((f(t) > 0) & (f(t) < 1))
    early = np.linspace(0, 0.15, 200, endpoint=False)
    assert np.all(lambda_min_at(early) > 0.9 * LAMBDA_MAX)
    assert np.all(loss_damping(np.linspace(0, 0.05, 50)) < 0.05)


def test_clock():
    c = ScheduleClock(0, 4)
    c.advance()
    assert c.t == 0.25
    with pytest.raises(ValueError):
        ScheduleClock(5, 4)
    done = ScheduleClock(4, 4)
    with pytest.raises(ValueError):
        done.advance()


def test_lambda_field_limits():
    m = icosphere(1)
    lam = lambda_field(np.zeros(m.n_vertices), 1.0)
    assert np.allclose(lam.values, LAMBDA_MAX)
    lam = lambda_field(np.full(m.n_vertices, 10.0), 1.0)
    assert np.allclose(lam.values, LAMBDA_MIN)
    lam = lambda_field(np.full(m.n_vertices, 10.0), 0.0)
    assert np.all(lam.values > 63)
    with pytest.raises(ValueError):
        lambda_field(-np.ones(3), 0.5)


def test_edge_field_limits():
    m = icosphere(1)
    n = m.n_vertices
    e = edge_field(np.full(n, 5.0), np.full(n, 50.0), 1.0, m)
    assert np.allclose(e.values, E_MIN)
    e = edge_field(np.full(n, 5.0), np.full(n, 50.0), 0.0, m)
    assert np.all(e.values > 0.99 * E_MAX)
    e = edge_field(np.zeros(n), np.zeros(n), 0.7, m)
    assert np.allclose(e.values, E_MAX)
    # smoothing is the vertex + one-ring mean
    c = np.zeros(n)
    c[0] = 1.0
    raw = edge_field(c, np.zeros(n), 1.0, m, smooth=False).values
    sm = edge_field(c, np.zeros(n), 1.0, m).values
    nb = m.neighbor_list(0)
    assert sm[0] == pytest.approx((raw[0] + raw[nb].sum()) / (len(nb) + 1))
    assert np.all((sm >= E_MIN) & (sm <= E_MAX))


def test_image_loss_values():
    I = T([[[0.99]]])
    assert float(image_loss(I, I, I, T([[1.0]]))) == 0.0
    assert float(image_loss(T([[[0.01]]]), I, I, T([[1.0]]))) == pytest.approx(0.5 * math.log(50))
    rng = np.random.default_rng(0)
    a, b, c = (T(rng.random((4, 4, 3))) for _ in range(3))
    assert float(image_loss(a, b, c, torch.zeros(4, 4))) == 0.0


def test_image_loss_mean_reduction_counts_mask_pixels():
    rng = np.random.default_rng(1)
    a, c = T(rng.random((5, 5, 3))), T(rng.random((5, 5, 3)))
    m = torch.zeros(5, 5)
    m[1:3, 1:4] = 1.0
    s = image_loss(a, a, c, m, reduction="sum")
    assert float(image_loss(a, a, c, m)) == pytest.approx(float(s) / 6)


def test_silhouette_loss():
    M = T(np.eye(4))
    assert float(silhouette_loss(M, M)) == 0.0
    assert float(silhouette_loss(1 - M, M, reduction="sum")) == 16.0
    assert float(silhouette_loss(1 - M, M)) == 4.0


def test_silhouette_gradient_sign():
    Mh = torch.tensor([[0.3, 0.8]], dtype=torch.float64, requires_grad=True)
    M = T([[1.0, 0.0]])
    (g,) = torch.autograd.grad(silhouette_loss(Mh, M), Mh)
    assert g[0, 0] < 0 and g[0, 1] > 0
    h = 1e-6
    for idx in ((0, 0), (0, 1)):
        p, q = Mh.detach().clone(), Mh.detach().clone()
        p[idx] += h
        q[idx] -= h
        assert np.sign(float(silhouette_loss(p, M) - silhouette_loss(q, M))) == np.sign(float(g[idx]))


def test_effective_mask():
    M = T([[1.0, 1.0, 0.0]])
    Mh = torch.tensor([[1.0, 0.5, 0.7]], dtype=torch.float64, requires_grad=True)
    m = effective_mask(M, Mh)
    assert torch.equal(m, T([[1.0, 0.5, 0.0]]))
    assert not m.requires_grad
    g = torch.autograd.grad((m * 3).sum() + Mh.sum() * 0, Mh)[0]
    assert torch.equal(g, torch.zeros_like(g))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normal_loss_value_equals_masked_delta(seed):
    rng = np.random.default_rng(seed)
    N = torch.tensor(rng.normal(size=(6, 7, 3)), requires_grad=True)
    D = torch.tensor(rng.normal(size=(6, 7, 3)) * 0.2, requires_grad=True)
    m = T(rng.random((6, 7)) * (rng.random((6, 7)) > 0.3))
    val = normal_loss(D, N, m, reduction="sum")
    assert abs(float(val) - float((m[..., None] * D).abs().sum())) <= 1e-9
    gN, gD = torch.autograd.grad(val, (N, D))
    # appearance side shrinks the delta, geometry side moves toward the perturbed normal
    assert torch.allclose(gD, m[..., None] * torch.sign(D))
    assert torch.allclose(gN, -m[..., None] * torch.sign(D))
    assert float(normal_loss(torch.zeros_like(D), N, m)) == 0.0


def test_total_loss():
    w = LossWeights.from_profile("synthetic")
    assert (w.w_img, w.w_sil, w.w_normal) == (0.05, 1.0, 0.01)
    assert (LossWeights.from_profile("real").w_img, LossWeights.from_profile("real").w_normal) == (1e-3, 1e-4)
    one = torch.tensor(1.0, dtype=torch.float64)
    parts = LossParts(one * 2, one * 3, one * 5)
    s = 1 / (1 + math.exp(4))
    assert float(total_loss(parts, w, 0.0)) == pytest.approx(s * 0.1 + 3 + s * 0.05)
    assert float(total_loss(LossParts(one * 0, one * 0, one * 0), w, 0.5)) == 0.0
    with pytest.raises(ValueError):
        LossWeights.from_profile("studio")
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)
