import numpy as np
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featsent.attacks.minimal import deepfool, jsma, saliency_map

from conftest import Linear


class SqrtModel(nn.Module):
    """Logits ``(0, sqrt(x) - 0.9)`` on a single feature: curved enough that one linear step falls short."""

    def forward(self, x):
        v = x.flatten(1)[:, :1]
        return torch.cat([torch.zeros_like(v), torch.sqrt(v) - 0.9], dim=1)


class ConstantModel(nn.Module):
    def forward(self, x):
        return torch.stack([0 * x.flatten(1).sum(1) + 1.0, 0 * x.flatten(1).sum(1)], dim=1)


def test_deepfool_hyperplane_distance_on_binary_linear_models():
    rng = np.random.default_rng(0)
    for trial in range(50):
        w = rng.normal(size=6)
        x = rng.uniform(0.3, 0.7, (1, 6))
        b = -w @ x[0] + rng.uniform(0.05, 0.2) * np.linalg.norm(w) * (1 if trial % 2 else -1)
        model = Linear([[0.0] * 6, list(w)], [0.0, b])
        x = torch.as_tensor(x)
        f = float(w @ x[0].numpy() + b)
        x_adv, iters, success = deepfool(model, x, max_iter=1, overshoot=0.02)
        expected = 1.02 * abs(f) / np.linalg.norm(w)
        norm = (x_adv - x).norm().item()
        assert iters.item() == 1 and success.item()
        assert abs(norm - expected) <= 0.05 * expected


def test_deepfool_already_misclassified_is_untouched():
    model = Linear([[1.0, 0.0], [0.0, 1.0]])
    x = torch.tensor([[0.2, 0.8]], dtype=torch.float64)
    x_adv, iters, _ = deepfool(model, x, y=torch.tensor([0]))
    assert iters.item() == 0 and torch.equal(x_adv, x)


def test_deepfool_budget_exhaustion():
    x = torch.tensor([[0.25]], dtype=torch.float64)
    x_adv, iters, success = deepfool(SqrtModel(), x, max_iter=1)
    assert iters.item() == 1 and not success.item()
    assert SqrtModel()(x_adv).argmax(1).item() == 0


def test_deepfool_degenerate_gradient():
    x = torch.rand(3, 4)
    x_adv, _, success = deepfool(ConstantModel(), x, max_iter=5)
    assert not success.any() and torch.equal(x_adv, x)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 40, elements=st.floats(-5, 5)),
    arrays(np.float64, 40, elements=st.floats(-5, 5)),
)
def test_jsma_zero_saliency_case_is_exact(j_t, j_o):
    s = saliency_map(torch.as_tensor(j_t), torch.as_tensor(j_o)).numpy()
    zero = (j_t < 0) | (j_o > 0)
    assert np.all(s[zero] == 0.0)
    assert np.all(s[~zero] == j_t[~zero] * np.abs(j_o[~zero]))


def test_jsma_hand_ranked_first_pixel():
    # target 0: J_t = (1, 2, 0.5); off-target sums = (-3, -0.5, -4); saliency = (3, 1, 2)
    W = [[1.0, 2.0, 0.5], [-1.0, 0.0, -2.0], [-2.0, -0.5, -2.0]]
    model = Linear(W, [0.0, 1.0, 0.0])
    s = saliency_map(torch.tensor([[1.0, 2.0, 0.5]]), torch.tensor([[-3.0, -0.5, -4.0]]))
    assert s.argmax().item() == 0 and s.tolist() == [[3.0, 1.0, 2.0]]
    x = torch.zeros(1, 3, dtype=torch.float64)
    x_adv, modified, _ = jsma(model, x, torch.tensor([0]), theta=0.1, gamma=0.34)
    assert modified.item() == 1
    assert torch.nonzero(x_adv - x).tolist() == [[0, 0]]


def test_jsma_budget_is_floor_gamma_p():
    P = 3 * 32 * 32
    W = np.zeros((3, P))
    W[0] = 1.0
    W[1:] = -1.0
    model = Linear(W, [-1e6, 0.0, 0.0])
    x = torch.full((1, 3, 32, 32), 0.5, dtype=torch.float64)
    x_adv, modified, success = jsma(model, x, torch.tensor([0]), theta=1.0, gamma=0.1)
    assert modified.item() == 307 and not success.item()
    assert int((x_adv != x).sum()) == 307


def test_jsma_zero_saliency_map_fails():
    W = [[-1.0, -1.0], [1.0, 1.0]]
    x = torch.full((2, 2), 0.5, dtype=torch.float64)
    x_adv, modified, success = jsma(Linear(W), x, torch.tensor([0, 0]))
    assert not success.any() and torch.all(modified == 0) and torch.equal(x_adv, x)
