import numpy as np
import pytest
import torch
import torch.nn as nn

from featsent.classifiers import ClassifierSpec, build_classifier, plan_taps, train_classifier
from featsent.data import make_synthetic
from featsent.detector import build_detector

torch.set_num_threads(1)


class Linear(nn.Module):
    """Affine logits ``W x + b`` over flattened inputs."""

    def __init__(self, W, b=None):
        super().__init__()
        W = torch.as_tensor(W, dtype=torch.float64)
        self.W = nn.Parameter(W, requires_grad=False)
        self.b = nn.Parameter(torch.zeros(W.shape[0], dtype=torch.float64) if b is None else torch.as_tensor(b, dtype=torch.float64), requires_grad=False)

    def forward(self, x):
        return x.flatten(1).to(self.W.dtype) @ self.W.T + self.b


class SmallMLP(nn.Module):
    def __init__(self, in_dim, classes=4, seed=0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(in_dim, 16, generator=g) * 0.5)
        self.w2 = nn.Parameter(torch.randn(16, classes, generator=g) * 0.5)

    def forward(self, x):
        return torch.tanh(x.flatten(1) @ self.w1) @ self.w2


@pytest.fixture(scope="session")
def synthetic():
    return make_synthetic(600, seed=11)


@pytest.fixture(scope="session")
def tiny_classifier(synthetic):
    clf = build_classifier(ClassifierSpec("tinycnn", 10), seed=0)
    clf, _ = train_classifier(clf, synthetic.take(np.arange(500)), epochs=3, lr=3e-3, seed=0)
    clf.eval()
    return clf


@pytest.fixture(scope="session")
def tiny_plan(tiny_classifier):
    return plan_taps(tiny_classifier, ["B1", "B2", "B3", "B4"])


@pytest.fixture
def tiny_detector(tiny_plan):
    return build_detector(tiny_plan, instances_per_gram=8, seed=0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
