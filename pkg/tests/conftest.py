import pytest
import torch
from torch import nn

torch.set_num_threads(1)

# acceptance criterion id -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE_RESULTS = {}


class LinearClassifier(nn.Module):
    """Hand-built affine classifier on flattened pixels: logits = W x + b."""

    def __init__(self, weight: torch.Tensor, bias: torch.Tensor, side: int):
        super().__init__()
        self.weight = nn.Parameter(weight, requires_grad=False)
        self.bias = nn.Parameter(bias, requires_grad=False)
        self.num_classes = weight.shape[0]
        self.input_side = side

    def forward(self, x):
        return x.flatten(1) @ self.weight.T + self.bias


def make_linear(num_classes=3, channels=3, side=8, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(num_classes, channels * side * side, generator=g, dtype=dtype)
    b = torch.randn(num_classes, generator=g, dtype=dtype)
    return LinearClassifier(w, b, side)


@pytest.fixture
def linear():
    return make_linear()


@pytest.fixture
def tiny_classifier():
    from aait.surrogates import build_classifier

    model = build_classifier("tiny", 10, 32, seed=0)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split(".")[0])):
        passed, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {key}: {detail}")
