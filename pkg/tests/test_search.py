import csv
import math

import pytest
import torch

from aait.errors import DomainError, InvalidBatchError, SearchDivergedError
from aait.imgops import apply_operation
from aait.policy import PolicyParameters
from aait.search import (LOG_COLUMNS, Critic, SearchConfig, classification_loss, critic_distance, critic_step,
                         mean_target_logit, run_search, split_batch)

from conftest import make_linear


def toy_dataset(n=64, side=8, seed=0):
    """Two classes: a bright left half or a bright right half, on noise."""
    g = torch.Generator().manual_seed(seed)
    x = 0.3 * torch.rand(n, 3, side, side, generator=g)
    y = torch.arange(n) % 2
    x[y == 0, :, :, : side // 2] += 0.6
    x[y == 1, :, :, side // 2 :] += 0.6
    return x.clamp(0, 1), y


class ConstantLogits(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(len(x), -1) + 0 * x.flatten(1).sum(1, keepdim=True)


class TestSplit:
    def test_even(self):
        a, b = split_batch(torch.arange(16), torch.Generator().manual_seed(0))
        assert len(a) == len(b) == 8
        assert sorted(torch.cat([a, b]).tolist()) == list(range(16))

    def test_odd(self):
        a, b = split_batch(torch.arange(9), torch.Generator().manual_seed(0))
        assert {len(a), len(b)} == {4, 5}
        assert sorted(torch.cat([a, b]).tolist()) == list(range(9))

    def test_deterministic(self):
        first = split_batch(torch.arange(20), torch.Generator().manual_seed(3))
        second = split_batch(torch.arange(20), torch.Generator().manual_seed(3))
        assert all(torch.equal(u, v) for u, v in zip(first, second))

    def test_too_small(self):
        with pytest.raises(InvalidBatchError):
            split_batch(torch.zeros(1, 3, 4, 4))


class TestCritic:
    def test_identical_batches(self):
        torch.manual_seed(0)
        critic = Critic(3, 8, zero_head=False)
        x = torch.rand(5, 3, 16, 16)
        assert float(critic_distance(critic, x, x).detach()) == 0.0

    def test_zero_head(self):
        critic = Critic(3, 8)
        assert float(critic_distance(critic, torch.rand(4, 3, 16, 16), torch.rand(6, 3, 16, 16)).detach()) == 0.0

    def test_one_scalar_per_image(self):
        assert Critic(3, 8)(torch.rand(7, 3, 32, 32)).shape == (7,)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidBatchError):
            critic_distance(Critic(3, 8), torch.rand(2, 3, 8, 8), torch.rand(2, 3, 16, 16))

    def test_separates_black_from_white(self):
        torch.manual_seed(0)
        critic = Critic(3, 16)
        opt = torch.optim.Adam(critic.parameters(), lr=1e-3, betas=(0.0, 0.999))
        white, black = torch.ones(8, 3, 16, 16), torch.zeros(8, 3, 16, 16)
        g = torch.Generator().manual_seed(0)
        for _ in range(200):
            critic_step(critic, opt, white, black, 10.0, g)
        assert float(critic_distance(critic, white, black).detach()) > 0.5


class TestClassificationLoss:
    def test_constant_logit(self):
        clf = ConstantLogits(torch.tensor([[0.0, 3.0, 1.0]]))
        x = torch.rand(4, 3, 4, 4)
        t = torch.ones(4, dtype=torch.long)
        assert float(classification_loss(clf, x, t, x, t)) == -6.0

    @pytest.mark.parametrize("C", [2, 10])
    def test_uniform_cross_entropy(self, C):
        clf = ConstantLogits(torch.zeros(1, C, dtype=torch.float64))
        x = torch.rand(3, 1, 2, 2, dtype=torch.float64)
        t = torch.zeros(3, dtype=torch.long)
        loss = classification_loss(clf, x, t, x, t, "cross_entropy")
        assert float(loss) == pytest.approx(2 * math.log(C), abs=1e-12)

    def test_invalid_label(self):
        clf = ConstantLogits(torch.zeros(1, 3))
        x = torch.rand(2, 3, 4, 4)
        with pytest.raises(DomainError):
            classification_loss(clf, x, torch.tensor([0, 3]), x, torch.tensor([0, 1]))

    def test_magnitude_gradient_matches_finite_difference(self):
        side = 16
        model = make_linear(2, 3, side, seed=4)
        yy, xx = torch.meshgrid(torch.linspace(-1, 1, side, dtype=torch.float64),
                                torch.linspace(-1, 1, side, dtype=torch.float64), indexing="ij")
        img = (0.5 + 0.4 * torch.exp(-(xx**2 + yy**2) / 0.4) * torch.cos(2 * xx)).expand(2, 3, side, side)
        t = torch.tensor([0, 1])

        def loss(mu):
            return classification_loss(model, apply_operation("Rotate", mu, img), t, img, t)

        mu = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
        loss(mu).backward()
        h = 1e-4
        fd = (float(loss(torch.tensor(0.3 + h, dtype=torch.float64)))
              - float(loss(torch.tensor(0.3 - h, dtype=torch.float64)))) / (2 * h)
        assert abs(float(mu.grad) - fd) <= 1e-2 * max(1.0, abs(fd))

    def test_clean_term_has_no_policy_gradient(self):
        model = make_linear(3, 3, 8, seed=5)
        a = torch.rand(4, 3, 8, 8, dtype=torch.float64)
        ta = torch.tensor([0, 1, 2, 0])
        grads = []
        for seed in (0, 1):
            b = torch.rand(4, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
            tb = torch.randint(3, (4,), generator=torch.Generator().manual_seed(seed))
            mu = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
            classification_loss(model, apply_operation("ShearX", mu, a), ta, b, tb).backward()
            grads.append(float(mu.grad))
        assert grads[0] == grads[1]


class TestSearchConfig:
    def test_defaults(self):
        c = SearchConfig()
        assert (c.eta, c.epochs, c.temperature, c.learning_rate, c.adam_betas, c.chunk_size) == (
            0.3, 20, 0.05, 1e-3, (0.0, 0.999), 8)
        assert c.gp_coefficient == 10.0

    def test_negative_eta(self):
        with pytest.raises(DomainError, match="η"):
            SearchConfig(eta=-1)


class TestRunSearch:
    def setup_method(self):
        self.x, y = toy_dataset()
        self.t = 1 - y
        torch.manual_seed(0)
        self.clf = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(3 * 64, 2))

    def config(self, **kw):
        return SearchConfig(**{"epochs": 20, "batch_size": 16, "L": 3, "K": 2, "critic_width": 8,
                               "critic_warmup_steps": 20, "seed": 0, **kw})

    def test_objective_decreases(self, tmp_path):
        res = run_search(self.x, self.t, self.clf, self.config(), log_path=tmp_path / "log.csv", fingerprint="abc")
        assert len(res.log) == 20
        assert res.log[-1]["objective"] <= res.log[0]["objective"]
        with open(tmp_path / "log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0])[:5] == LOG_COLUMNS and len(rows) == 20 and rows[0]["fingerprint"] == "abc"
        assert res.policy.search_meta["η"] == 0.3

    def test_parameters_stay_clamped(self):
        params = PolicyParameters.initialize(3, 2, seed=1)
        cfg = self.config(epochs=3, learning_rate=0.3)
        seen = []
        orig = params.clamp_

        def spy():
            orig()
            p, m = params.probability.detach(), params.magnitude.detach()
            seen.append((float(p.min()), float(p.max()), float(m.min()), float(m.max())))

        params.clamp_ = spy
        run_search(self.x, self.t, self.clf, cfg, initial=params)
        assert seen and all(0.0 <= lo and hi <= 1.0 for lo, hi, *_ in seen)
        assert all(0.0 <= lo and hi <= 1.0 for *_, lo, hi in seen)

    def test_same_seed_same_policy(self):
        cfg = self.config(epochs=2)
        a = run_search(self.x, self.t, self.clf, cfg).policy
        b = run_search(self.x, self.t, self.clf, cfg).policy
        assert a == b

    def test_zero_eta_objective_is_distance(self):
        res = run_search(self.x, self.t, self.clf, self.config(epochs=2, eta=0.0))
        for rec in res.log:
            assert rec["objective"] == pytest.approx(rec["d"], abs=1e-12)

    def test_non_finite_aborts_with_state(self):
        class Nan(torch.nn.Module):
            def forward(self, x):
                return torch.full((len(x), 2), float("nan")) + 0 * x.flatten(1).sum(1, keepdim=True)

        with pytest.raises(SearchDivergedError) as info:
            run_search(self.x, self.t, Nan(), self.config(epochs=1))
        assert "probability" in info.value.state and info.value.state["step"] == 1

    def test_needs_two_images(self):
        with pytest.raises(InvalidBatchError):
            run_search(self.x[:1], self.t[:1], self.clf, self.config())

    def test_mean_target_logit(self):
        model = ConstantLogits(torch.tensor([[1.0, -2.0]]))
        assert mean_target_logit(model, self.x, torch.ones(len(self.x), dtype=torch.long)) == -2.0
