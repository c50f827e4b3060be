import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from aait.errors import DomainError, InvalidPolicyError, PolicyParseError
from aait.imgops import AFFINE_OPS, OperationKind
from aait.policy import (Policy, PolicyParameters, Vocabulary, apply_policy, deserialize_policy, load_policy,
                         policy_from_ops, policy_to_dict, save_policy, serialize_policy)


def random_policy(L=10, K=2, vocabulary="affine", seed=0):
    params = PolicyParameters.initialize(L, K, vocabulary, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        params.probability.copy_(torch.rand(L, K, generator=g))
    return params.to_policy({"η": 0.3, "epochs": 20, "temperature": 0.05, "seed": seed})


class TestVocabulary:
    def test_affine_has_exactly_six_ops(self):
        assert set(Vocabulary.AFFINE.operations) == set(AFFINE_OPS)
        assert len(Vocabulary.AFFINE.operations) == 6

    def test_color_and_full(self):
        assert not set(Vocabulary.COLOR.operations) & set(AFFINE_OPS)
        assert len(Vocabulary.FULL.operations) == len(OperationKind)

    def test_aliases(self):
        assert Vocabulary.parse("affine-only") is Vocabulary.AFFINE
        assert Vocabulary.parse("color-only") is Vocabulary.COLOR
        with pytest.raises(DomainError):
            Vocabulary.parse("geometric")


class TestPolicyValue:
    def test_empty_policy_rejected(self):
        with pytest.raises(InvalidPolicyError):
            Policy([])

    def test_ragged_policy_rejected(self):
        with pytest.raises(InvalidPolicyError):
            policy_from_ops([[("Flip", 1, 0.5)], [("Flip", 1, 0.5), ("Rotate", 1, 0.5)]])

    def test_initialize_kinds_come_from_vocabulary(self):
        params = PolicyParameters.initialize(10, 2, "affine", seed=3)
        kinds = [k for row in params.kinds for k in row]
        assert set(kinds) == set(AFFINE_OPS)
        assert params.probability.shape == (10, 2) and params.magnitude.shape == (10, 2)

    def test_clamp(self):
        params = PolicyParameters.initialize(2, 2)
        with torch.no_grad():
            params.probability.fill_(1.7)
            params.magnitude.fill_(-0.3)
        params.clamp_()
        assert float(params.probability.detach().max()) == 1.0 and float(params.magnitude.detach().min()) == 0.0


class TestApplyPolicy:
    def test_closed_gates_leave_batch_unchanged(self):
        x = torch.rand(12, 3, 8, 8)
        policy = random_policy()
        closed = policy_from_ops([[(op.kind, 0.0, op.magnitude) for op in sp.ops] for sp in policy.sub_policies])
        assert torch.equal(apply_policy(closed, x, generator=torch.Generator().manual_seed(0)), x)

    def test_single_flip(self):
        x = torch.rand(5, 3, 6, 6)
        assert torch.equal(apply_policy(Policy.single("Flip"), x), x.flip(-1))

    def test_chunk_size_domain(self):
        with pytest.raises(DomainError):
            apply_policy(Policy.single("Flip"), torch.rand(2, 3, 4, 4), chunk_size=0)

    def test_chunks_draw_independently(self):
        # a chunk is either wholly flipped or wholly untouched
        policy = policy_from_ops([[("Flip", 1.0, 0.5)], [("Invert", 1.0, 0.5)]])
        x = torch.rand(32, 3, 4, 4)
        out = apply_policy(policy, x, chunk_size=8, generator=torch.Generator().manual_seed(1))
        for chunk_in, chunk_out in zip(x.split(8), out.split(8)):
            assert torch.equal(chunk_out, chunk_in.flip(-1)) or torch.allclose(chunk_out, 1 - chunk_in)

    def test_sub_policy_selection_is_uniform(self):
        policy = policy_from_ops([[("Flip", 1.0, 0.5)], [("Invert", 1.0, 0.5)]])
        x = torch.tensor([[[[0.2, 0.9]]]])
        g = torch.Generator().manual_seed(0)
        flips = sum(torch.equal(apply_policy(policy, x, chunk_size=1, generator=g), x.flip(-1)) for _ in range(10000))
        assert abs(flips / 10000 - 0.5) <= 0.02

    def test_selection_chi_square(self):
        L = 5
        policy = policy_from_ops([[("Brightness", 1.0, (i + 1) / (L + 1))] for i in range(L)])
        x = torch.full((1, 1, 1, 1), 0.25)
        g = torch.Generator().manual_seed(7)
        counts = [0] * L
        values = {}
        for i in range(L):
            single = policy_from_ops([[("Brightness", 1.0, (i + 1) / (L + 1))]])
            values[round(float(apply_policy(single, x)), 6)] = i
        for _ in range(10000):
            counts[values[round(float(apply_policy(policy, x, chunk_size=1, generator=g)), 6)]] += 1
        assert chisquare(counts).pvalue > 0.01

    def test_attack_mode_is_deterministic(self):
        policy = random_policy(seed=4)
        x = torch.rand(16, 3, 8, 8, generator=torch.Generator().manual_seed(2))
        a = apply_policy(policy, x, generator=torch.Generator().manual_seed(9))
        b = apply_policy(policy, x, generator=torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), vocab=st.sampled_from(["affine", "color", "full"]))
    def test_outputs_stay_in_unit_range(self, seed, vocab):
        policy = random_policy(L=4, K=2, vocabulary=vocab, seed=seed)
        x = torch.rand(8, 3, 8, 8, generator=torch.Generator().manual_seed(seed))
        out = apply_policy(policy, x, chunk_size=2, generator=torch.Generator().manual_seed(seed))
        assert out.shape == x.shape
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


class TestPolicyFile:
    def test_round_trip(self):
        policy = random_policy(seed=11)
        assert deserialize_policy(serialize_policy(policy)) == policy

    def test_round_trip_through_disk(self, tmp_path):
        policy = random_policy(seed=12)
        save_policy(policy, tmp_path / "p.json")
        assert load_policy(tmp_path / "p.json") == policy

    @settings(max_examples=30, deadline=None)
    @given(p=st.floats(0, 1), mu=st.floats(0, 1))
    def test_full_precision(self, p, mu):
        policy = policy_from_ops([[("Rotate", p, mu)]])
        back = deserialize_policy(serialize_policy(policy))
        assert back.sub_policies[0].ops[0].probability == p and back.sub_policies[0].ops[0].magnitude == mu

    def test_default_search_policy_size(self):
        text = serialize_policy(random_policy(L=10, K=2, vocabulary="affine"))
        assert len(text.encode("utf-8")) <= 4096

    def test_document_keys(self):
        doc = policy_to_dict(random_policy())
        assert set(doc) == {"version", "vocabulary", "L", "K", "sub_policies", "search_meta"}
        assert set(doc["sub_policies"][0][0]) == {"kind", "p", "μ"}

    def test_missing_kind(self):
        doc = policy_to_dict(random_policy())
        del doc["sub_policies"][3][1]["kind"]
        with pytest.raises(PolicyParseError, match="missing field kind"):
            deserialize_policy(json.dumps(doc))

    @pytest.mark.parametrize("name", ["version", "vocabulary", "L", "K", "sub_policies"])
    def test_missing_top_level_field(self, name):
        doc = policy_to_dict(random_policy())
        del doc[name]
        with pytest.raises(PolicyParseError, match=f"missing field {name}"):
            deserialize_policy(json.dumps(doc))

    def test_bad_values(self):
        doc = policy_to_dict(random_policy())
        doc["sub_policies"][0][0]["p"] = 1.5
        with pytest.raises(PolicyParseError, match="p"):
            deserialize_policy(json.dumps(doc))
        doc = policy_to_dict(random_policy())
        doc["sub_policies"][0][0]["kind"] = "Cutout"
        with pytest.raises(PolicyParseError, match="kind"):
            deserialize_policy(json.dumps(doc))
        with pytest.raises(PolicyParseError):
            deserialize_policy("not json")
