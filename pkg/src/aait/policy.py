"""Transformation policies: L sub-policies, each K gated operations applied in order."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import torch
from torch import nn

from .errors import DomainError, InvalidOperationError, InvalidPolicyError, PolicyParseError
from .imgops import AFFINE_OPS, COLOR_OPS, OperationKind, gated_apply

POLICY_FORMAT_VERSION = 1
DEFAULT_TEMPERATURE = 0.05


class Vocabulary(str, enum.Enum):
    AFFINE = "affine"
    COLOR = "color"
    FULL = "full"

    @property
    def operations(self) -> tuple:
        if self is Vocabulary.AFFINE:
            return AFFINE_OPS
        if self is Vocabulary.COLOR:
            return COLOR_OPS
        return tuple(OperationKind)

    @classmethod
    def parse(cls, value) -> "Vocabulary":
        if isinstance(value, cls):
            return value
        aliases = {"affine-only": cls.AFFINE, "color-only": cls.COLOR}
        if value in aliases:
            return aliases[value]
        try:
            return cls(value)
        except ValueError:
            raise DomainError(f"unknown vocabulary {value!r}") from None


@dataclass
class OperationParams:
    kind: OperationKind
    probability: float
    magnitude: float


@dataclass
class SubPolicy:
    ops: list


@dataclass
class Policy:
    """Immutable-by-convention policy value produced by the search."""

    sub_policies: list
    vocabulary: Vocabulary = Vocabulary.AFFINE
    search_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sub_policies:
            raise InvalidPolicyError("policy needs at least one sub-policy")
        lengths = {len(sp.ops) for sp in self.sub_policies}
        if len(lengths) != 1:
            raise InvalidPolicyError(f"sub-policies differ in length: {sorted(lengths)}")

    @property
    def L(self) -> int:
        return len(self.sub_policies)

    @property
    def K(self) -> int:
        return len(self.sub_policies[0].ops)

    def operations(self, index: int):
        return [(op.kind, op.probability, op.magnitude) for op in self.sub_policies[index].ops]

    @classmethod
    def single(cls, kind, probability=1.0, magnitude=0.5, vocabulary=Vocabulary.FULL) -> "Policy":
        op = OperationParams(OperationKind.parse(kind), float(probability), float(magnitude))
        return cls([SubPolicy([op])], Vocabulary.parse(vocabulary))

    @classmethod
    def identity(cls, L=1, K=1, vocabulary=Vocabulary.AFFINE) -> "Policy":
        """All gates closed: applying the policy never changes the input."""
        vocab = Vocabulary.parse(vocabulary)
        kind = vocab.operations[0]
        subs = [SubPolicy([OperationParams(kind, 0.0, 0.5) for _ in range(K)]) for _ in range(L)]
        return cls(subs, vocab)


def assign_kinds(L: int, K: int, vocabulary, generator: Optional[torch.Generator] = None):
    """Spread the vocabulary over the L x K slots, every operation appearing as evenly as possible."""
    ops = Vocabulary.parse(vocabulary).operations
    slots = L * K
    pool = []
    while len(pool) < slots:
        perm = torch.randperm(len(ops), generator=generator).tolist()
        pool.extend(ops[i] for i in perm)
    return [pool[i * K : (i + 1) * K] for i in range(L)]


class PolicyParameters(nn.Module):
    """Learnable view of a policy: kinds are fixed, ``probability`` and ``magnitude`` are parameters."""

    def __init__(self, kinds, probability: torch.Tensor, magnitude: torch.Tensor, vocabulary=Vocabulary.AFFINE):
        super().__init__()
        if not kinds:
            raise InvalidPolicyError("policy needs at least one sub-policy")
        self.kinds = [list(row) for row in kinds]
        self.vocabulary = Vocabulary.parse(vocabulary)
        self.probability = nn.Parameter(probability.detach().clone().float())
        self.magnitude = nn.Parameter(magnitude.detach().clone().float())

    @property
    def L(self) -> int:
        return len(self.kinds)

    @property
    def K(self) -> int:
        return len(self.kinds[0])

    @classmethod
    def initialize(cls, L=10, K=2, vocabulary=Vocabulary.AFFINE, seed=0, init_probability=0.5):
        g = torch.Generator().manual_seed(int(seed))
        kinds = assign_kinds(L, K, vocabulary, g)
        probability = torch.full((L, K), float(init_probability))
        magnitude = torch.rand((L, K), generator=g)
        return cls(kinds, probability, magnitude, vocabulary)

    @classmethod
    def from_policy(cls, policy: Policy) -> "PolicyParameters":
        kinds = [[op.kind for op in sp.ops] for sp in policy.sub_policies]
        p = torch.tensor([[op.probability for op in sp.ops] for sp in policy.sub_policies], dtype=torch.float64)
        m = torch.tensor([[op.magnitude for op in sp.ops] for sp in policy.sub_policies], dtype=torch.float64)
        return cls(kinds, p, m, policy.vocabulary)

    def operations(self, index: int):
        return [(self.kinds[index][k], self.probability[index, k], self.magnitude[index, k]) for k in range(self.K)]

    @torch.no_grad()
    def clamp_(self) -> None:
        self.probability.clamp_(0.0, 1.0)
        self.magnitude.clamp_(0.0, 1.0)

    def to_policy(self, search_meta: Optional[dict] = None) -> Policy:
        p = self.probability.detach().tolist()
        m = self.magnitude.detach().tolist()
        subs = [
            SubPolicy([OperationParams(kind, float(p[i][k]), float(m[i][k])) for k, kind in enumerate(row)])
            for i, row in enumerate(self.kinds)
        ]
        return Policy(subs, self.vocabulary, dict(search_meta or {}))


def apply_policy(
    policy,
    images: torch.Tensor,
    chunk_size: Optional[int] = 8,
    mode: str = "attack",
    generator: Optional[torch.Generator] = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Transform ``images`` chunk by chunk, one uniformly drawn sub-policy per chunk.

    ``policy`` is a :class:`Policy` or :class:`PolicyParameters`.
    ``chunk_size=None`` treats the whole batch as one chunk.
    """
    L = policy.L
    if L < 1:
        raise InvalidPolicyError("empty policy")
    if chunk_size is None:
        chunk_size = max(1, images.shape[0])
    if chunk_size < 1:
        raise DomainError(f"chunk_size must be >= 1, got {chunk_size}")
    outputs = []
    for chunk in images.split(chunk_size):
        index = int(torch.randint(L, (1,), generator=generator))
        out = chunk
        for kind, p, mu in policy.operations(index):
            out = gated_apply(kind, mu, p, temperature, out, mode, generator)
        outputs.append(out)
    return torch.cat(outputs) if outputs else images


# ---------------------------------------------------------------------------
# policy file


def policy_to_dict(policy: Policy) -> dict:
    return {
        "version": POLICY_FORMAT_VERSION,
        "vocabulary": policy.vocabulary.value,
        "L": policy.L,
        "K": policy.K,
        "sub_policies": [
            [{"kind": op.kind.value, "p": op.probability, "μ": op.magnitude} for op in sp.ops]
            for sp in policy.sub_policies
        ],
        "search_meta": dict(policy.search_meta),
    }


def serialize_policy(policy: Policy) -> str:
    return json.dumps(policy_to_dict(policy), ensure_ascii=False, indent=1) + "\n"


def _field(doc: dict, name: str, where: str = "") -> Any:
    if not isinstance(doc, dict) or name not in doc:
        raise PolicyParseError(f"missing field {name}" + (f" in {where}" if where else ""))
    return doc[name]


def _unit_float(value, name: str, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise PolicyParseError(f"field {name} in {where} must be a number")
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise PolicyParseError(f"field {name} in {where} outside [0, 1]: {value}")
    return value


def policy_from_dict(doc: dict) -> Policy:
    version = _field(doc, "version")
    if version != POLICY_FORMAT_VERSION:
        raise PolicyParseError(f"field version: unsupported policy format {version!r}")
    try:
        vocabulary = Vocabulary.parse(_field(doc, "vocabulary"))
    except DomainError as exc:
        raise PolicyParseError(f"field vocabulary: {exc}") from None
    L = _field(doc, "L")
    K = _field(doc, "K")
    rows = _field(doc, "sub_policies")
    if not isinstance(rows, list) or len(rows) != L:
        raise PolicyParseError(f"field sub_policies must list L={L} sub-policies")
    subs = []
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != K:
            raise PolicyParseError(f"field sub_policies[{i}] must list K={K} operations")
        ops = []
        for k, entry in enumerate(row):
            where = f"sub_policies[{i}][{k}]"
            try:
                kind = OperationKind.parse(_field(entry, "kind", where))
            except InvalidOperationError as exc:
                raise PolicyParseError(f"field kind in {where}: {exc}") from None
            p = _unit_float(_field(entry, "p", where), "p", where)
            mu = _unit_float(_field(entry, "μ", where), "μ", where)
            ops.append(OperationParams(kind, p, mu))
        subs.append(SubPolicy(ops))
    meta = doc.get("search_meta", {})
    if not isinstance(meta, dict):
        raise PolicyParseError("field search_meta must be an object")
    try:
        return Policy(subs, vocabulary, dict(meta))
    except InvalidPolicyError as exc:
        raise PolicyParseError(str(exc)) from None


def deserialize_policy(text: str) -> Policy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyParseError(f"not a policy document: {exc}") from None
    return policy_from_dict(doc)


def save_policy(policy: Policy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_policy(policy))


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return deserialize_policy(fh.read())


def policy_from_ops(rows: Sequence[Sequence[tuple]], vocabulary=Vocabulary.FULL) -> Policy:
    """Build a policy from nested ``(kind, p, mu)`` tuples."""
    subs = [SubPolicy([OperationParams(OperationKind.parse(k), float(p), float(m)) for k, p, m in row]) for row in rows]
    return Policy(subs, Vocabulary.parse(vocabulary))
