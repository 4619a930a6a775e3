"""Core value types: probability vectors, expert partitions, counterfactual queries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, MissingExpertError

# Probability floor applied to model outputs so log-probabilities stay finite.
EPSILON_PROB = 1e-12
# Tolerance for "sums to one" checks (and for log-space normalization checks).
NORMALIZATION_ATOL = 1e-9

ExpertId = str
Label = int


def floor_probs(probs: np.ndarray, eps: float = EPSILON_PROB) -> np.ndarray:
    """Clamp probabilities to ``[eps, 1]`` along the last axis and renormalize.

    A second clamp guards against renormalization rounding a tiny entry back
    below ``eps``.  Input rows must already be nonnegative and near-normalized:
    this is a numerical floor, not a projection of arbitrary vectors.
    """
    p = np.maximum(np.asarray(probs, dtype=np.float64), eps)
    p = p / p.sum(axis=-1, keepdims=True)
    p = np.maximum(p, eps)
    return p / p.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SimplexDistribution:
    """A distribution over ``k`` labels: finite, nonnegative, sums to one.

    Entries may be exactly zero — empirical histograms need that.  Use
    :meth:`from_model_probs` for model outputs, which floors entries at
    ``EPSILON_PROB`` so downstream ``log`` calls are safe.
    """

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise InvalidArgumentError(f"probs must be a nonempty 1-d vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError("probs must be finite")
        if np.any(p < 0):
            raise InvalidArgumentError("probs must be nonnegative")
        total = float(p.sum())
        if abs(total - 1.0) > NORMALIZATION_ATOL:
            raise InvalidArgumentError(f"probs must sum to 1 within {NORMALIZATION_ATOL}, got {total!r}")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_model_probs(cls, probs: np.ndarray | Sequence[float]) -> "SimplexDistribution":
        """Build from raw model output, flooring entries at ``EPSILON_PROB``."""
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise InvalidArgumentError(f"probs must be a nonempty 1-d vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError("probs must be finite")
        if np.any(p < 0):
            raise InvalidArgumentError("probs must be nonnegative")
        if abs(float(p.sum()) - 1.0) > NORMALIZATION_ATOL:
            raise InvalidArgumentError("probs must sum to 1 before flooring")
        return cls(floor_probs(p))

    @property
    def k(self) -> int:
        return self.probs.size

    def log_probs(self) -> np.ndarray:
        """Elementwise log; -inf where an entry is exactly zero."""
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def argmax_label(self) -> Label:
        """Most probable label, lowest index on ties."""
        return int(np.argmax(self.probs))

    def tv_distance(self, other: "SimplexDistribution") -> float:
        if other.k != self.k:
            raise InvalidArgumentError(f"size mismatch: {self.k} vs {other.k}")
        return float(0.5 * np.abs(self.probs - other.probs).sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SimplexDistribution):
            return NotImplemented
        return self.probs.shape == other.probs.shape and bool(np.all(self.probs == other.probs))

    def __hash__(self) -> int:
        return hash(self.probs.tobytes())


@dataclass(frozen=True)
class Partition:
    """A partition of experts into disjoint groups.

    Groups are canonicalized (each group sorted, groups ordered by their
    smallest member) so two partitions with the same blocks compare equal no
    matter how they were assembled.
    """

    groups: tuple[tuple[ExpertId, ...], ...]
    _index: Mapping[ExpertId, int] = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        seen: dict[ExpertId, int] = {}
        canon: list[tuple[ExpertId, ...]] = []
        for group in self.groups:
            members = tuple(sorted(group))
            if not members:
                raise InvalidArgumentError("empty group in partition")
            canon.append(members)
        canon.sort(key=lambda g: g[0])
        for gid, members in enumerate(canon):
            for h in members:
                if h in seen:
                    raise InvalidArgumentError(f"expert {h!r} appears in more than one group")
                seen[h] = gid
        if not seen:
            raise InvalidArgumentError("partition must contain at least one expert")
        object.__setattr__(self, "groups", tuple(canon))
        object.__setattr__(self, "_index", seen)

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable[ExpertId]]) -> "Partition":
        return cls(tuple(tuple(g) for g in groups))

    @classmethod
    def singletons(cls, experts: Iterable[ExpertId]) -> "Partition":
        return cls(tuple((h,) for h in experts))

    @property
    def experts(self) -> frozenset[ExpertId]:
        return frozenset(self._index)

    def __contains__(self, expert: ExpertId) -> bool:
        return expert in self._index

    def __len__(self) -> int:
        return len(self.groups)

    def group_of(self, expert: ExpertId) -> int:
        try:
            return self._index[expert]
        except KeyError:
            raise MissingExpertError(f"expert {expert!r} is not in the partition") from None

    def group_members(self, expert: ExpertId) -> tuple[ExpertId, ...]:
        return self.groups[self.group_of(expert)]

    def same_group(self, a: ExpertId, b: ExpertId) -> bool:
        return self.group_of(a) == self.group_of(b)

    def labels_for(self, experts: Sequence[ExpertId]) -> np.ndarray:
        """Group index per expert, in the order given (for e.g. rand-index math)."""
        return np.array([self.group_of(h) for h in experts], dtype=np.int64)

    def to_jsonable(self) -> list[list[ExpertId]]:
        """JSON form: a list of groups, each a sorted list of expert ids,
        groups ordered by smallest member (the canonical order)."""
        return [list(g) for g in self.groups]

    @classmethod
    def from_jsonable(cls, obj) -> "Partition":
        if isinstance(obj, Mapping):  # tolerate {"groups": [...]} wrappers
            obj = obj.get("groups")
        if not isinstance(obj, list) or not all(isinstance(g, list) for g in obj):
            raise InvalidArgumentError("partition JSON must be a list of lists of expert ids")
        return cls.from_groups([[str(h) for h in g] for g in obj])


@dataclass(frozen=True)
class CounterfactualQuery:
    """"Expert ``observed_expert`` said ``observed_label`` on ``features``; what
    would ``target_expert`` have said on the same instance?"""

    features: np.ndarray
    observed_expert: ExpertId
    observed_label: Label
    target_expert: ExpertId

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidArgumentError(f"features must be 1-d, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("features must be finite")
        if self.observed_expert == self.target_expert:
            raise InvalidArgumentError("observed and target expert must differ")
        if not isinstance(self.observed_label, (int, np.integer)) or self.observed_label < 0:
            raise InvalidArgumentError(f"observed_label must be a nonnegative int, got {self.observed_label!r}")
        x = x.copy()
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "observed_label", int(self.observed_label))


@dataclass(frozen=True)
class CounterfactualEstimate:
    """Estimated counterfactual label distribution for one query.

    ``exact`` is True when the estimate required no sampling (cross-group
    queries reduce to the target's model distribution).
    """

    dist: SimplexDistribution
    num_samples: int
    exact: bool

    def argmax_label(self) -> Label:
        return self.dist.argmax_label()
