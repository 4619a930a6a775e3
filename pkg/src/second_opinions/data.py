"""Panel datasets: containers, synthetic generation, filtering, file I/O.

A *panel* is a set of samples, each carrying a feature vector and a sparse
map from expert id to that expert's label.  On-disk format is JSON-Lines
(one sample per line: ``{"id": ..., "x": [...], "y": {expert: label}}``)
plus a ``<stem>.meta.json`` sidecar with ``k``, ``d``, label names, and the
expert roster.  Floats survive the round trip exactly (JSON shortest
repr decodes to the same float64).

The synthetic generator plants a known group structure: every expert gets
random multinomial-logit weights, experts in the same planted group share
Gumbel noise per sample, and the training panel is then sparsified so each
sample keeps only a few of the 48 opinions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DatasetFormatError,
    DatasetSchemaError,
    EmptyDatasetError,
    InvalidArgumentError,
)
from .models import LogitModel
from .rng import substream
from .types import ExpertId, Label, Partition

DATASET_FORMAT = "panel-v1"


@dataclass(frozen=True)
class Sample:
    sample_id: str
    features: np.ndarray
    predictions: Mapping[ExpertId, Label]

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidArgumentError(f"features must be 1-d, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError(f"sample {self.sample_id!r}: features must be finite")
        x = x.copy()
        x.setflags(write=False)
        preds = {str(h): int(c) for h, c in sorted(self.predictions.items())}
        if not preds:
            raise InvalidArgumentError(f"sample {self.sample_id!r} has no predictions")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "predictions", preds)


@dataclass(frozen=True)
class PanelDataset:
    k: int
    d: int
    samples: tuple[Sample, ...]
    experts: tuple[ExpertId, ...]
    label_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise InvalidArgumentError(f"k must be a positive int, got {self.k!r}")
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise InvalidArgumentError(f"d must be a positive int, got {self.d!r}")
        roster = tuple(sorted(dict.fromkeys(self.experts)))
        if len(roster) != len(tuple(self.experts)):
            raise InvalidArgumentError("expert roster contains duplicates")
        names = tuple(str(x) for x in self.label_names) or tuple(str(c) for c in range(self.k))
        if len(names) != self.k:
            raise InvalidArgumentError(f"need {self.k} label names, got {len(names)}")
        roster_set = set(roster)
        seen_ids: set[str] = set()
        for s in self.samples:
            if s.sample_id in seen_ids:
                raise InvalidArgumentError(f"duplicate sample id {s.sample_id!r}")
            seen_ids.add(s.sample_id)
            if s.features.size != self.d:
                raise InvalidArgumentError(
                    f"sample {s.sample_id!r}: expected {self.d} features, got {s.features.size}"
                )
            for h, c in s.predictions.items():
                if h not in roster_set:
                    raise InvalidArgumentError(f"sample {s.sample_id!r}: unknown expert {h!r}")
                if not 0 <= c < self.k:
                    raise InvalidArgumentError(f"sample {s.sample_id!r}: label {c} out of range")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "experts", roster)
        object.__setattr__(self, "label_names", names)

    @property
    def n(self) -> int:
        return len(self.samples)

    def features_matrix(self) -> np.ndarray:
        return np.asarray([s.features for s in self.samples], dtype=np.float64).reshape(self.n, self.d)


@dataclass(frozen=True)
class PanelArrays:
    """Dense-array view of a panel for vectorized passes.

    ``labels[i, j]`` is expert ``experts[j]``'s label on sample ``i``, or -1
    when that expert made no prediction there.
    """

    X: np.ndarray  # (n, d)
    labels: np.ndarray  # (n, H) int64, -1 = absent
    experts: tuple[ExpertId, ...]
    sample_ids: tuple[str, ...]
    expert_index: Mapping[ExpertId, int] = field(repr=False)

    @classmethod
    def from_dataset(cls, dataset: PanelDataset) -> "PanelArrays":
        experts = dataset.experts
        index = {h: j for j, h in enumerate(experts)}
        labels = np.full((dataset.n, len(experts)), -1, dtype=np.int64)
        for i, s in enumerate(dataset.samples):
            for h, c in s.predictions.items():
                labels[i, index[h]] = c
        return cls(
            X=dataset.features_matrix(),
            labels=labels,
            experts=experts,
            sample_ids=tuple(s.sample_id for s in dataset.samples),
            expert_index=index,
        )


@dataclass(frozen=True)
class SyntheticConfig:
    n_experts: int = 48
    group_sizes: tuple[int, ...] = (6, 7, 11, 11, 13)
    k: int = 5
    d: int = 20
    n_train: int = 1000
    n_test: int = 1000
    sparsity: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        sizes = tuple(int(g) for g in self.group_sizes)
        if not sizes or any(g < 1 for g in sizes):
            raise InvalidArgumentError(f"group sizes must be positive, got {sizes}")
        if sum(sizes) != self.n_experts:
            raise InvalidArgumentError(
                f"group sizes {sizes} sum to {sum(sizes)}, expected n_experts={self.n_experts}"
            )
        for name in ("k", "d", "n_train", "n_test"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidArgumentError(f"{name} must be a positive int, got {v!r}")
        if not 0.0 < self.sparsity < 1.0:
            raise InvalidArgumentError(f"sparsity must lie in (0, 1), got {self.sparsity!r}")
        if self.n_experts < 2:
            raise InvalidArgumentError("need at least 2 experts")
        object.__setattr__(self, "group_sizes", sizes)


def _expert_ids(n: int) -> list[ExpertId]:
    width = len(str(n - 1))
    return [f"e{i:0{width}d}" for i in range(n)]


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def sparsity_retained_count(s: float, n_experts: int) -> int:
    """How many predictions each sample keeps at sparsity ``s``: the larger of
    2 and round((1 - s) * n_experts), rounding half away from zero."""
    return max(2, _round_half_away((1.0 - s) * n_experts))


def apply_sparsity(dataset: PanelDataset, s: float, rng: np.random.Generator) -> PanelDataset:
    """Keep a uniformly random subset of each sample's predictions.

    The retained count is computed from the roster size; samples that already
    have fewer predictions than that keep everything they have.
    """
    if not 0.0 < s < 1.0:
        raise InvalidArgumentError(f"sparsity must lie in (0, 1), got {s!r}")
    if len(dataset.experts) < 2:
        raise InvalidArgumentError("sparsity needs at least 2 experts in the roster")
    keep = sparsity_retained_count(s, len(dataset.experts))
    out: list[Sample] = []
    for sample in dataset.samples:
        observed = sorted(sample.predictions)
        take = min(keep, len(observed))
        chosen = rng.choice(len(observed), size=take, replace=False)
        retained = {observed[j]: sample.predictions[observed[j]] for j in sorted(chosen)}
        out.append(Sample(sample.sample_id, sample.features, retained))
    return PanelDataset(dataset.k, dataset.d, tuple(out), dataset.experts, dataset.label_names)


def _planted_partition(config: SyntheticConfig) -> tuple[Partition, list[ExpertId]]:
    ids = _expert_ids(config.n_experts)
    groups: list[list[ExpertId]] = []
    at = 0
    for size in config.group_sizes:
        groups.append(ids[at : at + size])
        at += size
    return Partition.from_groups(groups), ids


def _gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    return -np.log(-np.log(np.maximum(u, np.finfo(np.float64).tiny)))


def _sample_panel_labels(
    X: np.ndarray,
    ids: Sequence[ExpertId],
    partition: Partition,
    models: Mapping[ExpertId, LogitModel],
    seed: int,
    split: str,
) -> np.ndarray:
    """Labels (n, H) for a full panel; one noise substream per sample index.

    Equivalent draw-for-draw to calling scm.sample_joint per sample with
    substream(seed, "synth", "labels", split, i) — kept vectorized here
    because the generator is on the benchmark hot path.
    """
    n = X.shape[0]
    n_groups = len(partition.groups)
    k = models[ids[0]].k
    noise = np.empty((n, n_groups, k))
    for i in range(n):
        u = substream(seed, "synth", "labels", split, i).random((n_groups, k))
        noise[i] = _gumbel_from_uniform(u)
    labels = np.empty((n, len(ids)), dtype=np.int64)
    for j, h in enumerate(ids):
        log_p = np.log(models[h].predict_batch(X))
        labels[:, j] = np.argmax(log_p + noise[:, partition.group_of(h), :], axis=1)
    return labels


def _panel_from_arrays(
    config: SyntheticConfig,
    X: np.ndarray,
    labels: np.ndarray,
    ids: Sequence[ExpertId],
    prefix: str,
) -> PanelDataset:
    n = X.shape[0]
    width = len(str(n - 1))
    samples = tuple(
        Sample(
            f"{prefix}{i:0{width}d}",
            X[i],
            {h: int(labels[i, j]) for j, h in enumerate(ids)},
        )
        for i in range(n)
    )
    return PanelDataset(config.k, config.d, samples, tuple(ids))


def generate_synthetic(
    config: SyntheticConfig,
) -> tuple[PanelDataset, PanelDataset, Partition, dict[ExpertId, LogitModel]]:
    """Generate (sparsified train panel, full test panel, planted partition,
    per-expert logit models).

    Features and logit weights are Uniform[0,1); labels come from the shared-
    noise mechanism under the planted partition, fresh noise per sample.  The
    test panel stays fully observed — held-out evaluation wants every pair.
    """
    truth, ids = _planted_partition(config)
    w = substream(config.seed, "synth", "weights").random((config.n_experts, config.k, config.d))
    models = {h: LogitModel(weights=w[i]) for i, h in enumerate(ids)}

    panels: dict[str, PanelDataset] = {}
    for split, n, prefix in (("train", config.n_train, "tr"), ("test", config.n_test, "te")):
        X = substream(config.seed, "synth", "features", split).random((n, config.d))
        labels = _sample_panel_labels(X, ids, truth, models, config.seed, split)
        panels[split] = _panel_from_arrays(config, X, labels, ids, prefix)
    train = apply_sparsity(panels["train"], config.sparsity, substream(config.seed, "synth", "sparsity"))
    return train, panels["test"], truth, models


# --- preprocessing -----------------------------------------------------------


def preprocess(
    dataset: PanelDataset,
    train_min: int = 130,
    test_min: int = 20,
    split: Mapping[str, str] | None = None,
    drop_full_agreement: bool = True,
) -> tuple[PanelDataset, PanelDataset]:
    """Split and filter a raw panel, iterating the filters to a fixed point.

    Per pass: optionally drop samples whose observed labels all agree; drop
    samples with fewer than two predictions; drop experts with fewer than
    ``train_min`` / ``test_min`` predictions on either side or whose training
    labels miss a class.  Raises :class:`EmptyDatasetError` when either side
    ends up empty.

    ``split`` maps every sample id to ``"train"`` or ``"test"``.
    """
    if split is None:
        raise InvalidArgumentError("preprocess requires a split assignment for every sample")
    sides: dict[str, list[tuple[str, np.ndarray, dict[ExpertId, Label]]]] = {"train": [], "test": []}
    for s in dataset.samples:
        side = split.get(s.sample_id)
        if side not in ("train", "test"):
            raise InvalidArgumentError(
                f"split must assign sample {s.sample_id!r} to 'train' or 'test', got {side!r}"
            )
        sides[side].append((s.sample_id, s.features, dict(s.predictions)))

    roster = set(dataset.experts)
    changed = True
    while changed:
        changed = False
        for side, rows in sides.items():
            kept = []
            for sid, x, preds in rows:
                preds = {h: c for h, c in preds.items() if h in roster}
                if drop_full_agreement and preds and len(set(preds.values())) == 1:
                    changed = True
                    continue
                if len(preds) < 2:
                    changed = True
                    continue
                kept.append((sid, x, preds))
            sides[side] = kept
        counts = {side: {} for side in sides}
        train_labels: dict[ExpertId, set[int]] = {}
        for side, rows in sides.items():
            for _, _, preds in rows:
                for h, c in preds.items():
                    counts[side][h] = counts[side].get(h, 0) + 1
                    if side == "train":
                        train_labels.setdefault(h, set()).add(c)
        survivors = {
            h
            for h in roster
            if counts["train"].get(h, 0) >= train_min
            and counts["test"].get(h, 0) >= test_min
            and len(train_labels.get(h, ())) == dataset.k
        }
        if survivors != roster:
            roster = survivors
            changed = True

    if not sides["train"] or not sides["test"]:
        raise EmptyDatasetError("preprocessing removed every sample from one side of the split")
    experts = tuple(sorted(roster))
    out = []
    for side in ("train", "test"):
        samples = tuple(Sample(sid, x, preds) for sid, x, preds in sides[side])
        out.append(PanelDataset(dataset.k, dataset.d, samples, experts, dataset.label_names))
    return out[0], out[1]


# --- file I/O ----------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_dataset(dataset: PanelDataset, path: str | Path) -> None:
    """Write ``path`` as JSON-Lines plus a ``<stem>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "k": dataset.k,
        "d": dataset.d,
        "label_names": list(dataset.label_names),
        "experts": list(dataset.experts),
    }
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    with path.open("w", encoding="utf-8") as fh:
        for s in dataset.samples:
            record = {"id": s.sample_id, "x": s.features.tolist(), "y": s.predictions}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> PanelDataset:
    path = Path(path)
    meta_path = _meta_path(path)
    if not path.is_file():
        raise DatasetFormatError(f"dataset file {str(path)!r} does not exist")
    if not meta_path.is_file():
        raise DatasetFormatError(f"missing metadata sidecar {str(meta_path)!r}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path.name}: invalid JSON ({exc})") from exc
    if not isinstance(meta, dict) or meta.get("format") != DATASET_FORMAT:
        raise DatasetSchemaError(f"{meta_path.name}: expected format {DATASET_FORMAT!r}")
    try:
        k = int(meta["k"])
        d = int(meta["d"])
        label_names = tuple(str(x) for x in meta["label_names"])
        experts = tuple(str(h) for h in meta["experts"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetSchemaError(f"{meta_path.name}: bad metadata ({exc})") from exc
    roster = set(experts)

    samples: list[Sample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(record, dict) or not {"id", "x", "y"} <= set(record):
                raise DatasetFormatError(f"{path.name}:{lineno}: expected keys id, x, y")
            x = record["x"]
            if not isinstance(x, list) or len(x) != d:
                raise DatasetFormatError(
                    f"{path.name}:{lineno}: expected {d} features, got {len(x) if isinstance(x, list) else type(x).__name__}"
                )
            preds_raw = record["y"]
            if not isinstance(preds_raw, dict) or not preds_raw:
                raise DatasetFormatError(f"{path.name}:{lineno}: 'y' must be a nonempty object")
            preds: dict[ExpertId, Label] = {}
            for h, c in preds_raw.items():
                if h not in roster:
                    raise DatasetSchemaError(f"{path.name}:{lineno}: unknown expert {h!r}")
                if not isinstance(c, int) or isinstance(c, bool) or not 0 <= c < k:
                    raise DatasetSchemaError(f"{path.name}:{lineno}: label {c!r} outside [0, {k})")
                preds[h] = c
            try:
                samples.append(Sample(str(record["id"]), np.asarray(x, dtype=np.float64), preds))
            except InvalidArgumentError as exc:
                raise DatasetFormatError(f"{path.name}:{lineno}: {exc}") from exc
    try:
        return PanelDataset(k, d, tuple(samples), experts, label_names)
    except InvalidArgumentError as exc:
        raise DatasetSchemaError(f"{path.name}: {exc}") from exc
