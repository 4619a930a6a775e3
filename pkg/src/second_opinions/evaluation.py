"""Held-out scoring of second-opinion predictors, plus partition metrics.

The evaluation protocol walks every ordered co-observed pair (h, h') on
every test sample: the predictor sees (features, h, Y_h) and must guess
Y_h'.  Accuracy is reported overall, split by whether the pair shares a
group in the supplied partition, and per target expert; a confusion matrix
(rows = predicted, columns = true) accompanies the scalars.

Three predictors implement the protocol:

* :class:`CounterfactualPredictor` — posterior noise sharing within groups,
  plain model distribution across groups (the causal model).
* :class:`MarginalArgmaxPredictor` — target model argmax, observation ignored.
* :class:`ProductArgmaxPredictor` — target model times the co-prediction
  (CNB) row for the observed source label.

`adjusted_rand_index` and `edge_ratio` score recovered group structure
against a reference partition.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .data import PanelArrays, PanelDataset
from .errors import InvalidArgumentError, MissingExpertError
from .models import CnbModel, ConditionalModel
from .partitioning import SimilarityGraph
from .rng import ordered_map, substream
from .types import ExpertId, Label, Partition

PREDICTOR_NAMES = ("siscm", "gnb", "gnb_cnb")


@runtime_checkable
class PairPredictor(Protocol):
    """Batched interface: predict the target's label for many (sample, source,
    target) triples at once.  Indices refer to ``arrays`` rows/columns."""

    def predict_pairs(
        self,
        arrays: PanelArrays,
        sample_pos: np.ndarray,
        source_idx: np.ndarray,
        target_idx: np.ndarray,
    ) -> np.ndarray: ...


class FunctionPredictor:
    """Adapter: wrap a plain ``f(x, source, observed_label, target) -> label``."""

    def __init__(self, fn: Callable[[np.ndarray, ExpertId, Label, ExpertId], Label]):
        self._fn = fn

    def predict_pairs(self, arrays, sample_pos, source_idx, target_idx):
        out = np.empty(sample_pos.size, dtype=np.int64)
        for i in range(sample_pos.size):
            p = int(sample_pos[i])
            s = arrays.experts[source_idx[i]]
            t = arrays.experts[target_idx[i]]
            out[i] = int(self._fn(arrays.X[p], s, int(arrays.labels[p, source_idx[i]]), t))
        return out


def _log_prob_cache(
    arrays: PanelArrays, models: Mapping[ExpertId, ConditionalModel]
) -> Callable[[int], np.ndarray]:
    cache: dict[int, np.ndarray] = {}

    def get(j: int) -> np.ndarray:
        if j not in cache:
            h = arrays.experts[j]
            if h not in models:
                raise MissingExpertError(f"no model for expert {h!r}")
            cache[j] = np.log(models[h].predict_batch(arrays.X))
        return cache[j]

    return get


def _per_sample_hist_argmax(labels: np.ndarray, k: int) -> np.ndarray:
    """labels (T, n) -> per-column histogram argmax (n,), lowest index on ties."""
    n = labels.shape[1]
    flat = (labels + k * np.arange(n)[None, :]).ravel()
    hist = np.bincount(flat, minlength=n * k).reshape(n, k)
    return np.argmax(hist, axis=1)


@dataclass
class MarginalArgmaxPredictor:
    """Predict the target's most likely label from its own model alone."""

    models: Mapping[ExpertId, ConditionalModel]

    def predict_pairs(self, arrays, sample_pos, source_idx, target_idx):
        log_probs = _log_prob_cache(arrays, self.models)
        out = np.empty(sample_pos.size, dtype=np.int64)
        for j in np.unique(target_idx):
            mask = target_idx == j
            out[mask] = np.argmax(log_probs(int(j)), axis=1)[sample_pos[mask]]
        return out


@dataclass
class ProductArgmaxPredictor:
    """Argmax of (target model probs) x (CNB row for the source's label)."""

    models: Mapping[ExpertId, ConditionalModel]
    cnb_models: Mapping[ExpertId, CnbModel]  # keyed by target expert

    def predict_pairs(self, arrays, sample_pos, source_idx, target_idx):
        log_probs = _log_prob_cache(arrays, self.models)
        out = np.empty(sample_pos.size, dtype=np.int64)
        pair_keys = target_idx.astype(np.int64) * len(arrays.experts) + source_idx
        for key in np.unique(pair_keys):
            jt, js = divmod(int(key), len(arrays.experts))
            target = arrays.experts[jt]
            if target not in self.cnb_models:
                raise MissingExpertError(f"no CNB model for target expert {target!r}")
            cnb = self.cnb_models[target]
            table = cnb.table(arrays.experts[js])  # (k+1, k) smoothed rows
            mask = pair_keys == key
            pos = sample_pos[mask]
            observed = arrays.labels[pos, js]
            rows = np.where(observed < 0, cnb.k, observed)
            scores = log_probs(jt)[pos] + np.log(table[rows])
            out[mask] = np.argmax(scores, axis=1)
        return out


@dataclass
class CounterfactualPredictor:
    """Second opinions from the shared-noise model.

    Same-group pairs: ``num_samples`` posterior noise draws conditioned on
    the source's label, replayed through the target's log-probabilities;
    prediction is the histogram argmax.  Cross-group pairs reduce to the
    target's marginal argmax.  One substream per source expert, derived from
    (seed, tag, expert id) — results do not depend on thread count or on the
    order pairs are asked in.
    """

    models: Mapping[ExpertId, ConditionalModel]
    partition: Partition
    num_samples: int
    seed: int
    tag: str = "infer"
    threads: int = 1

    def predict_pairs(self, arrays, sample_pos, source_idx, target_idx):
        from .scm import sample_posterior_noise_batch  # local import avoids cycle at module load

        if self.num_samples < 1:
            raise InvalidArgumentError(f"num_samples must be >= 1, got {self.num_samples!r}")
        log_probs = _log_prob_cache(arrays, self.models)
        gid = np.array([self.partition.group_of(h) for h in arrays.experts], dtype=np.int64)
        out = np.empty(sample_pos.size, dtype=np.int64)

        cross = gid[source_idx] != gid[target_idx]
        for j in np.unique(target_idx[cross]):
            mask = cross & (target_idx == j)
            out[mask] = np.argmax(log_probs(int(j)), axis=1)[sample_pos[mask]]

        same = ~cross
        sources = sorted(np.unique(source_idx[same]).tolist())
        # warm the cache single-threaded: predict_batch order must not race
        for j in sources:
            log_probs(int(j))
        for j in np.unique(target_idx[same]):
            log_probs(int(j))

        def source_block(j: int) -> tuple[np.ndarray, np.ndarray]:
            rows_j = np.flatnonzero(same & (source_idx == j))
            pos = np.unique(sample_pos[rows_j])
            observed = arrays.labels[pos, j]
            if np.any(observed < 0):
                raise InvalidArgumentError(
                    f"source expert {arrays.experts[j]!r} has no observed label on a queried sample"
                )
            stream = substream(self.seed, self.tag, "source", arrays.experts[j])
            noise = sample_posterior_noise_batch(log_probs(j)[pos], observed, int(self.num_samples), stream)
            preds = np.empty(rows_j.size, dtype=np.int64)
            for t in np.unique(target_idx[rows_j]):
                rows_jt = target_idx[rows_j] == t
                lp_t = log_probs(int(t))
                cf = np.argmax(lp_t[pos][None, :, :] + noise, axis=2)
                am = _per_sample_hist_argmax(cf, lp_t.shape[1])
                preds[rows_jt] = am[np.searchsorted(pos, sample_pos[rows_j][rows_jt])]
            return rows_j, preds

        for rows_j, preds in ordered_map(source_block, sources, threads=self.threads):
            out[rows_j] = preds
        return out


def cnb_models_from_panel(train: PanelDataset, alpha: float = 1.0) -> dict[ExpertId, CnbModel]:
    """One CNB per target expert, counting co-predictions over the panel.

    For target t, row c of source h counts the samples where h said c and t
    was observed; the extra row counts samples where t was observed but h
    was silent.  Sources never co-observed with t are omitted (they fall
    back to pure smoothing at query time).
    """
    arrays = PanelArrays.from_dataset(train)
    k = train.k
    out: dict[ExpertId, CnbModel] = {}
    for jt, target in enumerate(arrays.experts):
        mask = arrays.labels[:, jt] >= 0
        y_t = arrays.labels[mask, jt]
        counts: dict[ExpertId, np.ndarray] = {}
        for js, source in enumerate(arrays.experts):
            if js == jt:
                continue
            y_s = arrays.labels[mask, js]
            rows = np.where(y_s < 0, k, y_s)
            table = np.bincount(rows * k + y_t, minlength=(k + 1) * k).reshape(k + 1, k)
            if table[:k].sum() > 0:  # co-observed at least once
                counts[source] = table.astype(np.float64)
        out[target] = CnbModel(k=k, alpha=alpha, counts=counts)
    return out


# --- metrics ------------------------------------------------------------------


def zero_one_loss(predictions: Sequence[tuple[Label, Label]]) -> float:
    """Fraction of (predicted, true) pairs that disagree."""
    if len(predictions) == 0:
        raise InvalidArgumentError("zero_one_loss needs at least one prediction")
    arr = np.asarray(predictions, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidArgumentError("predictions must be (predicted, true) pairs")
    return float(np.mean(arr[:, 0] != arr[:, 1]))


def _comb2(x: np.ndarray | float) -> np.ndarray | float:
    return x * (x - 1) / 2.0


def adjusted_rand_index(p1: Partition, p2: Partition) -> float:
    """Chance-corrected pair-counting agreement between two partitions.

    1 exactly when the partitions are identical; can dip slightly below 0
    for adversarial pairs.  Degenerate contingencies (nothing to correct
    for) return 1.
    """
    experts = sorted(p1.experts)
    if set(experts) != set(p2.experts):
        raise InvalidArgumentError("partitions cover different expert sets")
    a = p1.labels_for(experts)
    b = p2.labels_for(experts)
    n = len(experts)
    contingency = np.zeros((len(p1.groups), len(p2.groups)), dtype=np.int64)
    np.add.at(contingency, (a, b), 1)
    index = _comb2(contingency.astype(np.float64)).sum()
    sum_a = _comb2(contingency.sum(axis=1).astype(np.float64)).sum()
    sum_b = _comb2(contingency.sum(axis=0).astype(np.float64)).sum()
    total = _comb2(float(n))
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def edge_ratio(graph: SimilarityGraph, true_partition: Partition) -> float:
    """Fraction of graph edges whose endpoints truly share a group."""
    missing = [v for v in graph.vertices if v not in true_partition]
    if missing:
        raise InvalidArgumentError(f"graph vertices {missing[:3]} not in the partition")
    edges = graph.edges()
    if not edges:
        warnings.warn("similarity graph has no edges; edge ratio defined as 0", stacklevel=2)
        return 0.0
    within = sum(1 for a, b in edges if true_partition.same_group(a, b))
    return within / len(edges)


# --- the evaluation loop ------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    overall_accuracy: float
    scenario_accuracies: dict[str, float | None]
    scenario_counts: dict[str, int]
    per_expert_accuracy: dict[ExpertId, float | None]
    per_expert_counts: dict[ExpertId, int]
    confusion_matrix: np.ndarray  # (k, k) int, rows = predicted, cols = true
    n_predictions: int
    label_names: tuple[str, ...]

    def to_jsonable(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "scenario_accuracies": dict(self.scenario_accuracies),
            "scenario_counts": dict(self.scenario_counts),
            "per_expert_accuracy": dict(sorted(self.per_expert_accuracy.items())),
            "per_expert_counts": dict(sorted(self.per_expert_counts.items())),
            "confusion_matrix": self.confusion_matrix.tolist(),
            "confusion_matrix_layout": "rows=predicted, columns=true",
            "n_predictions": self.n_predictions,
            "label_names": list(self.label_names),
        }


def _ordered_pairs(arrays: PanelArrays) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sp_parts, src_parts, tgt_parts = [], [], []
    for i in range(arrays.labels.shape[0]):
        obs = np.flatnonzero(arrays.labels[i] >= 0)
        if obs.size < 2:
            continue
        a = np.repeat(obs, obs.size)
        b = np.tile(obs, obs.size)
        keep = a != b
        src_parts.append(a[keep])
        tgt_parts.append(b[keep])
        sp_parts.append(np.full(keep.sum(), i, dtype=np.int64))
    if not sp_parts:
        raise InvalidArgumentError("no sample has two or more predictions to evaluate")
    return (np.concatenate(sp_parts), np.concatenate(src_parts), np.concatenate(tgt_parts))


def evaluate(
    test: PanelDataset,
    predictor: PairPredictor | Callable[[np.ndarray, ExpertId, Label, ExpertId], Label],
    partition: Partition,
) -> EvalReport:
    """Score a predictor on every ordered co-observed pair of the test panel.

    ``partition`` drives the same-group / cross-group breakdown (use the
    learned partition to mirror the deployment setting).  Experts with no
    eligible pair get a ``None`` per-expert accuracy, never a fake zero.
    """
    arrays = PanelArrays.from_dataset(test)
    for h in arrays.experts:
        if h not in partition:
            raise MissingExpertError(f"expert {h!r} is not in the partition")
    if not isinstance(predictor, PairPredictor):
        predictor = FunctionPredictor(predictor)
    sample_pos, source_idx, target_idx = _ordered_pairs(arrays)
    predicted = np.asarray(predictor.predict_pairs(arrays, sample_pos, source_idx, target_idx))
    if predicted.shape != sample_pos.shape:
        raise InvalidArgumentError("predictor returned a wrong-shaped answer")
    true = arrays.labels[sample_pos, target_idx]
    if np.any(predicted < 0) or np.any(predicted >= test.k):
        raise InvalidArgumentError("predictor returned labels outside [0, k)")

    hits = predicted == true
    gid = np.array([partition.group_of(h) for h in arrays.experts], dtype=np.int64)
    same = gid[source_idx] == gid[target_idx]

    def acc(mask: np.ndarray) -> tuple[float | None, int]:
        m = int(mask.sum())
        return (float(hits[mask].mean()) if m else None, m)

    scenario_accuracies: dict[str, float | None] = {}
    scenario_counts: dict[str, int] = {}
    for name, mask in (
        ("all_pairs", np.ones_like(same)),
        ("same_group", same),
        ("cross_group", ~same),
    ):
        scenario_accuracies[name], scenario_counts[name] = acc(mask)

    per_expert_accuracy: dict[ExpertId, float | None] = {}
    per_expert_counts: dict[ExpertId, int] = {}
    for j, h in enumerate(arrays.experts):
        per_expert_accuracy[h], per_expert_counts[h] = acc(target_idx == j)

    confusion = np.bincount(predicted * test.k + true, minlength=test.k * test.k)
    return EvalReport(
        overall_accuracy=float(hits.mean()),
        scenario_accuracies=scenario_accuracies,
        scenario_counts=scenario_counts,
        per_expert_accuracy=per_expert_accuracy,
        per_expert_counts=per_expert_counts,
        confusion_matrix=confusion.reshape(test.k, test.k),
        n_predictions=int(sample_pos.size),
        label_names=test.label_names,
    )


def write_report_files(report: EvalReport, out_dir: str | Path) -> None:
    """Emit report.json, confusion_matrix.csv, per_expert_accuracy.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_jsonable(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    with (out / "confusion_matrix.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predicted\\true", *report.label_names])
        for r, name in enumerate(report.label_names):
            writer.writerow([name, *(int(x) for x in report.confusion_matrix[r])])
    with (out / "per_expert_accuracy.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert_id", "n", "accuracy"])
        for h in sorted(report.per_expert_accuracy):
            a = report.per_expert_accuracy[h]
            writer.writerow([h, report.per_expert_counts[h], "" if a is None else repr(a)])
