"""Per-expert conditional label models.

Three model families cover the pipeline:

* :class:`GnbModel` — Gaussian naive Bayes fit to an expert's historical
  predictions; the workhorse for real data.
* :class:`CnbModel` — categorical co-prediction tables ("when expert h said
  c, what did the target say?") with Laplace smoothing and an extra "absent"
  row for queries where the source expert was not observed.  Used by the
  product baseline, not by the causal model.
* :class:`LogitModel` — multinomial logit, the synthetic ground truth.

All models emit floored :class:`SimplexDistribution` outputs so downstream
log-space code never sees a zero.  Serialization is one versioned JSON
document per model; floats go through JSON's shortest-round-trip encoding,
so a save/load cycle is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError
from .types import EPSILON_PROB, ExpertId, Label, SimplexDistribution, floor_probs

# Sentinel for "the source expert did not predict on this sample" in CNB
# queries and training tuples; stored as the extra last row of each table.
ABSENT = "absent"

_LOG_2PI = float(np.log(2.0 * np.pi))


@runtime_checkable
class ConditionalModel(Protocol):
    """Anything that maps a feature vector to a label distribution."""

    @property
    def k(self) -> int: ...

    def predict(self, x: np.ndarray) -> SimplexDistribution: ...

    def predict_batch(self, X: np.ndarray) -> np.ndarray: ...


def _check_matrix(X: np.ndarray, d: int, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d:
        raise InvalidArgumentError(f"{what} must have shape (n, {d}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError(f"{what} must be finite")
    return X


def _normalize_rows(log_scores: np.ndarray) -> np.ndarray:
    """Rows of log-scores -> floored probability rows via logsumexp."""
    m = np.max(log_scores, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    p = np.exp(log_scores - m)
    p /= p.sum(axis=1, keepdims=True)
    return floor_probs(p)


@dataclass(frozen=True)
class GnbModel:
    """Gaussian naive Bayes: per-class feature means/variances + log-priors."""

    class_log_priors: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k, d), strictly positive

    def __post_init__(self) -> None:
        priors = np.asarray(self.class_log_priors, dtype=np.float64)
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        if priors.ndim != 1 or means.ndim != 2 or variances.shape != means.shape:
            raise InvalidArgumentError("inconsistent GNB parameter shapes")
        if means.shape[0] != priors.size or priors.size < 1 or means.shape[1] < 1:
            raise InvalidArgumentError("inconsistent GNB parameter shapes")
        if np.any(np.isnan(priors)) or np.any(priors == np.inf):
            raise InvalidArgumentError("class_log_priors must not contain NaN or +inf")
        total = float(np.exp(priors[priors > -np.inf]).sum()) if np.any(priors > -np.inf) else 0.0
        if abs(total - 1.0) > 1e-6:
            raise InvalidArgumentError(f"class priors must sum to 1, got {total!r}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
            raise InvalidArgumentError("means and variances must be finite")
        if np.any(variances <= 0):
            raise InvalidArgumentError("variances must be strictly positive")
        for name, arr in (("class_log_priors", priors), ("means", means), ("variances", variances)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.class_log_priors.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = _check_matrix(X, self.d, "X")
        # log N(x | mu, var) summed over features, all classes at once
        diff = X[:, None, :] - self.means[None, :, :]  # (n, k, d)
        ll = -0.5 * (_LOG_2PI + np.log(self.variances)[None, :, :] + diff * diff / self.variances[None, :, :])
        scores = self.class_log_priors[None, :] + ll.sum(axis=2)
        return _normalize_rows(scores)

    def predict(self, x: np.ndarray) -> SimplexDistribution:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidArgumentError(f"x must be 1-d, got shape {x.shape}")
        return SimplexDistribution(self.predict_batch(x[None, :])[0])

    def to_jsonable(self) -> dict:
        return {
            "format": "gnb-v1",
            "k": self.k,
            "d": self.d,
            "class_log_priors": self.class_log_priors.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


def train_gnb(
    samples: Sequence[tuple[np.ndarray, Label]],
    k: int,
    smoothing: float = 1e-9,
    require_all_classes: bool = True,
) -> GnbModel:
    """Fit a Gaussian naive Bayes model.

    Per-class sample means and (population) variances, class-frequency
    priors.  Variances are floored at ``smoothing`` times the largest
    per-feature variance of the whole training block, so near-constant
    features cannot produce singular likelihoods.

    With ``require_all_classes`` (the default) a class that never occurs in
    ``samples`` raises :class:`InsufficientDataError`; pass ``False`` to
    accept degenerate training sets (the missing class gets prior zero,
    which the output floor later turns into epsilon-scale mass).
    """
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidArgumentError(f"k must be a positive int, got {k!r}")
    if len(samples) == 0:
        raise InsufficientDataError("no training samples")
    if smoothing <= 0:
        raise InvalidArgumentError(f"smoothing must be positive, got {smoothing!r}")
    X = np.asarray([np.asarray(x, dtype=np.float64) for x, _ in samples])
    y = np.asarray([label for _, label in samples], dtype=np.int64)
    if X.ndim != 2:
        raise InvalidArgumentError("feature vectors must be 1-d and share one length")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("features must be finite")
    if np.any(y < 0) or np.any(y >= k):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")

    n, d = X.shape
    counts = np.bincount(y, minlength=k).astype(np.float64)
    if require_all_classes:
        missing = np.flatnonzero(counts == 0)
        if missing.size:
            raise InsufficientDataError(f"no training samples for class {int(missing[0])}")
    with np.errstate(divide="ignore"):
        log_priors = np.log(counts / n)

    means = np.zeros((k, d))
    variances = np.zeros((k, d))
    for c in range(k):
        rows = X[y == c]
        if rows.shape[0]:
            means[c] = rows.mean(axis=0)
            variances[c] = rows.var(axis=0)
    max_var = float(np.var(X, axis=0).max())
    floor = smoothing * max_var if max_var > 0 else smoothing
    return GnbModel(class_log_priors=log_priors, means=means, variances=np.maximum(variances, floor))


@dataclass(frozen=True)
class LogitModel:
    """Multinomial logit: p(c | x) = softmax over classes of w_c . x."""

    weights: np.ndarray  # (k, d)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise InvalidArgumentError(f"weights must be (k, d), got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgumentError("weights must be finite")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = _check_matrix(X, self.d, "X")
        # elementwise multiply + per-row reduce instead of BLAS matmul: the
        # result for a given row must not depend on how many rows were batched
        scores = (X[:, None, :] * self.weights[None, :, :]).sum(axis=2)
        return _normalize_rows(scores)

    def predict(self, x: np.ndarray) -> SimplexDistribution:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidArgumentError(f"x must be 1-d, got shape {x.shape}")
        return SimplexDistribution(self.predict_batch(x[None, :])[0])

    def to_jsonable(self) -> dict:
        return {"format": "logit-v1", "k": self.k, "d": self.d, "weights": self.weights.tolist()}


def logit_predict(model: LogitModel, x: np.ndarray) -> SimplexDistribution:
    return model.predict(x)


def gnb_predict(model: GnbModel, x: np.ndarray) -> SimplexDistribution:
    return model.predict(x)


@dataclass(frozen=True)
class CnbModel:
    """Co-prediction tables for one target expert.

    For each source expert the model keeps a ``(k+1, k)`` count table: row
    ``c`` counts the target's labels on samples where the source said ``c``,
    and the extra last row counts samples where the source made no
    prediction.  Queried rows are Laplace-smoothed with ``alpha``, so they
    are strictly positive distributions even with zero data.  A source with
    no table behaves as all-zero counts (pure smoothing).
    """

    k: int
    alpha: float
    counts: Mapping[ExpertId, np.ndarray] = field(default_factory=dict)  # (k+1, k) each

    def __post_init__(self) -> None:
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise InvalidArgumentError(f"k must be a positive int, got {self.k!r}")
        if not self.alpha > 0:
            raise InvalidArgumentError(f"alpha must be positive, got {self.alpha!r}")
        frozen: dict[ExpertId, np.ndarray] = {}
        for h, table in self.counts.items():
            t = np.asarray(table, dtype=np.float64)
            if t.shape != (self.k + 1, self.k):
                raise InvalidArgumentError(
                    f"count table for {h!r} must be ({self.k + 1}, {self.k}), got {t.shape}"
                )
            if np.any(t < 0) or not np.all(np.isfinite(t)):
                raise InvalidArgumentError(f"count table for {h!r} must be finite and nonnegative")
            t = t.copy()
            t.setflags(write=False)
            frozen[h] = t
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "counts", frozen)

    @property
    def sources(self) -> tuple[ExpertId, ...]:
        return tuple(sorted(self.counts))

    def _row_index(self, observed: Label | str) -> int:
        if observed == ABSENT:
            return self.k
        if isinstance(observed, (int, np.integer)) and 0 <= observed < self.k:
            return int(observed)
        raise InvalidArgumentError(f"observed must be a label in [0, {self.k}) or {ABSENT!r}, got {observed!r}")

    def row(self, source: ExpertId, observed: Label | str) -> np.ndarray:
        """Smoothed P(target label | source said ``observed``) as a (k,) vector."""
        idx = self._row_index(observed)
        table = self.counts.get(source)
        raw = table[idx] if table is not None else np.zeros(self.k)
        smoothed = raw + self.alpha
        return smoothed / smoothed.sum()

    def table(self, source: ExpertId) -> np.ndarray:
        """All smoothed rows for one source, shape (k+1, k)."""
        return np.vstack([self.row(source, obs) for obs in [*range(self.k), ABSENT]])

    def to_jsonable(self) -> dict:
        return {
            "format": "cnb-v1",
            "k": self.k,
            "alpha": self.alpha,
            "counts": {h: self.counts[h].tolist() for h in self.sources},
        }


def train_cnb(
    co_predictions: Iterable[tuple[ExpertId, Label | str, Label]],
    k: int,
    alpha: float = 1.0,
) -> CnbModel:
    """Accumulate (source expert, source label or ABSENT, target label) tuples."""
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidArgumentError(f"k must be a positive int, got {k!r}")
    if not alpha > 0:
        raise InvalidArgumentError(f"alpha must be positive, got {alpha!r}")
    counts: dict[ExpertId, np.ndarray] = {}
    for source, observed, target in co_predictions:
        if not isinstance(target, (int, np.integer)) or not 0 <= target < k:
            raise InvalidArgumentError(f"target label {target!r} out of range for k={k}")
        if observed == ABSENT:
            row = k
        elif isinstance(observed, (int, np.integer)) and 0 <= observed < k:
            row = int(observed)
        else:
            raise InvalidArgumentError(f"source label {observed!r} out of range for k={k}")
        table = counts.get(source)
        if table is None:
            table = counts[source] = np.zeros((k + 1, k))
        table[row, int(target)] += 1
    return CnbModel(k=int(k), alpha=float(alpha), counts=counts)


def baseline_gnb_argmax(target_model: ConditionalModel, x: np.ndarray) -> Label:
    """Most likely label under the target's own model, ignoring any observation."""
    return target_model.predict(x).argmax_label()


def baseline_gnb_cnb_argmax(
    target_model: ConditionalModel,
    cnb: CnbModel,
    x: np.ndarray,
    source: ExpertId,
    observed: Label | str,
) -> Label:
    """Most likely label under (target model) x (co-prediction row).

    ``observed`` is the source expert's label on this sample, or ``ABSENT``
    when the source made no prediction.
    """
    probs = target_model.predict(x).probs
    row = cnb.row(source, observed)
    if row.size != probs.size:
        raise InvalidArgumentError(f"label count mismatch: model k={probs.size}, cnb k={row.size}")
    return int(np.argmax(probs * row))


# --- serialization -----------------------------------------------------------

_MODEL_FORMATS = {"gnb-v1", "cnb-v1", "logit-v1"}


def model_from_jsonable(doc: Mapping) -> GnbModel | CnbModel | LogitModel:
    fmt = doc.get("format") if isinstance(doc, Mapping) else None
    if fmt == "gnb-v1":
        return GnbModel(
            class_log_priors=np.asarray(doc["class_log_priors"], dtype=np.float64),
            means=np.asarray(doc["means"], dtype=np.float64),
            variances=np.asarray(doc["variances"], dtype=np.float64),
        )
    if fmt == "cnb-v1":
        return CnbModel(
            k=int(doc["k"]),
            alpha=float(doc["alpha"]),
            counts={str(h): np.asarray(t, dtype=np.float64) for h, t in doc["counts"].items()},
        )
    if fmt == "logit-v1":
        return LogitModel(weights=np.asarray(doc["weights"], dtype=np.float64))
    raise InvalidArgumentError(f"unknown model format {fmt!r} (expected one of {sorted(_MODEL_FORMATS)})")


def save_models(models: Mapping[ExpertId, GnbModel | CnbModel | LogitModel], directory: str | Path) -> None:
    """Write one ``<index>.json`` per expert; the expert id lives inside the
    document (filenames are not identity)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, h in enumerate(sorted(models)):
        doc = dict(models[h].to_jsonable())
        doc["expert_id"] = h
        path = directory / f"{i:05d}.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=None) + "\n", encoding="utf-8")


def load_models(directory: str | Path) -> dict[ExpertId, GnbModel | CnbModel | LogitModel]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidArgumentError(f"model directory {str(directory)!r} does not exist")
    models: dict[ExpertId, GnbModel | CnbModel | LogitModel] = {}
    for path in sorted(directory.glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        expert = doc.get("expert_id")
        if not isinstance(expert, str):
            raise InvalidArgumentError(f"model file {path.name} lacks an 'expert_id' field")
        if expert in models:
            raise InvalidArgumentError(f"duplicate model for expert {expert!r}")
        models[expert] = model_from_jsonable(doc)
    if not models:
        raise InvalidArgumentError(f"no model files found in {str(directory)!r}")
    return models
