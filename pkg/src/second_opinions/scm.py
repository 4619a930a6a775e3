"""Gumbel-max structural model over panels of experts.

Each expert ``h`` labels an instance ``x`` by perturb-and-argmax:

    Y_h = argmax_c ( log p_h(c | x) + U_c )

with ``U`` a vector of independent standard Gumbel draws.  Experts in the
same group share the *same* noise vector; experts in different groups get
independent vectors.  Shared noise is what ties an observed opinion to the
counterfactual opinion of a colleague: conditioning on ``Y_h = c`` pins down
a posterior over the group's noise, and replaying that noise through the
colleague's probabilities yields the counterfactual label distribution.
For experts in *different* groups the observation carries no information
about the target's noise, so the counterfactual collapses to the target's
ordinary model distribution (no sampling needed).

The posterior over a group's noise given ``argmax = c`` is sampled
top-down: the maximum perturbed score is Gumbel(0) (the log-probabilities
are normalized), it is attained at ``c``, and every other perturbed score
is a Gumbel truncated above at that maximum.  A final nudge pass enforces
``argmax(log p + U) == c`` exactly in float arithmetic, so every returned
noise vector reproduces the observation bit-for-bit.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, MissingExpertError
from .types import (
    NORMALIZATION_ATOL,
    CounterfactualEstimate,
    CounterfactualQuery,
    ExpertId,
    Label,
    Partition,
    SimplexDistribution,
)

if TYPE_CHECKING:  # pragma: no cover
    from .models import ConditionalModel

_TINY = np.finfo(np.float64).tiny  # guards log(0) on uniform draws


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, -1) + np.log(np.sum(np.exp(a - m), axis=-1))


def _gumbel(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    u = np.maximum(rng.random(shape), _TINY)
    return -np.log(-np.log(u))


def sample_prior_noise(k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one standard-Gumbel noise vector of length ``k``."""
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidArgumentError(f"k must be a positive int, got {k!r}")
    return _gumbel(rng, (int(k),))


def mechanism(log_probs: np.ndarray, noise: np.ndarray) -> Label:
    """Perturb-and-argmax: label with the highest ``log_probs + noise``.

    Ties resolve to the lowest index.  ``log_probs`` need not be normalized.
    """
    phi = np.asarray(log_probs, dtype=np.float64)
    u = np.asarray(noise, dtype=np.float64)
    if phi.ndim != 1 or u.ndim != 1 or phi.shape != u.shape or phi.size < 1:
        raise InvalidArgumentError(
            f"log_probs and noise must be matching nonempty 1-d vectors, got {phi.shape} and {u.shape}"
        )
    if np.any(np.isnan(phi)) or np.any(phi == np.inf):
        raise InvalidArgumentError("log_probs must not contain NaN or +inf")
    if not np.all(np.isfinite(u)):
        raise InvalidArgumentError("noise must be finite")
    if np.all(phi == -np.inf):
        raise InvalidArgumentError("log_probs are all -inf; argmax undefined")
    return int(np.argmax(phi + u))


def sample_joint(
    features: np.ndarray,
    experts: Sequence[ExpertId],
    partition: Partition,
    models: Mapping[ExpertId, "ConditionalModel"],
    rng: np.random.Generator,
) -> dict[ExpertId, Label]:
    """Sample one joint labeling of ``features`` by ``experts``.

    One noise vector is drawn per group of ``partition`` — for *every* group,
    in canonical group order, whether or not the group has a requested expert.
    Burning noise for absent groups keeps the draw restriction-consistent: the
    labels of any subset of experts coincide bit-for-bit with the corresponding
    entries of a full-roster draw made from the same generator state.
    """
    if len(experts) == 0:
        raise InvalidArgumentError("experts must be nonempty")
    if len(set(experts)) != len(experts):
        raise InvalidArgumentError("experts contains duplicates")
    log_probs: dict[ExpertId, np.ndarray] = {}
    k: int | None = None
    for h in experts:
        if h not in partition:
            raise MissingExpertError(f"expert {h!r} is not in the partition")
        if h not in models:
            raise MissingExpertError(f"no model for expert {h!r}")
        dist = models[h].predict(features)
        if k is None:
            k = dist.k
        elif dist.k != k:
            raise InvalidArgumentError(f"models disagree on label count: {k} vs {dist.k} for {h!r}")
        log_probs[h] = dist.log_probs()
    assert k is not None
    noise_by_group = [sample_prior_noise(k, rng) for _ in partition.groups]
    return {h: mechanism(log_probs[h], noise_by_group[partition.group_of(h)]) for h in experts}


def sample_joint_batch(
    features: np.ndarray,
    experts: Sequence[ExpertId],
    partition: Partition,
    models: Mapping[ExpertId, "ConditionalModel"],
    num_samples: int,
    rng: np.random.Generator,
) -> dict[ExpertId, np.ndarray]:
    """``num_samples`` joint draws at once; columns of uniforms line up with
    repeated :func:`sample_joint` calls, so draw ``t`` here is bit-identical to
    the ``t``-th sequential call on the same generator."""
    if not isinstance(num_samples, (int, np.integer)) or num_samples < 1:
        raise InvalidArgumentError(f"num_samples must be a positive int, got {num_samples!r}")
    if len(experts) == 0:
        raise InvalidArgumentError("experts must be nonempty")
    log_probs: dict[ExpertId, np.ndarray] = {}
    k: int | None = None
    for h in experts:
        if h not in partition:
            raise MissingExpertError(f"expert {h!r} is not in the partition")
        if h not in models:
            raise MissingExpertError(f"no model for expert {h!r}")
        dist = models[h].predict(features)
        if k is None:
            k = dist.k
        elif dist.k != k:
            raise InvalidArgumentError(f"models disagree on label count: {k} vs {dist.k} for {h!r}")
        log_probs[h] = dist.log_probs()
    assert k is not None
    noise = _gumbel(rng, (int(num_samples), len(partition.groups), k))
    return {
        h: np.argmax(log_probs[h][None, :] + noise[:, partition.group_of(h), :], axis=1)
        for h in experts
    }


def _force_observed_argmax(phi: np.ndarray, noise: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Nudge ``noise`` (in place) so argmax(phi + noise) equals ``observed``.

    The analytic truncation already guarantees this up to float rounding;
    offending coordinates sit within a few ulps of the observed score.  Each
    pass lowers them one ulp in score space, so the loop terminates fast.
    """
    T, n, k = noise.shape
    rows = np.arange(n)
    others = np.ones((n, k), dtype=bool)
    others[rows, observed] = False
    target = None
    for _ in range(64):
        v = phi[None, :, :] + noise
        v_obs = v[:, rows, observed][:, :, None]
        bad = (v >= v_obs) & others[None, :, :]
        if not bad.any():
            return noise
        if target is None:
            target = np.broadcast_to(v_obs, v.shape).copy()
        target[bad] = np.nextafter(target[bad], -np.inf)
        noise[bad] = target[bad] - np.broadcast_to(phi[None, :, :], v.shape)[bad]
    raise AssertionError("posterior noise repair did not converge")  # pragma: no cover


def _validate_posterior_inputs(phi: np.ndarray, obs: np.ndarray) -> None:
    n, k = phi.shape
    if np.any(obs < 0) or np.any(obs >= k):
        raise InvalidArgumentError("observed labels out of range")
    if np.any(np.isnan(phi)) or np.any(phi == np.inf):
        raise InvalidArgumentError("log_probs must not contain NaN or +inf")
    norms = _logsumexp_rows(phi)
    if not np.all(np.abs(norms) <= NORMALIZATION_ATOL):
        worst = float(np.max(np.abs(norms)))
        raise InvalidArgumentError(f"log_probs rows must be normalized within {NORMALIZATION_ATOL}, off by {worst!r}")
    if np.any(phi[np.arange(n), obs] == -np.inf):
        raise InvalidArgumentError("observed label has zero probability under the model")


def posterior_noise_from_uniforms(
    phi: np.ndarray,
    obs: np.ndarray,
    max_uniforms: np.ndarray,
    coord_uniforms: np.ndarray,
) -> np.ndarray:
    """The deterministic core of posterior sampling: uniforms in, noise out.

    ``phi`` is ``(n, k)`` normalized log-probs, ``obs`` is ``(n,)``,
    ``max_uniforms`` is ``(T, n)`` and ``coord_uniforms`` ``(T, n, k)``.
    Exposed so callers with bespoke substream keying (one stream per task)
    can draw their own uniforms and still share this transform.
    """
    phi = np.asarray(phi, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.int64)
    if phi.ndim != 2 or obs.shape != (phi.shape[0],):
        raise InvalidArgumentError(f"phi must be (n, k) with obs (n,), got {phi.shape} and {obs.shape}")
    T = max_uniforms.shape[0] if max_uniforms.ndim else 0
    if max_uniforms.shape != (T, phi.shape[0]) or coord_uniforms.shape != (T, *phi.shape):
        raise InvalidArgumentError(
            f"uniform shapes {max_uniforms.shape}, {coord_uniforms.shape} do not match (T, n[, k])"
        )
    _validate_posterior_inputs(phi, obs)
    m = -np.log(-np.log(np.maximum(max_uniforms, _TINY)))
    u = np.maximum(coord_uniforms, _TINY)
    rows = np.arange(phi.shape[0])
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        g = phi[None, :, :] - np.log(np.exp(phi[None, :, :] - m[:, :, None]) - np.log(u))
        noise = g - phi[None, :, :]
    # Zero-probability classes can never win the argmax; their posterior noise
    # is just the prior (the formula above degenerates to -inf - -inf there).
    dead = phi == -np.inf
    if dead.any():
        prior = -np.log(-np.log(u))
        noise = np.where(dead[None, :, :], prior, noise)
    noise[:, rows, obs] = m - phi[rows, obs][None, :]
    return _force_observed_argmax(phi, noise, obs)


def sample_posterior_noise_batch(
    log_probs: np.ndarray,
    observed: np.ndarray | Sequence[int],
    num_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized posterior noise: ``num_samples`` draws for each row.

    ``log_probs`` is ``(n, k)`` (rows normalized), ``observed`` is ``(n,)``.
    Returns ``(num_samples, n, k)`` noise with ``argmax(log_probs[i] + out[t, i])
    == observed[i]`` for every draw, exactly.
    """
    phi = np.asarray(log_probs, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] < 1:
        raise InvalidArgumentError(f"log_probs must be (n, k), got shape {phi.shape}")
    obs = np.asarray(observed, dtype=np.int64)
    if obs.shape != (phi.shape[0],):
        raise InvalidArgumentError(f"observed must have shape ({phi.shape[0]},), got {obs.shape}")
    if not isinstance(num_samples, (int, np.integer)) or num_samples < 1:
        raise InvalidArgumentError(f"num_samples must be a positive int, got {num_samples!r}")
    T = int(num_samples)
    n, k = phi.shape
    # Maximum perturbed score: Gumbel(logsumexp(phi)) = Gumbel(0), attained at the observed label.
    m_u = rng.random((T, n))
    u = rng.random((T, n, k))
    return posterior_noise_from_uniforms(phi, obs, m_u, u)


def sample_posterior_noise(
    log_probs: np.ndarray,
    observed_label: Label,
    rng: np.random.Generator,
) -> np.ndarray:
    """One posterior noise draw given ``argmax(log_probs + noise) == observed_label``.

    ``log_probs`` must be normalized (logsumexp within ``NORMALIZATION_ATOL``
    of zero) and the observed label must have nonzero probability.
    """
    phi = np.asarray(log_probs, dtype=np.float64)
    if phi.ndim != 1:
        raise InvalidArgumentError(f"log_probs must be 1-d, got shape {phi.shape}")
    if not isinstance(observed_label, (int, np.integer)):
        raise InvalidArgumentError(f"observed_label must be an int, got {observed_label!r}")
    bank = sample_posterior_noise_batch(phi[None, :], [int(observed_label)], 1, rng)
    return bank[0, 0]


def counterfactual_distribution(
    query: CounterfactualQuery,
    partition: Partition,
    models: Mapping[ExpertId, "ConditionalModel"],
    num_samples: int,
    rng: np.random.Generator,
) -> CounterfactualEstimate:
    """Estimate the target expert's label distribution given the observation.

    Same group: Monte Carlo over posterior noise (``num_samples`` draws,
    histogram may contain exact zeros).  Different groups: returns the target
    model's distribution itself, flagged ``exact`` with ``num_samples == 0``.
    """
    if not isinstance(num_samples, (int, np.integer)) or num_samples < 1:
        raise InvalidArgumentError(f"num_samples must be a positive int, got {num_samples!r}")
    for h in (query.observed_expert, query.target_expert):
        if h not in partition:
            raise MissingExpertError(f"expert {h!r} is not in the partition")
        if h not in models:
            raise MissingExpertError(f"no model for expert {h!r}")
    target_dist = models[query.target_expert].predict(query.features)
    if not partition.same_group(query.observed_expert, query.target_expert):
        return CounterfactualEstimate(dist=target_dist, num_samples=0, exact=True)

    source_dist = models[query.observed_expert].predict(query.features)
    if source_dist.k != target_dist.k:
        raise InvalidArgumentError(
            f"models disagree on label count: {source_dist.k} vs {target_dist.k}"
        )
    if query.observed_label >= source_dist.k:
        raise InvalidArgumentError(
            f"observed_label {query.observed_label} out of range for k={source_dist.k}"
        )
    T = int(num_samples)
    noise = sample_posterior_noise_batch(
        source_dist.log_probs()[None, :], [query.observed_label], T, rng
    )[:, 0, :]
    labels = np.argmax(target_dist.log_probs()[None, :] + noise, axis=1)
    hist = np.bincount(labels, minlength=target_dist.k).astype(np.float64) / T
    return CounterfactualEstimate(dist=SimplexDistribution(hist), num_samples=T, exact=False)


def counterfactual_argmax(
    query: CounterfactualQuery,
    partition: Partition,
    models: Mapping[ExpertId, "ConditionalModel"],
    num_samples: int,
    rng: np.random.Generator,
) -> Label:
    """Most probable counterfactual label (lowest index on ties)."""
    return counterfactual_distribution(query, partition, models, num_samples, rng).argmax_label()
