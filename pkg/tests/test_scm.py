"""Noisy-argmax mechanism, posterior noise sampling, counterfactuals.

Reference values come from independent closed forms where they exist:
the prior noise is standard Gumbel (mean = Euler-Mascheroni, CDF
exp(-exp(-x))), and for k = 2 the shared-noise counterfactual has the
closed form P(Y' = 0 | Y = 0) = min(p0, q0) / p0 (both argmaxes depend
on the noise only through the logistic-distributed coordinate
difference).  Everything without a closed form is checked against
rejection sampling from the prior.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from second_opinions import (
    CounterfactualQuery,
    InvalidArgumentError,
    MissingExpertError,
    Partition,
    SimplexDistribution,
    counterfactual_argmax,
    counterfactual_distribution,
    mechanism,
    posterior_noise_from_uniforms,
    sample_joint,
    sample_joint_batch,
    sample_posterior_noise,
    sample_posterior_noise_batch,
    sample_prior_noise,
)
from second_opinions.models import LogitModel
from second_opinions.rng import substream

from conftest import random_simplex

EULER_MASCHERONI = 0.5772156649015329


class FixedDistModel:
    """Conditional model that ignores features; handy for exact fixtures."""

    def __init__(self, probs):
        self._dist = SimplexDistribution.from_model_probs(np.asarray(probs, dtype=np.float64))

    @property
    def k(self):
        return self._dist.k

    def predict(self, x):
        return self._dist

    def predict_batch(self, X):
        return np.tile(self._dist.probs, (len(X), 1))


def draw_posterior(phi, obs, num_draws, rng):
    """num_draws posterior noise vectors for a single (phi, observed label)."""
    return sample_posterior_noise_batch(phi[None, :], [obs], num_draws, rng)[:, 0, :]


def rejection_posterior_noise(phi, obs, n_draws, rng, batch=200_000):
    """Posterior noise by rejection from the prior: keep draws whose argmax is obs."""
    kept = []
    total = 0
    k = phi.shape[0]
    while total < n_draws:
        g = rng.gumbel(size=(batch, k))
        sel = g[np.argmax(phi[None, :] + g, axis=1) == obs]
        kept.append(sel)
        total += len(sel)
    return np.concatenate(kept)[:n_draws]


class TestMechanism:
    def test_argmax_of_score(self):
        log_p = np.log(np.array([0.2, 0.5, 0.3]))
        noise = np.array([3.0, 0.0, 0.0])
        assert mechanism(log_p, noise) == 0
        assert mechanism(log_p, np.zeros(3)) == 1

    def test_tie_goes_to_smallest_index(self):
        assert mechanism(np.log(np.array([0.5, 0.5])), np.zeros(2)) == 0

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            mechanism(np.zeros(3), np.zeros(2))


class TestPriorNoise:
    def test_shape_and_determinism(self):
        u1 = sample_prior_noise(5, substream(0, "t"))
        u2 = sample_prior_noise(5, substream(0, "t"))
        assert u1.shape == (5,)
        np.testing.assert_array_equal(u1, u2)

    def test_mean_matches_gumbel(self):
        rng = substream(7, "gumbel-mean")
        draws = np.array([sample_prior_noise(4, rng) for _ in range(25_000)]).ravel()
        assert draws.mean() == pytest.approx(EULER_MASCHERONI, abs=0.02)

    def test_ks_against_gumbel_cdf(self):
        rng = substream(7, "gumbel-ks")
        draws = np.concatenate([sample_prior_noise(10, rng) for _ in range(10_000)])
        stat = stats.kstest(draws, lambda x: np.exp(-np.exp(-x))).statistic
        assert stat < 0.01

    def test_marginal_fidelity_small(self):
        # argmax(log p + Gumbel noise) must reproduce p itself
        p = random_simplex(4, substream(3, "marginal"))
        rng = substream(3, "marginal-draws")
        log_p = np.log(p)
        labels = np.array([mechanism(log_p, sample_prior_noise(4, rng)) for _ in range(100_000)])
        emp = np.bincount(labels, minlength=4) / labels.size
        assert 0.5 * np.abs(emp - p).sum() < 0.01


class TestPosteriorNoise:
    def test_every_draw_satisfies_argmax_constraint(self):
        for i in range(5):
            p = random_simplex(5, substream(11, "argmax", i))
            phi = np.log(p)
            obs = int(substream(11, "obs", i).integers(5))
            noise = draw_posterior(phi, obs, 2000, substream(11, "draws", i))
            scores = phi[None, :] + noise
            assert np.all(np.argmax(scores, axis=1) == obs)

    def test_single_draw_wrapper_matches_batch_semantics(self):
        p = random_simplex(4, substream(13, "single"))
        phi = np.log(p)
        noise = sample_posterior_noise(phi, 2, substream(13, "w"))
        assert noise.shape == (4,)
        assert np.argmax(phi + noise) == 2

    def test_ks_against_rejection_oracle(self):
        p = random_simplex(3, substream(17, "ks-p"))
        phi = np.log(p)
        obs = 1
        ours = draw_posterior(phi, obs, 20_000, substream(17, "ks-ours"))
        oracle = rejection_posterior_noise(phi, obs, 20_000, substream(17, "ks-oracle"))
        for c in range(3):
            stat = stats.ks_2samp(ours[:, c], oracle[:, c]).statistic
            assert stat < 0.03, f"coordinate {c}: KS {stat}"

    def test_observed_score_is_standard_gumbel(self):
        # max of k independent Gumbel(phi_j) with normalized phi is Gumbel(0)
        p = random_simplex(6, substream(19, "obs-score"))
        phi = np.log(p)
        noise = draw_posterior(phi, 2, 30_000, substream(19, "d"))
        score_obs = phi[2] + noise[:, 2]
        stat = stats.kstest(score_obs, lambda x: np.exp(-np.exp(-x))).statistic
        assert stat < 0.015

    def test_zero_probability_label_cannot_be_observed(self):
        with np.errstate(divide="ignore"):
            phi = np.log(np.array([1.0, 0.0]))
        with pytest.raises(InvalidArgumentError):
            sample_posterior_noise(phi, 1, substream(0, "z"))

    def test_dead_coordinate_never_wins(self):
        with np.errstate(divide="ignore"):
            phi = np.log(np.array([0.6, 0.0, 0.4]))
        noise = draw_posterior(phi, 2, 5000, substream(23, "dead"))
        assert np.all(np.argmax(phi[None, :] + noise, axis=1) == 2)
        assert np.all(np.isfinite(noise))

    def test_uniform_transform_is_deterministic(self):
        phi = np.tile(np.log(np.array([0.3, 0.7])), (2, 1))
        mu = np.array([[0.5, 0.25]])
        cu = np.array([[[0.1, 0.9], [0.8, 0.2]]])
        a = posterior_noise_from_uniforms(phi, np.array([1, 1]), mu, cu)
        b = posterior_noise_from_uniforms(phi, np.array([1, 1]), mu, cu)
        np.testing.assert_array_equal(a, b)
        assert np.all(np.argmax(phi[None, :, :] + a, axis=2) == 1)

    def test_single_class_posterior_score_is_closed_form(self):
        # k = 1: observed score is plain Gumbel, so u = 1/e maps to score 0
        phi = np.zeros((1, 1))
        mu = np.array([[1.0 / np.e]])
        cu = np.array([[[0.5]]])
        noise = posterior_noise_from_uniforms(phi, np.array([0]), mu, cu)
        assert noise[0, 0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_rejects_bad_uniform_shapes(self):
        phi = np.log(np.array([[0.5, 0.5]]))
        with pytest.raises(InvalidArgumentError):
            posterior_noise_from_uniforms(phi, np.array([0]), np.ones((1, 2)), np.ones((1, 1, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_property_argmax_constraint(self, k, seed):
        p = random_simplex(k, substream(seed, "prop-p"))
        phi = np.log(p)
        obs = int(substream(seed, "prop-o").integers(k))
        noise = draw_posterior(phi, obs, 64, substream(seed, "prop-d"))
        assert np.all(np.argmax(phi[None, :] + noise, axis=1) == obs)


def _two_expert_setup(p_src, p_tgt, groups):
    models = {"src": FixedDistModel(p_src), "tgt": FixedDistModel(p_tgt)}
    return models, Partition.from_groups(groups)


class TestCounterfactualDistribution:
    def test_binary_closed_form(self):
        # P(Y_tgt = 0 | Y_src = 0) = min(p0, q0) / p0 = 0.3 / 0.6
        models, part = _two_expert_setup([0.6, 0.4], [0.3, 0.7], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 0, "tgt")
        est = counterfactual_distribution(q, part, models, 40_000, substream(29, "bin"))
        assert not est.exact
        assert est.num_samples == 40_000
        assert est.dist.probs[0] == pytest.approx(0.5, abs=0.01)

    def test_binary_ratio_condition_gives_exact_point_mass(self):
        # q0/p0 > q1/p1 and label 0 observed: label 1 is impossible
        models, part = _two_expert_setup([0.6, 0.4], [0.7, 0.3], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 0, "tgt")
        est = counterfactual_distribution(q, part, models, 10_000, substream(31, "pcs"))
        np.testing.assert_array_equal(est.dist.probs, [1.0, 0.0])

    def test_identical_models_give_point_mass_on_observed(self):
        models, part = _two_expert_setup([0.2, 0.5, 0.3], [0.2, 0.5, 0.3], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 2, "tgt")
        est = counterfactual_distribution(q, part, models, 4000, substream(37, "ident"))
        np.testing.assert_array_equal(est.dist.probs, [0.0, 0.0, 1.0])

    def test_cross_group_returns_exact_marginal(self):
        models, part = _two_expert_setup([0.6, 0.4], [0.3, 0.7], [["src"], ["tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 0, "tgt")
        est = counterfactual_distribution(q, part, models, 999, substream(41, "cross"))
        assert est.exact
        assert est.num_samples == 0
        np.testing.assert_array_equal(est.dist.probs, models["tgt"].predict(np.zeros(1)).probs)

    def test_matches_conditional_frequency_from_joint_sampling(self):
        # counterfactual for an unintervened same-group expert = conditional
        rng_p = substream(43, "cond-p")
        p_src, p_tgt = random_simplex(4, rng_p), random_simplex(4, rng_p)
        models, part = _two_expert_setup(p_src, p_tgt, [["src", "tgt"]])
        obs = 1
        q = CounterfactualQuery(np.zeros(1), "src", obs, "tgt")
        est = counterfactual_distribution(q, part, models, 60_000, substream(43, "cf"))
        g = substream(43, "joint").gumbel(size=(400_000, 4))
        y_src = np.argmax(np.log(p_src)[None, :] + g, axis=1)
        y_tgt = np.argmax(np.log(p_tgt)[None, :] + g, axis=1)
        cond = np.bincount(y_tgt[y_src == obs], minlength=4) / np.sum(y_src == obs)
        assert 0.5 * np.abs(est.dist.probs - cond).sum() < 0.015

    def test_argmax_helper_agrees_with_distribution(self):
        models, part = _two_expert_setup([0.6, 0.4], [0.3, 0.7], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 1, "tgt")
        dist = counterfactual_distribution(q, part, models, 5000, substream(47, "am"))
        label = counterfactual_argmax(q, part, models, 5000, substream(47, "am"))
        assert label == dist.dist.argmax_label()

    def test_unknown_expert_raises(self):
        models, part = _two_expert_setup([0.5, 0.5], [0.5, 0.5], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "nope", 0, "tgt")
        with pytest.raises(MissingExpertError):
            counterfactual_distribution(q, part, models, 10, substream(0, "x"))

    def test_label_out_of_range_raises(self):
        models, part = _two_expert_setup([0.5, 0.5], [0.5, 0.5], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 2, "tgt")
        with pytest.raises(InvalidArgumentError):
            counterfactual_distribution(q, part, models, 10, substream(0, "x"))

    def test_nonpositive_sample_count_raises(self):
        models, part = _two_expert_setup([0.5, 0.5], [0.5, 0.5], [["src", "tgt"]])
        q = CounterfactualQuery(np.zeros(1), "src", 0, "tgt")
        with pytest.raises(InvalidArgumentError):
            counterfactual_distribution(q, part, models, 0, substream(0, "x"))


def _roster_models(n, k, d, seed):
    rng = substream(seed, "roster")
    return {f"h{i:02d}": LogitModel(rng.uniform(0, 1, size=(k, d))) for i in range(n)}


class TestSetInvariance:
    def test_subset_call_equals_restriction(self):
        k, d = 4, 3
        models = _roster_models(8, k, d, 53)
        experts = sorted(models)
        partition = Partition.from_groups([experts[:3], experts[3:5], experts[5:]])
        rng = substream(53, "cases")
        for case in range(50):
            x = rng.uniform(0, 1, size=d)
            size = int(rng.integers(1, len(experts) + 1))
            subset = sorted(rng.choice(experts, size=size, replace=False))
            seed_key = int(rng.integers(2**32))
            full = sample_joint(x, experts, partition, models, substream(seed_key, "joint"))
            sub = sample_joint(x, subset, partition, models, substream(seed_key, "joint"))
            assert sub == {h: full[h] for h in subset}

    def test_same_group_experts_with_same_model_agree(self):
        k, d = 3, 2
        model = LogitModel(substream(59, "w").uniform(0, 1, size=(k, d)))
        models = {"a": model, "b": model}
        part = Partition.from_groups([["a", "b"]])
        out = sample_joint(np.array([0.3, 0.8]), ["a", "b"], part, models, substream(59, "j"))
        assert out["a"] == out["b"]

    def test_batch_matches_repeated_single_draws(self):
        k, d = 3, 2
        models = _roster_models(5, k, d, 61)
        experts = sorted(models)
        part = Partition.from_groups([experts[:2], experts[2:]])
        x = np.array([0.25, 0.75])
        batch = sample_joint_batch(x, experts, part, models, 20, substream(61, "b"))
        rng = substream(61, "b")
        for t in range(20):
            single = sample_joint(x, experts, part, models, rng)
            for h in experts:
                assert batch[h][t] == single[h]
