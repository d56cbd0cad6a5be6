"""
Testes do sketch de termo máximo e dos seus estimadores.
"""
import math

import numpy as np
import pytest
from scipy import stats

from conftest import make_items
from errors import (DegenerateSketchError, DomainError, EmptySketchError,
                    IncompatibleSketchError, InsufficientDataError, NumericError,
                    SaturatedSketchError, UnsupportedDeletionError)
from inference import chernoff_bounds, optimal_bernoulli_p, psi_infinity
from order_sketch import (EstimatorId, MaxSketch, combine_kth, combine_kth_exact,
                          continuous_statistic, estimate_bernoulli, estimate_bernoulli_sketch,
                          estimate_continuous, estimate_geometric, estimate_geometric_recursive,
                          estimate_kth, geometric_initial_estimate, geometric_score, merge,
                          newton_raphson)
from seeded_hash import Distribution, HashConfig, StreamElement


def build(cfg, items, k=None):
    return MaxSketch(cfg, k).update_many(items)


def cfg_for(distribution, m=64, salt=7, **params):
    return HashConfig(m=m, global_salt=salt, distribution=distribution, **params)


ALL_KINDS = [
    (Distribution.UNIFORM, None),
    (Distribution.EXPONENTIAL, None),
    (Distribution.GEOMETRIC, None),
    (Distribution.BERNOULLI, None),
    (Distribution.UNIFORM, 3),
]


class TestMaxSketchState:

    @pytest.mark.parametrize('distribution, k', ALL_KINDS)
    def test_duplicates_do_not_change_state(self, items, distribution, k):
        """ Repetir itens não altera o sketch. """
        cfg = cfg_for(distribution)
        assert build(cfg, items, k) == build(cfg, items + items[:300], k)

    @pytest.mark.parametrize('distribution, k', ALL_KINDS)
    def test_order_does_not_matter(self, items, distribution, k):
        cfg = cfg_for(distribution)
        assert build(cfg, items, k) == build(cfg, items[::-1], k)

    @pytest.mark.parametrize('distribution, k', ALL_KINDS)
    def test_merge_equals_single_pass(self, items, distribution, k):
        """ merge(A, B) é idêntico ao sketch da união dos fluxos. """
        cfg = cfg_for(distribution)
        merged = merge(build(cfg, items[:600], k), build(cfg, items[400:], k))
        assert merged == build(cfg, items, k)

    @pytest.mark.parametrize('distribution, k', ALL_KINDS)
    def test_merge_identity_and_idempotence(self, items, distribution, k):
        cfg = cfg_for(distribution)
        sketch = build(cfg, items, k)
        assert merge(sketch, MaxSketch(cfg, k)) == sketch
        assert merge(sketch, sketch) == sketch

    def test_single_updates_match_batch(self, items):
        cfg = cfg_for(Distribution.EXPONENTIAL)
        sketch = MaxSketch(cfg)
        for item in items[:50]:
            sketch.update(StreamElement(item))
        assert sketch == build(cfg, items[:50])
        assert sketch.stream_length == 50

    def test_merge_rejects_other_salt(self, items):
        a = build(cfg_for(Distribution.UNIFORM, salt=1), items)
        b = build(cfg_for(Distribution.UNIFORM, salt=2), items)
        with pytest.raises(IncompatibleSketchError):
            merge(a, b)

    def test_rejects_deletions(self):
        sketch = MaxSketch(cfg_for(Distribution.UNIFORM))
        with pytest.raises(UnsupportedDeletionError):
            sketch.update(StreamElement(b'a', -1))
        with pytest.raises(UnsupportedDeletionError):
            sketch.update_many([b'a', b'b'], [1, 0])

    def test_invalid_constructions(self):
        with pytest.raises(DomainError):
            MaxSketch(cfg_for(Distribution.STABLE))
        with pytest.raises(DomainError):
            MaxSketch(cfg_for(Distribution.GEOMETRIC), k=2)

    def test_top_k_is_descending_without_repeats(self, items):
        sketch = build(cfg_for(Distribution.UNIFORM), items, k=4)
        assert np.all(np.diff(sketch.state, axis=1) < 0)
        assert np.all(sketch.state < 1.0)

    def test_state_bits(self, items):
        assert build(cfg_for(Distribution.BERNOULLI), items).state_bits() == 64
        assert build(cfg_for(Distribution.UNIFORM), items).state_bits() == 64 * 64


class TestContinuousEstimator:

    def test_known_uniform_state(self):
        """ m = 4 e log Y_j = -1/2 em todos os fluxos: c_hat = 4 / 2. """
        sketch = MaxSketch(cfg_for(Distribution.UNIFORM, m=4))
        sketch.state = np.full(4, -0.5)
        estimate = estimate_continuous(sketch)
        np.testing.assert_allclose(estimate.c_hat, 2.0, rtol=1e-12)
        assert estimate.estimator_id is EstimatorId.CONTINUOUS
        np.testing.assert_allclose(estimate.std_error, 1.0, rtol=1e-12)

    def test_known_exponential_state(self):
        sketch = MaxSketch(cfg_for(Distribution.EXPONENTIAL, m=4))
        sketch.state = np.full(4, -math.log(-math.expm1(-0.5)))
        np.testing.assert_allclose(estimate_continuous(sketch).c_hat, 2.0, rtol=1e-12)

    def test_exact_interval(self):
        sketch = MaxSketch(cfg_for(Distribution.UNIFORM, m=4))
        sketch.state = np.full(4, -0.5)
        estimate = estimate_continuous(sketch, level=0.9)
        expected = stats.gamma.ppf([0.05, 0.95], 4) / 2.0
        np.testing.assert_allclose(estimate.ci, expected, rtol=1e-12)
        assert estimate.ci[0] <= estimate.c_hat <= estimate.ci[1]

    def test_empty_sketch(self):
        with pytest.raises(EmptySketchError):
            estimate_continuous(MaxSketch(cfg_for(Distribution.UNIFORM)))

    def test_degenerate_state(self):
        sketch = MaxSketch(cfg_for(Distribution.UNIFORM, m=4))
        sketch.state = np.zeros(4)
        with pytest.raises(DegenerateSketchError):
            estimate_continuous(sketch)

    @pytest.mark.parametrize('level', [0.0, 1.0, 1.5])
    def test_invalid_level(self, items, level):
        with pytest.raises(DomainError):
            estimate_continuous(build(cfg_for(Distribution.UNIFORM), items), level)

    def test_monotone_in_new_items(self):
        """ Itens novos nunca diminuem a estimativa. """
        cfg = cfg_for(Distribution.UNIFORM, m=16)
        sketch = MaxSketch(cfg)
        previous = 0.0
        for item in make_items(300):
            sketch.update(StreamElement(item))
            if np.any(np.isneginf(sketch.state)):
                continue
            current = estimate_continuous(sketch).c_hat
            assert current >= previous
            previous = current

    def test_uniform_and_exponential_share_pivot(self, items):
        """ F(M_j) da exponencial reproduz o uniforme do mesmo item. """
        uniform = build(cfg_for(Distribution.UNIFORM), items)
        exponential = build(cfg_for(Distribution.EXPONENTIAL), items)
        np.testing.assert_allclose(continuous_statistic(uniform),
                                   continuous_statistic(exponential), rtol=1e-9)

    def test_pivot_is_gamma(self):
        """ c * S ~ Gamma(m, 1) exatamente; o IC de 95% cobre perto de 95%. """
        c, m, replicates = 1000, 64, 400
        items = make_items(c)
        pivots, covered = [], []
        for replicate in range(replicates):
            sketch = build(cfg_for(Distribution.UNIFORM, m=m, salt=replicate), items)
            pivots.append(c * continuous_statistic(sketch))
            covered.append(estimate_continuous(sketch).covers(c))
        assert stats.kstest(pivots, 'gamma', args=(m,)).pvalue > 1e-3
        assert 0.91 <= np.mean(covered) <= 0.99


    @pytest.mark.slow
    def test_relative_sd_is_one_over_sqrt_m(self):
        """ Desvio padrão empírico de c_hat / c perto de 1 / sqrt(m) (±20%). """
        c, m, replicates = 100_000, 1024, 200
        items = make_items(c)
        ratios = [estimate_continuous(build(cfg_for(Distribution.EXPONENTIAL, m=m, salt=replicate), items)).c_hat / c
                  for replicate in range(replicates)]
        assert abs(np.std(ratios, ddof=1) * math.sqrt(m) - 1.0) < 0.2

    @pytest.mark.slow
    @pytest.mark.parametrize('epsilon', [0.05, 0.1])
    def test_tails_within_chernoff_bounds(self, epsilon):
        c, m, replicates = 1000, 256, 1000
        items = make_items(c)
        c_hats = np.array([estimate_continuous(build(cfg_for(Distribution.UNIFORM, m=m, salt=replicate), items)).c_hat
                           for replicate in range(replicates)])
        bound = chernoff_bounds(epsilon, m)
        assert np.mean(c_hats >= (1.0 + epsilon) * c) <= bound.upper
        assert np.mean(c_hats <= (1.0 - epsilon) * c) <= bound.lower


class TestKthOrderStatistic:

    def test_k_one_matches_continuous(self, items):
        top = build(cfg_for(Distribution.UNIFORM), items, k=1)
        plain = build(cfg_for(Distribution.UNIFORM), items)
        np.testing.assert_allclose(estimate_kth(top).c_hat, estimate_continuous(plain).c_hat, rtol=1e-9)

    def test_large_c_approximation(self):
        """ Para c grande a raiz exata fica perto de k / (1 - (prod y)^(1/m)). """
        sketch = build(cfg_for(Distribution.UNIFORM, m=256), make_items(10_000), k=3)
        approximation = 3 / -math.expm1(np.mean(np.log(sketch.state[:, 2])))
        np.testing.assert_allclose(estimate_kth(sketch).c_hat, approximation, rtol=1e-3)

    def test_insufficient_items(self):
        sketch = build(cfg_for(Distribution.UNIFORM), [b'a', b'b'], k=3)
        with pytest.raises(InsufficientDataError):
            estimate_kth(sketch)

    def test_interval_uses_km_shape(self, items):
        estimate = estimate_kth(build(cfg_for(Distribution.UNIFORM), items, k=3))
        assert estimate.ci[0] <= estimate.c_hat <= estimate.ci[1]
        np.testing.assert_allclose(estimate.std_error, estimate.c_hat / math.sqrt(3 * 64))

    def test_combine_equal_estimates(self):
        np.testing.assert_allclose(combine_kth(500.0, 10, 500.0, 20, 3), 500.0, rtol=1e-12)
        np.testing.assert_allclose(combine_kth(500.0, 10, 123.0, 0, 3), 500.0, rtol=1e-12)

    def test_combine_exact_recovers_pooled_root(self):
        """ A combinação exata equivale a estimar com os fluxos juntos. """
        items = make_items(2000)
        a = build(cfg_for(Distribution.UNIFORM, m=64, salt=1), items, k=3)
        b = build(cfg_for(Distribution.UNIFORM, m=32, salt=2), items, k=3)
        pooled = MaxSketch(cfg_for(Distribution.UNIFORM, m=96), k=3)
        pooled.state = np.vstack([a.state, b.state])

        c_a, c_b = estimate_kth(a).c_hat, estimate_kth(b).c_hat
        expected = estimate_kth(pooled).c_hat
        np.testing.assert_allclose(combine_kth_exact(c_a, 64, c_b, 32, 3), expected, rtol=1e-6)
        np.testing.assert_allclose(combine_kth(c_a, 64, c_b, 32, 3), expected, rtol=1e-2)

    def test_combine_rejects_small_estimates(self):
        with pytest.raises(DomainError):
            combine_kth(3.0, 10, 500.0, 10, 3)
        with pytest.raises(DomainError):
            combine_kth_exact(500.0, 0, 500.0, 0, 3)


class TestBernoulliEstimator:

    def test_known_fraction(self):
        """ p = 1/2 e 3/4 dos bits ligados: c_hat = log(1/4) / log(1/2) = 2. """
        estimate = estimate_bernoulli(3, 4, 0.5)
        np.testing.assert_allclose(estimate.c_hat, 2.0, rtol=1e-12)
        assert estimate.ci[0] <= estimate.c_hat <= estimate.ci[1]
        assert estimate.estimator_id is EstimatorId.BERNOULLI

    def test_no_bits_set(self):
        estimate = estimate_bernoulli(0, 100, 0.01)
        assert estimate.c_hat == 0.0
        assert estimate.ci[0] == 0.0
        np.testing.assert_allclose(estimate.ci[1], math.log(0.05) / (100 * math.log(0.99)), rtol=1e-12)

    def test_saturated_sketch(self):
        with pytest.raises(SaturatedSketchError) as info:
            estimate_bernoulli(64, 64, 0.5)
        assert info.value.lower_bound > 0.0

    @pytest.mark.parametrize('ones, m, p', [(1, 4, 0.0), (1, 4, 1.0), (5, 4, 0.5), (-1, 4, 0.5)])
    def test_invalid_arguments(self, ones, m, p):
        with pytest.raises(DomainError):
            estimate_bernoulli(ones, m, p)

    def test_sketch_wrapper(self, items):
        cfg = cfg_for(Distribution.BERNOULLI, m=4096, p=optimal_bernoulli_p(1000))
        sketch = build(cfg, items)
        estimate = estimate_bernoulli_sketch(sketch)
        expected = estimate_bernoulli(int(sketch.state.sum()), 4096, cfg.p)
        assert estimate == expected
        with pytest.raises(DomainError):
            estimate_bernoulli_sketch(build(cfg_for(Distribution.UNIFORM), items))

    @pytest.mark.slow
    def test_unbiased_near_optimal_rate(self):
        c, m, replicates = 1000, 4096, 100
        items = make_items(c)
        p = optimal_bernoulli_p(c)
        estimates = [estimate_bernoulli_sketch(build(cfg_for(Distribution.BERNOULLI, m=m, salt=r, p=p), items))
                     for r in range(replicates)]
        c_hats = np.array([e.c_hat for e in estimates])
        assert abs(c_hats.mean() - c) < 3.0 * c_hats.std(ddof=1) / math.sqrt(replicates)
        assert np.mean([e.covers(c) for e in estimates]) >= 0.88


class TestGeometricEstimator:

    def test_initial_estimate_example(self):
        """ q = 1/2, m = 4, um único y_j <= 1: log(1/4) / log(1/2) = 2. """
        sketch = MaxSketch(cfg_for(Distribution.GEOMETRIC, m=4, q=0.5))
        sketch.state = np.array([1, 2, 2, 2], dtype=np.uint32)
        np.testing.assert_allclose(geometric_initial_estimate(sketch), 2.0, rtol=1e-12)

    def test_initial_estimate_falls_back(self):
        sketch = MaxSketch(cfg_for(Distribution.GEOMETRIC, m=4, q=0.5))
        sketch.state = np.full(4, 3, dtype=np.uint32)
        assert geometric_initial_estimate(sketch) == estimate_geometric_recursive(sketch)
        np.testing.assert_allclose(estimate_geometric_recursive(sketch), -1.0 / math.log(0.875))

    def test_all_slots_at_one(self):
        """ Com todos os y_j = 1 o escore não tem raiz e o estimador inicial é usado. """
        sketch = MaxSketch(cfg_for(Distribution.GEOMETRIC, m=4, q=0.5))
        sketch.state = np.ones(4, dtype=np.uint32)
        estimate = estimate_geometric(sketch)
        np.testing.assert_allclose(estimate.c_hat, 1.0 / math.log(2.0), rtol=1e-12)
        assert estimate.c_hat == geometric_initial_estimate(sketch)
        assert estimate.ci[0] > 0.0

    def test_root_of_score(self):
        sketch = build(cfg_for(Distribution.GEOMETRIC, m=128, q=0.5), make_items(3000))
        estimate = estimate_geometric(sketch)
        score, score_prime = geometric_score(sketch)
        assert abs(score(estimate.c_hat)) < 1e-6 * abs(score_prime(estimate.c_hat)) * estimate.c_hat
        np.testing.assert_allclose(estimate.std_error,
                                   estimate.c_hat / math.sqrt(128 * psi_infinity(0.5)))

    def test_close_to_truth(self):
        c, m = 2000, 256
        estimate = estimate_geometric(build(cfg_for(Distribution.GEOMETRIC, m=m, q=0.5), make_items(c)))
        assert abs(estimate.c_hat - c) < 5.0 * c / math.sqrt(m * psi_infinity(0.5))
        assert estimate.estimator_id is EstimatorId.GEOMETRIC

    def test_recursive_close_to_mle_when_q_near_one(self):
        sketch = build(cfg_for(Distribution.GEOMETRIC, m=256, q=0.99), make_items(10_000))
        ratio = estimate_geometric_recursive(sketch) / estimate_geometric(sketch).c_hat
        assert abs(ratio - 1.0) < 0.02

    def test_empty_sketch(self):
        with pytest.raises(EmptySketchError):
            estimate_geometric(MaxSketch(cfg_for(Distribution.GEOMETRIC)))

    def test_newton_converges(self):
        root, iterations = newton_raphson(lambda c: c * c - 4.0, lambda c: 2.0 * c, 3.0)
        np.testing.assert_allclose(root, 2.0, rtol=1e-9)
        assert iterations >= 1

    def test_newton_failure_keeps_initial_estimate(self):
        with pytest.raises(NumericError) as info:
            newton_raphson(lambda c: 1.0, lambda c: 0.0, 5.0)
        assert info.value.initial_estimate == 5.0

    @pytest.mark.slow
    def test_variance_ratio_against_continuous(self):
        """ Var(contínuo) / Var(geométrico) se aproxima de psi_inf(1/2). """
        c, m, replicates = 2000, 128, 300
        items = make_items(c)
        continuous, geometric = [], []
        for replicate in range(replicates):
            continuous.append(estimate_continuous(
                build(cfg_for(Distribution.UNIFORM, m=m, salt=replicate), items)).c_hat)
            geometric.append(estimate_geometric(
                build(cfg_for(Distribution.GEOMETRIC, m=m, salt=replicate, q=0.5), items)).c_hat)
        ratio = np.var(continuous, ddof=1) / np.var(geometric, ddof=1)
        assert 0.83 < ratio < 1.03
