import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coalfarris.harness import run_msc_jc
from coalfarris.reconstruct import PipelineConfig, infer_triplet
from coalfarris.reduction import empirical_quantile
from coalfarris.seqevo import SequenceDataset
from coalfarris.streams import Stream
from coalfarris.trees import TripletTopology, restrict_to_triplet, triplet_species_tree
from coalfarris.triplet_test import alpha_of, baseline_minpd_test, quantile_triplet_test


def random_dataset(m, k, seed, rates=(0.2, 0.5, 0.5)):
    """Three taxa; taxon 1 and 2 copy taxon 0 with per-site flip rates."""
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 4, (m, k))
    cols = [base]
    for r in rates[1:]:
        flip = rng.random((m, k)) < r
        cols.append(np.where(flip, (base + rng.integers(1, 4, (m, k))) % 4, base))
    return SequenceDataset(np.stack(cols, axis=2), ["1", "2", "3"])


# -- alpha -----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "m, k, expected, tol",
    [(3, 10**6, 0.3662, 5e-5), (10**6, 100, 0.21460, 5e-6)],
)
def test_alpha_examples(m, k, expected, tol):
    assert alpha_of(m, k) == pytest.approx(expected, abs=tol)
    assert alpha_of(m, k) == pytest.approx(max(math.log(m) / m, math.sqrt(math.log(k) / k)), rel=1e-15)


@given(st.integers(3, 10**7), st.integers(3, 10**7))
def test_alpha_nonincreasing(m, k):
    a = alpha_of(m, k)
    assert alpha_of(m + 1, k) <= a
    assert alpha_of(m, k + 1) <= a


@pytest.mark.parametrize("m, k", [(1, 10), (10, 1)])
def test_alpha_rejects_tiny_inputs(m, k):
    with pytest.raises(ValueError):
        alpha_of(m, k)


# -- quantile test -----------------------------------------------------------------------


def test_dominant_similarity_wins():
    rng = np.random.default_rng(0)
    data = rng.integers(0, 4, (40, 100, 3)).astype(np.uint8)
    data[:, :, 1] = data[:, :, 0]
    st_ = quantile_triplet_test(SequenceDataset(data, ["1", "2", "3"]), np.arange(10), np.arange(10, 40))
    assert st_.topology == TripletTopology.resolved(0, 1, 2)
    assert st_.similarities[(0, 1)] == 1.0


def test_three_way_tie_is_unresolved():
    data = np.zeros((6, 10, 3), np.uint8)
    data[:, :, 1] = 1
    data[:, :, 2] = 2  # every pair differs at every site
    st_ = quantile_triplet_test(SequenceDataset(data, ["1", "2", "3"]), [0, 1], [2, 3, 4, 5])
    assert not st_.topology.is_resolved
    assert len(set(st_.similarities.values())) == 1


def test_state_fields_follow_definitions():
    data = random_dataset(300, 80, seed=1)
    q1, q2 = np.arange(100), np.arange(100, 300)
    st_ = quantile_triplet_test(data, q1, q2, c3=2.0, m=1000)
    beta = min(1.0, 2.0 * alpha_of(1000, 80))
    counts = {p: (data.data[:, :, p[0]] != data.data[:, :, p[1]]).sum(axis=1) for p in ((0, 1), (0, 2), (1, 2))}
    for p, c in counts.items():
        assert st_.q_hat_quantiles[p] == empirical_quantile(c[q1], beta)
        assert st_.similarities[p] == np.mean(c[q2] <= st_.q_star)
    assert st_.q_star == max(st_.q_hat_quantiles.values())


def test_requires_both_blocks():
    with pytest.raises(ValueError):
        quantile_triplet_test(random_dataset(10, 10, 2), [], np.arange(10))


@pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
def test_label_permutation_equivariance(perm):
    data = random_dataset(200, 60, seed=3, rates=(0, 0.3, 0.6))
    q1, q2 = np.arange(50), np.arange(50, 200)
    base = quantile_triplet_test(data, q1, q2).topology
    moved = SequenceDataset(data.data[:, :, list(perm)], [data.taxa[i] for i in perm])
    got = quantile_triplet_test(moved, q1, q2).topology
    # column j of the moved data is original taxon perm[j]
    assert got.is_resolved == base.is_resolved
    if base.is_resolved:
        assert perm[got.outgroup] == base.outgroup


def test_split_independence():
    data = random_dataset(200, 60, seed=4)
    q1, q2 = np.arange(60), np.arange(60, 200)
    base = quantile_triplet_test(data, q1, q2)
    # rewriting M_Q2 leaves the thresholds alone
    other = data.data.copy()
    other[q2] = np.random.default_rng(9).integers(0, 4, other[q2].shape)
    changed = quantile_triplet_test(SequenceDataset(other, data.taxa), q1, q2)
    assert changed.q_hat_quantiles == base.q_hat_quantiles
    # rewriting M_Q1 with the same q_star leaves the similarities alone
    other = data.data.copy()
    other[q1] = other[q1][::-1]
    changed = quantile_triplet_test(SequenceDataset(other, data.taxa), q1, q2)
    assert changed.q_star == base.q_star and changed.similarities == base.similarities


def test_normalized_counts_give_the_same_call():
    data = random_dataset(300, 70, seed=5)
    q1, q2 = np.arange(100), np.arange(100, 300)
    st_ = quantile_triplet_test(data, q1, q2)
    beta = min(1.0, alpha_of(data.m, data.k))
    p = {a: (data.data[:, :, a[0]] != data.data[:, :, a[1]]).mean(axis=1) for a in ((0, 1), (0, 2), (1, 2))}
    q_star = max(empirical_quantile(v[q1], beta) for v in p.values())
    s = {a: np.mean(v[q2] <= q_star) for a, v in p.items()}
    assert s == st_.similarities


def test_deterministic_for_fixed_seed():
    S = triplet_species_tree(0.3)
    calls = [
        infer_triplet(run_msc_jc(S, 400, 200, seed=6), (0, 1, 2), PipelineConfig(), Stream.from_seed(7))
        for _ in range(2)
    ]
    assert calls[0].topology == calls[1].topology and calls[0].margin == calls[1].margin


# -- baseline ------------------------------------------------------------------------


def test_baseline_single_gene_mean_is_closest_pair():
    seqs = np.array([[0, 1, 2, 3, 0, 1], [0, 1, 2, 3, 0, 2], [3, 2, 1, 0, 0, 1]]).T
    data = SequenceDataset(seqs[None], ["a", "b", "c"])
    assert baseline_minpd_test(data, "mean") == TripletTopology.resolved(0, 1, 2)


def test_baseline_rejects_unknown_mode():
    with pytest.raises(ValueError):
        baseline_minpd_test(random_dataset(2, 4, 0), "median")


def test_baseline_agrees_with_quantile_test_on_easy_clock_data():
    S = triplet_species_tree(0.5, mu_leaves=(1, 1, 1))
    truth = restrict_to_triplet(S, 0, 1, 2)
    for seed in range(5):
        data = run_msc_jc(S, 2000, 5000, seed=seed)
        q = infer_triplet(data, (0, 1, 2), PipelineConfig(), Stream.from_seed(seed)).topology
        assert q == baseline_minpd_test(data, "mean") == baseline_minpd_test(data, "min") == truth


def test_baseline_min_degrades_at_short_k():
    S = triplet_species_tree(0.05, mu_leaves=(1, 1, 1))
    truth = restrict_to_triplet(S, 0, 1, 2)
    trials = 60
    wins = {"quantile": 0, "baseline-min": 0}
    for t in range(trials):
        data = run_msc_jc(S, 4000, 50, seed=t)
        for method in wins:
            call = infer_triplet(data, (0, 1, 2), PipelineConfig(method=method), Stream.from_seed(t))
            wins[method] += call.topology == truth
    q, b = wins["quantile"] / trials, wins["baseline-min"] / trials
    se = math.sqrt((q * (1 - q) + b * (1 - b)) / trials)
    assert q - b > 2 * se
