import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coalfarris.harness import run_msc_jc
from coalfarris.reconstruct import (
    InconsistentTriplets,
    PipelineConfig,
    TripletSet,
    build_from_triplets,
    infer_all_triplets,
    infer_triplet,
)
from coalfarris.reduction import GenePartition, ReductionConfig, run_reduction
from coalfarris.streams import Stream
from coalfarris.trees import (
    RegimeConfig,
    TripletTopology,
    all_rooted_topologies,
    random_species_tree,
    restrict_to_triplet,
    triples_of,
    triplet_species_tree,
)
from coalfarris.triplet_test import quantile_triplet_test

R = TripletTopology.resolved


def displays(tree, calls):
    return all(restrict_to_triplet(tree, *c.taxa) == c for c in calls)


# -- assembly --------------------------------------------------------------------------


def test_single_triple():
    res = build_from_triplets(TripletSet.from_calls(3, [R(0, 1, 2)]))
    assert res.topology.topology_key() == "((1,2),3);"


def test_four_leaf_example_against_all_topologies():
    calls = [R(0, 1, 2), R(0, 1, 3), R(2, 3, 0), R(2, 3, 1)]
    got = build_from_triplets(TripletSet.from_calls(4, calls)).topology
    matching = [t for t in all_rooted_topologies(4) if displays(t, calls)]
    assert len(matching) == 1
    assert got == matching[0]
    assert got.topology_key() == "((1,2),(3,4));"


def test_direct_contradiction_is_inconsistent():
    with pytest.raises(InconsistentTriplets) as exc:
        build_from_triplets([R(0, 1, 2), R(0, 2, 1)])
    assert set(exc.value.witness) == {R(0, 1, 2), R(0, 2, 1)}


def test_triplet_set_holds_one_call_per_triple():
    ts = TripletSet.from_calls(3, [R(0, 1, 2)])
    with pytest.raises(ValueError):
        ts.add(R(0, 2, 1))


def test_spread_contradiction_witness_is_minimal():
    # 12|3, 34|2 force {1,2} and {3,4} apart while 13|4 joins 1 and 3 below 4
    calls = [R(0, 1, 2), R(2, 3, 1), R(0, 2, 3), R(0, 1, 3)]
    with pytest.raises(InconsistentTriplets) as exc:
        build_from_triplets(TripletSet.from_calls(4, calls))
    w = exc.value.witness
    assert set(w) <= set(calls)
    with pytest.raises(InconsistentTriplets):
        build_from_triplets(w, n=4)
    for drop in w:
        build_from_triplets([c for c in w if c is not drop], n=4)


def test_repair_drops_lowest_margin_call():
    ts = TripletSet(4)
    for call, margin in ((R(0, 1, 2), 0.5), (R(2, 3, 1), 0.4), (R(0, 2, 3), 0.01), (R(0, 1, 3), 0.3)):
        ts.add(call, margin)
    res = build_from_triplets(ts, "repair")
    assert res.dropped == [R(0, 2, 3)]
    assert displays(res.topology, [c for c in ts if c != R(0, 2, 3)])


def test_unresolved_calls_are_ignored():
    ts = TripletSet.from_calls(4, [R(0, 1, 2), TripletTopology.unresolved(0, 1, 3), R(1, 2, 3)])
    assert displays(build_from_triplets(ts).topology, ts.resolved())


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_exhaustive_completeness(n):
    for tree in all_rooted_topologies(n):
        assert build_from_triplets(TripletSet.from_tree(tree)).topology == tree


@given(st.integers(3, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_completeness_and_soundness_random(n, seed):
    S = random_species_tree(n, np.random.default_rng(seed))
    ts = TripletSet.from_tree(S)
    out = build_from_triplets(ts).topology
    assert out.same_topology(S)
    assert displays(out, ts.resolved())


@given(st.integers(4, 7), st.integers(0, 2**32 - 1), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_soundness_on_partial_sets(n, seed, keep_every):
    # any subset of a tree's triples is consistent and must be displayed
    S = random_species_tree(n, np.random.default_rng(seed))
    calls = list(TripletSet.from_tree(S))[::keep_every]
    out = build_from_triplets(calls, n=n).topology
    assert displays(out, calls)


def test_build_is_deterministic():
    calls = [R(0, 1, 2), R(3, 4, 0)]
    a = build_from_triplets(calls, n=5).topology.topology_key()
    b = build_from_triplets(list(reversed(calls)), n=5).topology.topology_key()
    assert a == b


# -- per-triple inference ------------------------------------------------------------------


def test_three_taxa_give_one_call_matching_the_test():
    S = triplet_species_tree(0.3)
    data = run_msc_jc(S, 1000, 500, seed=1)
    stream = Stream.from_seed(2)
    ts, details = infer_all_triplets(data, PipelineConfig(), stream)
    assert len(ts) == 1
    # repeat the pipeline by hand with the same substreams
    sub = stream.derive("triple", 0, 1, 2)
    part = GenePartition.from_fractions(data.m, PipelineConfig().fractions, sub.derive("partition").numpy())
    red = run_reduction(data, part, sub.derive("reduction"))
    st_ = quantile_triplet_test(red.noisy, red.q1, red.q2, m=data.m)
    assert details[0].topology == st_.topology


def test_four_taxa_give_four_calls():
    S = random_species_tree(4, np.random.default_rng(3))
    data = run_msc_jc(S, 400, 200, seed=4)
    ts, details = infer_all_triplets(data, PipelineConfig(), Stream.from_seed(5))
    assert len(ts) == 4 == len(details)
    assert sorted(ts.calls) == list(itertools.combinations(range(4), 3))


def test_failures_become_unresolved():
    S = triplet_species_tree(0.05)
    data = run_msc_jc(S, 40, 20, seed=6)
    call = infer_triplet(data, (0, 1, 2), PipelineConfig(fractions={"r1": 0.1, "r2": 0.1, "q1": 0.1, "q2": 0.7}),
                         Stream.from_seed(7))
    assert not call.topology.is_resolved and call.error


# -- easy five-taxon regime ------------------------------------------------------------------

EASY = RegimeConfig(0.5, 0.6, 0.2, 0.4, 0.3, 0.6)


@pytest.fixture(scope="module")
def easy_five_taxon_runs():
    """All-calls-correct flags over 50 trials, with and without the upper windows."""
    configs = {
        "default": PipelineConfig(),
        "no_upper": PipelineConfig(reduction=ReductionConfig(upper_windows=False)),
    }
    flags = {name: [] for name in configs}
    for t in range(50):
        S = random_species_tree(5, np.random.default_rng(t), EASY)
        data = run_msc_jc(S, 5000, 5000, seed=t)
        truth = triples_of(S)
        for name, cfg in configs.items():
            ts, _ = infer_all_triplets(data, cfg, Stream.from_seed(t))
            flags[name].append(all(ts.calls[key] == truth[key] for key in truth))
    return flags


@pytest.mark.slow
def test_easy_five_taxon_all_calls_correct(easy_five_taxon_runs):
    assert np.mean(easy_five_taxon_runs["default"]) >= 0.90


@pytest.mark.slow
def test_easy_five_taxon_without_upper_windows(easy_five_taxon_runs):
    assert np.mean(easy_five_taxon_runs["no_upper"]) >= 0.90
