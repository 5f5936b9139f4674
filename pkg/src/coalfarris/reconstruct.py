"""Per-triple inference and assembly of rooted triples into a species topology."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .reduction import (
    DEFAULT_FRACTIONS,
    EmptySelection,
    EstimationFailure,
    GenePartition,
    ReductionConfig,
    run_reduction,
)
from .seqevo import SequenceDataset
from .streams import Stream
from .trees import RootedTopology, RootedTree, TripletTopology, _topology_from_nested, triples_of
from .triplet_test import baseline_minpd_test, quantile_triplet_test

METHODS = ("quantile", "baseline-mean", "baseline-min")


@dataclass
class PipelineConfig:
    """Constants of the per-triple pipeline.

    ``reduce=False`` skips the ultrametric reduction and runs the test on
    the raw data (only sound for clock-like trees).
    """

    c3: float = 1.0
    fractions: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    method: str = "quantile"
    reduce: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.c3 <= 0:
            raise ValueError("c3 must be positive")
        if isinstance(self.reduction, Mapping):
            self.reduction = ReductionConfig(**self.reduction)
        GenePartition.from_fractions(100, self.fractions)  # validates keys and sums


@dataclass
class TripletCall:
    topology: TripletTopology
    margin: float = 0.0
    error: str | None = None
    delta_hat: object = None
    selected: tuple = ()
    clamps: int = 0
    retries: int = 0
    fallback: bool = False
    state: object = None


def infer_triplet(data: SequenceDataset, taxa, config: PipelineConfig, stream: Stream) -> TripletCall:
    """Reduction plus triplet test for one leaf triple of ``data``.

    Pipeline failures (empty selections after retries, saturated
    estimates) give an unresolved call with ``error`` set.
    """
    taxa = tuple(data.taxon_index(t) for t in taxa)
    sub = data.restrict(taxa=taxa)
    if config.method != "quantile":
        topo = baseline_minpd_test(sub, mode=config.method.split("-")[1])
        return TripletCall(_lift(topo, taxa), math.inf)
    part = GenePartition.from_fractions(data.m, config.fractions, stream.derive("partition").numpy())
    if not config.reduce:
        st = quantile_triplet_test(sub, part.q1, part.q2, config.c3, m=data.m)
        return TripletCall(_lift(st.topology, taxa), st.margin, state=st)
    try:
        red = run_reduction(sub, part, stream.derive("reduction"), config.reduction)
    except (EmptySelection, EstimationFailure) as exc:
        return TripletCall(TripletTopology.unresolved(*taxa), 0.0, error=f"{type(exc).__name__}: {exc}")
    st = quantile_triplet_test(red.noisy, red.q1, red.q2, config.c3, m=data.m)
    return TripletCall(
        _lift(st.topology, taxa),
        st.margin,
        delta_hat=red.deltas,
        selected=tuple(int(s.genes.size) for s in red.deltas.selections),
        clamps=red.deltas.clamps,
        retries=red.deltas.retries,
        fallback=red.transform["fallback"],
        state=st,
    )


def _lift(topo: TripletTopology, taxa) -> TripletTopology:
    if not topo.is_resolved:
        return TripletTopology.unresolved(*taxa)
    a, b = topo.cherry
    return TripletTopology.resolved(taxa[a], taxa[b], taxa[topo.outgroup])


class TripletSet:
    """At most one rooted-triple call per leaf triple, with a confidence margin."""

    def __init__(self, n: int, labels: Sequence[str] | None = None):
        self.n = n
        self.labels = list(labels) if labels is not None else [str(i + 1) for i in range(n)]
        self.calls: dict[tuple[int, int, int], TripletTopology] = {}
        self.margins: dict[tuple[int, int, int], float] = {}

    def add(self, call: TripletTopology, margin: float = math.inf) -> None:
        if any(t >= self.n for t in call.taxa):
            raise ValueError(f"triple {call.taxa} outside {self.n} taxa")
        if call.taxa in self.calls:
            raise ValueError(f"triple {call.taxa} already has a call")
        self.calls[call.taxa] = call
        self.margins[call.taxa] = margin

    @classmethod
    def from_tree(cls, tree: RootedTree) -> "TripletSet":
        ts = cls(tree.n_leaves, tree.labels)
        for call in triples_of(tree).values():
            ts.add(call)
        return ts

    @classmethod
    def from_calls(cls, n: int, calls: Iterable[TripletTopology], labels=None) -> "TripletSet":
        ts = cls(n, labels)
        for c in calls:
            ts.add(c)
        return ts

    def resolved(self) -> list[TripletTopology]:
        return [c for c in self.calls.values() if c.is_resolved]

    def __len__(self):
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls.values())


def infer_all_triplets(data: SequenceDataset, config: PipelineConfig, stream: Stream):
    """Run :func:`infer_triplet` on every leaf triple with its own substream.

    Returns the :class:`TripletSet` and the per-triple :class:`TripletCall` list.
    """
    if data.n < 3:
        raise ValueError("need at least three taxa")
    ts = TripletSet(data.n, data.taxa)
    details = []
    for triple in itertools.combinations(range(data.n), 3):
        call = infer_triplet(data, triple, config, stream.derive("triple", *triple))
        ts.add(call.topology, call.margin)
        details.append(call)
    return ts, details


class InconsistentTriplets(ValueError):
    """No rooted tree displays all calls; ``witness`` is a minimal conflicting subset."""

    def __init__(self, witness: list[TripletTopology], labels=None):
        self.witness = witness
        shown = ", ".join(w.label(labels) for w in witness)
        super().__init__(f"inconsistent rooted triples: {shown}")


class _Conflict(Exception):
    pass


def _build(leaves: tuple[int, ...], triples: list[tuple[int, int, int]]):
    if len(leaves) == 1:
        return leaves[0]
    if len(leaves) == 2:
        return leaves
    inside = set(leaves)
    comp = {v: v for v in leaves}

    def find(v):
        while comp[v] != v:
            comp[v] = comp[comp[v]]
            v = comp[v]
        return v

    relevant = [t for t in triples if t[0] in inside and t[1] in inside and t[2] in inside]
    for a, b, _ in relevant:
        ra, rb = find(a), find(b)
        if ra != rb:
            comp[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for v in leaves:
        groups.setdefault(find(v), []).append(v)
    if len(groups) == 1:
        raise _Conflict()
    parts = [_build(tuple(g), relevant) for _, g in sorted(groups.items())]
    # resolve a multifurcation as a caterpillar in order of smallest leaf
    tree = parts[0]
    for p in parts[1:]:
        tree = (tree, p)
    return tree


def _as_tuple(call: TripletTopology) -> tuple[int, int, int]:
    a, b = call.cherry
    return a, b, call.outgroup


def _consistent(n, calls) -> bool:
    try:
        _build(tuple(range(n)), [_as_tuple(c) for c in calls])
        return True
    except _Conflict:
        return False


def _witness(n: int, calls: list[TripletTopology]) -> list[TripletTopology]:
    if len(calls) > 300:
        return calls
    kept = list(calls)
    for c in list(calls):
        trial = [d for d in kept if d is not c]
        if not _consistent(n, trial):
            kept = trial
    return kept


@dataclass
class BuildResult:
    topology: RootedTopology
    dropped: list[TripletTopology] = field(default_factory=list)


def build_from_triplets(T, mode: str = "strict", n: int | None = None, labels=None) -> BuildResult:
    """Rooted binary topology displaying every resolved call.

    ``T`` is a :class:`TripletSet` or any sequence of calls; a plain
    sequence may hold clashing calls on one triple and takes its leaf count
    from ``n`` or the largest taxon.  ``strict`` raises
    :class:`InconsistentTriplets` on conflict.  ``repair`` is a heuristic:
    it repeatedly drops the lowest-margin call of a minimal conflicting
    subset until the rest is consistent.
    """
    if mode not in ("strict", "repair"):
        raise ValueError(f"mode must be strict or repair, got {mode!r}")
    if isinstance(T, TripletSet):
        n, labels, margins, calls = T.n, T.labels, T.margins, T.resolved()
    else:
        calls = [c for c in T if c.is_resolved]
        n = n if n is not None else max((max(c.taxa) for c in calls), default=2) + 1
        labels = list(labels) if labels is not None else [str(i + 1) for i in range(n)]
        margins = {}
    calls = sorted(calls, key=lambda c: (c.taxa, c.outgroup))
    dropped: list[TripletTopology] = []
    while True:
        try:
            nested = _build(tuple(range(n)), [_as_tuple(c) for c in calls])
            return BuildResult(_topology_from_nested(nested, n, labels), dropped)
        except _Conflict:
            witness = _witness(n, calls)
            if mode == "strict":
                raise InconsistentTriplets(witness, labels) from None
            worst = min(witness, key=lambda c: (margins.get(c.taxa, math.inf), c.taxa, c.outgroup))
            calls.remove(worst)
            dropped.append(worst)
