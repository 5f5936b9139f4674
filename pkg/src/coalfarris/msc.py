"""Multispecies coalescent: gene-tree sampling and analytic oracles.

Two samplers share one random-number layout and therefore produce the same
gene tree for the same gene stream:

* :func:`sample_gene_tree` walks the species tree recursively and calls
  :func:`coalesce` on root-extended forests, step by step.
* :func:`sample_gene_trees` is a numba kernel that does the same for a
  batch of genes and returns flat arrays (:class:`GeneTreeBatch`).

Draw layout for a gene stream: population ``v`` (the species edge above
node ``v``, or the root population) owns counters ``v*2n + 2s`` (waiting
time of iteration ``s``) and ``v*2n + 2s + 1`` (pair choice).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numba as nb
import numpy as np

from .streams import Stream, as_uint64, nb_child_key, nb_uniform
from .trees import GeneTree, SpeciesPhylogeny, species_metric

# -- reference sampler ------------------------------------------------------


@dataclass
class Lineage:
    """Top of one root-extended tree: gene node id and its root-edge length."""

    node: int
    length: float


class _GeneBuilder:
    def __init__(self, n: int):
        self.n = n
        self.parent = [-1] * (2 * n - 1)
        self.delta = [0.0] * (2 * n - 1)
        self.next_id = n
        # (merge node, species population, time since population start)
        self.events: list[tuple[int, int, float]] = []


class Forest:
    """Root-extended forest used while descending the species tree."""

    def __init__(self, builder: _GeneBuilder, lineages: list[Lineage]):
        self.builder = builder
        self.lineages = lineages

    def __len__(self):
        return len(self.lineages)


def _pair_from_index(idx: int, k: int) -> tuple[int, int]:
    i = 0
    while idx >= k - 1 - i:
        idx -= k - 1 - i
        i += 1
    return i, i + 1 + idx


def coalesce(
    f1: Forest,
    f2: Forest,
    tau: float,
    mu: float,
    stream: Stream,
    population: int = 0,
) -> Forest:
    """One population of the coalescent on the union of two forests.

    Each iteration draws a pair of roots and a waiting time
    ``t ~ Exp(C(k, 2))``.  If ``t`` outlasts the remaining branch every
    root edge grows by ``mu * tau`` and the forest is returned; otherwise
    the pair merges under a fresh vertex whose root edge starts at zero
    length and every other root edge grows by ``mu * t``.  ``tau`` may be
    ``math.inf`` (the root population), in which case merging continues
    until one lineage is left.
    """
    if f1.builder is not f2.builder:
        raise ValueError("forests belong to different gene trees")
    b = f1.builder
    lineages = f1.lineages + f2.lineages
    k = len(lineages)
    base = population * 2 * b.n
    elapsed = 0.0
    s = 0
    while k > 1:
        u_time = stream.uniform(base + 2 * s)
        u_pair = stream.uniform(base + 2 * s + 1)
        s += 1
        n_pairs = k * (k - 1) // 2
        t = -math.log1p(-u_time) / n_pairs
        if t >= tau:
            for lin in lineages:
                lin.length += mu * tau
            return Forest(b, lineages)
        tau -= t
        elapsed += t
        i, j = _pair_from_index(min(int(u_pair * n_pairs), n_pairs - 1), k)
        for lin in lineages:
            lin.length += mu * t
        new = b.next_id
        b.next_id += 1
        for lin in (lineages[i], lineages[j]):
            b.parent[lin.node] = new
            b.delta[lin.node] = lin.length
        b.events.append((new, population, elapsed))
        lineages[i] = Lineage(new, 0.0)
        lineages[j] = lineages[k - 1]
        lineages.pop()
        k -= 1
    if math.isfinite(tau):
        lineages[0].length += mu * tau
    return Forest(b, lineages)


def sample_gene_tree(S: SpeciesPhylogeny, stream: Stream, return_events: bool = False):
    """Draw one gene tree from the multispecies coalescent on ``S``.

    ``stream`` is the gene's own substream.  The root edge of the final
    root-extended tree is contracted.  With ``return_events=True`` also
    returns a list of ``(gene node, species population, time)`` merges.
    """
    b = _GeneBuilder(S.n_leaves)

    def msc(v: int) -> Forest:
        if S.is_leaf(v):
            return Forest(b, [Lineage(v, float(S.mu[v] * S.tau[v]))])
        c1, c2 = S.children[v]
        tau = math.inf if v == S.root else float(S.tau[v])
        return coalesce(msc(c1), msc(c2), tau, float(S.mu[v]), stream, v)

    top = msc(S.root)
    assert len(top) == 1
    G = GeneTree(b.parent, b.delta, S.labels)
    return (G, b.events) if return_events else G


# -- batch kernel -------------------------------------------------------------


class _SpeciesArrays(NamedTuple):
    n: int
    postorder_internal: np.ndarray
    child: np.ndarray
    tau: np.ndarray
    mu: np.ndarray
    root: int


def _species_arrays(S: SpeciesPhylogeny) -> _SpeciesArrays:
    internal = np.array([v for v in S.postorder() if not S.is_leaf(v)], dtype=np.int64)
    child = np.full((S.n_nodes, 2), -1, dtype=np.int64)
    for v in internal:
        child[v] = S.children[v]
    tau = np.array(S.tau, dtype=np.float64)
    return _SpeciesArrays(S.n_leaves, internal, child, tau, np.array(S.mu, dtype=np.float64), S.root)


@nb.njit(nogil=True, cache=True)
def _msc_kernel(n, postorder_internal, child, tau, mu, root, base_key, gene_ids):
    m = gene_ids.shape[0]
    n_gene_nodes = 2 * n - 1
    n_sp = tau.shape[0]
    parent = np.full((m, n_gene_nodes), -1, dtype=np.int64)
    blen = np.zeros((m, n_gene_nodes), dtype=np.float64)
    ev_pop = np.full((m, n - 1), -1, dtype=np.int64)
    ev_time = np.zeros((m, n - 1), dtype=np.float64)
    lin = np.empty((n_sp, n), dtype=np.int64)
    cnt = np.zeros(n_sp, dtype=np.int64)
    pend = np.zeros(n_gene_nodes, dtype=np.float64)
    cur = np.empty(n, dtype=np.int64)
    for g in range(m):
        key = nb_child_key(base_key, gene_ids[g])
        for v in range(n):
            lin[v, 0] = v
            cnt[v] = 1
            pend[v] = mu[v] * tau[v]
        next_id = n
        for q in range(postorder_internal.shape[0]):
            v = postorder_internal[q]
            c1 = child[v, 0]
            c2 = child[v, 1]
            k = 0
            for i in range(cnt[c1]):
                cur[k] = lin[c1, i]
                k += 1
            for i in range(cnt[c2]):
                cur[k] = lin[c2, i]
                k += 1
            rem = tau[v]
            mv = mu[v]
            finite = v != root
            base = v * 2 * n
            elapsed = 0.0
            s = 0
            stopped = False
            while k > 1:
                u_time = nb_uniform(key, base + 2 * s)
                u_pair = nb_uniform(key, base + 2 * s + 1)
                s += 1
                n_pairs = k * (k - 1) // 2
                t = -math.log1p(-u_time) / n_pairs
                if finite and t >= rem:
                    for i in range(k):
                        pend[cur[i]] += mv * rem
                    stopped = True
                    break
                if finite:
                    rem -= t
                elapsed += t
                idx = min(int(u_pair * n_pairs), n_pairs - 1)
                a = 0
                while idx >= k - 1 - a:
                    idx -= k - 1 - a
                    a += 1
                b = a + 1 + idx
                for i in range(k):
                    pend[cur[i]] += mv * t
                new = next_id
                next_id += 1
                parent[g, cur[a]] = new
                parent[g, cur[b]] = new
                blen[g, cur[a]] = pend[cur[a]]
                blen[g, cur[b]] = pend[cur[b]]
                pend[new] = 0.0
                ev_pop[g, new - n] = v
                ev_time[g, new - n] = elapsed
                cur[a] = new
                cur[b] = cur[k - 1]
                k -= 1
            if not stopped and finite:
                pend[cur[0]] += mv * rem
            for i in range(k):
                lin[v, i] = cur[i]
            cnt[v] = k
    return parent, blen, ev_pop, ev_time


@nb.njit(nogil=True, cache=True)
def _batch_metrics(parent, blen, n):
    m = parent.shape[0]
    n_nodes = parent.shape[1]
    out = np.zeros((m, n, n), dtype=np.float64)
    lca = np.zeros((m, n, n), dtype=np.int64)
    rd = np.zeros(n_nodes, dtype=np.float64)
    mark = np.zeros(n_nodes, dtype=np.int64)
    for g in range(m):
        # parents always carry larger ids; the root is node 2n-2
        rd[n_nodes - 1] = 0.0
        for v in range(n_nodes - 2, -1, -1):
            rd[v] = rd[parent[g, v]] + blen[g, v]
        for a in range(n):
            for v in range(n_nodes):
                mark[v] = 0
            v = a
            while v != -1:
                mark[v] = 1
                v = parent[g, v]
            for b in range(a + 1, n):
                w = b
                while mark[w] == 0:
                    w = parent[g, w]
                d = (rd[a] - rd[w]) + (rd[b] - rd[w])
                out[g, a, b] = d
                out[g, b, a] = d
                lca[g, a, b] = w
                lca[g, b, a] = w
            lca[g, a, a] = a
    return out, lca


class CoalescentExcess(NamedTuple):
    """Per-gene excess of the gene metric over the species metric.

    ``z[g, a, b] = (delta_ab - mu_ab) / 2``; ``gamma[g, a, b]`` is twice
    the mutation-weighted height of the a-b coalescence above the species
    root, 0 if it happened below the root population.
    """

    gamma: np.ndarray
    z: np.ndarray


class GeneTreeBatch:
    """Gene trees for a set of gene ids, stored as flat arrays.

    Attributes
    ----------
    parent, blen : ndarray, shape (m, 2n-1)
        Gene-tree parent pointers and branch lengths (delta).
    event_pop, event_time : ndarray, shape (m, n-1)
        Species population and within-population time of the merge that
        created gene node ``n + e``.
    """

    def __init__(self, S: SpeciesPhylogeny, gene_ids, parent, blen, event_pop, event_time):
        self.species = S
        self.gene_ids = np.asarray(gene_ids, dtype=np.int64)
        self.parent = parent
        self.blen = blen
        self.event_pop = event_pop
        self.event_time = event_time
        self._metrics = None

    def __len__(self):
        return self.gene_ids.shape[0]

    def tree(self, i: int) -> GeneTree:
        return GeneTree(self.parent[i], self.blen[i], self.species.labels)

    def _compute(self):
        if self._metrics is None:
            self._metrics = _batch_metrics(self.parent, self.blen, self.species.n_leaves)
        return self._metrics

    def metrics(self) -> np.ndarray:
        """Gene metrics, shape (m, n, n)."""
        return self._compute()[0]

    def lca_nodes(self) -> np.ndarray:
        """Gene-tree node of each leaf-pair coalescence, shape (m, n, n)."""
        return self._compute()[1]

    def cherry_outgroup(self, x: int, y: int, z: int) -> np.ndarray:
        """Outgroup taxon of the rooted topology each gene shows on (x, y, z)."""
        lca = self.lca_nodes()
        # the cherry's coalescence is the only one of the three with the smallest node id
        cand = np.stack([lca[:, x, y], lca[:, x, z], lca[:, y, z]], axis=1)
        return np.array([z, y, x])[np.argmin(cand, axis=1)]

    def pair_coalescence_population(self) -> np.ndarray:
        """Species population in which each leaf pair coalesced, shape (m, n, n)."""
        n = self.species.n_leaves
        lca = self.lca_nodes()
        pops = np.take_along_axis(self.event_pop, np.clip(lca - n, 0, None).reshape(len(self), -1), axis=1)
        pops = pops.reshape(lca.shape)
        idx = np.arange(n)
        pops[:, idx, idx] = -1
        return pops

    def excess(self) -> CoalescentExcess:
        S = self.species
        n = S.n_leaves
        mu_ab = species_metric(S).values
        z = (self.metrics() - mu_ab[None]) / 2.0
        lca = self.lca_nodes()
        flat = np.clip(lca - n, 0, None).reshape(len(self), -1)
        pops = np.take_along_axis(self.event_pop, flat, axis=1).reshape(lca.shape)
        times = np.take_along_axis(self.event_time, flat, axis=1).reshape(lca.shape)
        gamma = np.where(pops == S.root, 2.0 * S.root_mu * times, 0.0)
        idx = np.arange(n)
        gamma[:, idx, idx] = 0.0
        z[:, idx, idx] = 0.0
        return CoalescentExcess(gamma, z)

    def coalescence_times(self, i: int) -> dict[int, list[float]]:
        """Within-population merge times of gene ``i`` keyed by species node."""
        out: dict[int, list[float]] = {}
        for pop, t in zip(self.event_pop[i], self.event_time[i]):
            out.setdefault(int(pop), []).append(float(t))
        return {k: sorted(v) for k, v in out.items()}


def sample_gene_trees(S: SpeciesPhylogeny, stream: Stream, genes) -> GeneTreeBatch:
    """Batch MSC sampler; gene ``g`` uses ``stream.child(g)``.

    ``genes`` is an int (genes ``0..m-1``) or an array of gene ids.
    """
    gene_ids = np.arange(genes, dtype=np.int64) if np.isscalar(genes) else np.asarray(genes, dtype=np.int64)
    arr = _species_arrays(S)
    parent, blen, ev_pop, ev_time = _msc_kernel(
        arr.n, arr.postorder_internal, arr.child, arr.tau, arr.mu, arr.root,
        as_uint64(stream.key), gene_ids,
    )
    return GeneTreeBatch(S, gene_ids, parent, blen, ev_pop, ev_time)


# -- likelihood -----------------------------------------------------------------


def population_log_density(n_in: int, times: Sequence[float], tau: float = math.inf) -> float:
    """Log density of merge times in one population entered by ``n_in`` lineages.

    Sums ``-C(j, 2) * (t_s - t_{s-1})`` over the inter-event intervals,
    including the final survival interval up to ``tau``.
    """
    times = list(times)
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("coalescence times must be sorted")
    if times and (times[0] < 0 or times[-1] > tau):
        raise ValueError(f"coalescence times must lie in [0, {tau}]")
    n_out = n_in - len(times)
    if n_out < 1:
        raise ValueError(f"{len(times)} merges but only {n_in} lineages entered")
    if math.isinf(tau) and n_out != 1:
        raise ValueError("the root population must end with a single lineage")
    total, prev, j = 0.0, 0.0, n_in
    for t in times:
        total -= j * (j - 1) / 2 * (t - prev)
        prev, j = t, j - 1
    if j > 1:
        total -= j * (j - 1) / 2 * (tau - prev)
    return total


def gene_tree_log_density(S: SpeciesPhylogeny, coal_times: Mapping[int, Sequence[float]]) -> float:
    """Log of the gene-tree density given within-population merge times.

    ``coal_times`` maps a species node (its edge above, or the root
    population) to the sorted merge times measured from the start of that
    population.  Lineage counts entering each population are derived
    from the merges below it.
    """
    unknown = set(coal_times) - set(range(S.n_nodes))
    if unknown:
        raise ValueError(f"unknown populations {sorted(unknown)}")
    out_count: dict[int, int] = {}
    total = 0.0
    for v in S.postorder():
        times = list(coal_times.get(v, ()))
        if S.is_leaf(v):
            if times:
                raise ValueError(f"leaf population {v} cannot contain merges")
            out_count[v] = 1
            continue
        n_in = sum(out_count[c] for c in S.children[v])
        tau = math.inf if v == S.root else float(S.tau[v])
        total += population_log_density(n_in, times, tau)
        out_count[v] = n_in - len(times)
    return total


# -- pairwise excess density and quantiles ---------------------------------------


class MixtureDensity:
    """Mixture of truncated shifted exponentials on ordered, disjoint supports.

    Piece ``i`` lives on ``[h[i], h[i+1])`` with rate ``rates[i]``; the last
    upper bound may be ``inf``.
    """

    def __init__(self, weights, bounds, rates):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.rates = np.asarray(rates, dtype=np.float64)
        r = self.weights.shape[0]
        if self.bounds.shape != (r + 1,) or self.rates.shape != (r,):
            raise ValueError("need r weights, r rates and r+1 bounds")
        if np.any(self.weights <= 0) or np.any(self.weights > 1):
            raise ValueError("weights must lie in (0, 1]")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {self.weights.sum()!r}, not 1")
        if np.any(np.diff(self.bounds) <= 0):
            raise ValueError("piece supports must be ordered and nonempty")
        if np.any(self.rates <= 0):
            raise ValueError("rates must be positive")
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.weights)])

    @property
    def n_pieces(self) -> int:
        return self.weights.shape[0]

    def _piece_mass(self, i):
        w = self.bounds[i + 1] - self.bounds[i]
        return 1.0 if math.isinf(w) else -math.expm1(-self.rates[i] * w)

    def pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for i in range(self.n_pieces):
            lo, hi, lam = self.bounds[i], self.bounds[i + 1], self.rates[i]
            inside = (x >= lo) & (x < hi)
            out = np.where(inside, self.weights[i] * lam * np.exp(-lam * (x - lo)) / self._piece_mass(i), out)
        return out

    def cdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for i in range(self.n_pieces):
            lo, hi, lam = self.bounds[i], self.bounds[i + 1], self.rates[i]
            within = -np.expm1(-lam * (np.clip(x, lo, hi) - lo)) / self._piece_mass(i)
            out = out + self.weights[i] * np.where(x <= lo, 0.0, np.where(x >= hi, 1.0, within))
        return np.minimum(out, 1.0)

    def piece_quantile(self, i: int, beta: float) -> float:
        lo, lam = self.bounds[i], self.rates[i]
        return float(lo - math.log1p(-beta * self._piece_mass(i)) / lam)

    def quantile(self, alpha: float) -> float:
        return mixture_quantile(self, alpha)

    def mean(self) -> float:
        total = 0.0
        for i in range(self.n_pieces):
            lo, hi, lam = self.bounds[i], self.bounds[i + 1], self.rates[i]
            if math.isinf(hi):
                piece_mean = lo + 1.0 / lam
            else:
                w = hi - lo
                piece_mean = lo + 1.0 / lam - w * math.exp(-lam * w) / self._piece_mass(i)
            total += self.weights[i] * piece_mean
        return total

    def __repr__(self):
        return f"MixtureDensity(weights={self.weights.tolist()}, bounds={self.bounds.tolist()}, rates={self.rates.tolist()})"


def pairwise_excess_density(S: SpeciesPhylogeny, a, b) -> MixtureDensity:
    """Density of Z_ab = (delta_ab - mu_ab) / 2 under the MSC.

    The a and b lineages meet at rate one in every population from their
    species LCA upward, whatever other lineages are present, so the
    coalescence time above the LCA is Exp(1) and Z_ab is that time mapped
    through the piecewise-linear mutation clock of the populations on the
    LCA-to-root path.  Zero-weight tails never occur because the root
    population is unbounded.
    """
    a, b = S.taxon_id(a), S.taxon_id(b)
    if a == b:
        raise ValueError("pairwise density needs two distinct taxa")
    v = S.lca(a, b)
    taus, mus = [], []
    while v != S.root:
        taus.append(float(S.tau[v]))
        mus.append(float(S.mu[v]))
        v = int(S.parent[v])
    taus.append(math.inf)
    mus.append(S.root_mu)
    cum_tau = np.concatenate([[0.0], np.cumsum(taus)])
    survive = np.exp(-cum_tau)
    weights = survive[:-1] - survive[1:]
    bounds = [0.0]
    for t, m in zip(taus, mus):
        bounds.append(bounds[-1] + m * t)
    rates = [1.0 / m for m in mus]
    return MixtureDensity(weights, bounds, rates)


def mixture_quantile(M: MixtureDensity, alpha: float) -> float:
    """inf{x : alpha <= F(x)}, piecewise over half-open weight intervals."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    cum = M.cumulative
    for i in range(M.n_pieces):
        if alpha < cum[i + 1] or i == M.n_pieces - 1:
            beta = (alpha - cum[i]) / M.weights[i]
            return M.piece_quantile(i, min(max(beta, 0.0), 1.0 - 1e-300))
    raise AssertionError("unreachable")


class QuantileGap(NamedTuple):
    gap: float
    ratio: float


def quantile_gap_bounds(M: MixtureDensity, beta: float, xi: float) -> QuantileGap:
    """Quantile increment Q(beta + xi) - Q(beta) and its ratio to xi."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if not 0.0 < xi < 1.0 - beta:
        raise ValueError(f"xi must lie in (0, 1 - beta), got {xi}")
    gap = mixture_quantile(M, beta + xi) - mixture_quantile(M, beta)
    return QuantileGap(gap, gap / xi)


def lipschitz_constants(M: MixtureDensity, betas, xis) -> tuple[float, float]:
    """Smallest and largest quantile-gap ratio over a (beta, xi) grid."""
    ratios = [
        quantile_gap_bounds(M, b, x).ratio
        for b in betas
        for x in xis
        if b + x < 1.0
    ]
    return min(ratios), max(ratios)
