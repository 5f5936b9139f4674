"""Rooted binary trees, leaf metrics, the classical Farris transform and
rooted-triple restriction.

Node numbering convention, shared by every tree class here: leaves are
nodes ``0..n-1`` and their node id *is* the taxon id; internal nodes are
``n..2n-2``.  ``parent[root] == -1``.  Per-node edge attributes (``tau``,
``mu``, ``delta``) describe the edge above the node.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class TreeError(ValueError):
    """Raised for structurally invalid trees or inconsistent attributes."""


class TaxonError(KeyError):
    """Unknown taxon id or label."""


class Taxon(NamedTuple):
    id: int
    label: str


def _readonly(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class RootedTree:
    """Topology shared by species trees, gene trees and bare topologies."""

    def __init__(self, parent: Sequence[int], labels: Sequence[str] | None = None):
        parent = _readonly(parent, np.int64)
        n_nodes = parent.shape[0]
        if n_nodes < 3 or n_nodes % 2 == 0:
            raise TreeError(f"a rooted binary tree needs 2n-1 nodes with n >= 2, got {n_nodes}")
        n = (n_nodes + 1) // 2
        roots = np.flatnonzero(parent == -1)
        if roots.size != 1:
            raise TreeError(f"expected exactly one root, found {roots.size}")
        root = int(roots[0])
        if root < n:
            raise TreeError("the root cannot be a leaf")
        children: list[list[int]] = [[] for _ in range(n_nodes)]
        for v, p in enumerate(parent):
            if p == -1:
                continue
            if not 0 <= p < n_nodes or p == v:
                raise TreeError(f"node {v} has invalid parent {p}")
            children[p].append(v)
        for v in range(n_nodes):
            if v < n and children[v]:
                raise TreeError(f"leaf {v} has children")
            if v >= n and len(children[v]) != 2:
                raise TreeError(
                    f"internal node {v} has {len(children[v])} children; only binary trees are supported"
                )
        if labels is None:
            labels = [str(i + 1) for i in range(n)]
        labels = tuple(str(s) for s in labels)
        if len(labels) != n:
            raise TreeError(f"{len(labels)} labels for {n} leaves")
        if len(set(labels)) != n:
            raise TreeError("leaf labels must be unique")

        self.parent = parent
        self.root = root
        self.n_leaves = n
        self.n_nodes = n_nodes
        self.labels = labels
        self.children = tuple(tuple(c) for c in children)
        self._postorder = self._compute_postorder()
        if len(self._postorder) != n_nodes:
            raise TreeError("parent array does not describe a connected tree")
        self._depth = np.zeros(n_nodes, dtype=np.int64)
        for v in reversed(self._postorder):
            if v != root:
                self._depth[v] = self._depth[parent[v]] + 1

    def _compute_postorder(self) -> tuple[int, ...]:
        order, stack, seen = [], [(self.root, False)], 0
        while stack:
            v, expanded = stack.pop()
            seen += 1
            if seen > 4 * self.n_nodes:
                break
            if expanded or not self.children[v]:
                order.append(v)
            else:
                stack.append((v, True))
                for c in reversed(self.children[v]):
                    stack.append((c, False))
        return tuple(order)

    # -- navigation -------------------------------------------------------

    @property
    def taxa(self) -> list[Taxon]:
        return [Taxon(i, lab) for i, lab in enumerate(self.labels)]

    def postorder(self) -> tuple[int, ...]:
        return self._postorder

    def preorder(self) -> tuple[int, ...]:
        return tuple(reversed(self._postorder))

    def is_leaf(self, v: int) -> bool:
        return v < self.n_leaves

    def taxon_id(self, taxon) -> int:
        """Resolve a Taxon, an int id or a label to a taxon id."""
        if isinstance(taxon, Taxon):
            taxon = taxon.id
        if isinstance(taxon, (int, np.integer)) and not isinstance(taxon, bool):
            if 0 <= taxon < self.n_leaves:
                return int(taxon)
            raise TaxonError(f"unknown taxon id {taxon}")
        try:
            return self.labels.index(str(taxon))
        except ValueError:
            raise TaxonError(f"unknown taxon label {taxon!r}") from None

    def lca(self, a: int, b: int) -> int:
        depth, parent = self._depth, self.parent
        while depth[a] > depth[b]:
            a = parent[a]
        while depth[b] > depth[a]:
            b = parent[b]
        while a != b:
            a, b = parent[a], parent[b]
        return int(a)

    def depth(self, v: int) -> int:
        return int(self._depth[v])

    def clusters(self) -> dict[int, frozenset[int]]:
        """Leaf set below every node."""
        out: dict[int, frozenset[int]] = {}
        for v in self._postorder:
            if self.is_leaf(v):
                out[v] = frozenset((v,))
            else:
                out[v] = frozenset().union(*(out[c] for c in self.children[v]))
        return out

    def topology_key(self) -> str:
        """Canonical Newick of the bare topology (children ordered by smallest leaf id)."""
        return _canonical(self, self.root)[1] + ";"

    def topology(self) -> "RootedTopology":
        return RootedTopology(self.parent, self.labels)

    def same_topology(self, other: "RootedTree") -> bool:
        return self.labels == other.labels and self.topology_key() == other.topology_key()


def _canonical(tree: RootedTree, v: int) -> tuple[int, str]:
    if tree.is_leaf(v):
        return v, tree.labels[v]
    parts = sorted(_canonical(tree, c) for c in tree.children[v])
    return parts[0][0], "(" + ",".join(p[1] for p in parts) + ")"


class RootedTopology(RootedTree):
    """A rooted binary topology without branch lengths."""

    def __eq__(self, other):
        return isinstance(other, RootedTree) and self.same_topology(other)

    def __hash__(self):
        return hash((self.labels, self.topology_key()))

    def __repr__(self):
        return f"RootedTopology({self.topology_key()!r})"


class SpeciesPhylogeny(RootedTree):
    """Species tree with coalescent-unit lengths ``tau`` and mutation rates ``mu``.

    Parameters
    ----------
    parent : sequence of int
        Parent of every node, ``-1`` for the root.
    tau, mu : sequence of float
        Per-node values for the edge above the node. Root entries are ignored.
    labels : sequence of str, optional
        Leaf labels; defaults to ``"1".."n"``.
    root_mu : float
        Mutation rate of the (unbounded) root population.
    """

    def __init__(self, parent, tau, mu, labels=None, root_mu: float = 1.0):
        super().__init__(parent, labels)
        tau = np.array(tau, dtype=np.float64)
        mu = np.array(mu, dtype=np.float64)
        if tau.shape != (self.n_nodes,) or mu.shape != (self.n_nodes,):
            raise TreeError("tau and mu need one entry per node")
        if not (math.isfinite(root_mu) and root_mu > 0):
            raise TreeError(f"root population rate must be positive, got {root_mu}")
        for v in range(self.n_nodes):
            if v == self.root:
                continue
            if not (math.isfinite(tau[v]) and tau[v] > 0):
                raise TreeError(f"edge above node {v}: tau must be positive and finite, got {tau[v]}")
            if not (math.isfinite(mu[v]) and mu[v] > 0):
                raise TreeError(f"edge above node {v}: mu must be positive and finite, got {mu[v]}")
        tau[self.root] = np.inf
        mu[self.root] = root_mu
        self.tau = _readonly(tau, np.float64)
        self.mu = _readonly(mu, np.float64)
        self.root_mu = float(root_mu)

    @property
    def edge_lengths(self) -> np.ndarray:
        """Mutation-weighted edge lengths tau_e * mu_e (0 above the root)."""
        w = np.where(np.arange(self.n_nodes) == self.root, 0.0, self.tau * self.mu)
        return w

    def root_distances(self) -> np.ndarray:
        """mu_{r v} for every node v."""
        return _root_distances(self, self.edge_lengths)

    def __eq__(self, other):
        from .newick import serialize_newick

        # node numbering is not part of a tree's identity
        return (
            isinstance(other, SpeciesPhylogeny)
            and self.labels == other.labels
            and serialize_newick(self) == serialize_newick(other)
        )

    __hash__ = None

    def __repr__(self):
        from .newick import serialize_newick

        return f"SpeciesPhylogeny({serialize_newick(self)!r})"


class GeneTree(RootedTree):
    """Gene tree with mutation-weighted branch lengths ``delta`` (root entry 0)."""

    def __init__(self, parent, delta, labels=None):
        super().__init__(parent, labels)
        delta = np.array(delta, dtype=np.float64)
        if delta.shape != (self.n_nodes,):
            raise TreeError("delta needs one entry per node")
        delta[self.root] = 0.0
        if np.any(~np.isfinite(delta)) or np.any(delta < 0):
            raise TreeError("gene tree branch lengths must be finite and nonnegative")
        self.delta = _readonly(delta, np.float64)

    def __eq__(self, other):
        from .newick import serialize_newick

        return (
            isinstance(other, GeneTree)
            and self.labels == other.labels
            and serialize_newick(self) == serialize_newick(other)
        )

    __hash__ = None

    def __repr__(self):
        from .newick import serialize_newick

        return f"GeneTree({serialize_newick(self)!r})"


class DistanceMatrix:
    """Symmetric, nonnegative leaf-pair distances with zero diagonal."""

    def __init__(self, values, labels: Sequence[str] | None = None, atol: float = 0.0):
        d = np.array(values, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"distance matrix must be square, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("distance matrix has non-finite entries")
        if np.any(d < 0):
            raise ValueError("distance matrix has negative entries")
        if np.any(np.abs(d - d.T) > atol):
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diag(d) != 0):
            raise ValueError("distance matrix has a nonzero diagonal")
        d.setflags(write=False)
        self.values = d
        self.n = d.shape[0]
        self.labels = tuple(labels) if labels is not None else tuple(str(i + 1) for i in range(self.n))
        if len(self.labels) != self.n:
            raise ValueError("label count does not match matrix size")

    def __getitem__(self, pair):
        a, b = pair
        return float(self.values[a, b])

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self):
        return f"DistanceMatrix(n={self.n}, labels={self.labels})"


@dataclass(frozen=True)
class TripletTopology:
    """Rooted topology of a leaf triple: ``cherry|outgroup`` or unresolved.

    ``taxa`` is always stored sorted so equal calls compare equal regardless
    of query order.
    """

    taxa: tuple[int, int, int]
    outgroup: int | None

    def __post_init__(self):
        taxa = tuple(sorted(int(t) for t in self.taxa))
        if len(set(taxa)) != 3:
            raise ValueError(f"triplet needs three distinct taxa, got {self.taxa}")
        object.__setattr__(self, "taxa", taxa)
        if self.outgroup is not None and self.outgroup not in taxa:
            raise ValueError(f"outgroup {self.outgroup} not in {taxa}")

    @classmethod
    def resolved(cls, x: int, y: int, z: int) -> "TripletTopology":
        """The rooted triple ``xy|z``."""
        return cls((x, y, z), int(z))

    @classmethod
    def unresolved(cls, x: int, y: int, z: int) -> "TripletTopology":
        return cls((x, y, z), None)

    @property
    def is_resolved(self) -> bool:
        return self.outgroup is not None

    @property
    def cherry(self) -> tuple[int, int] | None:
        if self.outgroup is None:
            return None
        a, b = (t for t in self.taxa if t != self.outgroup)
        return a, b

    def label(self, labels: Sequence[str] | None = None) -> str:
        name = (lambda t: labels[t]) if labels is not None else (lambda t: str(t + 1))
        if self.outgroup is None:
            return "unresolved(" + ",".join(name(t) for t in self.taxa) + ")"
        a, b = self.cherry
        return f"{name(a)}{name(b)}|{name(self.outgroup)}"

    def __str__(self):
        return self.label()


@dataclass(frozen=True)
class RegimeConfig:
    """Bounds on internal-edge lengths (f, g), leaf-edge lengths (f', g') and rates."""

    f: float
    g: float
    f_prime: float
    g_prime: float
    mu_L: float
    mu_U: float

    def __post_init__(self):
        for lo, hi, name in (
            (self.f, self.g, "f < g"),
            (self.f_prime, self.g_prime, "f' < g'"),
            (self.mu_L, self.mu_U, "mu_L < mu_U"),
        ):
            if not (0 < lo < hi):
                raise ValueError(f"regime requires 0 < {name}, got {lo}, {hi}")


# -- metrics ----------------------------------------------------------------


def _root_distances(tree: RootedTree, weights: np.ndarray) -> np.ndarray:
    rd = np.zeros(tree.n_nodes)
    for v in tree.preorder():
        if v != tree.root:
            rd[v] = rd[tree.parent[v]] + weights[v]
    return rd


def _path_metric(tree: RootedTree, weights: np.ndarray) -> np.ndarray:
    rd = _root_distances(tree, weights)
    n = tree.n_leaves
    d = np.zeros((n, n))
    for a, b in itertools.combinations(range(n), 2):
        w = tree.lca(a, b)
        d[a, b] = d[b, a] = (rd[a] - rd[w]) + (rd[b] - rd[w])
    return d


def species_metric(S: SpeciesPhylogeny, extended: bool = False):
    """Weighted species metric mu_ab = sum of tau_e * mu_e over the a-b path.

    With ``extended=True`` also returns the root-to-leaf distances mu_ra.
    """
    d = DistanceMatrix(_path_metric(S, S.edge_lengths), S.labels)
    if extended:
        return d, S.root_distances()[: S.n_leaves].copy()
    return d


def gene_metric(G: GeneTree) -> DistanceMatrix:
    """Gene metric delta_ab = sum of delta_e over the a-b path."""
    return DistanceMatrix(_path_metric(G, G.delta), G.labels)


def classical_farris(mu: DistanceMatrix, root_dists) -> DistanceMatrix:
    """Farris transform mu_xy + 2 max_w mu_ow - mu_ox - mu_oy.

    ``root_dists[x]`` is the distance from the reference point (root or
    outgroup) to leaf x; the farthest leaf plays the anchoring role.
    """
    if not isinstance(mu, DistanceMatrix):
        mu = DistanceMatrix(mu)
    r = np.asarray(root_dists, dtype=np.float64)
    if r.shape != (mu.n,):
        raise ValueError(f"need {mu.n} root distances, got shape {r.shape}")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError("root distances must be finite and nonnegative")
    top = r.max()
    # sum the pair first so the result is exactly symmetric
    out = mu.values + 2.0 * top - (r[:, None] + r[None, :])
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(out, mu.labels)


def is_ultrametric(d, tol: float = 1e-9) -> bool:
    """Three-point condition: in every triple the two largest distances agree within tol."""
    a = np.asarray(d.values if isinstance(d, DistanceMatrix) else d, dtype=np.float64)
    n = a.shape[0]
    if n < 3:
        return True
    idx = np.array(list(itertools.combinations(range(n), 3)))
    i, j, k = idx.T
    trip = np.sort(np.stack([a[i, j], a[i, k], a[j, k]], axis=1), axis=1)
    return bool(np.all(trip[:, 2] - trip[:, 1] <= tol))


def restrict_to_triplet(tree: RootedTree, x, y, z) -> TripletTopology:
    """Rooted topology induced by ``tree`` on three leaves."""
    ids = [tree.taxon_id(t) for t in (x, y, z)]
    if len(set(ids)) != 3:
        raise ValueError(f"triplet query needs distinct leaves, got {ids}")
    a, b, c = ids
    depths = {
        c: tree.depth(tree.lca(a, b)),
        b: tree.depth(tree.lca(a, c)),
        a: tree.depth(tree.lca(b, c)),
    }
    out = max(depths, key=depths.get)
    return TripletTopology(tuple(ids), out)


def triples_of(tree: RootedTree) -> dict[tuple[int, int, int], TripletTopology]:
    """All rooted triples displayed by ``tree`` keyed by sorted taxon triple."""
    return {
        t: restrict_to_triplet(tree, *t)
        for t in itertools.combinations(range(tree.n_leaves), 3)
    }


# -- constructors -----------------------------------------------------------


def triplet_species_tree(
    tau_internal: float,
    tau_leaves: Sequence[float] = (1.0, 1.0, None),
    mu_leaves: Sequence[float] = (1.0, 1.0, 1.0),
    mu_internal: float = 1.0,
    root_mu: float = 1.0,
    labels: Sequence[str] = ("1", "2", "3"),
) -> SpeciesPhylogeny:
    """Three-leaf species tree ((1,2),3).

    A ``None`` in ``tau_leaves`` for leaf 3 makes the tree ultrametric in
    coalescent units (tau_3 = tau_1 + tau_internal).
    """
    t1, t2, t3 = tau_leaves
    if t3 is None:
        t3 = t1 + tau_internal
    m1, m2, m3 = mu_leaves
    parent = [3, 3, 4, 4, -1]
    tau = [t1, t2, t3, tau_internal, np.inf]
    mu = [m1, m2, m3, mu_internal, root_mu]
    return SpeciesPhylogeny(parent, tau, mu, labels, root_mu=root_mu)


def random_topology_parent(n: int, rng: np.random.Generator) -> np.ndarray:
    """Parent array of a random rooted binary topology (random joining)."""
    if n < 2:
        raise ValueError("need at least two leaves")
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    active = list(range(n))
    nxt = n
    while len(active) > 1:
        i, j = sorted(rng.choice(len(active), size=2, replace=False))
        parent[active[i]] = nxt
        parent[active[j]] = nxt
        active[i] = nxt
        active.pop(j)
        nxt += 1
    return parent


def random_species_tree(
    n: int,
    rng: np.random.Generator,
    regime: RegimeConfig | None = None,
    labels: Sequence[str] | None = None,
) -> SpeciesPhylogeny:
    """Random species tree with edge lengths and rates drawn inside ``regime``."""
    regime = regime or RegimeConfig(0.1, 1.0, 0.2, 1.5, 0.3, 1.5)
    parent = random_topology_parent(n, rng)
    n_nodes = 2 * n - 1
    tau = np.where(
        np.arange(n_nodes) < n,
        rng.uniform(regime.f_prime, regime.g_prime, n_nodes),
        rng.uniform(regime.f, regime.g, n_nodes),
    )
    mu = rng.uniform(regime.mu_L, regime.mu_U, n_nodes)
    root = int(np.flatnonzero(parent == -1)[0])
    return SpeciesPhylogeny(parent, tau, mu, labels, root_mu=float(mu[root]))


def random_gene_tree(n: int, rng: np.random.Generator, labels=None) -> GeneTree:
    parent = random_topology_parent(n, rng)
    return GeneTree(parent, rng.exponential(1.0, 2 * n - 1), labels)


def all_rooted_topologies(n: int, labels: Sequence[str] | None = None) -> list[RootedTopology]:
    """Every rooted binary topology on n labelled leaves ((2n-3)!! of them)."""
    if n < 2:
        raise ValueError("need at least two leaves")

    # build as nested tuples by inserting leaf i on every edge (incl. above root)
    def insert(t, leaf):
        yield (t, leaf)
        if isinstance(t, tuple):
            left, right = t
            for l2 in insert(left, leaf):
                yield (l2, right)
            for r2 in insert(right, leaf):
                yield (left, r2)

    shapes: Iterable = [(0, 1)]
    for leaf in range(2, n):
        shapes = [s for t in shapes for s in insert(t, leaf)]
    return [_topology_from_nested(s, n, labels) for s in shapes]


def _topology_from_nested(nested, n: int, labels=None) -> RootedTopology:
    parent = [-1] * (2 * n - 1)
    counter = [n]

    def walk(t):
        if not isinstance(t, tuple):
            return t
        kids = [walk(c) for c in t]
        v = counter[0]
        counter[0] += 1
        for c in kids:
            parent[c] = v
        return v

    walk(nested)
    return RootedTopology(parent, labels)
