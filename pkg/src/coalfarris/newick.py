"""Newick reading and writing for species trees, gene trees and topologies.

Species trees carry tau as the Newick branch length and the mutation rate
in a bracketed comment, ``1:0.5[&mu=1.2]``.  The root population rate may
be given as ``(...)[&mu=0.3];``; it defaults to 1.  Gene trees are plain
Newick with delta as branch length.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trees import GeneTree, RootedTopology, RootedTree, SpeciesPhylogeny, TreeError

_DELIMS = set("(),:;[]")


class NewickError(ValueError):
    """Parse error; ``offset`` is the 0-based character position."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)


@dataclass
class _Node:
    offset: int
    label: str | None = None
    length: float | None = None
    attrs: dict = field(default_factory=dict)
    children: list = field(default_factory=list)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg):
        raise NewickError(msg, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch):
        if self.peek() != ch:
            got = self.peek() or "end of input"
            self.error(f"expected {ch!r}, got {got!r}")
        self.pos += 1

    def parse(self) -> _Node:
        node = self.subtree()
        self.expect(";")
        if self.peek():
            self.error("trailing characters after ';'")
        return node

    def subtree(self) -> _Node:
        node = _Node(self.pos)
        if self.peek() == "(":
            self.pos += 1
            node.children.append(self.subtree())
            while True:
                ch = self.peek()
                if ch == ",":
                    self.pos += 1
                    node.children.append(self.subtree())
                elif ch == ")":
                    self.pos += 1
                    break
                else:
                    self.error(f"expected ',' or ')', got {ch or 'end of input'!r}")
        node.label = self.label()
        if not node.children and node.label is None:
            self.error("leaf without a label")
        if self.peek() == ":":
            self.pos += 1
            node.length = self.number()
        while self.peek() == "[":
            node.attrs.update(self.comment())
        return node

    def label(self):
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == "'":
            end = self.text.find("'", self.pos + 1)
            if end < 0:
                self.error("unterminated quoted label")
            lab = self.text[self.pos + 1 : end]
            self.pos = end + 1
            return lab
        start = self.pos
        while (
            self.pos < len(self.text)
            and self.text[self.pos] not in _DELIMS
            and not self.text[self.pos].isspace()
        ):
            self.pos += 1
        return self.text[start : self.pos] or None

    def number(self) -> float:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in _DELIMS and not self.text[self.pos].isspace():
            self.pos += 1
        token = self.text[start : self.pos]
        try:
            value = float(token)
        except ValueError:
            self.pos = start
            self.error(f"invalid number {token!r}")
        if not math.isfinite(value):
            self.pos = start
            self.error(f"non-finite number {token!r}")
        return value

    def comment(self) -> dict:
        start = self.pos
        end = self.text.find("]", self.pos)
        if end < 0:
            self.error("unterminated '[' comment")
        body = self.text[self.pos + 1 : end]
        self.pos = end + 1
        if not body.startswith("&"):
            return {}
        attrs = {}
        for item in body[1:].split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise NewickError(f"malformed attribute {item!r}", start)
            try:
                attrs[key.strip()] = float(value)
            except ValueError:
                raise NewickError(f"attribute {key.strip()!r} is not a number", start) from None
        return attrs


def _flatten(root: _Node, taxa: Sequence[str] | None):
    leaves, internals = [], []

    def walk(node):
        if not node.children:
            leaves.append(node)
            return
        for c in node.children:
            walk(c)
        internals.append(node)

    walk(root)
    labels = [lf.label for lf in leaves]
    if len(set(labels)) != len(labels):
        dup = next(lab for lab in labels if labels.count(lab) > 1)
        raise NewickError(f"duplicate leaf label {dup!r}")
    if taxa is not None:
        taxa = [str(t) for t in taxa]
        if sorted(taxa) != sorted(labels):
            raise NewickError(f"leaf labels {sorted(labels)} do not match taxa {sorted(taxa)}")
        order = {lab: i for i, lab in enumerate(taxa)}
        leaves.sort(key=lambda lf: order[lf.label])
        labels = list(taxa)
    nodes = leaves + internals
    ids = {id(node): i for i, node in enumerate(nodes)}
    parent = [-1] * len(nodes)
    for node in internals:
        if len(node.children) != 2:
            kind = "unrooted or multifurcating" if node is root else "multifurcating"
            raise NewickError(f"{kind} node with {len(node.children)} children", node.offset)
        for c in node.children:
            parent[ids[id(c)]] = ids[id(node)]
    return nodes, parent, labels


def parse_newick(text: str, kind: str = "auto", taxa: Sequence[str] | None = None):
    """Parse Newick into a SpeciesPhylogeny, GeneTree or RootedTopology.

    Parameters
    ----------
    text : str
        A single tree terminated by ``;``.
    kind : {"auto", "species", "gene", "topology"}
        ``auto`` returns a species tree when any ``[&mu=...]`` attribute is
        present, a gene tree when branch lengths are present, and a bare
        topology otherwise.
    taxa : sequence of str, optional
        Fix the taxon-id order by label (validated as a bijection).
    """
    root = _Parser(text).parse()
    if not root.children:
        raise NewickError("tree has a single leaf; at least two are required")
    nodes, parent, labels = _flatten(root, taxa)
    root_idx = len(nodes) - 1
    if kind == "auto":
        if any("mu" in nd.attrs for nd in nodes):
            kind = "species"
        elif any(nd.length is not None for i, nd in enumerate(nodes) if i != root_idx):
            kind = "gene"
        else:
            kind = "topology"
    try:
        if kind == "species":
            tau, mu = [], []
            for i, nd in enumerate(nodes):
                if i == root_idx:
                    tau.append(np.inf)
                    mu.append(nd.attrs.get("mu", 1.0))
                    continue
                if nd.length is None:
                    raise NewickError("species-tree edge without a length", nd.offset)
                if "mu" not in nd.attrs:
                    raise NewickError("species-tree edge without a [&mu=...] attribute", nd.offset)
                tau.append(nd.length)
                mu.append(nd.attrs["mu"])
            return SpeciesPhylogeny(parent, tau, mu, labels, root_mu=mu[root_idx])
        if kind == "gene":
            delta = []
            for i, nd in enumerate(nodes):
                if i == root_idx:
                    delta.append(0.0)
                elif nd.length is None:
                    raise NewickError("gene-tree edge without a length", nd.offset)
                else:
                    delta.append(nd.length)
            return GeneTree(parent, delta, labels)
        if kind == "topology":
            return RootedTopology(parent, labels)
    except TreeError as exc:
        raise NewickError(str(exc)) from exc
    raise ValueError(f"unknown tree kind {kind!r}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _quote(label: str) -> str:
    if any(ch in _DELIMS or ch.isspace() or ch == "'" for ch in label):
        return "'" + label + "'"
    return label


def serialize_newick(tree: RootedTree) -> str:
    """Canonical Newick: children ordered by smallest leaf id, shortest round-trip floats."""
    low = {}
    for v in tree.postorder():
        low[v] = v if tree.is_leaf(v) else min(low[c] for c in tree.children[v])

    def edge(v):
        if isinstance(tree, SpeciesPhylogeny):
            return f":{_fmt(tree.tau[v])}[&mu={_fmt(tree.mu[v])}]"
        if isinstance(tree, GeneTree):
            return f":{_fmt(tree.delta[v])}"
        return ""

    def walk(v):
        if tree.is_leaf(v):
            body = _quote(tree.labels[v])
        else:
            kids = sorted(tree.children[v], key=low.get)
            body = "(" + ",".join(walk(c) for c in kids) + ")"
        return body if v == tree.root else body + edge(v)

    out = walk(tree.root)
    if isinstance(tree, SpeciesPhylogeny) and tree.root_mu != 1.0:
        out += f"[&mu={_fmt(tree.root_mu)}]"
    return out + ";"


# -- JSON sidecar -------------------------------------------------------------

JSON_FORMAT = "coalfarris-species-tree"
JSON_VERSION = 1


def species_to_json(S: SpeciesPhylogeny) -> str:
    nodes = []
    for v in range(S.n_nodes):
        entry = {"id": v, "parent": int(S.parent[v])}
        if v != S.root:
            entry["tau"] = float(S.tau[v])
            entry["mu"] = float(S.mu[v])
        nodes.append(entry)
    doc = {
        "format": JSON_FORMAT,
        "version": JSON_VERSION,
        "taxa": list(S.labels),
        "root_mu": S.root_mu,
        "nodes": nodes,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def species_from_json(text: str) -> SpeciesPhylogeny:
    doc = json.loads(text)
    if doc.get("format") != JSON_FORMAT:
        raise ValueError(f"not a {JSON_FORMAT} document")
    if doc.get("version") != JSON_VERSION:
        raise ValueError(f"unsupported version {doc.get('version')}")
    nodes = sorted(doc["nodes"], key=lambda e: e["id"])
    if [e["id"] for e in nodes] != list(range(len(nodes))):
        raise ValueError("node ids must be dense 0..N-1")
    parent = [e["parent"] for e in nodes]
    tau = [e.get("tau", np.inf) for e in nodes]
    mu = [e.get("mu", doc.get("root_mu", 1.0)) for e in nodes]
    return SpeciesPhylogeny(parent, tau, mu, doc["taxa"], root_mu=doc.get("root_mu", 1.0))


def load_species_tree(path) -> SpeciesPhylogeny:
    """Read a species tree from a ``.json`` sidecar or a Newick file."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return species_from_json(text)
    return parse_newick(text.strip(), kind="species")
