"""Jukes-Cantor sequence evolution, the p/ell transform pair and p-distances.

Symbols 0, 1, 2, 3 stand for A, T, G, C.  An edge of weighted length
``delta`` fires at a site with probability ``1 - exp(-4 delta / 3)`` and a
fired site takes a uniformly random state (possibly its old one), so the
end-to-end disagreement along the edge is exactly ``p(delta)``.

Draw layout for a gene stream: node ``v`` and site ``j`` use counter
``v*k + j``.  The root node's counters give the root sequence.
"""

from __future__ import annotations

import io
import json
import math
import struct
from typing import Sequence

import numba as nb
import numpy as np

from .streams import Stream, as_uint64, nb_child_key, nb_uniform
from .trees import GeneTree

SYMBOLS = "ATGC"


class DomainError(ValueError):
    """Argument outside the domain of a transform; ``value`` is the offender."""

    def __init__(self, message: str, value):
        super().__init__(message)
        self.value = value


def p_of_distance(d):
    """Jukes-Cantor disagreement probability (3/4)(1 - exp(-4d/3))."""
    arr = np.asarray(d, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError(f"distance must be nonnegative, got {d!r}", d)
    out = -0.75 * np.expm1(-4.0 * arr / 3.0)
    return float(out) if out.ndim == 0 else out


def distance_of_p(p, clamp_eps: float = 1e-9):
    """Inverse of :func:`p_of_distance`, -(3/4) log(1 - 4p/3).

    Raises :class:`DomainError` for ``p`` outside ``[0, 3/4 - clamp_eps)``;
    clamping is the caller's decision.
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise DomainError(f"p-distance must be nonnegative, got {p!r}", p)
    if np.any(arr >= 0.75 - clamp_eps):
        raise DomainError(f"p-distance {p!r} at or beyond saturation 3/4 - {clamp_eps}", p)
    out = -0.75 * np.log1p(-4.0 * arr / 3.0)
    return float(out) if out.ndim == 0 else out


def compose_channels(p1: float, p2: float) -> float:
    """Disagreement of two Jukes-Cantor channels in series."""
    for p in (p1, p2):
        if not 0.0 <= p <= 0.75:
            raise DomainError(f"channel probability must lie in [0, 3/4], got {p!r}", p)
    return p1 + p2 - (4.0 / 3.0) * p1 * p2


# -- simulation kernel ---------------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _child_keys(base_key, gene_ids):
    out = np.empty(gene_ids.shape[0], dtype=np.uint64)
    for i in range(gene_ids.shape[0]):
        out[i] = nb_child_key(base_key, gene_ids[i])
    return out


@nb.njit(nogil=True, cache=True)
def _jc_kernel(parent, blen, order, keys, k, n, out):
    # order[g] lists gene g's nodes root first; out has shape (m, k, n)
    m = parent.shape[0]
    n_nodes = parent.shape[1]
    seq = np.empty((n_nodes, k), dtype=np.uint8)
    for g in range(m):
        key = keys[g]
        root = order[g, 0]
        for j in range(k):
            seq[root, j] = np.uint8(int(4.0 * nb_uniform(key, root * k + j)))
        for q in range(1, n_nodes):
            v = order[g, q]
            pv = parent[g, v]
            fire = -math.expm1(-4.0 * blen[g, v] / 3.0)
            base = v * k
            for j in range(k):
                u = nb_uniform(key, base + j)
                if u < fire:
                    s = int(4.0 * u / fire)
                    seq[v, j] = np.uint8(3 if s > 3 else s)
                else:
                    seq[v, j] = seq[pv, j]
        for x in range(n):
            for j in range(k):
                out[g, j, x] = seq[x, j]


def evolve_sequences(G: GeneTree, k: int, stream: Stream) -> np.ndarray:
    """Evolve ``k`` sites down gene tree ``G``; returns leaf symbols (k, n).

    ``stream`` is the gene's own substream.
    """
    if k < 1:
        raise ValueError("need at least one site")
    order = np.array(G.preorder(), dtype=np.int64)[None]
    parent = np.asarray(G.parent, dtype=np.int64)[None]
    blen = np.asarray(G.delta, dtype=np.float64)[None]
    out = np.empty((1, k, G.n_leaves), dtype=np.uint8)
    _jc_kernel(parent, blen, order, np.array([as_uint64(stream.key)]), k, G.n_leaves, out)
    return out[0]


def evolve_batch(batch, k: int, stream: Stream) -> np.ndarray:
    """Evolve every gene of a :class:`~coalfarris.msc.GeneTreeBatch`.

    Gene ``g`` uses ``stream.child(batch.gene_ids[g])``.  Returns (m, k, n).
    """
    if k < 1:
        raise ValueError("need at least one site")
    m, n_nodes = batch.parent.shape
    n = batch.species.n_leaves
    # batch node ids grow towards the root, so descending ids is a preorder
    order = np.broadcast_to(np.arange(n_nodes - 1, -1, -1, dtype=np.int64), (m, n_nodes)).copy()
    keys = _child_keys(as_uint64(stream.key), batch.gene_ids)
    out = np.empty((m, k, n), dtype=np.uint8)
    _jc_kernel(batch.parent, batch.blen, order, keys, k, n, out)
    return out


# -- datasets -----------------------------------------------------------------

_MAGIC = b"CFSQ"
_VERSION = 1
_HEADER = struct.Struct("<4sHQQIqB")


class SequenceDataset:
    """Aligned sequences for m genes, k sites and n taxa.

    ``data[i, j, x]`` is the symbol of taxon ``x`` at site ``j`` of gene
    ``i``.  Kept as uint8 in memory; packed to 2 bits per symbol on disk.
    """

    def __init__(self, data, taxa: Sequence[str], gene_ids=None, seed: int | None = None):
        data = np.asarray(data)
        if data.ndim != 3:
            raise ValueError(f"dataset must be (m, k, n), got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 3):
            raise ValueError("symbols must lie in {0, 1, 2, 3}")
        self.data = data.astype(np.uint8, copy=False)
        self.taxa = [str(t) for t in taxa]
        if len(self.taxa) != data.shape[2]:
            raise ValueError(f"{len(self.taxa)} taxa for {data.shape[2]} columns")
        if len(set(self.taxa)) != len(self.taxa):
            raise ValueError("taxa must be unique")
        if gene_ids is None:
            gene_ids = np.arange(data.shape[0])
        self.gene_ids = np.asarray(gene_ids, dtype=np.int64)
        if self.gene_ids.shape != (data.shape[0],):
            raise ValueError("one gene id per gene required")
        self.seed = seed

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def k(self) -> int:
        return self.data.shape[1]

    @property
    def n(self) -> int:
        return self.data.shape[2]

    def taxon_index(self, taxon) -> int:
        if isinstance(taxon, (int, np.integer)):
            if not 0 <= taxon < self.n:
                raise IndexError(f"taxon index {taxon} out of range")
            return int(taxon)
        return self.taxa.index(str(taxon))

    def restrict(self, genes=None, taxa=None) -> "SequenceDataset":
        """Sub-dataset on gene positions and/or taxa (ids or labels)."""
        data, gene_ids, labels = self.data, self.gene_ids, self.taxa
        if genes is not None:
            genes = np.asarray(genes, dtype=np.int64)
            data, gene_ids = data[genes], gene_ids[genes]
        if taxa is not None:
            cols = [self.taxon_index(t) for t in taxa]
            data = data[:, :, cols]
            labels = [self.taxa[c] for c in cols]
        return SequenceDataset(np.ascontiguousarray(data), labels, gene_ids, self.seed)

    def __eq__(self, other):
        return (
            isinstance(other, SequenceDataset)
            and self.taxa == other.taxa
            and np.array_equal(self.gene_ids, other.gene_ids)
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"SequenceDataset(m={self.m}, k={self.k}, taxa={self.taxa})"

    def fasta(self, gene: int) -> str:
        """FASTA text for one gene position (``>taxon`` records)."""
        letters = np.frombuffer(SYMBOLS.encode(), dtype=np.uint8)
        lines = []
        for x, name in enumerate(self.taxa):
            lines.append(f">{name}")
            lines.append(letters[self.data[gene, :, x]].tobytes().decode())
        return "\n".join(lines) + "\n"

    def write_fasta(self, path) -> None:
        with open(path, "w") as fh:
            for i in range(self.m):
                fh.write(f";gene {int(self.gene_ids[i])}\n")
                fh.write(self.fasta(i))

    def to_bytes(self) -> bytes:
        labels = json.dumps(self.taxa).encode()
        seed = -1 if self.seed is None else int(self.seed)
        buf = io.BytesIO()
        buf.write(_HEADER.pack(_MAGIC, _VERSION, self.m, self.k, self.n, seed, self.seed is not None))
        buf.write(struct.pack("<I", len(labels)))
        buf.write(labels)
        buf.write(self.gene_ids.astype("<i8").tobytes())
        flat = self.data.reshape(-1)
        pad = (-flat.size) % 4
        quads = np.concatenate([flat, np.zeros(pad, np.uint8)]).reshape(-1, 4)
        packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
        buf.write(packed.astype(np.uint8).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SequenceDataset":
        if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
            raise ValueError("not a coalfarris sequence container")
        magic, version, m, k, n, seed, has_seed = _HEADER.unpack_from(raw, 0)
        if version != _VERSION:
            raise ValueError(f"unsupported container version {version}")
        pos = _HEADER.size
        (n_lab,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        taxa = json.loads(raw[pos : pos + n_lab].decode())
        pos += n_lab
        gene_ids = np.frombuffer(raw, dtype="<i8", count=m, offset=pos).astype(np.int64)
        pos += 8 * m
        total = m * k * n
        packed = np.frombuffer(raw, dtype=np.uint8, offset=pos)
        if packed.size != (total + 3) // 4:
            raise ValueError("truncated or oversized payload")
        quads = np.stack([(packed >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
        data = quads[:total].reshape(m, k, n)
        return cls(data, taxa, gene_ids, seed if has_seed else None)

    def save(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                fh.write(self.to_bytes())
        except OSError as exc:
            raise OSError(f"cannot write dataset to {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# -- p-distances --------------------------------------------------------------


class PDistanceTable:
    """Per-gene p-distances on the whole alignment and on its two halves.

    The first half is sites ``0 .. k//2 - 1``.  Columns follow ``pairs``.
    For even k the full value is defined as the mean of the two halves,
    which equals the whole-alignment fraction up to rounding.
    """

    def __init__(self, pairs, counts, first_counts, second_counts, k: int):
        self.pairs = [tuple(int(t) for t in p) for p in pairs]
        self.k = k
        self.k_first = k // 2
        self.k_second = k - k // 2
        self.counts = counts
        self.first_counts = first_counts
        self.second_counts = second_counts
        self.first_half = first_counts / self.k_first if self.k_first else np.full(counts.shape, np.nan)
        self.second_half = second_counts / self.k_second
        if k % 2 == 0:
            self.full = (self.first_half + self.second_half) / 2.0
        else:
            self.full = counts / k

    def column(self, a: int, b: int) -> int:
        key = (a, b) if (a, b) in self.pairs else (b, a)
        return self.pairs.index(key)

    @property
    def m(self) -> int:
        return self.counts.shape[0]


def disagreement_counts(data: np.ndarray, pairs, lo: int = 0, hi: int | None = None) -> np.ndarray:
    """Count differing sites in ``[lo, hi)`` per gene and pair; (m, len(pairs))."""
    hi = data.shape[1] if hi is None else hi
    out = np.empty((data.shape[0], len(pairs)), dtype=np.int64)
    for c, (a, b) in enumerate(pairs):
        out[:, c] = np.count_nonzero(data[:, lo:hi, a] != data[:, lo:hi, b], axis=1)
    return out


def p_distances(data: SequenceDataset, pairs=None) -> PDistanceTable:
    """Whole, first-half and second-half Hamming fractions per gene and pair."""
    if pairs is None:
        pairs = [(a, b) for a in range(data.n) for b in range(a + 1, data.n)]
    pairs = [(data.taxon_index(a), data.taxon_index(b)) for a, b in pairs]
    k = data.k
    first = disagreement_counts(data.data, pairs, 0, k // 2)
    second = disagreement_counts(data.data, pairs, k // 2, k)
    return PDistanceTable(pairs, first + second, first, second, k)
