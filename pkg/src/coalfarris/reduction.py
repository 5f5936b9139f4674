"""Ultrametric reduction of three-taxon sequence data.

Steps: pick genes whose first-half p-distances fall in quantile windows
that force a known rooted gene topology, estimate the root-distance
differences from their second-half p-distances, then add Jukes-Cantor
noise to every taxon but the one farthest from the root so the data look
like they came from an ultrametric species tree.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numba as nb
import numpy as np

from .seqevo import (
    DomainError,
    PDistanceTable,
    SequenceDataset,
    _child_keys,
    distance_of_p,
    p_distances,
    p_of_distance,
)
from .streams import Stream, as_uint64, nb_uniform

log = logging.getLogger(__name__)

# average p-distances are clamped to this before taking ell
CLAMP_MAX = 0.74

DEFAULT_FRACTIONS = {"r1": 0.1, "r2": 0.2, "q1": 0.1, "q2": 0.6}


class EmptySelection(RuntimeError):
    """No gene of M_R2 passed the quantile windows for ``pair``."""

    def __init__(self, pair, z):
        super().__init__(f"no genes selected for pair {pair} with third taxon {z}")
        self.pair = pair
        self.z = z


class EstimationFailure(RuntimeError):
    def __init__(self, pair, value):
        super().__init__(f"average p-distance {value:.6g} saturated while estimating pair {pair}")
        self.pair = pair
        self.value = value


@dataclass(frozen=True)
class GenePartition:
    """Four disjoint gene-position sets covering ``range(m)``."""

    r1: np.ndarray
    r2: np.ndarray
    q1: np.ndarray
    q2: np.ndarray

    def __post_init__(self):
        sets = []
        for name in ("r1", "r2", "q1", "q2"):
            arr = np.sort(np.asarray(getattr(self, name), dtype=np.int64))
            if arr.size == 0:
                raise ValueError(f"partition block {name} is empty")
            object.__setattr__(self, name, arr)
            sets.append(arr)
        allidx = np.concatenate(sets)
        if np.unique(allidx).size != allidx.size:
            raise ValueError("partition blocks overlap")
        if allidx.min() != 0 or allidx.max() != allidx.size - 1:
            raise ValueError("partition blocks must cover 0..m-1")

    @property
    def m(self) -> int:
        return self.r1.size + self.r2.size + self.q1.size + self.q2.size

    @property
    def q(self) -> np.ndarray:
        return np.sort(np.concatenate([self.q1, self.q2]))

    @classmethod
    def from_sizes(cls, sizes, rng: np.random.Generator | None = None) -> "GenePartition":
        """Blocks of the given sizes, over a random permutation if ``rng`` is given."""
        sizes = [int(s) for s in sizes]
        perm = np.arange(sum(sizes)) if rng is None else rng.permutation(sum(sizes))
        cuts = np.cumsum([0] + sizes)
        return cls(*(perm[cuts[i] : cuts[i + 1]] for i in range(4)))

    @classmethod
    def from_fractions(cls, m: int, fractions: Mapping[str, float] | None = None, rng=None) -> "GenePartition":
        """Floor each fraction of ``m``; leftover genes go to q2."""
        fr = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
        if set(fr) != {"r1", "r2", "q1", "q2"}:
            raise ValueError("fractions need keys r1, r2, q1, q2")
        if any(v <= 0 for v in fr.values()) or sum(fr.values()) > 1 + 1e-9:
            raise ValueError(f"fractions must be positive and sum to at most 1: {fr}")
        r1, r2, q1 = (int(math.floor(fr[key] * m)) for key in ("r1", "r2", "q1"))
        return cls.from_sizes([r1, r2, q1, m - r1 - r2 - q1], rng)

    def reshuffle_r(self, rng: np.random.Generator) -> "GenePartition":
        """Re-split M_R1 and M_R2 at random, keeping their sizes and M_Q."""
        pool = rng.permutation(np.concatenate([self.r1, self.r2]))
        return GenePartition(pool[: self.r1.size], pool[self.r1.size :], self.q1, self.q2)

    def relative_to(self, genes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions of q1 and q2 inside the sorted gene list ``genes``."""
        pos = {int(g): i for i, g in enumerate(genes)}
        return (np.array([pos[int(g)] for g in self.q1]), np.array([pos[int(g)] for g in self.q2]))


def parse_fractions(text: str) -> dict[str, float]:
    """``"r1=0.1,r2=0.2,q1=0.1,q2=0.6"`` to a dict."""
    out = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"malformed partition item {item!r}")
        out[key.strip()] = float(value)
    return out


def empirical_quantile(values, beta) -> float:
    """The max(1, floor(beta*N))-th smallest value (1-indexed, stable sort)."""
    arr = np.asarray(values)
    if arr.size == 0:
        raise ValueError("empirical quantile of an empty list")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    # exact rational floor so that e.g. 5/6 * 6 is 5, not 4.999...
    frac = Fraction(beta).limit_denominator(10**6) if not isinstance(beta, Fraction) else beta
    idx = max(1, math.floor(frac * arr.size))
    return np.sort(arr, kind="stable")[idx - 1].item()


@dataclass
class ReductionConfig:
    upper_windows: bool = True
    # which R1 p-distances set the windows: "first_half" or "full"
    threshold_source: str = "first_half"
    clamp: bool = True
    clamp_max: float = CLAMP_MAX
    retries: int = 3

    def __post_init__(self):
        if self.threshold_source not in ("first_half", "full"):
            raise ValueError(f"threshold_source must be first_half or full, got {self.threshold_source!r}")
        if not 0 < self.clamp_max < 0.75:
            raise ValueError("clamp_max must lie in (0, 3/4)")
        if self.retries < 0:
            raise ValueError("retries must be nonnegative")


@dataclass
class Selection:
    pair: tuple[int, int]
    z: int
    genes: np.ndarray
    thresholds: dict[str, float]


def select_topology_fixed_genes(
    tbl: PDistanceTable,
    part: GenePartition,
    x: int,
    y: int,
    z: int,
    config: ReductionConfig | None = None,
) -> Selection:
    """Genes of M_R2 whose first-half p-distances sit in the topology windows.

    Windows: p_xy at most its 1/3 quantile, p_xz and p_yz between their 2/3
    and 5/6 quantiles.  Quantiles come from M_R1 only.
    """
    cfg = config or ReductionConfig()
    src = tbl.first_half if cfg.threshold_source == "first_half" else tbl.full
    cxy, cxz, cyz = tbl.column(x, y), tbl.column(x, z), tbl.column(y, z)
    r1 = src[part.r1]
    th = {
        "xy_1/3": empirical_quantile(r1[:, cxy], Fraction(1, 3)),
        "xz_2/3": empirical_quantile(r1[:, cxz], Fraction(2, 3)),
        "xz_5/6": empirical_quantile(r1[:, cxz], Fraction(5, 6)),
        "yz_2/3": empirical_quantile(r1[:, cyz], Fraction(2, 3)),
        "yz_5/6": empirical_quantile(r1[:, cyz], Fraction(5, 6)),
    }
    r2 = tbl.first_half[part.r2]
    keep = (r2[:, cxy] <= th["xy_1/3"]) & (r2[:, cxz] >= th["xz_2/3"]) & (r2[:, cyz] >= th["yz_2/3"])
    if cfg.upper_windows:
        keep &= (r2[:, cxz] <= th["xz_5/6"]) & (r2[:, cyz] <= th["yz_5/6"])
    genes = part.r2[keep]
    if genes.size == 0:
        raise EmptySelection((x, y), z)
    return Selection((x, y), z, genes, th)


def estimate_delta(tbl: PDistanceTable, genes, x: int, y: int, z: int, config: ReductionConfig | None = None):
    """Root-distance difference estimate ell(mean p_xz) - ell(mean p_yz).

    Means are over ``genes`` of second-half p-distances.  Returns
    ``(delta_hat, n_clamped)``.
    """
    cfg = config or ReductionConfig()
    genes = np.asarray(genes, dtype=np.int64)
    if genes.size == 0:
        raise EmptySelection((x, y), z)
    sh = tbl.second_half[genes]
    means = [float(np.mean(sh[:, tbl.column(x, z)])), float(np.mean(sh[:, tbl.column(y, z)]))]
    clamped = 0
    for i, v in enumerate(means):
        if v > cfg.clamp_max:
            if not cfg.clamp:
                raise EstimationFailure((x, y), v)
            log.info("clamping mean p-distance %.6g to %.6g for pair %s", v, cfg.clamp_max, (x, y))
            means[i] = cfg.clamp_max
            clamped += 1
    try:
        return distance_of_p(means[0]) - distance_of_p(means[1]), clamped
    except DomainError as exc:
        raise EstimationFailure((x, y), exc.value) from exc


@dataclass
class DeltaEstimates:
    """Antisymmetric matrix of root-distance differences over three taxa.

    ``matrix[a, b]`` estimates mu(root, a) - mu(root, b); indices are
    positions 0, 1, 2 of ``taxa``.
    """

    taxa: tuple[int, int, int]
    matrix: np.ndarray
    selections: list[Selection] = field(default_factory=list)
    clamps: int = 0
    retries: int = 0

    @classmethod
    def from_two(cls, taxa, d01: float, d02: float, **kw) -> "DeltaEstimates":
        """Build from Delta_01 and Delta_02; Delta_12 = Delta_10 - Delta_20."""
        M = np.zeros((3, 3))
        M[0, 1], M[1, 0] = d01, -d01
        M[0, 2], M[2, 0] = d02, -d02
        d12 = M[1, 0] - M[2, 0]
        M[1, 2], M[2, 1] = d12, -d12
        return cls(tuple(taxa), M, **kw)

    def __getitem__(self, pair) -> float:
        a, b = pair
        return float(self.matrix[a, b])

    def reference_leaf(self) -> tuple[int, bool]:
        """Position z with Delta_zx >= 0 for both other x (farthest from the root).

        Falls back to the position maximizing the sum of its row when no
        such z exists; the flag reports the fallback.
        """
        for zz in range(3):
            others = [w for w in range(3) if w != zz]
            if min(self.matrix[zz, w] for w in others) >= 0:
                return zz, False
        sums = self.matrix.sum(axis=1)
        return int(np.argmax(sums)), True

    def as_json(self, labels=None) -> dict:
        name = (lambda t: labels[t]) if labels is not None else str
        out = {
            "taxa": [name(t) for t in self.taxa],
            "delta_hat": {
                f"{name(self.taxa[a])},{name(self.taxa[b])}": float(self.matrix[a, b])
                for a in range(3)
                for b in range(3)
                if a != b
            },
            "selected": {
                f"{name(self.taxa[s.pair[0]])},{name(self.taxa[s.pair[1]])}": int(s.genes.size)
                for s in self.selections
            },
            "clamps": self.clamps,
            "retries": self.retries,
        }
        return out


def estimate_deltas(tbl: PDistanceTable, part: GenePartition, config: ReductionConfig | None = None) -> DeltaEstimates:
    """Delta estimates for a three-taxon table (taxa at positions 0, 1, 2).

    Pairs (0, 1) with third taxon 2 and (0, 2) with third taxon 1 are
    estimated directly; the third follows by additivity.
    """
    cfg = config or ReductionConfig()
    selections, deltas, clamps = [], [], 0
    for x, y, z in ((0, 1, 2), (0, 2, 1)):
        sel = select_topology_fixed_genes(tbl, part, x, y, z, cfg)
        d, c = estimate_delta(tbl, sel.genes, x, y, z, cfg)
        selections.append(sel)
        deltas.append(d)
        clamps += c
    return DeltaEstimates.from_two((0, 1, 2), deltas[0], deltas[1], selections=selections, clamps=clamps)


# -- stochastic Farris transform ---------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _noise_kernel(data, keys, probs, out):
    m, k, n = data.shape
    for g in range(m):
        key = keys[g]
        for x in range(n):
            p = probs[x]
            base = x * k
            for j in range(k):
                s = data[g, j, x]
                if p > 0.0:
                    u = nb_uniform(key, base + j)
                    # 0 w.p. 1 - p, then 1, 2, 3 each w.p. p/3
                    if u >= 1.0 - p:
                        e = 1 + int((u - (1.0 - p)) / (p / 3.0))
                        if e > 3:
                            e = 3
                        s = (s + e) % 4
                out[g, j, x] = s


def stochastic_farris_transform(data: SequenceDataset, deltas: DeltaEstimates, stream: Stream) -> tuple[SequenceDataset, dict]:
    """Add mod-4 Jukes-Cantor noise of strength p(Delta_zx) to each taxon x != z.

    ``data`` columns 0, 1, 2 must correspond to ``deltas`` positions.  Gene
    ``g`` draws from ``stream.child(gene_id)``.  Returns the noisy dataset
    and a dict with the chosen reference leaf, the fallback flag and the noise
    levels applied.
    """
    if data.n != 3:
        raise ValueError("the transform works on three-taxon data")
    z, fallback = deltas.reference_leaf()
    # negative residuals only arise in the fallback; clamp them to no noise
    shifts = [max(deltas[z, x], 0.0) if x != z else 0.0 for x in range(3)]
    probs = np.array([p_of_distance(s) for s in shifts], dtype=np.float64)
    keys = _child_keys(as_uint64(stream.key), data.gene_ids)
    out = np.empty_like(data.data)
    _noise_kernel(data.data, keys, probs, out)
    info = {"reference_leaf": z, "fallback": fallback, "noise_distance": shifts, "noise_p": probs.tolist()}
    return SequenceDataset(out, data.taxa, data.gene_ids, data.seed), info


@dataclass
class ReductionResult:
    noisy: SequenceDataset
    deltas: DeltaEstimates
    partition: GenePartition
    q1: np.ndarray
    q2: np.ndarray
    transform: dict


def run_reduction(
    data: SequenceDataset,
    part: GenePartition,
    stream: Stream,
    config: ReductionConfig | None = None,
) -> ReductionResult:
    """Estimate the Delta matrix and return transformed data over M_Q.

    On :class:`EmptySelection` the M_R1/M_R2 split is reshuffled up to
    ``config.retries`` times before the error propagates.
    """
    cfg = config or ReductionConfig()
    if data.n != 3:
        raise ValueError("reduction needs exactly three taxa")
    if part.m != data.m:
        raise ValueError(f"partition covers {part.m} genes, dataset has {data.m}")
    tbl = p_distances(data)
    attempt = 0
    while True:
        try:
            deltas = estimate_deltas(tbl, part, cfg)
            break
        except EmptySelection:
            if attempt >= cfg.retries:
                raise
            attempt += 1
            part = part.reshuffle_r(stream.derive("reshuffle", attempt).numpy())
    deltas.retries = attempt
    qgenes = part.q
    noisy, info = stochastic_farris_transform(data.restrict(qgenes), deltas, stream.derive("farris"))
    q1, q2 = part.relative_to(qgenes)
    return ReductionResult(noisy, deltas, part, q1, q2, info)
