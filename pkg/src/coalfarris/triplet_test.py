"""Quantile-based triplet test and a min-p-distance baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .reduction import empirical_quantile
from .seqevo import SequenceDataset, disagreement_counts
from .trees import TripletTopology

PAIRS = ((0, 1), (0, 2), (1, 2))


def alpha_of(m: int, k: int) -> float:
    """max(ln m / m, sqrt(ln k) / sqrt(k))."""
    if m < 2 or k < 2:
        raise ValueError(f"alpha needs m >= 2 and k >= 2, got m={m}, k={k}")
    return max(math.log(m) / m, math.sqrt(math.log(k)) / math.sqrt(k))


def _declare(scores, taxa, ascending=False) -> TripletTopology:
    """Resolved call for the single best pair, unresolved on a tie."""
    scores = np.asarray(scores, dtype=np.float64)
    best = scores.min() if ascending else scores.max()
    winners = np.flatnonzero(scores == best)
    if winners.size != 1:
        return TripletTopology.unresolved(*taxa)
    a, b = PAIRS[int(winners[0])]
    (c,) = {0, 1, 2} - {a, b}
    return TripletTopology.resolved(taxa[a], taxa[b], taxa[c])


@dataclass
class QuantileTestState:
    """Everything the quantile test computed; counts are raw site counts."""

    alpha: float
    c3: float
    q_hat_quantiles: dict[tuple[int, int], int]
    q_star: int
    similarities: dict[tuple[int, int], float]
    topology: TripletTopology

    @property
    def margin(self) -> float:
        """Gap between the largest and second-largest similarity."""
        s = sorted(self.similarities.values(), reverse=True)
        return s[0] - s[1]

    def as_json(self, labels=None) -> dict:
        name = (lambda t: labels[t]) if labels is not None else (lambda t: str(t + 1))
        return {
            "topology": self.topology.label(labels),
            "alpha": self.alpha,
            "c3": self.c3,
            "q_star": self.q_star,
            "q_quantiles": {f"{name(a)},{name(b)}": v for (a, b), v in self.q_hat_quantiles.items()},
            "s_values": {f"{name(a)},{name(b)}": v for (a, b), v in self.similarities.items()},
        }


def quantile_triplet_test(
    noisy: SequenceDataset,
    q1,
    q2,
    c3: float = 1.0,
    m: int | None = None,
    k: int | None = None,
    taxa=(0, 1, 2),
) -> QuantileTestState:
    """Declare the rooted topology of ``taxa`` from transformed data.

    Parameters
    ----------
    noisy : SequenceDataset
        Data over M_Q = q1 + q2 (positions into ``noisy``).
    q1, q2 : array of int
        Threshold genes and scoring genes.
    c3 : float
        Quantile level multiplier; the level is ``min(1, c3 * alpha)``.
    m, k : int, optional
        Gene and site counts entering alpha; default to the dataset's.
        Callers running the full pipeline pass the total gene count.
    """
    q1 = np.asarray(q1, dtype=np.int64)
    q2 = np.asarray(q2, dtype=np.int64)
    if q1.size == 0 or q2.size == 0:
        raise ValueError("quantile test needs nonempty M_Q1 and M_Q2")
    if c3 <= 0:
        raise ValueError("c3 must be positive")
    m = noisy.m if m is None else m
    k = noisy.k if k is None else k
    alpha = alpha_of(m, k)
    beta = min(1.0, c3 * alpha)
    cols = [noisy.taxon_index(t) for t in taxa]
    pairs = [(cols[a], cols[b]) for a, b in PAIRS]
    c1 = disagreement_counts(noisy.data[q1], pairs)
    c2 = disagreement_counts(noisy.data[q2], pairs)
    quant = {PAIRS[i]: int(empirical_quantile(c1[:, i], beta)) for i in range(3)}
    q_star = max(quant.values())
    s = (c2 <= q_star).mean(axis=0)
    topo = _declare(s, tuple(taxa))
    return QuantileTestState(
        alpha, c3, quant, q_star, {PAIRS[i]: float(s[i]) for i in range(3)}, topo
    )


def baseline_minpd_test(data: SequenceDataset, mode: str = "mean", genes=None, taxa=(0, 1, 2)) -> TripletTopology:
    """Closest pair by mean or minimum per-gene p-distance."""
    if mode not in ("mean", "min"):
        raise ValueError(f"mode must be mean or min, got {mode!r}")
    if data.m == 0:
        raise ValueError("empty dataset")
    arr = data.data if genes is None else data.data[np.asarray(genes, dtype=np.int64)]
    cols = [data.taxon_index(t) for t in taxa]
    counts = disagreement_counts(arr, [(cols[a], cols[b]) for a, b in PAIRS]) / data.k
    agg = counts.mean(axis=0) if mode == "mean" else counts.min(axis=0)
    return _declare(agg, tuple(taxa), ascending=True)
