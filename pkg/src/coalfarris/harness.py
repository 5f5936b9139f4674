"""Reproducible Monte-Carlo experiments over (f, m, k) grids.

Every trial draws from a stream keyed by ``(seed, f, m, k, trial)`` values,
so a trial's outcome does not depend on which other grid points or trials
run, nor on the thread count.  Wall times go to a separate timings file
so the trial CSV and summary JSON are byte-reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .msc import pairwise_excess_density, sample_gene_trees
from .newick import parse_newick, serialize_newick
from .reconstruct import PipelineConfig, TripletSet, build_from_triplets, InconsistentTriplets, infer_triplet
from .reduction import DEFAULT_FRACTIONS, ReductionConfig
from .seqevo import SequenceDataset, evolve_batch
from .streams import Stream, derive_key
from .trees import RegimeConfig, SpeciesPhylogeny, random_species_tree, restrict_to_triplet, species_metric, triplet_species_tree

SCHEMA_VERSION = 1
THREADS_ENV = "COALFARRIS_THREADS"

# default three-taxon family, indexed by the internal branch length f:
# unequal leaf rates make it non-ultrametric, and the slow root population
# keeps pairwise distances well below JC saturation
DEFAULT_TREE = {
    "tau_leaf": 0.4,
    "mu_leaves": (0.9, 0.3, 0.6),
    "mu_internal": 0.5,
    "root_mu": 0.1,
}


def default_species_tree(f: float) -> SpeciesPhylogeny:
    """((1,2),3) with internal branch f; leaf 3's branch spans both populations."""
    t = DEFAULT_TREE["tau_leaf"]
    return triplet_species_tree(
        f,
        tau_leaves=(t, t, t + f),
        mu_leaves=DEFAULT_TREE["mu_leaves"],
        mu_internal=DEFAULT_TREE["mu_internal"],
        root_mu=DEFAULT_TREE["root_mu"],
    )


def regime_tag(f: float, k: int) -> str:
    return "long" if k * f * f >= 1.0 else "short"


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    phat = successes / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return threads


# -- data generation -------------------------------------------------------------


def run_msc_jc(S: SpeciesPhylogeny, m: int, k: int, seed: int | None = None, stream: Stream | None = None,
               chunk: int = 20000) -> SequenceDataset:
    """m gene trees from the MSC on S, each evolved for k JC sites.

    Gene ``i`` depends only on the root stream and ``i``.  Give either a
    ``seed`` or a ``stream``.
    """
    if (seed is None) == (stream is None):
        raise ValueError("give exactly one of seed and stream")
    if m < 1 or k < 1:
        raise ValueError("need m >= 1 and k >= 1")
    root = Stream.from_seed(seed) if stream is None else stream
    msc_stream, jc_stream = root.derive("msc"), root.derive("jc")
    out = np.empty((m, k, S.n_leaves), dtype=np.uint8)
    for lo in range(0, m, chunk):
        ids = np.arange(lo, min(m, lo + chunk))
        batch = sample_gene_trees(S, msc_stream, ids)
        out[lo : lo + ids.size] = evolve_batch(batch, k, jc_stream)
    return SequenceDataset(out, S.labels, np.arange(m), seed)


# -- configuration -------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Grid, trial count, seed and pipeline constants of a success-curve run.

    With ``tree`` (Newick with ``[&mu=...]`` rates) every grid point uses
    that species tree and ``f_grid`` is only a label.  With ``regime`` a
    random ``n_taxa`` tree is drawn per f (its internal lengths bounded
    below by f).  Otherwise the default three-taxon family is used.
    """

    f_grid: Sequence[float] = (0.2,)
    m_grid: Sequence[int] = (4000,)
    k_grid: Sequence[int] = (2000,)
    trials: int = 200
    seed: int = 0
    tree: str | None = None
    regime: dict | None = None
    n_taxa: int = 3
    c3: float = 1.0
    fractions: dict = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))
    phi: float | None = None
    upper_windows: bool = True
    threshold_source: str = "first_half"
    clamp: bool = True
    clamp_max: float = 0.74
    retries: int = 3
    method: str = "quantile"
    reduce: bool = True
    build_mode: str = "strict"
    point_budget_s: float | None = None

    def __post_init__(self):
        self.f_grid = [float(f) for f in self.f_grid]
        self.m_grid = [int(m) for m in self.m_grid]
        self.k_grid = [int(k) for k in self.k_grid]
        if not (self.f_grid and self.m_grid and self.k_grid):
            raise ValueError("grids must be nonempty")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.tree is not None and self.regime is not None:
            raise ValueError("give at most one of tree and regime")
        if self.build_mode not in ("strict", "repair"):
            raise ValueError("build_mode must be strict or repair")
        self.pipeline()  # validates the constants

    def pipeline(self) -> PipelineConfig:
        red = ReductionConfig(self.upper_windows, self.threshold_source, self.clamp, self.clamp_max, self.retries)
        return PipelineConfig(self.c3, dict(self.fractions), red, self.method, self.reduce)

    def species_tree(self, f: float) -> SpeciesPhylogeny:
        if self.tree is not None:
            return parse_newick(self.tree, kind="species")
        if self.regime is not None:
            reg = dict(self.regime)
            reg["f"] = f
            rng = Stream.from_seed(self.seed, "tree", f).numpy()
            return random_species_tree(self.n_taxa, rng, RegimeConfig(**reg))
        return default_species_tree(f)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


# -- trials ------------------------------------------------------------------------


@dataclass
class TrialResult:
    trial: int
    f: float
    m: int
    k: int
    seed: int
    declared: str
    truth: str
    correct: bool
    unresolved: bool
    delta_abs_err: float | None = None
    selected: str = ""
    clamps: int = 0
    retries: int = 0
    fallback: bool = False
    error: str = ""
    wall_time: float = field(default=0.0, compare=False)


CSV_FIELDS = [
    "schema_version", "config_hash", "seed", "f", "m", "k", "regime", "trial",
    "declared", "truth", "correct", "unresolved", "delta_abs_err", "selected",
    "clamps", "retries", "fallback", "error",
]


def trial_stream(seed: int, f: float, m: int, k: int, trial: int) -> Stream:
    return Stream(derive_key(seed, "trial", float(f), int(m), int(k), int(trial)))


def run_trial(cfg: ExperimentConfig, S: SpeciesPhylogeny, f: float, m: int, k: int, trial: int) -> TrialResult:
    t0 = time.perf_counter()
    st = trial_stream(cfg.seed, f, m, k, trial)
    data = run_msc_jc(S, m, k, stream=st.derive("data"))
    data.seed = cfg.seed
    pipe = cfg.pipeline()
    if S.n_leaves == 3:
        call = infer_triplet(data, (0, 1, 2), pipe, st.derive("infer"))
        truth = restrict_to_triplet(S, 0, 1, 2)
        declared = call.topology.label(S.labels)
        err = None
        if call.delta_hat is not None:
            rd = S.root_distances()[:3]
            true = rd[:, None] - rd[None, :]
            err = float(np.max(np.abs(call.delta_hat.matrix - true)))
        return TrialResult(
            trial, f, m, k, cfg.seed, declared, truth.label(S.labels), call.topology == truth,
            not call.topology.is_resolved, err, "/".join(map(str, call.selected)), call.clamps,
            call.retries, call.fallback, call.error or "", time.perf_counter() - t0,
        )
    ts = TripletSet(S.n_leaves, S.labels)
    clamps = retries = 0
    unresolved = False
    for triple in itertools.combinations(range(S.n_leaves), 3):
        call = infer_triplet(data, triple, pipe, st.derive("infer", *triple))
        ts.add(call.topology, call.margin)
        clamps += call.clamps
        retries += call.retries
        unresolved |= not call.topology.is_resolved
    try:
        built = build_from_triplets(ts, cfg.build_mode).topology
        declared, error = built.topology_key(), ""
        correct = built.same_topology(S)
    except InconsistentTriplets as exc:
        declared, error, correct = "inconsistent", str(exc), False
    return TrialResult(
        trial, f, m, k, cfg.seed, declared, S.topology_key(), correct, unresolved,
        None, "", clamps, retries, False, error, time.perf_counter() - t0,
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[TrialResult]
    points: list[dict]


def summarize_point(f, m, k, rows: Sequence[TrialResult], status: str = "ok") -> dict:
    n = len(rows)
    succ = sum(r.correct for r in rows)
    lo, hi = wilson_interval(succ, n)
    errs = [r.delta_abs_err for r in rows if r.delta_abs_err is not None]
    return {
        "f": f, "m": m, "k": k, "regime": regime_tag(f, k), "status": status,
        "trials": n, "successes": succ,
        "success": succ / n if n else None,
        "ci_low": lo, "ci_high": hi,
        "unresolved": sum(r.unresolved for r in rows),
        "clamped_trials": sum(r.clamps > 0 for r in rows),
        "retries": sum(r.retries for r in rows),
        "fallbacks": sum(r.fallback for r in rows),
        "errors": sum(bool(r.error) for r in rows),
        "mean_delta_abs_err": float(np.mean(errs)) if errs else None,
    }


def success_curve(cfg: ExperimentConfig, threads: int | None = None, progress=None) -> ExperimentResult:
    """Run every grid point; rows are ordered by (f, m, k, trial).

    With ``point_budget_s`` set, a point whose elapsed time exceeds the
    budget stops launching trials and is marked ``over_budget``; its
    partial rows are kept but its success fields are left empty.
    """
    threads = resolve_threads(threads)
    rows: list[TrialResult] = []
    points = []
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for f in cfg.f_grid:
            S = cfg.species_tree(f)
            for m in cfg.m_grid:
                for k in cfg.k_grid:
                    t0 = time.perf_counter()
                    done: list[TrialResult] = []
                    status = "ok"
                    for lo in range(0, cfg.trials, threads):
                        ids = range(lo, min(cfg.trials, lo + threads))
                        done.extend(pool.map(lambda t: run_trial(cfg, S, f, m, k, t), ids))
                        if cfg.point_budget_s is not None and time.perf_counter() - t0 > cfg.point_budget_s:
                            if len(done) < cfg.trials:
                                status = "over_budget"
                            break
                    done.sort(key=lambda r: r.trial)
                    rows.extend(done)
                    summary = summarize_point(f, m, k, done, status)
                    if status != "ok":
                        summary.update(success=None, ci_low=None, ci_high=None)
                    points.append(summary)
                    if progress is not None:
                        progress(summary)
    return ExperimentResult(cfg, rows, points)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[TrialResult], cfg: ExperimentConfig | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    h = cfg.config_hash() if cfg is not None else ""
    for r in rows:
        w.writerow([_cell(v) for v in (
            SCHEMA_VERSION, h, r.seed, r.f, r.m, r.k, regime_tag(r.f, r.k), r.trial,
            r.declared, r.truth, r.correct, r.unresolved, r.delta_abs_err, r.selected,
            r.clamps, r.retries, r.fallback, r.error,
        )])
    return buf.getvalue()


def emit_report(result: ExperimentResult, out_dir) -> dict[str, Path]:
    """Write ``trials.csv``, ``summary.json`` and ``timings.json`` under ``out_dir``.

    ``summary.json`` holds one object per grid point plus the full config
    echo.  Only ``timings.json`` varies between identical runs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"trials": out / "trials.csv", "summary": out / "summary.json", "timings": out / "timings.json"}
        paths["trials"].write_text(rows_to_csv(result.rows, result.config))
        summary = {
            "schema_version": SCHEMA_VERSION,
            "config_hash": result.config.config_hash(),
            "seed": result.config.seed,
            "config": result.config.to_dict(),
            "points": result.points,
        }
        paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        timings = [{"f": r.f, "m": r.m, "k": r.k, "trial": r.trial, "wall_time": r.wall_time} for r in result.rows]
        paths["timings"].write_text(json.dumps(timings, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return paths


# -- identifiability ----------------------------------------------------------------


def median_thresholds(S: SpeciesPhylogeny, delta=None, method: str = "analytic") -> np.ndarray:
    """Medians of the pairwise gene distances, shape (n, n).

    ``analytic`` uses mu_ab + 2 * median(Z_ab); ``empirical`` takes the
    lower sample median of ``delta`` (shape (samples, n, n)).
    """
    n = S.n_leaves
    med = np.zeros((n, n))
    if method == "analytic":
        mu = species_metric(S).values
        for a, b in itertools.combinations(range(n), 2):
            med[a, b] = med[b, a] = mu[a, b] + 2.0 * pairwise_excess_density(S, a, b).quantile(0.5)
    elif method == "empirical":
        from .reduction import empirical_quantile

        for a, b in itertools.combinations(range(n), 2):
            med[a, b] = med[b, a] = empirical_quantile(delta[:, a, b], 0.5)
    else:
        raise ValueError(f"unknown median method {method!r}")
    return med


def identifiability_check(S: SpeciesPhylogeny, n_samples: int, seed: int, medians: str = "analytic",
                          chunk: int = 250000) -> dict:
    """Monte-Carlo check of the topology-fixing event and the height-difference identity.

    For every ordered choice (x, y) with third taxon z reports: the number
    of samples in the event, how many of them do not have rooted topology
    xy|z, the conditional mean of delta_xz - delta_yz and its standard
    error against Delta_xy = mu(root, x) - mu(root, y), and the largest
    per-tree deviation |delta_xz - delta_yz - Delta_xy| over trees with
    topology xy|z whose cross-pair coalescences both happened in the root
    population.  ``literal_*`` fields repeat the last count without the
    topology condition.
    """
    if S.n_leaves != 3:
        raise ValueError("identifiability check needs a three-taxon species tree")
    rd = S.root_distances()[:3]
    stream = Stream.from_seed(seed, "identifiability")
    if medians == "empirical":
        deltas = []
        for lo in range(0, n_samples, chunk):
            deltas.append(sample_gene_trees(S, stream, np.arange(lo, min(n_samples, lo + chunk))).metrics())
        med = median_thresholds(S, np.concatenate(deltas), "empirical")
    else:
        med = median_thresholds(S)
    perms = [(x, y, z) for x, y, z in itertools.permutations(range(3)) if x < y]
    acc = {p: {"event": 0, "violations": 0, "sum": 0.0, "sumsq": 0.0, "exact_n": 0, "exact_max": 0.0,
               "literal_n": 0, "literal_viol": 0, "literal_max": 0.0} for p in perms}
    for lo in range(0, n_samples, chunk):
        batch = sample_gene_trees(S, stream, np.arange(lo, min(n_samples, lo + chunk)))
        d = batch.metrics()
        pops = batch.pair_coalescence_population()
        for (x, y, z) in perms:
            a = acc[(x, y, z)]
            out = batch.cherry_outgroup(x, y, z)
            ev = (d[:, x, y] <= med[x, y]) & (d[:, x, z] > med[x, z]) & (d[:, y, z] > med[y, z])
            diff = d[:, x, z] - d[:, y, z]
            a["event"] += int(ev.sum())
            a["violations"] += int((ev & (out != z)).sum())
            a["sum"] += float(diff[ev].sum())
            a["sumsq"] += float((diff[ev] ** 2).sum())
            target = rd[x] - rd[y]
            both_root = (pops[:, x, z] == S.root) & (pops[:, y, z] == S.root)
            dev = np.abs(diff - target)
            sel = both_root & (out == z)
            a["exact_n"] += int(sel.sum())
            a["exact_max"] = max(a["exact_max"], float(dev[sel].max()) if sel.any() else 0.0)
            a["literal_n"] += int(both_root.sum())
            a["literal_viol"] += int((both_root & (dev > 1e-10)).sum())
            a["literal_max"] = max(a["literal_max"], float(dev[both_root].max()) if both_root.any() else 0.0)
    report = {"n_samples": n_samples, "seed": seed, "medians": medians, "species_tree": serialize_newick(S),
              "permutations": []}
    for (x, y, z), a in acc.items():
        n = a["event"]
        mean = a["sum"] / n if n else None
        var = (a["sumsq"] / n - mean * mean) if n > 1 else None
        se = math.sqrt(max(var, 0.0) / n) if n > 1 else None
        report["permutations"].append({
            "x": S.labels[x], "y": S.labels[y], "z": S.labels[z],
            "event_count": n,
            "topology_violations": a["violations"],
            "topology_fraction": (n - a["violations"]) / n if n else None,
            "delta_true": float(rd[x] - rd[y]),
            "conditional_mean": mean,
            "conditional_se": se,
            "exact_count": a["exact_n"],
            "exact_max_deviation": a["exact_max"],
            "literal_count": a["literal_n"],
            "literal_violations": a["literal_viol"],
            "literal_max_deviation": a["literal_max"],
        })
    return report
