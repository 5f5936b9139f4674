"""Command-line interface: ``coalfarris <command> ...``; results are JSON on stdout or files."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .msc import pairwise_excess_density, quantile_gap_bounds, sample_gene_trees
from .newick import load_species_tree, parse_newick, serialize_newick
from .reconstruct import PipelineConfig, build_from_triplets, infer_all_triplets, InconsistentTriplets
from .reduction import EmptySelection, EstimationFailure, GenePartition, ReductionConfig, parse_fractions, run_reduction
from .seqevo import SequenceDataset
from .streams import Stream
from .triplet_test import quantile_triplet_test


def _species_tree(args):
    if getattr(args, "newick", None):
        return parse_newick(args.newick, kind="species")
    if getattr(args, "tree", None):
        return load_species_tree(args.tree)
    return harness.default_species_tree(args.f)


def _add_tree_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--tree", help="species tree file (Newick with [&mu=...] or JSON)")
    g.add_argument("--newick", help="species tree as a Newick string")
    p.add_argument("--f", type=float, default=0.2, help="internal branch of the default tree (default 0.2)")


def _indices(text: str) -> np.ndarray:
    """'0-9,15,20-22' to an index array."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    return np.array(out, dtype=np.int64)


def _emit(doc, out=None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_simulate(args):
    S = _species_tree(args)
    data = harness.run_msc_jc(S, args.m, args.k, seed=args.seed)
    data.save(args.out)
    if args.fasta:
        data.write_fasta(args.fasta)
    if args.gene_trees:
        batch = sample_gene_trees(S, Stream.from_seed(args.seed).derive("msc"), args.m)
        with open(args.gene_trees, "w") as fh:
            for i in range(len(batch)):
                fh.write(serialize_newick(batch.tree(i)) + "\n")
    _emit({"out": str(args.out), "m": data.m, "k": data.k, "taxa": data.taxa, "seed": args.seed,
           "species_tree": serialize_newick(S)})


def _pipeline(args) -> PipelineConfig:
    red = ReductionConfig(upper_windows=not args.no_upper_windows, threshold_source=args.threshold_source,
                          retries=args.retries)
    return PipelineConfig(c3=args.c3, fractions=parse_fractions(args.partition), reduction=red)


def cmd_reduce(args):
    data = SequenceDataset.load(args.__dict__["in"])
    if args.taxa:
        data = data.restrict(taxa=args.taxa.split(","))
    cfg = _pipeline(args)
    stream = Stream.from_seed(args.seed, "reduce")
    part = GenePartition.from_fractions(data.m, cfg.fractions, stream.derive("partition").numpy())
    red = run_reduction(data, part, stream.derive("reduction"), cfg.reduction)
    red.noisy.save(args.out)
    doc = red.deltas.as_json(data.taxa)
    doc.update(
        transform=red.transform,
        m_total=data.m,
        q1=red.q1.tolist(),
        q2=red.q2.tolist(),
        seed=args.seed,
    )
    _emit(doc, args.deltas)
    if args.deltas:
        _emit({"out": str(args.out), "deltas": str(args.deltas), "delta_hat": doc["delta_hat"]})


def cmd_infer_triplet(args):
    noisy = SequenceDataset.load(args.__dict__["in"])
    m_total = args.m_total
    if args.deltas:
        side = json.loads(Path(args.deltas).read_text())
        q1, q2 = np.array(side["q1"]), np.array(side["q2"])
        m_total = m_total or side.get("m_total")
    elif args.q1 and args.q2:
        q1, q2 = _indices(args.q1), _indices(args.q2)
    else:
        raise SystemExit("give --deltas or both --q1 and --q2")
    st = quantile_triplet_test(noisy, q1, q2, args.c3, m=m_total or noisy.m)
    _emit(st.as_json(noisy.taxa))


def cmd_infer(args):
    data = SequenceDataset.load(args.__dict__["in"])
    ts, details = infer_all_triplets(data, _pipeline(args), Stream.from_seed(args.seed, "infer"))
    calls = [c.topology.label(data.taxa) for c in details]
    try:
        res = build_from_triplets(ts, args.mode)
    except InconsistentTriplets as exc:
        _emit({"status": "inconsistent", "calls": calls, "witness": [w.label(data.taxa) for w in exc.witness]})
        return 2
    text = res.topology.topology_key()
    if args.out:
        Path(args.out).write_text(text + "\n")
    _emit({"status": "ok", "tree": text, "calls": calls, "dropped": [d.label(data.taxa) for d in res.dropped]})


def cmd_experiment(args):
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.trials is not None:
        cfg.trials = args.trials

    def progress(p):
        print(json.dumps({k: p[k] for k in ("f", "m", "k", "success", "ci_low", "ci_high", "status")}),
              file=sys.stderr)

    res = harness.success_curve(cfg, threads=args.threads, progress=progress)
    paths = harness.emit_report(res, args.out)
    _emit({k: str(v) for k, v in paths.items()})


def cmd_identifiability(args):
    S = _species_tree(args)
    _emit(harness.identifiability_check(S, args.samples, args.seed, medians=args.medians), args.out)


def cmd_msc_density(args):
    S = _species_tree(args)
    M = pairwise_excess_density(S, args.a, args.b)
    doc = {"weights": M.weights.tolist(), "bounds": [float(b) for b in M.bounds], "rates": M.rates.tolist()}
    if args.x:
        xs = np.array([float(v) for v in args.x.split(",")])
        doc["x"] = xs.tolist()
        doc["pdf"] = M.pdf(xs).tolist()
        doc["cdf"] = M.cdf(xs).tolist()
    _emit(doc)


def cmd_msc_quantile(args):
    S = _species_tree(args)
    M = pairwise_excess_density(S, args.a, args.b)
    alphas = [float(v) for v in args.alpha.split(",")]
    doc = {"alpha": alphas, "quantile": [M.quantile(a) for a in alphas]}
    if args.xi is not None:
        doc["gap"] = [quantile_gap_bounds(M, a, args.xi)._asdict() for a in alphas]
    _emit(doc)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coalfarris", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate MSC-JC sequence data")
    _add_tree_args(p)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--fasta")
    p.add_argument("--gene-trees", help="write the sampled gene trees as Newick, one per line")
    p.set_defaults(func=cmd_simulate)

    def pipeline_args(p):
        p.add_argument("--partition", default="r1=0.1,r2=0.2,q1=0.1,q2=0.6")
        p.add_argument("--c3", type=float, default=1.0)
        p.add_argument("--retries", type=int, default=3)
        p.add_argument("--threshold-source", choices=["first_half", "full"], default="first_half")
        p.add_argument("--no-upper-windows", action="store_true")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("reduce", help="estimate Delta and apply the stochastic Farris transform")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--deltas")
    p.add_argument("--taxa", help="comma-separated three taxa (default: the dataset's)")
    pipeline_args(p)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("infer-triplet", help="quantile triplet test on reduced data")
    p.add_argument("--in", required=True)
    p.add_argument("--q1")
    p.add_argument("--q2")
    p.add_argument("--deltas", help="sidecar from 'reduce' holding q1/q2")
    p.add_argument("--m-total", type=int)
    p.add_argument("--c3", type=float, default=1.0)
    p.set_defaults(func=cmd_infer_triplet)

    p = sub.add_parser("infer", help="infer every triple and assemble the species topology")
    p.add_argument("--in", required=True)
    p.add_argument("--out")
    p.add_argument("--mode", choices=["strict", "repair"], default="strict")
    pipeline_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("experiment", help="success-curve experiment")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, help=f"worker threads (default ${harness.THREADS_ENV} or 1)")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("identifiability", help="Monte-Carlo identifiability check")
    _add_tree_args(p)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--medians", choices=["analytic", "empirical"], default="analytic")
    p.add_argument("--out")
    p.set_defaults(func=cmd_identifiability)

    p = sub.add_parser("msc", help="analytic pairwise excess density")
    msub = p.add_subparsers(dest="msc_command", required=True)
    for name, func in (("density", cmd_msc_density), ("quantile", cmd_msc_quantile)):
        q = msub.add_parser(name)
        _add_tree_args(q)
        q.add_argument("--a", required=True, help="taxon label")
        q.add_argument("--b", required=True, help="taxon label")
        if name == "density":
            q.add_argument("--x", help="comma-separated evaluation points")
        else:
            q.add_argument("--alpha", required=True, help="comma-separated levels in [0, 1)")
            q.add_argument("--xi", type=float, help="also report quantile gaps of width xi")
        q.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (EmptySelection, EstimationFailure) as exc:
        print(f"coalfarris: reduction failed: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError) as exc:
        print(f"coalfarris: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
