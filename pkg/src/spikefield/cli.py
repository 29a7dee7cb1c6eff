"""Command-line entry points.

Subcommands mirror the library surface: simulate a finite network, solve the
limit equation, query graphon norms and generators, evaluate measure
distances, and run or re-render the canned experiments.  Configs are JSON,
tabular outputs CSV; `experiment run` exits nonzero when a declared bound is
violated.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .model import make_model
from .graphon import (Partition, StepGraphon, WeightMatrix, cut_distance,
                      gen_uniform_attachment, gen_w_random, kernel_norms,
                      op_norm_inf_to_1, step_graphon)
from .meanfield import initial_law, solve_meanfield
from .metrics import h11_distance, second_moment
from .netsim import poisson_streams, simulate_network
from . import lab


def _load_json_arg(text: str):
    """Accept inline JSON or a path to a JSON file."""
    if os.path.exists(text):
        with open(text) as fh:
            return json.load(fh)
    return json.loads(text)


def _cmd_simulate(args) -> int:
    cfg = _load_json_arg(args.config)
    model = make_model(cfg["model"])
    n = int(cfg["n"])
    T = float(cfg.get("T", 1.0))
    seed = int(cfg.get("seed", 0))
    law = initial_law(cfg.get("x0", dict(lab.DEFAULT_X0)))
    w = lab.draw_weights(cfg.get("kernel", {"family": "constant", "w0": 1.0}),
                         n, lab._weights_seed(seed, n, 0),
                         cfg.get("weight_mode", "bernoulli"))
    x0 = law.sample(lab._x0_rng(seed, n, 0), n)
    streams = poisson_streams(seed, n, 0, T, model.bounds.sup_f)
    n_samp = int(cfg.get("n_samples", 129))
    log = simulate_network(model, w, x0, T, streams,
                           sample_times=np.linspace(0.0, T, n_samp),
                           delta=float(cfg.get("delta", 1e-3)))
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    states = os.path.join(out, "states.csv")
    spikes = os.path.join(out, "spikes.csv")
    log.to_csv(states, spikes)
    manifest = {"model": cfg["model"], "n": n, "T": T, "seed": seed,
                "event_counts": log.event_counts,
                "seed_scheme": "SeedSequence(seed, spawn_key=(n, 0, neuron))"}
    with open(os.path.join(out, "simulate_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {states} and {spikes} "
          f"({log.event_counts['n_spikes']} spikes)")
    return 0


def _cmd_solve_pde(args) -> int:
    cfg = _load_json_arg(args.config)
    model = make_model(cfg["model"])
    m = int(cfg.get("m_cells", 128))
    kernel = lab.build_kernel(cfg.get("kernel", {"family": "constant", "w0": 1.0}), m)
    T = float(cfg.get("T", 1.0))
    dt = float(cfg.get("dt", 1e-3))
    law = initial_law(cfg.get("x0", dict(lab.DEFAULT_X0)))
    snaps = cfg.get("snapshot_times", [0.0, T])
    sol = solve_meanfield(model, kernel, law.measure(m), T, dt,
                          snapshot_times=snaps,
                          particle_cap=cfg.get("particle_cap", 128))
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    for t, snap in zip(sol.times, sol.snapshots):
        path = os.path.join(out, f"measure_t{t:g}.csv")
        snap.to_csv(path)
        print(f"wrote {path} (mass defect {snap.probability_defect():.2e}, "
              f"second moment {second_moment(snap):.6g})")
    fpath = os.path.join(out, "field.csv")
    sol.field.to_csv(fpath)
    print(f"wrote {fpath}; mass drift {sol.stats['mass_drift']:.3e}")
    return 0


def _load_step_kernel(path) -> StepGraphon:
    """Load a step kernel, embedding weight-matrix CSVs along the way.

    Both on-disk formats are self-describing: step kernels start with an
    ``m,<count>`` header, weight matrices with ``n,<count>``.
    """
    with open(path) as fh:
        tag = fh.readline().split(",", 1)[0].strip()
    if tag == "n":
        w = WeightMatrix.from_csv(path)
        return step_graphon(w, Partition.identity(w.n))
    return StepGraphon.from_csv(path)


def _cmd_graphon(args) -> int:
    if args.action == "norms":
        g = _load_step_kernel(args.input)
        res = op_norm_inf_to_1(g)
        kn = kernel_norms(g)
        print(json.dumps({"op_norm": res.value, "exact": res.exact,
                          "sup": kn["sup"], "linf_l1": kn["linf_l1"]},
                         sort_keys=True))
        return 0
    if args.action == "distance":
        g1 = _load_step_kernel(args.input)
        g2 = _load_step_kernel(args.other)
        res = cut_distance(g1, g2, seed=args.seed)
        print(json.dumps({"cut_distance": res.value, "exact": res.exact},
                         sort_keys=True))
        return 0
    if args.action == "generate":
        n = args.n
        if args.family == "uniform_attachment":
            w = gen_uniform_attachment(n, args.seed)
        elif args.family == "constant":
            k = StepGraphon.from_kernel("constant", 1, w0=args.w0)
            w = gen_w_random(k, n, args.seed, mode=args.mode)
        else:
            k = StepGraphon.from_kernel("uniform_attachment_limit", max(n, 2))
            w = gen_w_random(k, n, args.seed, mode=args.mode)
        w.to_csv(args.out)
        g = step_graphon(w, Partition.identity(n))
        print(f"wrote {args.out} (n={n}, max |w| = {w.max_abs:g}, "
              f"embedded step kernel sup = {g.values.max():g})")
        return 0
    raise ValueError(f"unknown graphon action {args.action!r}")


def _cmd_metric(args) -> int:
    from .meanfield import SpatialMeasure

    mu1 = SpatialMeasure.from_csv(args.input)
    mu2 = SpatialMeasure.from_csv(args.other)
    if args.name == "h11":
        rep = h11_distance(mu1, mu2, K=args.terms)
    else:
        raise ValueError(f"unknown metric {args.name!r}")
    print(rep.to_json_str())
    return 0


def _cmd_experiment(args) -> int:
    if args.action == "run":
        cfg = lab.ExperimentConfig.from_json(_load_json_arg(args.config))
        report = lab.run_experiment(cfg)
        print(f"experiment {report.experiment}: "
              f"{len(report.rows)} rows -> {cfg.out_dir}")
        if report.slope:
            print(f"fitted slope {report.slope['slope']:.4f} "
                  f"+- {report.slope['stderr']:.4f}")
        if report.passed is False:
            print("declared bound VIOLATED", file=sys.stderr)
            return 2
        return 0
    if args.action == "report":
        paths = lab.render_figures(args.dir)
        rows, summary, _ = lab.load_report_dir(args.dir)
        print(f"{summary['experiment']}: {len(rows)} raw rows")
        for p in paths:
            print(f"wrote {p}")
        if summary.get("passed") is False:
            print("declared bound VIOLATED", file=sys.stderr)
            return 2
        return 0
    raise ValueError(f"unknown experiment action {args.action!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="spikefield",
        description="finite spiking networks, their mean-field limit, and "
                    "the distances between them")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one finite-network simulation")
    p.add_argument("config", help="JSON config (inline or path): model, n, "
                                  "T, seed, kernel, x0")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("solve-pde", help="solve the limit equation")
    p.add_argument("config", help="JSON config: model, kernel, m_cells, T, dt")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(fn=_cmd_solve_pde)

    p = sub.add_parser("graphon", help="kernel norms, distances, generators")
    gsub = p.add_subparsers(dest="action", required=True)
    g = gsub.add_parser("norms", help="operator norm and sup norms")
    g.add_argument("input", help="step-kernel or weight-matrix CSV")
    g = gsub.add_parser("distance", help="cut distance between two kernels")
    g.add_argument("input")
    g.add_argument("other")
    g.add_argument("--seed", type=int, default=0)
    g = gsub.add_parser("generate", help="draw a weight matrix")
    g.add_argument("family",
                   choices=["uniform_attachment", "constant", "w_random"])
    g.add_argument("n", type=int)
    g.add_argument("out", help="output CSV path")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--w0", type=float, default=1.0)
    g.add_argument("--mode", choices=["bernoulli", "deterministic"],
                   default="bernoulli")
    p.set_defaults(fn=_cmd_graphon)

    p = sub.add_parser("metric", help="distance between two stored measures")
    p.add_argument("name", choices=["h11"])
    p.add_argument("input", help="measure CSV")
    p.add_argument("other", help="measure CSV")
    p.add_argument("--terms", type=int, default=20,
                   help="periodization terms")
    p.set_defaults(fn=_cmd_metric)

    p = sub.add_parser("experiment", help="run or re-render an experiment")
    esub = p.add_subparsers(dest="action", required=True)
    e = esub.add_parser("run", help="run from a JSON config")
    e.add_argument("config")
    e = esub.add_parser("report", help="render figures for an emitted report")
    e.add_argument("dir")
    p.set_defaults(fn=_cmd_experiment)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
