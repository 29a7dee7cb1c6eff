"""Experiment orchestration: configuration, seeding, parallel trials, reports.

Five canned experiments probe the finite-network-to-limit pipeline from
different angles:

* ``input_concentration``: gap between the integrated synaptic input and its
  compensator at the horizon, against the explicit 1/sqrt(N) envelope.
* ``initial_data``: distance between an iid empirical measure and the product
  cell measure, against 2/sqrt(N).
* ``convergence``: distance between the terminal empirical measure and the
  limit solve, fitted for a negative log-log slope (trend only; no rate is
  asserted).
* ``coupling``: pathwise distance between the network and the auxiliary
  mean-field-driven system under common Poisson streams.
* ``dual_regularity``: norms of the backward dual solution against the
  stability constants.

Every random draw descends from the master seed through counter-keyed
splits, so results are independent of worker count and of the trial budget:
trial k uses the same randomness whether 8 or 800 trials are requested.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Optional, Sequence

import numpy as np

from .model import make_model
from .graphon import (Partition, StepGraphon, WeightMatrix,
                      gen_uniform_attachment, gen_w_random, kernel_norms,
                      modulus_of_continuity)
from .meanfield import (InputField, initial_law, kappa_constants,
                        solve_dual_backward, solve_meanfield)
from .metrics import h11_distance, phi_w_norm
from .netsim import (coupling_distance, extended_empirical_measure,
                     poisson_streams, simulate_auxiliary, simulate_network)

__all__ = ["ExperimentConfig", "ExperimentReport", "run_experiment",
           "emit_report", "render_figures", "default_config", "EXPERIMENTS"]

EXPERIMENTS = ("convergence", "input_concentration", "initial_data",
               "coupling", "dual_regularity")

# reserved spawn-key tags; stream seeds use the neuron index, so tags start
# far above any plausible network size
TAG_X0 = 1 << 20
TAG_WEIGHTS = TAG_X0 + 1

DEFAULT_N_LIST = (50, 100, 200, 400, 800, 1600)
DEFAULT_TRIALS = 64
DEFAULT_MODEL = {
    "family_f": "sigmoid", "params_f": {"f_max": 1.0, "theta": 0.5, "s": 0.2},
    "family_b": "tanh_leak",
    "params_b": {"beta": 0.5, "x_rest": 0.0, "sigma_b": 1.0},
}
DEFAULT_X0 = {"kind": "two_point", "a": -0.3, "b": 0.3, "p": 0.5}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: dict
    kernel: dict
    n_list: tuple
    trials: int
    T: float
    dt: float
    master_seed: int
    out_dir: str
    m_cells: int = 128
    x0: dict = dataclass_field(default_factory=lambda: dict(DEFAULT_X0))
    weight_mode: str = "bernoulli"
    particle_cap: Optional[int] = 128
    workers: Optional[int] = None
    event_budget: float = 5e7

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; "
                             f"choose one of {EXPERIMENTS}")
        nl = tuple(int(n) for n in self.n_list)
        if not nl or any(n < 1 for n in nl) or any(
                b <= a for a, b in zip(nl, nl[1:])):
            raise ValueError("N-list must be nonempty and strictly increasing")
        object.__setattr__(self, "n_list", nl)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def to_json(self) -> dict:
        return {
            "experiment": self.experiment, "model": self.model,
            "kernel": self.kernel, "n_list": list(self.n_list),
            "trials": self.trials, "T": self.T, "dt": self.dt,
            "master_seed": self.master_seed, "out_dir": self.out_dir,
            "m_cells": self.m_cells, "x0": self.x0,
            "weight_mode": self.weight_mode,
            "particle_cap": self.particle_cap,
            "event_budget": self.event_budget,
        }

    @classmethod
    def from_json(cls, data) -> "ExperimentConfig":
        if isinstance(data, str):
            data = json.loads(data)
        data = dict(data)
        data["n_list"] = tuple(data["n_list"])
        data.setdefault("workers", None)
        return cls(**data)


def default_config(experiment: str, out_dir: str, **overrides) -> ExperimentConfig:
    """Desk-scale configuration for one of the canned experiments."""
    kernel = {"family": "uniform_attachment_limit"}
    if experiment in ("input_concentration", "initial_data", "dual_regularity"):
        kernel = {"family": "constant", "w0": 1.0}
    base = dict(
        experiment=experiment, model=dict(DEFAULT_MODEL), kernel=kernel,
        n_list=DEFAULT_N_LIST, trials=DEFAULT_TRIALS, T=1.0, dt=1e-3,
        master_seed=2024, out_dir=out_dir)
    if experiment == "input_concentration":
        base.update(n_list=(64, 256, 1024), trials=200)
    elif experiment == "initial_data":
        base.update(n_list=(100, 400, 1600), trials=200)
    elif experiment == "dual_regularity":
        base.update(n_list=(128,), trials=1)
    base.update(overrides)
    return ExperimentConfig(**base)


@dataclass(frozen=True)
class ExperimentReport:
    """Raw rows plus aggregates; the aggregates never contain information
    that is not recomputable from the rows."""

    experiment: str
    metric: str
    rows: tuple            # dicts: experiment, N, trial, t, metric, value, bound, seed
    aggregates: tuple      # dicts: N, n_trials, mean, stderr, bound
    slope: Optional[dict]  # OLS fit of log mean on log N
    passed: Optional[bool]
    config: ExperimentConfig


# ---------------------------------------------------------------------------
# kernel / weight plumbing

def build_kernel(spec: dict, m: int) -> StepGraphon:
    family = spec["family"]
    if family == "constant":
        return StepGraphon.from_kernel("constant", m, w0=spec["w0"])
    if family == "uniform_attachment_limit":
        return StepGraphon.from_kernel("uniform_attachment_limit", m)
    raise ValueError(f"unknown kernel family {family!r}")


def draw_weights(spec: dict, n: int, seed, mode: str) -> WeightMatrix:
    if spec["family"] == "uniform_attachment_limit":
        return gen_uniform_attachment(n, seed)
    kernel = build_kernel(spec, 1)
    return gen_w_random(kernel, n, seed, mode=mode)


def _weight_sup_bound(spec: dict, mode: str) -> float:
    """A.s. bound on |w_{ij}| knowable before any matrix is drawn."""
    if spec["family"] == "uniform_attachment_limit" or mode == "bernoulli":
        return 1.0
    return kernel_norms(build_kernel(spec, 1))["sup"]


def _x0_rng(master: int, N: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master, spawn_key=(N, trial, TAG_X0))
    return np.random.Generator(np.random.Philox(ss))


def _weights_seed(master: int, N: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(N, trial, TAG_WEIGHTS))


def _seed_label(master: int, N: int, trial: int) -> str:
    return f"{master}:{N}:{trial}"


# ---------------------------------------------------------------------------
# per-trial workers (top level: must pickle)

def _trial_input_concentration(payload) -> float:
    cfg, N, trial = payload["cfg"], payload["N"], payload["trial"]
    model = make_model(cfg["model"])
    law = initial_law(cfg["x0"])
    w = draw_weights(cfg["kernel"], N, _weights_seed(cfg["master_seed"], N, trial),
                     cfg["weight_mode"])
    x0 = law.sample(_x0_rng(cfg["master_seed"], N, trial), N)
    streams = poisson_streams(cfg["master_seed"], N, trial, cfg["T"],
                              model.bounds.sup_f)
    log = simulate_network(model, w, x0, cfg["T"], streams,
                           sample_times=np.array([0.0, cfg["T"]]))
    compensator = (w.entries @ log.F[-1]) / N
    return float(np.mean(np.abs(log.H[-1] - compensator)))


def _trial_initial_data(payload) -> float:
    cfg, N, trial = payload["cfg"], payload["N"], payload["trial"]
    law = initial_law(cfg["x0"])
    xs = law.sample(_x0_rng(cfg["master_seed"], N, trial), N)
    emp = extended_empirical_measure(xs, Partition.identity(N))
    return h11_distance(emp, law.measure(N)).value


def _trial_convergence(payload) -> float:
    cfg, N, trial = payload["cfg"], payload["N"], payload["trial"]
    model = make_model(cfg["model"])
    law = initial_law(cfg["x0"])
    w = draw_weights(cfg["kernel"], N, _weights_seed(cfg["master_seed"], N, trial),
                     cfg["weight_mode"])
    x0 = law.sample(_x0_rng(cfg["master_seed"], N, trial), N)
    streams = poisson_streams(cfg["master_seed"], N, trial, cfg["T"],
                              model.bounds.sup_f)
    log = simulate_network(model, w, x0, cfg["T"], streams,
                           sample_times=np.array([0.0, cfg["T"]]))
    emp = extended_empirical_measure(log.final_state(), Partition.identity(N))
    limit = payload["limit_measure"]
    return h11_distance(emp, limit).value


def _trial_coupling(payload) -> float:
    cfg, N, trial = payload["cfg"], payload["N"], payload["trial"]
    model = make_model(cfg["model"])
    law = initial_law(cfg["x0"])
    w = draw_weights(cfg["kernel"], N, _weights_seed(cfg["master_seed"], N, trial),
                     cfg["weight_mode"])
    x0 = law.sample(_x0_rng(cfg["master_seed"], N, trial), N)
    streams = poisson_streams(cfg["master_seed"], N, trial, cfg["T"],
                              model.bounds.sup_f)
    kernel = StepGraphon.from_kernel(*payload["kernel_tag"])
    field = InputField(*payload["field_arrays"])
    part = Partition.identity(N)
    samples = np.linspace(0.0, cfg["T"], 257)
    log_net = simulate_network(model, w, x0, cfg["T"], streams,
                               sample_times=samples)
    log_aux = simulate_auxiliary(model, kernel, field, x0, part, streams,
                                 sample_times=samples)
    return coupling_distance(log_net, log_aux)


_TRIAL_FN = {
    "input_concentration": _trial_input_concentration,
    "initial_data": _trial_initial_data,
    "convergence": _trial_convergence,
    "coupling": _trial_coupling,
}


# ---------------------------------------------------------------------------
# orchestration

def _estimate_events(config: ExperimentConfig) -> float:
    model = make_model(config.model)
    per_sim = sum(config.n_list) * config.trials * model.bounds.sup_f * config.T
    factor = {"convergence": 1.0, "input_concentration": 1.0,
              "coupling": 2.0, "initial_data": 0.0, "dual_regularity": 0.0}
    return per_sim * factor[config.experiment]


def _solve_limit(config: ExperimentConfig):
    model = make_model(config.model)
    kernel = build_kernel(config.kernel, config.m_cells)
    mu0 = initial_law(config.x0).measure(config.m_cells)
    return solve_meanfield(model, kernel, mu0, config.T, config.dt,
                           snapshot_times=(0.0, config.T),
                           particle_cap=config.particle_cap)


def _run_pool(fn, payloads, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, payloads, chunksize=1))


def _ols_slope(ns, means):
    """OLS of log mean on log N; normal-approximation 95% band."""
    pos = [(n, m) for n, m in zip(ns, means) if m > 0]
    if len(pos) < 2:
        return None
    lx = np.log([p[0] for p in pos])
    ly = np.log([p[1] for p in pos])
    vx = lx - lx.mean()
    slope = float(np.dot(vx, ly) / np.dot(vx, vx))
    intercept = float(ly.mean() - slope * lx.mean())
    resid = ly - (intercept + slope * lx)
    dof = len(pos) - 2
    se = float(np.sqrt(np.dot(resid, resid) / dof / np.dot(vx, vx))) if dof > 0 else 0.0
    return {"slope": slope, "intercept": intercept, "stderr": se,
            "ci_low": slope - 1.96 * se, "ci_high": slope + 1.96 * se}


_METRIC_ID = {
    "input_concentration": "input_gap_l1",
    "initial_data": "h11_empirical_gap",
    "convergence": "h11_state_gap",
    "coupling": "coupling_sup_mean",
}


def _bound_fn(config: ExperimentConfig):
    """Per-N bound computed from the manifest alone, or None."""
    if config.experiment == "input_concentration":
        sup_f = make_model(config.model).bounds.sup_f
        w_max = _weight_sup_bound(config.kernel, config.weight_mode)
        return lambda N: math.sqrt(w_max * w_max * sup_f * config.T / N)
    if config.experiment == "initial_data":
        return lambda N: 2.0 / math.sqrt(N)
    return None


def _run_mc_experiment(config: ExperimentConfig) -> ExperimentReport:
    metric = _METRIC_ID[config.experiment]
    fn = _TRIAL_FN[config.experiment]
    extra = {}
    if config.experiment == "convergence":
        extra["limit_measure"] = _solve_limit(config).snapshot_at(config.T)
    elif config.experiment == "coupling":
        field = _solve_limit(config).field
        extra["field_arrays"] = (field.t_grid, field.r, field.h, field.H)
        k = config.kernel
        extra["kernel_tag"] = (
            ("constant", config.m_cells, k["w0"]) if k["family"] == "constant"
            else ("uniform_attachment_limit", config.m_cells))
    cfg = config.to_json()
    t_col = 0.0 if config.experiment == "initial_data" else config.T

    payloads = [dict(cfg=cfg, N=N, trial=tr, **extra)
                for N in config.n_list for tr in range(config.trials)]
    values = _run_pool(fn, payloads, config.workers)

    bound = _bound_fn(config)
    rows, aggregates = [], []
    it = iter(values)
    for N in config.n_list:
        vals = np.array([next(it) for _ in range(config.trials)])
        b = bound(N) if bound else None
        for tr, v in enumerate(vals):
            rows.append({"experiment": config.experiment, "N": N, "trial": tr,
                         "t": t_col, "metric": metric, "value": float(v),
                         "bound": b,
                         "seed": _seed_label(config.master_seed, N, tr)})
        stderr = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        aggregates.append({"N": N, "n_trials": int(vals.size),
                           "mean": float(vals.mean()), "stderr": stderr,
                           "bound": b})
    slope = _ols_slope([a["N"] for a in aggregates],
                       [a["mean"] for a in aggregates])
    passed = None
    if bound is not None:
        passed = all(a["mean"] <= a["bound"] for a in aggregates)
    return ExperimentReport(config.experiment, metric, tuple(rows),
                            tuple(aggregates), slope, passed, config)


def _unit_phi_w_terminal(m: int, x_grid: np.ndarray, eps_w) -> np.ndarray:
    """xi-independent smooth slice normalized to unit norm."""
    g = np.exp(-x_grid**2)
    sl = np.broadcast_to(g, (m, x_grid.size)).copy()
    nrm = phi_w_norm(sl, float(x_grid[1] - x_grid[0]), eps_w)
    return sl / nrm


def _run_dual_regularity(config: ExperimentConfig) -> ExperimentReport:
    model = make_model(config.model)
    kernel = build_kernel(config.kernel, config.m_cells)
    sol = _solve_limit(config)
    field = sol.field

    pad = 1.0 + model.bounds.sup_b * config.T
    L = float(field.max_abs_H()) + max(3.0, pad)
    dx = 5e-3
    nx = int(round(2 * L / dx)) + 1
    x_grid = np.linspace(-L, L, nx)
    eps_w = modulus_of_continuity(kernel)
    phibar = _unit_phi_w_terminal(config.m_cells, x_grid, eps_w)
    phi = solve_dual_backward(model, field, phibar, x_grid, config.T,
                              config.dt, store_every=10)
    dx_eff = float(x_grid[1] - x_grid[0])
    sup_norm = max(phi_w_norm(sl, dx_eff, eps_w) for sl in phi.slices)
    sup_ds = float(phi.stats["max_ds"])

    kn = kernel_norms(kernel)
    kr = kappa_constants(model.bounds, kn, eps_w=eps_w, t=config.T)
    b1, b2 = 1.05 * kr.kappa, 1.05 * kr.kappa4
    seed = _seed_label(config.master_seed, config.m_cells, 0)
    rows = (
        {"experiment": config.experiment, "N": config.m_cells, "trial": 0,
         "t": config.T, "metric": "phi_w_sup", "value": sup_norm,
         "bound": b1, "seed": seed},
        {"experiment": config.experiment, "N": config.m_cells, "trial": 0,
         "t": config.T, "metric": "dphi_sup", "value": sup_ds,
         "bound": b2, "seed": seed},
    )
    aggregates = tuple(
        {"N": config.m_cells, "n_trials": 1, "mean": r["value"],
         "stderr": 0.0, "bound": r["bound"], "metric": r["metric"]}
        for r in rows)
    passed = sup_norm <= b1 and sup_ds <= b2
    return ExperimentReport(config.experiment, "dual_norms", tuple(rows),
                            aggregates, None, passed, config)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run one canned experiment and write its report files.

    Rejects configurations whose projected candidate-event count exceeds the
    configured budget before any simulation starts.
    """
    est = _estimate_events(config)
    if est > config.event_budget:
        raise ValueError(
            f"projected candidate events {est:.3g} exceed the budget "
            f"{config.event_budget:.3g}; shrink the N-list, trials, or T")
    if config.experiment == "dual_regularity":
        report = _run_dual_regularity(config)
    else:
        report = _run_mc_experiment(config)
    emit_report(report)
    return report


# ---------------------------------------------------------------------------
# reporting

def _code_version() -> str:
    from . import __version__
    return __version__


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def emit_report(report: ExperimentReport, formats=("csv", "json")):
    """Write raw.csv, summary.json, and manifest.json into the out dir.

    Deterministic byte-for-byte: rerunning the same config reproduces the
    files exactly.  Bounds come from the manifest, never from simulation
    output.
    """
    out = report.config.out_dir
    os.makedirs(out, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(out, "raw.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["experiment", "N", "trial", "t", "metric", "value",
                        "bound", "seed"])
            for r in report.rows:
                w.writerow([r["experiment"], r["N"], r["trial"], _fmt(r["t"]),
                            r["metric"], _fmt(r["value"]), _fmt(r["bound"]),
                            r["seed"]])
        written.append(path)
    if "json" in formats:
        spath = os.path.join(out, "summary.json")
        summary = {
            "experiment": report.experiment, "metric": report.metric,
            "aggregates": list(report.aggregates), "slope": report.slope,
            "passed": report.passed,
        }
        with open(spath, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(spath)
        mpath = os.path.join(out, "manifest.json")
        manifest = {
            "code_version": _code_version(),
            "config": report.config.to_json(),
            "seed_scheme": ("streams: SeedSequence(master, spawn_key=(N, trial, "
                            "neuron)); x0 tag 2^20; weights tag 2^20+1"),
        }
        with open(mpath, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(mpath)
    return written


def load_report_dir(out_dir: str):
    """(rows, summary, manifest) read back from an emitted report."""
    rows = []
    with open(os.path.join(out_dir, "raw.csv"), newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        for rec in rd:
            d = dict(zip(header, rec))
            d["N"] = int(d["N"])
            d["trial"] = int(d["trial"])
            d["t"] = float(d["t"]) if d["t"] else None
            d["value"] = float(d["value"]) if d["value"] else None
            d["bound"] = float(d["bound"]) if d["bound"] else None
            rows.append(d)
    with open(os.path.join(out_dir, "summary.json")) as fh:
        summary = json.load(fh)
    mpath = os.path.join(out_dir, "manifest.json")
    manifest = None
    if os.path.exists(mpath):
        with open(mpath) as fh:
            manifest = json.load(fh)
    return rows, summary, manifest


def render_figures(out_dir: str) -> list:
    """Render PNG figures next to the delimited output of a report dir.

    The CSV stays the normative artifact; the figures are a reading aid:
    a log-log scaling plot (mean with standard-error bars, bound curve when
    declared, fitted slope in the legend) plus a per-trial scatter.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, summary, _ = load_report_dir(out_dir)
    aggs = summary["aggregates"]
    exp = summary["experiment"]
    paths = []

    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    if exp == "dual_regularity":
        names = [a["metric"] for a in aggs]
        vals = [a["mean"] for a in aggs]
        bnds = [a["bound"] for a in aggs]
        ypos = np.arange(len(names))
        ax.barh(ypos - 0.18, vals, height=0.34, label="measured")
        ax.barh(ypos + 0.18, bnds, height=0.34, label="bound")
        ax.set_yticks(ypos, names)
        ax.set_xscale("log")
        ax.set_xlabel("value")
    else:
        ns = np.array([a["N"] for a in aggs], dtype=float)
        means = np.array([a["mean"] for a in aggs])
        errs = np.array([a["stderr"] for a in aggs])
        ax.errorbar(ns, means, yerr=errs, marker="o", capsize=3,
                    label=summary["metric"])
        if aggs and aggs[0].get("bound") is not None:
            ax.plot(ns, [a["bound"] for a in aggs], "k--", label="bound")
        sl = summary.get("slope")
        if sl:
            fit = np.exp(sl["intercept"]) * ns ** sl["slope"]
            ax.plot(ns, fit, ":", label=f"slope {sl['slope']:.3f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("N")
        ax.set_ylabel("mean value")
    ax.set_title(exp)
    ax.legend()
    fig.tight_layout()
    p1 = os.path.join(out_dir, "scaling.png")
    fig.savefig(p1, dpi=130)
    plt.close(fig)
    paths.append(p1)

    if exp != "dual_regularity" and rows:
        fig, ax = plt.subplots(figsize=(6.4, 4.4))
        ns = np.array([r["N"] for r in rows], dtype=float)
        vals = np.array([r["value"] for r in rows], dtype=float)
        jitter = 1.0 + 0.06 * (np.arange(len(rows)) % 7 - 3) / 3.0
        ax.plot(ns * jitter, vals, ".", alpha=0.35, markersize=4)
        ax.set_xscale("log")
        if np.all(vals > 0):
            ax.set_yscale("log")
        ax.set_xlabel("N")
        ax.set_ylabel("per-trial value")
        ax.set_title(f"{exp}: individual trials")
        fig.tight_layout()
        p2 = os.path.join(out_dir, "trials.png")
        fig.savefig(p2, dpi=130)
        plt.close(fig)
        paths.append(p2)
    return paths
