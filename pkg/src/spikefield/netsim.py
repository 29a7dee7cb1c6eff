"""Event-driven simulation of the finite spiking network.

Each neuron carries an independent marked Poisson stream at the constant
rate Z_max = sup f; a candidate event (s, z) of neuron i becomes a spike
exactly when z <= f(X_i(s-)), the classic thinning construction, so the
simulated law is exact up to the (fourth-order) ODE error between events.
Per-neuron streams rather than one aggregate stream make common-random-
number coupling against the auxiliary mean-field-driven system trivial:
both runs consume the same events in the same order.

Between candidates all potentials follow dX/dt = b(X), integrated by RK4
on pieces that never exceed the configured substep and that break at
absolute multiples of it, so two runs with identical inputs produce
bit-identical trajectories.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np

from .model import ModelFunctions
from .graphon import Partition, StepGraphon, WeightMatrix, cell_average_matrix
from .meanfield import InputField, SpatialMeasure

__all__ = [
    "PoissonStream", "NetworkState", "TrajectoryLog", "poisson_streams",
    "simulate_network", "simulate_auxiliary", "coupling_distance",
    "extended_empirical_measure", "integrated_input_field",
]

DELTA_DEFAULT = 1e-3    # max RK4 substep between candidate events


class PoissonStream:
    """Marked Poisson stream of one neuron: events (t, z) on [0, T] x [0, z_max].

    Event times are strictly increasing with Exp(z_max) gaps; marks are
    uniform on [0, z_max].  The list is materialized lazily and cached, and
    is a pure function of (seed, T, z_max).
    """

    def __init__(self, neuron: int, T: float, z_max: float, seed):
        self.neuron = int(neuron)
        self.T = float(T)
        self.z_max = float(z_max)
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(int(seed))
        self.seed = seed
        self._events = None

    def events(self):
        """(times, marks) arrays, sorted by time."""
        if self._events is None:
            if self.z_max <= 0.0 or self.T <= 0.0:
                self._events = (np.empty(0), np.empty(0))
            else:
                rng = np.random.Generator(np.random.Philox(self.seed))
                times = []
                t = 0.0
                block = max(16, int(self.z_max * self.T * 1.5) + 8)
                while t <= self.T:
                    gaps = rng.exponential(1.0 / self.z_max, size=block)
                    for g in gaps:
                        t += g
                        if t > self.T:
                            break
                        times.append(t)
                t_arr = np.array(times)
                z_arr = rng.uniform(0.0, self.z_max, size=t_arr.size)
                self._events = (t_arr, z_arr)
        return self._events


def poisson_streams(master_seed: int, N: int, trial: int, T: float,
                    z_max: float) -> tuple:
    """One stream per neuron, derived as (master, key=(N, trial, neuron)).

    The spawn key makes every (network size, trial, neuron) triple an
    independent, reproducible stream.
    """
    return tuple(
        PoissonStream(i, T, z_max,
                      np.random.SeedSequence(master_seed, spawn_key=(N, trial, i)))
        for i in range(N))


@dataclass(frozen=True)
class NetworkState:
    t: float
    x: np.ndarray


@dataclass(frozen=True)
class TrajectoryLog:
    """Sampled trajectory of one simulation run.

    states[s, i] is X_i at sample_times[s]; H[s, i] the integrated synaptic
    input of neuron i (piecewise constant, jumping by w_{i,j}/N at spikes of
    j for the network run; the running integral of the mean-field drive for
    the auxiliary run); F[s, i] the accumulated integral of f(X_i).  Spike
    rows are sorted by time.
    """

    sample_times: np.ndarray
    states: np.ndarray
    H: np.ndarray
    F: np.ndarray
    spike_t: np.ndarray
    spike_neuron: np.ndarray
    spike_z: np.ndarray
    T: float
    event_counts: dict = dataclass_field(default_factory=dict)
    meta: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        st = np.asarray(self.sample_times, dtype=float)
        xs = np.atleast_2d(np.asarray(self.states, dtype=float))
        if xs.shape[0] != st.shape[0]:
            raise ValueError("states misaligned with sample times")
        object.__setattr__(self, "sample_times", st)
        object.__setattr__(self, "states", xs)
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float))
        object.__setattr__(self, "spike_t", np.asarray(self.spike_t, dtype=float))
        object.__setattr__(self, "spike_neuron",
                           np.asarray(self.spike_neuron, dtype=np.int64))
        object.__setattr__(self, "spike_z", np.asarray(self.spike_z, dtype=float))
        if self.spike_t.size and np.any(np.diff(self.spike_t) < 0):
            raise ValueError("spikes must be sorted by time")

    @property
    def n_neurons(self) -> int:
        return self.states.shape[1]

    def final_state(self) -> NetworkState:
        return NetworkState(float(self.sample_times[-1]), self.states[-1].copy())

    def to_csv(self, states_path, spikes_path):
        with open(states_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "neuron", "x", "H", "F"])
            for s, t in enumerate(self.sample_times):
                for i in range(self.n_neurons):
                    w.writerow([repr(float(t)), i, repr(float(self.states[s, i])),
                                repr(float(self.H[s, i])), repr(float(self.F[s, i]))])
        with open(spikes_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "neuron", "z"])
            for t, i, z in zip(self.spike_t, self.spike_neuron, self.spike_z):
                w.writerow([repr(float(t)), int(i), repr(float(z))])

    @classmethod
    def from_csv(cls, states_path, spikes_path) -> "TrajectoryLog":
        with open(states_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != ["t", "neuron", "x", "H", "F"]:
            raise ValueError("bad states header")
        body = rows[1:]
        ts = np.array([float(r[0]) for r in body])
        ns = np.array([int(r[1]) for r in body])
        n = int(ns.max()) + 1 if ns.size else 0
        t_grid = np.unique(ts)
        S = t_grid.size
        states = np.empty((S, n))
        H = np.empty((S, n))
        F = np.empty((S, n))
        for r in body:
            s = int(np.searchsorted(t_grid, float(r[0])))
            i = int(r[1])
            states[s, i] = float(r[2])
            H[s, i] = float(r[3])
            F[s, i] = float(r[4])
        with open(spikes_path, newline="") as fh:
            srows = list(csv.reader(fh))
        if srows[0] != ["t", "neuron", "z"]:
            raise ValueError("bad spikes header")
        sp_t = np.array([float(r[0]) for r in srows[1:]])
        sp_n = np.array([int(r[1]) for r in srows[1:]], dtype=np.int64)
        sp_z = np.array([float(r[2]) for r in srows[1:]])
        return cls(t_grid, states, H, F, sp_t, sp_n, sp_z,
                   float(t_grid[-1]) if S else 0.0)


# ---------------------------------------------------------------------------
# integration helpers

def _rk4_piece(bfun, x, dt):
    k1 = bfun(x)
    k2 = bfun(x + 0.5 * dt * k1)
    k3 = bfun(x + 0.5 * dt * k2)
    k4 = bfun(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _piece_bounds(t0: float, t1: float, delta: float, extra=()):
    """Breakpoints of [t0, t1]: absolute multiples of delta plus extras.

    Anchoring pieces to the absolute delta grid (rather than splitting each
    interval evenly) keeps the arithmetic of two runs identical whenever
    their stop times agree, which the pathwise-coupling checks rely on.
    """
    if t1 <= t0:
        return [t0, t1]
    lo = int(np.floor(t0 / delta)) + 1
    hi = int(np.ceil(t1 / delta))
    pts = [k * delta for k in range(lo, hi) if t0 < k * delta < t1]
    for e in extra:
        if t0 < e < t1:
            pts.append(e)
    pts = sorted(set(pts))
    return [t0] + pts + [t1]


def _check_stream_ceiling(streams, model):
    """Thinning is only exact when every mark ceiling dominates sup f."""
    lo = model.bounds.sup_f - 1e-12
    for st in streams:
        if st.z_max < lo:
            raise ValueError(
                f"stream for neuron {st.neuron} has z_max={st.z_max:g} "
                f"below sup f = {model.bounds.sup_f:g}")


def _check_finite(x, t):
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise FloatingPointError(
            f"non-finite potential for neuron {bad} at t={t:g}; "
            "reduce the integration substep")


class _Driver:
    """Shared event loop: advances state, fires thinning tests, samples."""

    def __init__(self, model, n, x0, T, streams, sample_times, delta):
        if len(streams) != n:
            raise ValueError(f"need {n} streams, got {len(streams)}")
        self.model = model
        self.n = n
        self.x = np.array(x0, dtype=float).copy()
        if self.x.shape != (n,):
            raise ValueError("x0 has wrong length")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x0 must be finite")
        self.T = float(T)
        self.delta = float(delta)
        if sample_times is None:
            sample_times = np.linspace(0.0, T, 129)
        self.sample_times = np.asarray(sample_times, dtype=float)
        # merged candidate list, ties broken by neuron index
        ts, zs, ids = [], [], []
        for st in streams:
            et, ez = st.events()
            ts.append(et)
            zs.append(ez)
            ids.append(np.full(et.size, st.neuron, dtype=np.int64))
        t_all = np.concatenate(ts) if ts else np.empty(0)
        z_all = np.concatenate(zs) if zs else np.empty(0)
        i_all = np.concatenate(ids) if ids else np.empty(0, dtype=np.int64)
        order = np.lexsort((i_all, t_all))
        self.ev_t, self.ev_z, self.ev_i = t_all[order], z_all[order], i_all[order]

        self.H = np.zeros(n)
        self.F = np.zeros(n)
        self.rec_x = np.empty((self.sample_times.size, n))
        self.rec_H = np.empty((self.sample_times.size, n))
        self.rec_F = np.empty((self.sample_times.size, n))
        self.spikes = []
        self.t = 0.0
        self._next_sample = 0

    def advance(self, t1, drift):
        """Integrate to t1, accumulating the f-integral by trapezoid."""
        pts = _piece_bounds(self.t, t1, self.delta, self.extra_breaks(t1))
        for a, bnd in zip(pts[:-1], pts[1:]):
            dt = bnd - a
            if dt <= 0:
                continue
            f0 = self.model.f(self.x)
            self.x = _rk4_piece(lambda v: drift(v, a), self.x, dt)
            self.F += 0.5 * dt * (f0 + self.model.f(self.x))
        _check_finite(self.x, t1)
        self.t = t1

    def extra_breaks(self, t1):
        return ()

    def record_until(self, t_next, drift):
        """Visit all sample times in (t, t_next]; record at each."""
        while (self._next_sample < self.sample_times.size
               and self.sample_times[self._next_sample] <= t_next):
            ts = self.sample_times[self._next_sample]
            self.advance(ts, drift)
            self.rec_x[self._next_sample] = self.x
            self.rec_H[self._next_sample] = self.H
            self.rec_F[self._next_sample] = self.F
            self._next_sample += 1

    def run(self, drift, on_spike):
        n_spikes = 0
        for t_e, z_e, i_e in zip(self.ev_t, self.ev_z, self.ev_i):
            if t_e > self.T:
                break
            self.record_until(t_e, drift)
            self.advance(t_e, drift)
            if z_e <= self.model.f(self.x[i_e]):
                on_spike(int(i_e))
                self.spikes.append((t_e, int(i_e), float(z_e)))
                n_spikes += 1
        self.record_until(self.T, drift)
        self.advance(self.T, drift)
        return {"n_candidates": int(self.ev_t.size), "n_spikes": n_spikes}

    def log(self, counts, meta) -> TrajectoryLog:
        sp = self.spikes
        return TrajectoryLog(
            self.sample_times.copy(), self.rec_x, self.rec_H, self.rec_F,
            np.array([s[0] for s in sp]),
            np.array([s[1] for s in sp], dtype=np.int64),
            np.array([s[2] for s in sp]),
            self.T, counts, meta)


def simulate_network(model: ModelFunctions, w: WeightMatrix, x0, T: float,
                     seeds, sample_times=None,
                     delta: float = DELTA_DEFAULT) -> TrajectoryLog:
    """Simulate the N-neuron network by thinning.

    seeds: either a sequence of N PoissonStream objects (the coupling-ready
    form) or an integer master seed, from which per-neuron streams at
    z_max = sup f are derived.  A spike of neuron j resets X_j to 0 and
    bumps every other X_i by w_{i,j}/N; the same increment accumulates into
    H_i.  The candidate test uses the left limit: the state advanced to the
    event time, before any jump at that time is applied.
    """
    n = w.n
    if isinstance(seeds, (int, np.integer)):
        streams = poisson_streams(int(seeds), n, 0, T, model.bounds.sup_f)
    else:
        streams = tuple(seeds)
    _check_stream_ceiling(streams, model)
    drv = _Driver(model, n, x0, T, streams, sample_times, delta)
    wn = w.entries / n

    def drift(x, t):
        return model.b(x)

    def on_spike(j):
        drv.x += wn[:, j]
        drv.H += wn[:, j]
        drv.x[j] = 0.0

    counts = drv.run(drift, on_spike)
    return drv.log(counts, {"kind": "network", "n": n, "delta": delta})


class _AuxDriver(_Driver):
    """Driver variant that also splits pieces at rate-field step boundaries
    and integrates the deterministic drive into the H column."""

    def __init__(self, model, n, x0, T, streams, sample_times, delta,
                 field, hbar):
        super().__init__(model, n, x0, T, streams, sample_times, delta)
        self.field = field
        self.hbar = hbar

    def extra_breaks(self, t1):
        tg = self.field.t_grid
        lo = np.searchsorted(tg, self.t, side="right")
        hi = np.searchsorted(tg, t1, side="left")
        return tuple(float(v) for v in tg[lo:hi])

    def advance(self, t1, drift):
        t0 = self.t
        super().advance(t1, drift)
        if t1 <= t0:
            return
        tg = self.field.t_grid
        k0 = self.field._step_index(t0)
        k1 = self.field._step_index(max(t1 - 1e-15, t0))
        if k0 == k1:
            self.H += self.hbar[k0] * (t1 - t0)
        else:
            self.H += self.hbar[k0] * (tg[k0 + 1] - t0)
            for k in range(k0 + 1, k1):
                self.H += self.hbar[k] * (tg[k + 1] - tg[k])
            self.H += self.hbar[k1] * (t1 - tg[k1])


def simulate_auxiliary(model: ModelFunctions, kernel: StepGraphon,
                       rate_field: InputField, x0, partition: Partition,
                       seeds, sample_times=None,
                       delta: float = DELTA_DEFAULT) -> TrajectoryLog:
    """Simulate the auxiliary processes driven by the mean-field input.

    Neuron i receives the deterministic drive
    h_i(t) = (cell average of the kernel over E_i x the rate grid) applied
    to r(t, .), scaled by the 1/m cell width: the exact double integral of
    w(xi, zeta) r(t, zeta) over its own cell, times N.  Spikes reset the
    neuron itself and touch nobody else.  Events come from the SAME streams
    as the paired network run, so paths are coupled pathwise.

    The per-neuron H column of the log holds the running integral of h_i.
    """
    n = partition.n
    if len(x0) != n:
        raise ValueError("x0 length must match the partition")
    if isinstance(seeds, (int, np.integer)):
        streams = poisson_streams(int(seeds), n, 0, rate_field.t_grid[-1],
                                  model.bounds.sup_f)
    else:
        streams = tuple(seeds)
    T = float(streams[0].T)
    if any(abs(st.T - T) > 1e-12 for st in streams):
        raise ValueError("streams disagree on the horizon")
    if T > rate_field.t_grid[-1] + 1e-12:
        raise ValueError("rate field horizon shorter than the simulation")
    _check_stream_ceiling(streams, model)

    m = rate_field.m_cells
    edges = np.arange(m + 1) / m
    rate_cells = np.column_stack([edges[:-1], edges[1:]])
    A = cell_average_matrix(kernel, partition.cells(), rate_cells)  # (n, m)
    hbar = (rate_field.r @ A.T) / m      # (K, n): drive on each field step

    drv = _AuxDriver(model, n, x0, T, streams, sample_times, delta,
                     rate_field, hbar)

    def drift(x, t):
        return model.b(x) + hbar[rate_field._step_index(t)]

    def on_spike(j):
        drv.x[j] = 0.0

    counts = drv.run(drift, on_spike)
    return drv.log(counts, {"kind": "auxiliary", "n": n, "delta": delta,
                            "m_cells": m})


# ---------------------------------------------------------------------------
# derived quantities

def coupling_distance(logA: TrajectoryLog, logB: TrajectoryLog) -> float:
    """Mean over neurons of the clipped sup difference between two runs.

    (1/N) sum_i min(sup_t |X^A_i - X^B_i|, 1), the sup taken over the shared
    sample grid refined by the spike times of both logs, states linearly
    interpolated between samples.
    """
    if logA.n_neurons != logB.n_neurons:
        raise ValueError("logs have different network sizes")
    if (logA.sample_times.shape != logB.sample_times.shape
            or np.any(logA.sample_times != logB.sample_times)):
        raise ValueError("logs must share the sample grid")
    base = logA.sample_times
    grid = np.unique(np.concatenate([base, logA.spike_t, logB.spike_t]))
    grid = grid[(grid >= base[0]) & (grid <= base[-1])]

    def interp_states(log):
        idx = np.clip(np.searchsorted(base, grid, side="right") - 1,
                      0, base.size - 2)
        t0 = base[idx]
        t1 = base[idx + 1]
        wfrac = ((grid - t0) / np.where(t1 > t0, t1 - t0, 1.0))[:, None]
        return (1.0 - wfrac) * log.states[idx] + wfrac * log.states[idx + 1]

    d = np.abs(interp_states(logA) - interp_states(logB))
    per_neuron = np.minimum(d.max(axis=0), 1.0)
    return float(per_neuron.mean())


def extended_empirical_measure(state, partition: Partition) -> SpatialMeasure:
    """One unit atom per neuron, placed in the neuron's partition cell."""
    if isinstance(state, NetworkState):
        t, x = state.t, state.x
    else:
        t, x = 0.0, np.asarray(state, dtype=float)
    if partition.n != x.shape[0]:
        raise ValueError("partition size must match the state")
    return SpatialMeasure(partition.n, partition.pos.copy(), x.copy(),
                          np.ones(partition.n), t)


def integrated_input_field(log: TrajectoryLog, partition: Partition,
                           t: float) -> np.ndarray:
    """Per-cell H^N(t, xi): neuron i's integrated input on cell pos(i).

    Values are exact at sample times; between samples the latest sample is
    held (H only jumps at spikes, which the sample grid of the producing
    run is expected to bracket).
    """
    if t < log.sample_times[0] - 1e-12 or t > log.T + 1e-12:
        raise ValueError(f"t={t} outside the logged horizon")
    if partition.n != log.n_neurons:
        raise ValueError("partition size must match the log")
    s = int(np.searchsorted(log.sample_times, t + 1e-12, side="right")) - 1
    s = max(s, 0)
    out = np.empty(partition.n)
    out[partition.pos] = log.H[s]
    return out
