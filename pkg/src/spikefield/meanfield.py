"""Spatially extended mean-field dynamics.

The forward solver evolves a family of per-cell particle measures under
drift, a nonlocal input velocity, hazard-rate mass loss, and re-injection of
the lost mass at the reset point x = 0.  The backward solver integrates the
adjoint (dual) equation along characteristics with the exponential hazard
weight and the reset boundary source.  Both sides meet in duality_defect,
which measures how well the discrete solutions satisfy the exact pairing
identity; kappa_constants evaluates the stability constants used by the
error-bound reports.

Measures are stored flat: parallel arrays (cell, position, mass), one entry
per particle, cells indexing the uniform partition of [0, 1) into m_cells
intervals.  Each cell carries a probability measure for solution objects;
empirical inputs follow the same layout.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np

from .model import Bounds, ModelFunctions
from .graphon import StepGraphon, cell_average_matrix

__all__ = [
    "SpatialMeasure", "InputField", "MeanFieldSolution", "DualTestFunction",
    "KappaReport", "solve_meanfield", "shift_by_input", "solve_dual_backward",
    "duality_defect", "kappa_constants", "solve_meanfield_0d",
    "initial_law", "InitialLaw", "measure_from_atoms", "default_m_eta",
]

X_TOL = 1e-6            # particle merge radius
MASS_DRIFT_TOL = 1e-6   # allowed per-cell mass drift per unit time
FIXED_POINT_TOL = 1e-10


# ---------------------------------------------------------------------------
# measures

def _compact_arrays(cell, x, mass, x_tol):
    """Merge particles in the same cell closer than x_tol (mass-weighted)."""
    if cell.size == 0:
        return cell, x, mass
    order = np.lexsort((x, cell))
    c, xs, ms = cell[order], x[order], mass[order]
    new = np.empty(c.size, dtype=bool)
    new[0] = True
    new[1:] = (c[1:] != c[:-1]) | (xs[1:] - xs[:-1] > x_tol)
    grp = np.cumsum(new) - 1
    n = int(grp[-1]) + 1
    msum = np.bincount(grp, weights=ms, minlength=n)
    xsum = np.bincount(grp, weights=ms * xs, minlength=n)
    starts = np.flatnonzero(new)
    cnew = c[starts]
    xnew = np.where(msum > 0, xsum / np.where(msum > 0, msum, 1.0), xs[starts])
    keep = msum > 0
    return cnew[keep], xnew[keep], msum[keep]


@dataclass(frozen=True)
class SpatialMeasure:
    """Per-cell particle measure on [0,1) x R, flat storage.

    cell[k] is the xi-cell index of particle k, x[k] its potential, mass[k]
    its weight.  t stamps the time the measure refers to.
    """

    m_cells: int
    cell: np.ndarray
    x: np.ndarray
    mass: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.cell, dtype=np.int64)
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.mass, dtype=float)
        if not (c.shape == x.shape == w.shape) or c.ndim != 1:
            raise ValueError("cell, x, mass must be matching 1-d arrays")
        if self.m_cells < 1:
            raise ValueError("m_cells must be >= 1")
        if c.size and (c.min() < 0 or c.max() >= self.m_cells):
            raise ValueError("cell index out of range")
        if np.any(w < 0):
            raise ValueError("masses must be nonnegative")
        if not np.all(np.isfinite(x)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "cell", c)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "mass", w)

    @property
    def n_particles(self) -> int:
        return self.cell.size

    def cell_masses(self) -> np.ndarray:
        return np.bincount(self.cell, weights=self.mass, minlength=self.m_cells)

    def probability_defect(self) -> float:
        """Largest deviation of a cell's total mass from 1."""
        return float(np.max(np.abs(self.cell_masses() - 1.0)))

    def max_particles_per_cell(self) -> int:
        if self.cell.size == 0:
            return 0
        return int(np.bincount(self.cell, minlength=self.m_cells).max())

    def compact(self, x_tol: float = X_TOL) -> "SpatialMeasure":
        c, x, w = _compact_arrays(self.cell, self.x, self.mass, x_tol)
        return SpatialMeasure(self.m_cells, c, x, w, self.t)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m_cells", self.m_cells, "t", repr(float(self.t))])
            w.writerow(["cell", "position", "mass"])
            for c, x, ms in zip(self.cell, self.x, self.mass):
                w.writerow([int(c), repr(float(x)), repr(float(ms))])

    @classmethod
    def from_csv(cls, path) -> "SpatialMeasure":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "m_cells":
            raise ValueError("expected header row 'm_cells,<m>,t,<t>'")
        m = int(rows[0][1])
        t = float(rows[0][3])
        body = rows[2:]
        c = np.array([int(r[0]) for r in body], dtype=np.int64)
        x = np.array([float(r[1]) for r in body])
        ms = np.array([float(r[2]) for r in body])
        return cls(m, c, x, ms, t)


def measure_from_atoms(m_cells: int, xs, masses, t: float = 0.0) -> SpatialMeasure:
    """The same atomic x-law replicated in every cell."""
    xs = np.asarray(xs, dtype=float)
    masses = np.asarray(masses, dtype=float)
    cell = np.repeat(np.arange(m_cells), xs.size)
    return SpatialMeasure(m_cells, cell, np.tile(xs, m_cells),
                          np.tile(masses, m_cells), t)


@dataclass(frozen=True)
class InitialLaw:
    """Sampleable initial law with its exact (or quantile) atomic measure."""

    kind: str
    params: dict
    _atoms_x: np.ndarray
    _atoms_m: np.ndarray

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.kind == "two_point":
            u = rng.random(n)
            return np.where(u < p["p"], p["a"], p["b"])
        if self.kind == "point":
            return np.full(n, p["x"])
        if self.kind == "uniform":
            return p["lo"] + (p["hi"] - p["lo"]) * rng.random(n)
        raise AssertionError(self.kind)

    def atoms(self):
        return self._atoms_x.copy(), self._atoms_m.copy()

    def measure(self, m_cells: int) -> SpatialMeasure:
        return measure_from_atoms(m_cells, self._atoms_x, self._atoms_m)

    def second_moment(self) -> float:
        return float(np.sum(self._atoms_m * self._atoms_x**2))

    def to_spec(self) -> dict:
        return {"kind": self.kind, **self.params}


def initial_law(spec: dict) -> InitialLaw:
    """Build an initial law from a spec dict.

    kinds: two_point (atoms a, b with masses p, 1-p), point (single atom),
    uniform (lo, hi; the measure side uses n_atoms midpoint quantiles, an
    approximation noted in the params).
    """
    kind = spec["kind"]
    if kind == "two_point":
        p = {"a": float(spec["a"]), "b": float(spec["b"]),
             "p": float(spec.get("p", 0.5))}
        return InitialLaw(kind, p, np.array([p["a"], p["b"]]),
                          np.array([p["p"], 1.0 - p["p"]]))
    if kind == "point":
        p = {"x": float(spec["x"])}
        return InitialLaw(kind, p, np.array([p["x"]]), np.array([1.0]))
    if kind == "uniform":
        n_atoms = int(spec.get("n_atoms", 64))
        p = {"lo": float(spec["lo"]), "hi": float(spec["hi"]), "n_atoms": n_atoms}
        q = (np.arange(n_atoms) + 0.5) / n_atoms
        xs = p["lo"] + (p["hi"] - p["lo"]) * q
        return InitialLaw(kind, p, xs, np.full(n_atoms, 1.0 / n_atoms))
    raise ValueError(f"unknown initial law kind {kind!r}")


# ---------------------------------------------------------------------------
# input field

@dataclass(frozen=True)
class InputField:
    """Firing-rate field r, velocity h, and cumulative input H on a time grid.

    r[k, c] and h[k, c] hold the values on the step [t_grid[k], t_grid[k+1]);
    H[k, c] is cumulative at t_grid[k], piecewise linear in time, H[0] = 0.
    """

    t_grid: np.ndarray
    r: np.ndarray
    h: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        tg = np.asarray(self.t_grid, dtype=float)
        r = np.asarray(self.r, dtype=float)
        h = np.asarray(self.h, dtype=float)
        H = np.asarray(self.H, dtype=float)
        K = tg.shape[0] - 1
        if K < 1 or r.shape[0] != K or h.shape != r.shape or H.shape != (K + 1, r.shape[1]):
            raise ValueError("inconsistent field shapes")
        if np.any(np.diff(tg) <= 0):
            raise ValueError("time grid must increase")
        if np.any(H[0] != 0):
            raise ValueError("H must vanish at the initial time")
        object.__setattr__(self, "t_grid", tg)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "H", H)

    @property
    def m_cells(self) -> int:
        return self.r.shape[1]

    def _step_index(self, s: float) -> int:
        k = int(np.searchsorted(self.t_grid, s, side="right")) - 1
        return min(max(k, 0), self.t_grid.shape[0] - 2)

    def H_at(self, s: float) -> np.ndarray:
        k = self._step_index(s)
        t0, t1 = self.t_grid[k], self.t_grid[k + 1]
        frac = min(max((s - t0) / (t1 - t0), 0.0), 1.0)
        return (1.0 - frac) * self.H[k] + frac * self.H[k + 1]

    def h_at(self, s: float) -> np.ndarray:
        return self.h[self._step_index(s)]

    def max_abs_H(self) -> float:
        return float(np.max(np.abs(self.H)))

    def to_csv(self, path):
        K, m = self.r.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cell", "r", "h", "H"])
            for k in range(K + 1):
                kk = min(k, K - 1)  # final row group repeats the last step's r, h
                for c in range(m):
                    w.writerow([repr(float(self.t_grid[k])), c,
                                repr(float(self.r[kk, c])), repr(float(self.h[kk, c])),
                                repr(float(self.H[k, c]))])

    @classmethod
    def from_csv(cls, path) -> "InputField":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["t", "cell", "r", "h", "H"]:
            raise ValueError("expected header 't,cell,r,h,H'")
        body = rows[1:]
        ts = np.array([float(r[0]) for r in body])
        cells = np.array([int(r[1]) for r in body])
        m = int(cells.max()) + 1
        t_grid = np.unique(ts)
        K = len(t_grid) - 1
        r = np.empty((K, m))
        h = np.empty((K, m))
        H = np.empty((K + 1, m))
        for row in body:
            k = int(np.searchsorted(t_grid, float(row[0])))
            c = int(row[1])
            if k < K:
                r[k, c] = float(row[2])
                h[k, c] = float(row[3])
            H[k, c] = float(row[4])
        return cls(t_grid, r, h, H)


@dataclass(frozen=True)
class MeanFieldSolution:
    times: tuple
    snapshots: tuple
    field: InputField
    stats: dict

    def snapshot_at(self, t: float) -> SpatialMeasure:
        for tt, snap in zip(self.times, self.snapshots):
            if abs(tt - t) <= 1e-9 * max(1.0, abs(t)):
                return snap
        raise KeyError(f"no snapshot at t={t}")


# ---------------------------------------------------------------------------
# forward solver

def solve_meanfield(model: ModelFunctions, kernel: StepGraphon,
                    mu0: SpatialMeasure, T: float, dt: float,
                    m_cells: Optional[int] = None,
                    snapshot_times: Optional[Sequence[float]] = None,
                    x_tol: float = X_TOL,
                    particle_cap: Optional[int] = None) -> MeanFieldSolution:
    """Forward particle solver by operator splitting.

    Each step: (1) per-cell rate r = sum mass * f(x); (2) velocity
    h = cell-averaged kernel applied to r, scaled by 1/m; (3) midpoint
    transport under b(x) + h with h frozen at its predictor value; (4) mass
    decay by exp(-f(x_mid) dt); (5) the lost mass of each cell re-injected
    at x = 0; (6) H accumulated by h dt.  Particles closer than x_tol merge
    after each step.  Aborts if any cell's mass drifts more than
    MASS_DRIFT_TOL per unit time; warns if dt exceeds the 0.1/||f|| step
    bound.
    """
    m = mu0.m_cells
    if m_cells is not None and m_cells != m:
        raise ValueError(f"m_cells={m_cells} does not match mu0 ({m}); "
                         "resample the measure explicitly first")
    if mu0.probability_defect() > 1e-9:
        raise ValueError("mu0 must carry a probability measure in every cell")
    K = max(1, round(T / dt))
    dt_eff = T / K
    sup_f = model.bounds.sup_f
    if sup_f > 0 and dt_eff > 0.1 / sup_f:
        warnings.warn(f"dt={dt_eff:g} exceeds the stability guideline "
                      f"0.1/sup_f={0.1 / sup_f:g}", stacklevel=2)

    edges = np.arange(m + 1) / m
    grid = np.column_stack([edges[:-1], edges[1:]])
    Kbar = cell_average_matrix(kernel, grid, grid)

    if snapshot_times is None:
        snapshot_times = (0.0, T)
    snap_steps = {}
    for st in snapshot_times:
        k = round(st / dt_eff)
        if abs(k * dt_eff - st) > 1e-9 * max(1.0, K):
            raise ValueError(f"snapshot time {st} is not a step multiple of dt")
        snap_steps[int(k)] = float(st)

    mu0c = mu0.compact(x_tol)
    cell = mu0c.cell.copy()
    x = mu0c.x.copy()
    mass = mu0c.mass.copy()
    if particle_cap is not None:
        cell, x, mass = _enforce_cap(cell, x, mass, m, particle_cap)

    r_hist = np.empty((K, m))
    h_hist = np.empty((K, m))
    H = np.zeros((K + 1, m))
    snapshots = {}
    if 0 in snap_steps:
        snapshots[0] = SpatialMeasure(m, cell.copy(), x.copy(), mass.copy(), 0.0)

    max_drift = 0.0
    max_particles = int(np.bincount(cell, minlength=m).max()) if cell.size else 0
    for k in range(K):
        fx = model.f(x)
        r_k = np.bincount(cell, weights=mass * fx, minlength=m)
        h_k = (Kbar @ r_k) / m
        hx = h_k[cell]
        x_mid = x + 0.5 * dt_eff * (model.b(x) + hx)
        x_new = x + dt_eff * (model.b(x_mid) + hx)
        keep = np.exp(-dt_eff * model.f(x_mid))
        lost = np.bincount(cell, weights=mass * (1.0 - keep), minlength=m)
        mass = mass * keep
        x = x_new
        cell = np.concatenate([cell, np.arange(m)])
        x = np.concatenate([x, np.zeros(m)])
        mass = np.concatenate([mass, lost])
        cell, x, mass = _compact_arrays(cell, x, mass, x_tol)
        if particle_cap is not None:
            cell, x, mass = _enforce_cap(cell, x, mass, m, particle_cap)

        r_hist[k] = r_k
        h_hist[k] = h_k
        H[k + 1] = H[k] + dt_eff * h_k
        t_now = (k + 1) * dt_eff

        drift = float(np.max(np.abs(np.bincount(cell, weights=mass, minlength=m) - 1.0)))
        max_drift = max(max_drift, drift)
        if drift > MASS_DRIFT_TOL * max(1.0, t_now):
            raise RuntimeError(f"mass drift {drift:g} at t={t_now:g} exceeds "
                               f"{MASS_DRIFT_TOL:g} per unit time")
        max_particles = max(max_particles,
                            int(np.bincount(cell, minlength=m).max()))
        if k + 1 in snap_steps:
            snapshots[k + 1] = SpatialMeasure(m, cell.copy(), x.copy(),
                                              mass.copy(), t_now)

    t_grid = np.arange(K + 1) * dt_eff
    fld = InputField(t_grid, r_hist, h_hist, H)
    keys = sorted(snapshots)
    stats = {"mass_drift": max_drift, "max_particles_per_cell": max_particles,
             "n_steps": K, "dt": dt_eff}
    return MeanFieldSolution(tuple(snap_steps[k] for k in keys),
                             tuple(snapshots[k] for k in keys), fld, stats)


def _enforce_cap(cell, x, mass, m, cap):
    """Merge the closest pair in any over-full cell until all fit the cap."""
    counts = np.bincount(cell, minlength=m)
    while counts.max() > cap:
        c = int(np.argmax(counts))
        idx = np.flatnonzero(cell == c)
        xs = x[idx]
        order = np.argsort(xs)
        gaps = np.diff(xs[order])
        g = int(np.argmin(gaps))
        i, j = idx[order[g]], idx[order[g + 1]]
        tot = mass[i] + mass[j]
        x[i] = (mass[i] * x[i] + mass[j] * x[j]) / tot if tot > 0 else x[i]
        mass[i] = tot
        keep = np.ones(cell.size, dtype=bool)
        keep[j] = False
        cell, x, mass = cell[keep], x[keep], mass[keep]
        counts[c] -= 1
    return cell, x, mass


def shift_by_input(mu: SpatialMeasure, H_at_t: np.ndarray) -> SpatialMeasure:
    """Pushforward by x -> x - H(t, xi): positions drop their cell's H value."""
    H_at_t = np.asarray(H_at_t, dtype=float)
    if H_at_t.shape != (mu.m_cells,):
        raise ValueError(f"expected {mu.m_cells} per-cell values, "
                         f"got shape {H_at_t.shape}")
    return SpatialMeasure(mu.m_cells, mu.cell, mu.x - H_at_t[mu.cell],
                          mu.mass, mu.t)


# ---------------------------------------------------------------------------
# backward dual solver

@dataclass(frozen=True)
class DualTestFunction:
    """Backward solution slices phi(s, xi, x) on a cell x x-grid.

    s_grid is increasing; slices[i] is the (m_cells, nx) array at s_grid[i].
    The last slice is the terminal condition.
    """

    s_grid: np.ndarray
    x_grid: np.ndarray
    slices: np.ndarray
    stats: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        sg = np.asarray(self.s_grid, dtype=float)
        xg = np.asarray(self.x_grid, dtype=float)
        sl = np.asarray(self.slices, dtype=float)
        if sl.ndim != 3 or sl.shape[0] != sg.shape[0] or sl.shape[2] != xg.shape[0]:
            raise ValueError("inconsistent slice shapes")
        if not np.all(np.isfinite(sl)):
            raise ValueError("dual solution must be finite")
        object.__setattr__(self, "s_grid", sg)
        object.__setattr__(self, "x_grid", xg)
        object.__setattr__(self, "slices", sl)

    @property
    def m_cells(self) -> int:
        return self.slices.shape[1]

    def slice_at(self, s: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.s_grid - s)))
        if abs(self.s_grid[i] - s) > 1e-9 * max(1.0, abs(s)):
            raise KeyError(f"no stored slice at s={s}")
        return self.slices[i]


def _interp_rows(vals: np.ndarray, xq: np.ndarray, x0: float, dx: float) -> np.ndarray:
    """Row-wise linear interpolation on a uniform grid, clamped at the ends.

    vals: (m, nx); xq: (m,) or (m, nx) query positions."""
    nx = vals.shape[1]
    u = np.clip((xq - x0) / dx, 0.0, nx - 1.0)
    i = np.minimum(u.astype(np.int64), nx - 2)
    w = u - i
    if xq.ndim == 1:
        rows = np.arange(vals.shape[0])
        return vals[rows, i] * (1.0 - w) + vals[rows, i + 1] * w
    return (np.take_along_axis(vals, i, axis=1) * (1.0 - w)
            + np.take_along_axis(vals, i + 1, axis=1) * w)


def solve_dual_backward(model: ModelFunctions, field: InputField,
                        phibar: np.ndarray, x_grid: np.ndarray,
                        t: float, ds: float,
                        store_every: int = 1) -> DualTestFunction:
    """Integrate the adjoint equation backward from the terminal slice.

    One step from s' down to s: the characteristic foot Y of each grid point
    is advanced by one RK4 step of dY/dr = b(Y + H(r, xi)); the survival
    weight E is the trapezoid exponential of the hazard f(. + H) along the
    characteristic; the new slice is (previous slice at Y) * E plus
    c_bar * (1 - E), where c_bar is the step-average of the boundary trace
    phi(., xi, -H(., xi)).  The unknown boundary value at s enters its own
    update, so it is resolved by a per-cell scalar fixed point iterated to
    FIXED_POINT_TOL.  The scheme reproduces constants exactly for any hazard.

    Slices are retained every store_every steps (terminal and s=0 always).
    Raises if some -H(s, xi) leaves the x-grid.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    nx = x_grid.shape[0]
    if nx < 2:
        raise ValueError("x-grid must have at least 2 points")
    x0, dx = float(x_grid[0]), float(x_grid[1] - x_grid[0])
    m = field.m_cells
    phibar = np.asarray(phibar, dtype=float)
    if phibar.shape != (m, nx):
        raise ValueError(f"terminal slice must have shape ({m}, {nx})")

    K = max(1, round(t / ds))
    ds_eff = t / K
    X = np.broadcast_to(x_grid, (m, nx))

    cur = phibar.copy()
    stored = [(t, cur.copy())]
    max_ds_phi = 0.0
    max_fp_iters = 0
    for k in range(K):
        s_hi = t * (K - k) / K
        s_lo = t * (K - k - 1) / K
        H_hi = field.H_at(s_hi)
        H_lo = field.H_at(s_lo)
        H_mid = field.H_at(0.5 * (s_lo + s_hi))
        for xb in (-H_lo, -H_hi):
            if np.any(xb < x0) or np.any(xb > x_grid[-1]):
                raise ValueError("x-grid too small to contain -H; extend L")

        # forward characteristic from (s_lo, x) to s_hi, one RK4 step
        k1 = model.b(X + H_lo[:, None])
        k2 = model.b(X + 0.5 * ds_eff * k1 + H_mid[:, None])
        k3 = model.b(X + 0.5 * ds_eff * k2 + H_mid[:, None])
        k4 = model.b(X + ds_eff * k3 + H_hi[:, None])
        Y = X + (ds_eff / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        E = np.exp(-0.5 * ds_eff * (model.f(X + H_lo[:, None])
                                    + model.f(Y + H_hi[:, None])))
        # motionless characteristics need no interpolation; keeps the static
        # case bit-exact
        if np.array_equal(Y, X):
            A = cur * E
        else:
            A = _interp_rows(cur, Y, x0, dx) * E

        xb_lo = -H_lo
        v_hi = _interp_rows(cur, -H_hi, x0, dx)
        A_star = _interp_rows(A, xb_lo, x0, dx)
        E_star = _interp_rows(E, xb_lo, x0, dx)
        v = v_hi.copy()
        for it in range(100):
            v_new = A_star + 0.5 * (v + v_hi) * (1.0 - E_star)
            if np.max(np.abs(v_new - v)) < FIXED_POINT_TOL:
                v = v_new
                max_fp_iters = max(max_fp_iters, it + 1)
                break
            v = v_new
        else:
            raise RuntimeError("boundary fixed point failed to converge")

        new = A + (0.5 * (v + v_hi))[:, None] * (1.0 - E)
        max_ds_phi = max(max_ds_phi, float(np.max(np.abs(new - cur))) / ds_eff)
        cur = new
        if (k + 1) % store_every == 0 or k + 1 == K:
            stored.append((s_lo, cur.copy()))

    stored.sort(key=lambda p: p[0])
    s_grid = np.array([p[0] for p in stored])
    slices = np.stack([p[1] for p in stored])
    stats = {"max_ds": max_ds_phi, "ds": ds_eff,
             "fixed_point_iters_max": max_fp_iters, "n_steps": K}
    return DualTestFunction(s_grid, x_grid, slices, stats)


def duality_defect(solution: MeanFieldSolution, phi: DualTestFunction) -> float:
    """|<phi(t), mu_#(t)> - <phi(0), mu_#(0)>| for the shifted measure.

    The pairing is (1/m) sum over cells of sum_k mass_k phi(s, xi, x_k) with
    phi interpolated linearly in x.  For an exact dual solution the two
    pairings agree; the defect measures the combined discretization error.
    """
    if phi.m_cells != solution.field.m_cells:
        raise ValueError("cell grids of solution and dual function differ")
    t_end = float(phi.s_grid[-1])
    x0 = float(phi.x_grid[0])
    dx = float(phi.x_grid[1] - phi.x_grid[0])

    def pairing(s: float) -> float:
        snap = solution.snapshot_at(s)
        shifted = shift_by_input(snap, solution.field.H_at(s))
        sl = phi.slice_at(s)
        # per-particle interpolation against the particle's own cell row
        u = np.clip((shifted.x - x0) / dx, 0.0, phi.x_grid.shape[0] - 1.0)
        i = np.minimum(u.astype(np.int64), phi.x_grid.shape[0] - 2)
        wfrac = u - i
        pv = sl[shifted.cell, i] * (1.0 - wfrac) + sl[shifted.cell, i + 1] * wfrac
        return float(np.sum(shifted.mass * pv)) / phi.m_cells

    return abs(pairing(t_end) - pairing(0.0))


# ---------------------------------------------------------------------------
# stability constants

@dataclass(frozen=True)
class KappaReport:
    t: float
    kappa1: float
    kappa2: float
    kappa3: float
    kappa: float
    kappa4: float
    kappa5: float
    kappa6: float
    params: dict

    def to_json(self) -> dict:
        return {"t": self.t, "kappa1": self.kappa1, "kappa2": self.kappa2,
                "kappa3": self.kappa3, "kappa": self.kappa,
                "kappa4": self.kappa4, "kappa5": self.kappa5,
                "kappa6": self.kappa6, "params": self.params}


def _kappa2(bounds: Bounds, t: float) -> float:
    rate = (2.0 * bounds.sup_f + 2.0 * bounds.l1_df + 2.0 * bounds.sup_df
            + bounds.sup_db)
    return math.exp(rate * t)


def _kappa3(bounds: Bounds, t: float) -> float:
    k2 = _kappa2(bounds, t)
    inner = (bounds.sup_db + 2.0 * bounds.sup_df + bounds.sup_f)
    return math.exp(2.0 * bounds.sup_f * t) * (
        1.0 + 0.5 * t * t * bounds.sup_f * inner * k2)


def default_m_eta(bounds: Bounds, w_norms: dict, t: float,
                  second_moment0: float = 1.0, dx: float = 1.0) -> float:
    """Envelope for the eta = 1 + x^2 moment functional.

    Resets only shrink |x|, so |X(t)| <= |X(0)| + (sup_b + w_sup sup_f) t
    up to resets, giving E|X|^2 <= (sqrt(E|X0|^2) + ct)^2; the input H is
    bounded by w_sup sup_f t.  The two eta terms then bound as written.
    """
    w_sup = w_norms["sup"]
    c = bounds.sup_b + w_sup * bounds.sup_f
    h_max = w_sup * bounds.sup_f * t
    ex2 = (math.sqrt(max(second_moment0, 0.0)) + c * t) ** 2
    return 2.0 + (math.sqrt(ex2) + h_max + dx) ** 2 + (h_max + dx) ** 2


def kappa_constants(bounds: Bounds, w_norms: dict, eps_w=None, t: float = 1.0,
                    m_eta: Optional[float] = None,
                    eta_inv_l1: float = math.pi) -> KappaReport:
    """Evaluate the stability constants at horizon t.

    w_norms carries "sup" and "linf_l1" of the kernel.  m_eta is the moment
    envelope entering kappa6 (default from default_m_eta with unit initial
    second moment); eta_inv_l1 is the L1 norm of 1/eta, pi for
    eta(x) = 1 + x^2.  eps_w is recorded in the report parameters; the
    constants themselves do not depend on it.
    """
    k1 = (max(bounds.sup_f, bounds.sup_df, bounds.l1_df) * w_norms["linf_l1"]
          + bounds.sup_f)
    k2 = _kappa2(bounds, t)
    k3 = _kappa3(bounds, t)
    kap = max(k2, k3)
    k4 = (bounds.sup_b + 2.0 * bounds.sup_f) * k2
    k5 = (bounds.sup_db + bounds.sup_f + 2.0 * bounds.sup_df) * k2
    if m_eta is None:
        m_eta = default_m_eta(bounds, w_norms, t)
    k2p = _kappa2(bounds, t + 1.0)
    k3p = _kappa3(bounds, t + 1.0)
    kap_p = max(k2p, k3p)
    k4p = (bounds.sup_b + 2.0 * bounds.sup_f) * k2p
    k6 = (math.sqrt(16.0 * bounds.sup_f**2 * t**2 + 2.0 * bounds.sup_f * t)
          * max(kap_p, k4p) * math.sqrt(6.0)
          + kap_p * math.sqrt(eta_inv_l1 * (t + 1.0))
          * math.sqrt(0.5 * bounds.sup_f * t * m_eta))
    params = {"m_eta": m_eta, "eta_inv_l1": eta_inv_l1,
              "w_sup": w_norms["sup"], "w_linf_l1": w_norms["linf_l1"],
              "eps_w": None if eps_w is None else "supplied"}
    return KappaReport(t, k1, k2, k3, kap, k4, k5, k6, params)


# ---------------------------------------------------------------------------
# scalar reference solver (no spatial variable)

def solve_meanfield_0d(model: ModelFunctions, w0: float, atoms, T: float,
                       dt: float, x_tol: float = X_TOL):
    """Reference solver for the exchangeable (constant-kernel) reduction.

    Evolves a single particle list under the same splitting as
    solve_meanfield but with scalar state and h = w0 * r; no cells, no
    kernel machinery.  Returns (positions, masses) at T as lists.
    """
    xs = [float(v) for v in atoms[0]]
    ms = [float(v) for v in atoms[1]]
    K = max(1, round(T / dt))
    dt_eff = T / K
    for _ in range(K):
        arr = np.array(xs)
        fx = model.f(arr)
        r = float(np.sum(np.array(ms) * fx))
        h = w0 * r
        x_mid = arr + 0.5 * dt_eff * (model.b(arr) + h)
        x_new = arr + dt_eff * (model.b(x_mid) + h)
        keep = np.exp(-dt_eff * model.f(x_mid))
        lost = float(np.sum(np.array(ms) * (1.0 - keep)))
        ms = [m_ * k_ for m_, k_ in zip(ms, keep)]
        xs = list(x_new)
        xs.append(0.0)
        ms.append(lost)
        # merge close particles, mass-weighted
        order = sorted(range(len(xs)), key=lambda i: xs[i])
        nxs, nms = [], []
        for i in order:
            if nxs and xs[i] - nxs[-1] <= x_tol:
                tot = nms[-1] + ms[i]
                if tot > 0:
                    nxs[-1] = (nxs[-1] * nms[-1] + xs[i] * ms[i]) / tot
                nms[-1] = tot
            else:
                nxs.append(xs[i])
                nms.append(ms[i])
        xs, ms = nxs, nms
    return xs, ms
