"""Weight matrices, step graphons, cut norms, and moduli of continuity.

Conventions
-----------
* ``WeightMatrix`` holds the rescaled synaptic weights w[i, j] (row i receives
  from column j) with a zero diagonal.
* A ``Partition`` assigns neuron i the interval [pos(i)/n, (pos(i)+1)/n) of
  [0, 1); positions are 0-based.
* A ``StepGraphon`` is a piecewise-constant kernel on the uniform m x m grid.
  When it stands for a known analytic kernel (the uniform-attachment limit
  1 - max(xi, zeta), or a constant), the tag is kept so that cell averages and
  norms stay exact instead of inheriting grid error.
* The operator norm used throughout is L^inf -> L^1: for a step kernel the
  supremum over test functions bounded by 1 is attained at sign vectors, so
  exhaustive enumeration is exact for moderate m.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "WeightMatrix", "Partition", "StepGraphon", "ModulusOfContinuity",
    "gen_uniform_attachment", "gen_w_random", "step_graphon",
    "op_norm_inf_to_1", "cut_distance", "modulus_of_continuity",
    "kernel_norms", "cell_average_matrix", "OpNormResult", "CutDistanceResult",
]

EXACT_SIGN_LIMIT = 20   # exhaustive sign enumeration up to 2^(m-1) ~ 5e5
EXACT_PERM_LIMIT = 8    # exhaustive permutations up to 8! = 40320


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True)
class WeightMatrix:
    """Dense n x n weight matrix with zero diagonal."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("weight matrix must be square")
        if np.any(np.diag(a) != 0):
            raise ValueError("diagonal weights must be zero")
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.entries))) if self.n else 0.0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", self.n])
            for row in self.entries:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "WeightMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "n":
            raise ValueError("expected header row 'n,<count>'")
        n = int(rows[0][1])
        a = np.array([[float(v) for v in r] for r in rows[1 : n + 1]])
        return cls(a)


@dataclass(frozen=True)
class Partition:
    """Interval partition of [0,1) induced by a permutation.

    ``pos[i]`` is the 0-based cell index of neuron i: its interval is
    [pos[i]/n, (pos[i]+1)/n).
    """

    pos: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pos, dtype=np.int64)
        n = p.shape[0]
        if sorted(p.tolist()) != list(range(n)):
            raise ValueError("pos must be a permutation of 0..n-1")
        object.__setattr__(self, "pos", p)

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    @classmethod
    def identity(cls, n: int) -> "Partition":
        return cls(np.arange(n))

    def cells(self) -> np.ndarray:
        """(n, 2) array of [lo, hi) interval bounds, row i = neuron i's cell."""
        lo = self.pos / self.n
        return np.column_stack([lo, lo + 1.0 / self.n])


@dataclass(frozen=True)
class StepGraphon:
    """Piecewise-constant kernel on the uniform m x m grid of [0,1)^2.

    ``analytic`` optionally records the kernel the grid values were averaged
    from: ("uniform_attachment_limit",) for 1 - max(xi, zeta), or
    ("constant", w0).  Exact-cell operations use the tag when present.
    """

    values: np.ndarray
    analytic: Optional[tuple] = None

    def __post_init__(self):
        a = np.asarray(self.values, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("step graphon values must be square")
        if not np.all(np.isfinite(a)):
            raise ValueError("step graphon values must be finite")
        object.__setattr__(self, "values", a)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_kernel(cls, name: str, m: int, w0: float = None) -> "StepGraphon":
        """Exact cell averages of a named analytic kernel on the m-grid."""
        if name == "constant":
            if w0 is None:
                raise ValueError("constant kernel needs w0")
            return cls(np.full((m, m), float(w0)), analytic=("constant", float(w0)))
        if name == "uniform_attachment_limit":
            edges = np.arange(m + 1) / m
            lo, hi = edges[:-1], edges[1:]
            avg = _int_max_rect(lo[:, None], hi[:, None], lo[None, :], hi[None, :])
            vals = 1.0 - avg * m * m
            return cls(vals, analytic=("uniform_attachment_limit",))
        raise ValueError(f"unknown analytic kernel {name!r}")

    def point_eval(self, xi, zeta):
        """Kernel value at points (analytic when tagged, cell lookup otherwise)."""
        xi = np.asarray(xi, dtype=float)
        zeta = np.asarray(zeta, dtype=float)
        if self.analytic is not None:
            if self.analytic[0] == "constant":
                return np.broadcast_to(self.analytic[1], np.broadcast_shapes(xi.shape, zeta.shape)).copy()
            if self.analytic[0] == "uniform_attachment_limit":
                return 1.0 - np.maximum(xi, zeta)
        i = np.minimum((xi * self.m).astype(np.int64), self.m - 1)
        j = np.minimum((zeta * self.m).astype(np.int64), self.m - 1)
        return self.values[i, j]

    def resample(self, m_new: int) -> "StepGraphon":
        """Exact cell averages on a new uniform grid (keeps the analytic tag)."""
        edges = np.arange(m_new + 1) / m_new
        rows = np.column_stack([edges[:-1], edges[1:]])
        vals = cell_average_matrix(self, rows, rows)
        return StepGraphon(vals, analytic=self.analytic)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            head = ["m", self.m]
            if self.analytic is not None:
                head += ["analytic"] + [str(v) for v in self.analytic]
            w.writerow(head)
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "StepGraphon":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "m":
            raise ValueError("expected header row 'm,<count>[,analytic,...]'")
        m = int(rows[0][1])
        analytic = None
        if len(rows[0]) > 2 and rows[0][2] == "analytic":
            tag = rows[0][3]
            analytic = (tag,) if tag == "uniform_attachment_limit" else (tag, float(rows[0][4]))
        a = np.array([[float(v) for v in r] for r in rows[1 : m + 1]])
        return cls(a, analytic=analytic)


def _int_max_rect(a, b, c, d):
    """Closed-form integral of max(xi, zeta) over [a,b] x [c,d] (broadcasts)."""
    pos = lambda v: np.maximum(v, 0.0)
    A = (b * b - a * a) * (d - c) / 2.0
    B = ((pos(d - a) ** 3 - pos(d - b) ** 3) - (pos(c - a) ** 3 - pos(c - b) ** 3)) / 6.0
    return A + B


def _overlap_matrix(intervals: np.ndarray, m: int) -> np.ndarray:
    """(k, m) lengths of intersection of each interval with the uniform m-grid."""
    lo = np.asarray(intervals)[:, 0][:, None]
    hi = np.asarray(intervals)[:, 1][:, None]
    glo = np.arange(m)[None, :] / m
    ghi = glo + 1.0 / m
    return np.clip(np.minimum(hi, ghi) - np.maximum(lo, glo), 0.0, None)


def cell_average_matrix(g: StepGraphon, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Exact kernel averages over all rectangles rows[i] x cols[j].

    rows, cols: (k, 2) arrays of [lo, hi) intervals inside [0, 1].  For tagged
    analytic kernels the averages are closed-form; otherwise they are
    overlap-weighted means of the step values (also exact).
    """
    rows = np.asarray(rows, dtype=float)
    cols = np.asarray(cols, dtype=float)
    wr = rows[:, 1] - rows[:, 0]
    wc = cols[:, 1] - cols[:, 0]
    area = np.outer(wr, wc)
    if g.analytic is not None and g.analytic[0] == "constant":
        return np.full((len(rows), len(cols)), g.analytic[1])
    if g.analytic is not None and g.analytic[0] == "uniform_attachment_limit":
        I = _int_max_rect(rows[:, 0][:, None], rows[:, 1][:, None],
                          cols[:, 0][None, :], cols[:, 1][None, :])
        return 1.0 - I / area
    Or = _overlap_matrix(rows, g.m)
    Oc = _overlap_matrix(cols, g.m)
    return (Or @ g.values @ Oc.T) / area


def kernel_norms(g: StepGraphon) -> dict:
    """sup |w| and the L^inf_xi L^1_zeta norm, exact for tagged kernels."""
    if g.analytic is not None and g.analytic[0] == "constant":
        w0 = abs(g.analytic[1])
        return {"sup": w0, "linf_l1": w0}
    if g.analytic is not None and g.analytic[0] == "uniform_attachment_limit":
        # sup at (0,0); the zeta-integral (1 - xi^2)/2 peaks at xi = 0
        return {"sup": 1.0, "linf_l1": 0.5}
    sup = float(np.max(np.abs(g.values))) if g.m else 0.0
    linf_l1 = float(np.max(np.mean(np.abs(g.values), axis=1))) if g.m else 0.0
    return {"sup": sup, "linf_l1": linf_l1}


# ---------------------------------------------------------------------------
# generators

def gen_uniform_attachment(n: int, seed) -> WeightMatrix:
    """Growing uniform-attachment graph on n nodes.

    The graph grows one node at a time; at the step that brings the node count
    to k, every currently nonadjacent pair (new or old) is connected
    independently with probability 1/k.  A pair (i, j) with 1-based indices
    therefore stays unconnected with probability
    prod_{k=max(i,j)}^{n} (1 - 1/k) = (max(i,j) - 1)/n, i.e. the edge
    indicator is Bernoulli(1 - max(xi_i, xi_j)) with xi_i = (i-1)/n, and all
    pairs are independent because every coin flip in the growth is.  Sampling
    draws that product law directly, which is deterministic given the seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    xi = np.arange(n) / n
    a = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    p = 1.0 - np.maximum(xi[iu], xi[ju])
    edges = (rng.random(iu.shape[0]) < p).astype(float)
    a[iu, ju] = edges
    a[ju, iu] = edges
    return WeightMatrix(a)


def gen_w_random(kernel: StepGraphon, n: int, seed, mode: str = "bernoulli") -> WeightMatrix:
    """W-random weight matrix at the grid points xi_i = (i-1)/n.

    Bernoulli mode draws independent symmetric 0/1 edges with
    P(edge) = w(xi_i, xi_j) (kernel values must lie in [0,1]);
    deterministic mode evaluates w_{i,j} = w(xi_i, xi_j) directly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    xi = np.arange(n) / n
    P = np.asarray(kernel.point_eval(xi[:, None], xi[None, :]), dtype=float)
    P = np.broadcast_to(P, (n, n)).copy()
    if mode == "deterministic":
        np.fill_diagonal(P, 0.0)
        return WeightMatrix(P)
    if mode != "bernoulli":
        raise ValueError(f"mode must be 'bernoulli' or 'deterministic', got {mode!r}")
    if np.any((P < 0) | (P > 1)):
        raise ValueError("Bernoulli mode needs kernel values in [0, 1]")
    rng = _rng(seed)
    a = np.zeros((n, n))
    iu, ju = np.triu_indices(n, k=1)
    edges = (rng.random(iu.shape[0]) < P[iu, ju]).astype(float)
    a[iu, ju] = edges
    a[ju, iu] = edges
    return WeightMatrix(a)


def step_graphon(matrix: WeightMatrix, partition: Partition) -> StepGraphon:
    """Embed a weight matrix as a step graphon along the partition order."""
    if partition.n != matrix.n:
        raise ValueError(f"partition size {partition.n} != matrix size {matrix.n}")
    n = matrix.n
    v = np.empty((n, n))
    v[np.ix_(partition.pos, partition.pos)] = matrix.entries
    return StepGraphon(v)


# ---------------------------------------------------------------------------
# norms

class OpNormResult(NamedTuple):
    value: float
    exact: bool


class CutDistanceResult(NamedTuple):
    value: float
    exact: bool


def _signs_chunked(m: int, chunk_pow: int = 14):
    """Yield chunks of all sign vectors in {-1,+1}^m with the last entry +1."""
    n_free = m - 1
    total = 1 << n_free
    chunk = 1 << min(n_free, chunk_pow)
    cols = np.arange(n_free, dtype=np.uint64)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.uint64)
        bits = (idx[:, None] >> cols[None, :]) & np.uint64(1)
        G = np.empty((idx.shape[0], m))
        G[:, :n_free] = 2.0 * bits - 1.0
        G[:, n_free] = 1.0
        yield G


def _op_norm_exhaustive(V: np.ndarray) -> float:
    m = V.shape[0]
    best = 0.0
    for G in _signs_chunked(m):
        vals = np.abs(G @ V.T).sum(axis=1)
        best = max(best, float(vals.max()))
    return best / (m * m)


def _op_norm_localsearch(V: np.ndarray, seed, restarts: int) -> float:
    m = V.shape[0]
    rng = _rng(seed)
    starts = [np.ones(m), np.where(V.sum(axis=0) >= 0, 1.0, -1.0)]
    while len(starts) < restarts:
        starts.append(rng.choice([-1.0, 1.0], size=m))
    best = 0.0
    for g in starts:
        g = g.copy()
        y = V @ g
        val = float(np.abs(y).sum())
        for _ in range(4 * m + 16):
            # objective after flipping each coordinate, all at once
            cand = np.abs(y[:, None] - 2.0 * V * g[None, :]).sum(axis=0)
            j = int(np.argmax(cand))
            if cand[j] <= val + 1e-12:
                break
            g[j] = -g[j]
            y = y + 2.0 * V[:, j] * g[j]
            val = float(cand[j])
        best = max(best, val)
    return best / (m * m)


def op_norm_inf_to_1(g: StepGraphon, seed=0, restarts: int = 32,
                     force_heuristic: bool = False) -> OpNormResult:
    """L^inf -> L^1 operator norm of a step kernel.

    Equals (1/m^2) max over sign vectors of sum_i |sum_j v_ij g_j|; the
    maximum over [-1,1]^m is attained at vertices, so sign enumeration is
    exact for m <= 20.  Larger grids fall back to single-flip hill climbing
    with random restarts, which is a lower bound and flagged inexact.
    """
    V = g.values
    if g.m <= EXACT_SIGN_LIMIT and not force_heuristic:
        return OpNormResult(_op_norm_exhaustive(V), True)
    return OpNormResult(_op_norm_localsearch(V, seed, restarts), False)


def _common_grid(g1: StepGraphon, g2: StepGraphon):
    if g1.m == g2.m:
        return g1.values, g2.values
    m = math.lcm(g1.m, g2.m)
    r1, r2 = m // g1.m, m // g2.m
    v1 = np.repeat(np.repeat(g1.values, r1, axis=0), r1, axis=1)
    v2 = np.repeat(np.repeat(g2.values, r2, axis=0), r2, axis=1)
    return v1, v2


def _cut_exhaustive(A: np.ndarray, B: np.ndarray) -> float:
    m = A.shape[0]
    G = np.concatenate(list(_signs_chunked(m)), axis=0)  # (S, m), S = 2^(m-1)
    best = math.inf
    perms = itertools.permutations(range(m))
    while True:
        chunk = list(itertools.islice(perms, 2048))
        if not chunk:
            break
        P = np.array(chunk)
        Aperm = A[P[:, :, None], P[:, None, :]]          # (c, m, m)
        D = Aperm - B[None, :, :]
        T = np.einsum("cij,sj->cis", D, G)               # (c, m, S)
        vals = np.abs(T).sum(axis=1).max(axis=1)
        best = min(best, float(vals.min()))
    return best / (m * m)


def _degree_seed_perm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # align degree ranks: row i of the permuted A should have B's i-th degree rank
    rank_b = np.argsort(np.argsort(B.sum(axis=1), kind="stable"), kind="stable")
    order_a = np.argsort(A.sum(axis=1), kind="stable")
    return order_a[rank_b]


def _perm_energy(A, B, p, seed, restarts):
    D = A[np.ix_(p, p)] - B
    m = D.shape[0]
    if m <= EXACT_SIGN_LIMIT:
        return _op_norm_exhaustive(D)
    return _op_norm_localsearch(D, seed, restarts)


def _cut_anneal(A: np.ndarray, B: np.ndarray, budget: int, seed) -> float:
    m = A.shape[0]
    rng = _rng(seed)
    inner_restarts = 8
    best = math.inf
    for p0 in (_degree_seed_perm(A, B), np.arange(m)):
        p = p0.copy()
        e = _perm_energy(A, B, p, 0, inner_restarts)
        best = min(best, e)
        temp = max(e, 1e-6) * 0.1
        for it in range(budget):
            i, j = rng.integers(0, m, size=2)
            if i == j:
                continue
            q = p.copy()
            q[i], q[j] = q[j], q[i]
            e_new = _perm_energy(A, B, q, 0, inner_restarts)
            if e_new < e or rng.random() < math.exp(-(e_new - e) / max(temp, 1e-12)):
                p, e = q, e_new
                best = min(best, e)
            temp *= 0.995
    return best


def cut_distance(g1: StepGraphon, g2: StepGraphon, budget: int = 1500,
                 seed=0) -> CutDistanceResult:
    """Cut distance: min over re-orderings of the L^inf -> L^1 norm of g1 o pi - g2.

    Exhaustive (exact) over all m! permutations for m <= 8; beyond that,
    simulated annealing over transpositions seeded by degree-sorted order,
    flagged inexact.  While the inner norm stays exact (m <= 20) the
    annealed value is an upper bound on the distance.
    Unequal grids are refined to the common lcm grid first (exact for step
    kernels).
    """
    A, B = _common_grid(g1, g2)
    m = A.shape[0]
    if m <= EXACT_PERM_LIMIT:
        return CutDistanceResult(_cut_exhaustive(A, B), True)
    return CutDistanceResult(_cut_anneal(A, B, budget, seed), False)


# ---------------------------------------------------------------------------
# modulus of continuity

@dataclass(frozen=True)
class ModulusOfContinuity:
    """Monotone piecewise-linear envelope of measured shift differences.

    knots are increasing shifts in [0, 1] with knots[0] = 0 and values[0] = 0;
    evaluation interpolates linearly and extends the last value beyond the
    final knot.
    """

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.shape != v.shape or k.ndim != 1 or k.shape[0] < 2:
            raise ValueError("knots/values must be matching 1-d arrays, length >= 2")
        if k[0] != 0.0 or v[0] != 0.0:
            raise ValueError("modulus must vanish at 0")
        if np.any(np.diff(k) <= 0) or np.any(np.diff(v) < 0):
            raise ValueError("knots must increase strictly, values monotonically")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    def __call__(self, h):
        h = np.abs(np.asarray(h, dtype=float))
        return np.interp(h, self.knots, self.values)


def _shift_l1(values: np.ndarray, h: float) -> float:
    """Exact L1 difference between the step function and its periodic shift
    in the first (row) variable: int int |g(xi - h, zeta) - g(xi, zeta)|."""
    m = values.shape[0]
    base = np.arange(m) / m
    pts = np.unique(np.concatenate([base, (base + h) % 1.0]))
    ends = np.append(pts[1:], 1.0)
    mids = (pts + ends) / 2.0
    a = np.minimum((mids * m).astype(np.int64), m - 1)
    b = np.minimum((((mids - h) % 1.0) * m).astype(np.int64), m - 1)
    rowdiff = np.abs(values[b] - values[a]).sum(axis=1) / m
    return float(((ends - pts) * rowdiff).sum())


def modulus_of_continuity(g: StepGraphon,
                          n_shifts: Optional[int] = None) -> ModulusOfContinuity:
    """Measured modulus at shifts k/n_shifts, both directions, monotone envelope.

    For each shift the exact periodic-shift L1 difference is computed in the
    xi and zeta directions; the pointwise max is then made nondecreasing by a
    running maximum, with eps(0) = 0.  The default shift count is the kernel's
    own grid, where step-kernel shift differences are piecewise linear.
    """
    if n_shifts is None:
        n_shifts = max(g.m, 2)
    if n_shifts < 2:
        raise ValueError("n_shifts must be >= 2")
    knots = np.arange(n_shifts + 1) / n_shifts
    meas = np.zeros(n_shifts + 1)
    for k in range(1, n_shifts + 1):
        h = knots[k]
        meas[k] = max(_shift_l1(g.values, h), _shift_l1(g.values.T, h))
    return ModulusOfContinuity(knots, np.maximum.accumulate(meas))
