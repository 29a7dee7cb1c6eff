"""Intensity and drift primitives.

Everything downstream assumes a firing intensity f that is nonnegative,
nondecreasing, bounded, and C^1 with integrable derivative, and a drift b
that is bounded and C^1.  Both are provided as small parametric families so
that every norm the estimates need (sup f, sup f', the L1 norm of f',
sup b, sup b') is available in closed form rather than estimated from
samples.

Families
--------
``sigmoid``           f(x) = f_max * logistic((x - theta) / s)
``capped_softplus``   f(x) = f_max * (1 - (1 + e^u)^(-1/2)), u = (x - theta)/s;
                      a softplus-shaped rise capped smoothly at f_max.
                      f_max = 0 is allowed and gives f identically zero.
``tanh_leak``         b(x) = beta * tanh((x_rest - x) / sigma_b); a bounded
                      stand-in for a linear leak, restoring toward x_rest.
``constant``          b(x) = beta.

The unbounded affine leak b(x) = -gamma x is deliberately rejected: all the
a-priori constants require sup|b| finite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["Bounds", "ModelFunctions", "make_model", "eval_model"]

# cap sharpness of the capped softplus family; the derivative peak
# p(1-p)^(1/c) over p in (0,1) is attained at p = c/(c+1)
_SOFTPLUS_CAP = 2.0

F_FAMILIES = ("sigmoid", "capped_softplus")
B_FAMILIES = ("tanh_leak", "constant")


@dataclass(frozen=True)
class Bounds:
    """Exact analytic norms of the model functions.

    sup_f, sup_df, l1_df bound f, f' in sup norm and f' in L1;
    sup_b, sup_db bound b and b' in sup norm.
    """

    sup_f: float
    sup_df: float
    l1_df: float
    sup_b: float
    sup_db: float

    def __post_init__(self):
        vals = (self.sup_f, self.sup_df, self.l1_df, self.sup_b, self.sup_db)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("bounds must be finite and nonnegative")


@dataclass(frozen=True)
class ModelFunctions:
    """A concrete (f, b) pair with evaluators and exact bounds.

    Immutable; safe to share across concurrent trials.
    """

    family_f: str
    params_f: dict
    family_b: str
    params_b: dict
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    db: Callable[[np.ndarray], np.ndarray]
    bounds: Bounds

    def to_spec(self) -> dict:
        return {
            "family_f": self.family_f,
            "params_f": dict(self.params_f),
            "family_b": self.family_b,
            "params_b": dict(self.params_b),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_spec(), sort_keys=True)


def _logistic(u):
    """Numerically stable logistic, exact saturation in float64."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def _make_f(family: str, params: dict):
    f_max = float(params["f_max"])
    theta = float(params.get("theta", 0.0))
    s = float(params.get("s", 1.0))
    if s <= 0:
        raise ValueError(f"scale s must be positive, got {s}")

    if family == "sigmoid":
        if f_max <= 0:
            raise ValueError("sigmoid needs f_max > 0")

        def f(x):
            return f_max * _logistic((np.asarray(x, dtype=float) - theta) / s)

        def df(x):
            p = _logistic((np.asarray(x, dtype=float) - theta) / s)
            return (f_max / s) * p * (1.0 - p)

        # logistic peaks at 1/4; total rise is f_max
        return f, df, f_max, f_max / (4.0 * s), f_max

    if family == "capped_softplus":
        if f_max < 0:
            raise ValueError("capped_softplus needs f_max >= 0")
        c = _SOFTPLUS_CAP

        def f(x):
            u = (np.asarray(x, dtype=float) - theta) / s
            # 1 - (1+e^u)^(-1/c) = -expm1(-softplus(u)/c), stable both tails
            return f_max * (-np.expm1(-np.logaddexp(0.0, u) / c))

        def df(x):
            u = (np.asarray(x, dtype=float) - theta) / s
            return (f_max / (c * s)) * _logistic(u) * np.exp(-np.logaddexp(0.0, u) / c)

        # sup of p (1-p)^{1/c} over p in (0,1), attained at p = c/(c+1)
        peak = (c / (c + 1.0)) * (c + 1.0) ** (-1.0 / c)
        return f, df, f_max, f_max * peak / (c * s), f_max

    raise ValueError(
        f"unknown intensity family {family!r}; bounded choices are {F_FAMILIES}"
    )


def _make_b(family: str, params: dict):
    beta = float(params.get("beta", 0.0))
    x_rest = float(params.get("x_rest", 0.0))
    sigma_b = float(params.get("sigma_b", 1.0))
    if sigma_b <= 0:
        raise ValueError(f"scale sigma_b must be positive, got {sigma_b}")

    if family == "tanh_leak":

        def b(x):
            return beta * np.tanh((x_rest - np.asarray(x, dtype=float)) / sigma_b)

        def db(x):
            t = np.tanh((x_rest - np.asarray(x, dtype=float)) / sigma_b)
            return -(beta / sigma_b) * (1.0 - t * t)

        return b, db, abs(beta), abs(beta) / sigma_b

    if family == "constant":

        def b(x):
            return np.full_like(np.asarray(x, dtype=float), beta)

        def db(x):
            return np.zeros_like(np.asarray(x, dtype=float))

        return b, db, abs(beta), 0.0

    raise ValueError(
        f"unknown drift family {family!r}; bounded choices are {B_FAMILIES} "
        "(affine leaks are unbounded and rejected)"
    )


def make_model(spec: dict | str) -> ModelFunctions:
    """Build a model from a spec {family_f, params_f, family_b, params_b}.

    Accepts the dict itself or its JSON serialization.  Scales must be
    positive; families outside the bounded catalog are rejected.
    """
    if isinstance(spec, str):
        spec = json.loads(spec)
    family_f = spec["family_f"]
    family_b = spec["family_b"]
    params_f = dict(spec["params_f"])
    params_b = dict(spec.get("params_b", {}))
    f, df, sup_f, sup_df, l1_df = _make_f(family_f, params_f)
    b, db, sup_b, sup_db = _make_b(family_b, params_b)
    bounds = Bounds(sup_f=sup_f, sup_df=sup_df, l1_df=l1_df, sup_b=sup_b, sup_db=sup_db)
    return ModelFunctions(
        family_f=family_f, params_f=params_f,
        family_b=family_b, params_b=params_b,
        f=f, df=df, b=b, db=db, bounds=bounds,
    )


def eval_model(model: ModelFunctions, which: str, x):
    """Pointwise evaluation of f, df, b, or db."""
    try:
        fn = {"f": model.f, "df": model.df, "b": model.b, "db": model.db}[which]
    except KeyError:
        raise ValueError(f"which must be one of f, df, b, db; got {which!r}") from None
    out = fn(x)
    return float(out) if np.isscalar(x) or np.ndim(x) == 0 else out
