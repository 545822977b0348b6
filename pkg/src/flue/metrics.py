"""Error metrics, trace records, geometric fits and the convergence-rate bound."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NotDecaying, ZeroReference


@dataclass(frozen=True)
class TraceRecord:
    cycle: int
    slot: int
    ae: float
    ce: float
    f_gap: float
    alpha: float

    def __post_init__(self):
        if self.ae < 0 or self.ce < 0 or self.f_gap < 0:
            raise ValueError("trace metrics must be non-negative")


def _reference_norm(x_o) -> float:
    ref = float(np.linalg.norm(x_o))
    if ref == 0.0:
        raise ZeroReference("reference vector has zero norm")
    return ref


def absolute_error(xs, x_o) -> float:
    """Worst node's distance to ``x_o``, relative to ``||x_o||``."""
    ref = _reference_norm(x_o)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    return float(np.max(np.linalg.norm(xs - np.asarray(x_o)[None, :], axis=1)) / ref)


def consensus_error(xs, x_o) -> float:
    """Worst node's distance to the node average, relative to ``||x_o||``."""
    ref = _reference_norm(x_o)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    centre = xs.mean(axis=0)
    return float(np.max(np.linalg.norm(xs - centre[None, :], axis=1)) / ref)


def fit_geometric(gaps) -> tuple[float, float]:
    """Fit ``value ~ Gamma * gamma**k`` by least squares in log space.

    Parameters
    ----------
    gaps : sequence of (k, value)
        At least three strictly positive values with strictly increasing k.

    Returns
    -------
    (Gamma, gamma)
    """
    pts = np.asarray(list(gaps), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError("need at least three (k, value) pairs")
    k, v = pts[:, 0], pts[:, 1]
    if np.any(np.diff(k) <= 0):
        raise ValueError("k must be strictly increasing")
    if np.any(v <= 0):
        raise ValueError("values must be positive")
    slope, intercept = np.polyfit(k, np.log(v), 1)
    gamma = float(np.exp(slope))
    if gamma >= 1.0:
        raise NotDecaying(f"fitted ratio {gamma:.6f} is not below 1")
    return float(np.exp(intercept)), gamma


@dataclass(frozen=True)
class RateBoundInputs:
    """Constants entering the optimality-gap bound.

    ``omega`` is the smallest decoding weight over all slots, ``p_norm``,
    ``a_norm`` and ``b_norm`` are row-norm maxima of the limit matrix (estimate
    block), the stacked decoder matrix and the encoding matrix, ``gamma`` and
    ``Gamma`` come from the geometric fit of the power gaps, ``radius`` is the
    largest pairwise distance between observed iterates, and ``dist_final`` is
    the distance to the minimizer at the cycle the bound is evaluated for.
    """

    omega: float
    p_norm: float
    a_norm: float
    b_norm: float
    f_bound: float
    gamma: float
    Gamma: float
    z0_norm_sum: float
    dist0: float
    radius: float
    n: int
    dist_final: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.omega == 0.0 or self.p_norm == 0.0:
            raise ValueError("omega and p_norm must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")


def bound_constants(inp: RateBoundInputs) -> tuple[float, float]:
    """Return ``(A*, B*)``."""
    a, b, p, f, n = inp.a_norm, inp.b_norm, inp.p_norm, inp.f_bound, inp.n
    rn = np.sqrt(n)
    g, big_g = inp.gamma, inp.Gamma
    a_star = (inp.dist0 ** 2 / (2.0 * p) - inp.dist_final ** 2 / (2.0 * p)
              + 2.5 * a * big_g * b * rn * f / (1.0 - g ** 2) * inp.z0_norm_sum)
    b_star = (3.5 * a * b ** 2 * n * f ** 2 * (p * a + 10.0 / 7.0)
              + 4.0 * n * a * b ** 2 * n * f ** 2 * big_g / (1.0 - g) * (a + 4.0)
              + 3.0 * a * b * rn * f * big_g * inp.z0_norm_sum)
    return float(a_star), float(b_star)


def concave_penalty(inp: RateBoundInputs, schedule, k_consensus: int) -> float:
    """Extra gap ``H`` paid while coded locals with negative weights are still apart."""
    alphas = sum(schedule(k) for k in range(k_consensus + 1))
    return float(4.0 * alphas * inp.p_norm * inp.a_norm * inp.b_norm * np.sqrt(inp.n)
                 * inp.f_bound * np.sqrt(2.0) * inp.radius)


def rate_bound(inputs: RateBoundInputs, schedule, K: int, has_concave: bool, k_consensus: int = 0) -> float:
    """Upper bound on ``min_k f(x(k)) - f*`` over the first ``K`` cycles.

    ``schedule`` maps a cycle index to its step size.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    alphas = np.array([schedule(k) for k in range(K + 1)])
    s1 = float(alphas.sum())
    s2 = float(alphas @ alphas)
    a_star, b_star = bound_constants(inputs)
    value = a_star / (inputs.omega * s1) + b_star * s2 / (inputs.omega * s1)
    if has_concave:
        value += concave_penalty(inputs, schedule, k_consensus)
    return float(value)
