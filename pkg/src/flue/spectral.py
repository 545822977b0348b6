"""Block system matrices of the stacked dynamics and their spectral checks.

State ordering for the 2n^2 estimate block: node ``l`` owns indices
``2n*l .. 2n*l + 2n - 1``; within a node the first n entries are the descent
copies and the last n the ascent copies. The surplus block uses the same
ordering, and the full system stacks estimates over surpluses (4n^2 total).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AssemblyInconsistent, DegenerateSpectrum, NonConvergent, NotDecaying
from .metrics import fit_geometric
from .numerics import eigen_summary, matrix_power_until_fixed, principal_angles
from .rng import make_rng

STOCHASTIC_TOL = 1e-10


@dataclass(frozen=True)
class SystemMatrices:
    n: int
    a_hat: np.ndarray
    d_hat: np.ndarray
    t: np.ndarray
    q: np.ndarray
    g: np.ndarray
    q_eps_t: np.ndarray
    eps: float

    @property
    def block(self) -> int:
        return 2 * self.n * self.n

    def with_eps(self, eps: float) -> "SystemMatrices":
        if eps < 0:
            raise ValueError("eps must be non-negative")
        return replace(self, eps=float(eps), q_eps_t=self.q + eps * self.g)


def _system_from_blocks(n: int, a_hat: np.ndarray, d_hat: np.ndarray, eps: float) -> SystemMatrices:
    size = a_hat.shape[0]
    eye = np.eye(size)
    zero = np.zeros((size, size))
    t = eye - d_hat
    q = np.block([[a_hat, zero], [eye - a_hat, d_hat]])
    g = np.block([[zero, t], [zero, -t]])
    return SystemMatrices(n=n, a_hat=a_hat, d_hat=d_hat, t=t, q=q, g=g, q_eps_t=q + eps * g, eps=float(eps))


def assemble_a_hat(decoders) -> np.ndarray:
    """Row-stochastic 2n^2 x 2n^2 mixing matrix of all estimate copies.

    A row of node ``l`` keeps that node's off-diagonal decoder weights on its
    own copies; its diagonal weight is shared through the server, so every
    node's copy of the same slot receives ``gamma / n``.
    """
    n = len(decoders)
    size = 2 * n * n
    a_hat = np.zeros((size, size))
    stacks = [d.stacked for d in decoders]
    for l, stack in enumerate(stacks):
        if stack.shape != (2 * n, 2 * n):
            raise AssemblyInconsistent(f"decoder {l} has shape {stack.shape}, expected {(2 * n, 2 * n)}")
        for r in range(2 * n):
            row = 2 * n * l + r
            slot = r % n
            for s in range(2 * n):
                if s != slot:
                    a_hat[row, 2 * n * l + s] = stack[r, s]
            for l2, other in enumerate(stacks):
                a_hat[row, 2 * n * l2 + slot] += other[r, slot] / n
    return a_hat


def assemble_d_hat(mixers) -> np.ndarray:
    """Column-stochastic surplus mixing matrix: each node's D^l tiled with weight 1/n."""
    n = len(mixers)
    size = 2 * n * n
    d_hat = np.zeros((size, size))
    for l in range(n):
        for l2, mix in enumerate(mixers):
            rows = 2 * n * l
            cols = 2 * n * l2
            d_hat[rows:rows + n, cols:cols + n] = mix.d_plus / n
            d_hat[rows + n:rows + 2 * n, cols + n:cols + 2 * n] = mix.d_minus / n
    return d_hat


def assemble_system(decoders, mixers, eps: float = 0.0) -> SystemMatrices:
    decoders = list(decoders)
    mixers = list(mixers)
    if len(decoders) != len(mixers):
        raise AssemblyInconsistent(f"{len(decoders)} decoders but {len(mixers)} mixers")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    n = len(decoders)
    if any(m.d_plus.shape != (n, n) for m in mixers):
        raise AssemblyInconsistent("mixer size does not match the node count")
    a_hat = assemble_a_hat(decoders)
    d_hat = assemble_d_hat(mixers)
    row_err = np.max(np.abs(a_hat.sum(axis=1) - 1.0))
    col_err = np.max(np.abs(d_hat.sum(axis=0) - 1.0))
    if row_err > STOCHASTIC_TOL or np.any(a_hat < 0):
        raise AssemblyInconsistent(f"estimate mixing is not row-stochastic (max row error {row_err:.2e})")
    if col_err > STOCHASTIC_TOL or np.any(d_hat < 0):
        raise AssemblyInconsistent(f"surplus mixing is not column-stochastic (max column error {col_err:.2e})")
    return _system_from_blocks(n, a_hat, d_hat, eps)


def epsilon_bound(q, n: int) -> float:
    """Largest admissible surplus weight for the system matrix ``q``.

    Uses the modulus of the (2n+2)-th eigenvalue in descending-modulus order.
    """
    values = eigen_summary(q).values
    idx = 2 * n + 1
    if idx >= values.size:
        raise ValueError(f"matrix has {values.size} eigenvalues; need at least {idx + 1}")
    lam = abs(values[idx])
    if lam >= 1.0 - 1e-12:
        raise DegenerateSpectrum(f"|lambda_{idx + 1}| = {lam:.15f} leaves no room for a surplus weight")
    return float((1.0 - lam) ** n / ((20.0 + 12.0 * n) ** n * (1.0 + n)))


def _unit_subspace(m: np.ndarray, tol: float):
    es = eigen_summary(m)
    near_one = np.abs(es.values - 1.0) <= tol
    vectors = es.right_vectors[:, near_one]
    # eigenvalue 1 of a real matrix has real eigenvectors up to a phase
    phases = vectors[np.argmax(np.abs(vectors), axis=0), np.arange(vectors.shape[1])]
    vectors = np.real(vectors / phases)
    rest = np.abs(es.values[~near_one])
    return int(near_one.sum()), vectors, float(rest.max()) if rest.size else 0.0


@dataclass(frozen=True)
class EigenReport:
    unit_count_q: int
    unit_count_q_eps: int
    angles: list
    max_rest_modulus: float
    spectral_radius_q: float
    eps: float
    eps0: float | None
    passed: bool
    checks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "unit_count_q": self.unit_count_q,
            "unit_count_q_eps": self.unit_count_q_eps,
            "max_angle": max(self.angles) if self.angles else 0.0,
            "max_rest_modulus": self.max_rest_modulus,
            "spectral_radius_q": self.spectral_radius_q,
            "eps": self.eps,
            "eps0": self.eps0,
            "checks": dict(self.checks),
            "passed": self.passed,
        }


def verify_eigenstructure(sys: SystemMatrices, tol: float = 1e-8, margin: float = 1e-6) -> EigenReport:
    """Compare the eigenvalue-1 structure of ``q`` and its perturbation ``q_eps_t``."""
    count_q, vec_q, _ = _unit_subspace(sys.q, tol)
    count_e, vec_e, rest = _unit_subspace(sys.q_eps_t, tol)
    radius = float(np.max(np.abs(eigen_summary(sys.q).values)))
    if count_q == count_e and count_q > 0:
        angles = [float(a) for a in principal_angles(vec_q, vec_e)]
    else:
        angles = [float(np.pi / 2)]
    try:
        eps0 = epsilon_bound(sys.q, sys.n)
    except DegenerateSpectrum:
        eps0 = None
    checks = {
        "spectral_radius_one": abs(radius - 1.0) <= tol,
        "unit_counts_match": count_q == count_e,
        "angles_within_tol": max(angles) <= tol,
        "rest_strictly_inside": rest <= 1.0 - margin,
        "eps_below_bound": eps0 is not None and sys.eps < eps0 or sys.eps == 0.0,
    }
    passed = all(v for k, v in checks.items() if k != "eps_below_bound")
    return EigenReport(unit_count_q=count_q, unit_count_q_eps=count_e, angles=angles,
                       max_rest_modulus=rest, spectral_radius_q=radius, eps=sys.eps, eps0=eps0,
                       passed=passed, checks=checks)


@dataclass(frozen=True)
class LimitReport:
    p: np.ndarray
    pi: np.ndarray
    doublings: int
    top_block_row_spread: float
    top_right_max: float
    gamma_fit: float
    Gamma_fit: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "doublings": self.doublings,
            "top_block_row_spread": self.top_block_row_spread,
            "top_right_max": self.top_right_max,
            "gamma_fit": self.gamma_fit,
            "Gamma_fit": self.Gamma_fit,
            "passed": self.passed,
        }


def _row_spread(block: np.ndarray) -> float:
    return float(np.max(np.ptp(block, axis=0)))


def _fit_or_exact(points) -> tuple[float, float]:
    # fewer than three resolvable points means the limit is reached (numerically) exactly
    if len(points) < 3:
        return (points[0][1] if points else 0.0), 0.0
    return fit_geometric(points)


def power_limit(sys: SystemMatrices, tol: float = 1e-8) -> LimitReport:
    """Limit of ``q_eps_t ** k`` with consensus checks and a geometric-rate fit."""
    m = sys.q_eps_t
    power, doublings = matrix_power_until_fixed(m, tol=min(tol, 1e-12))
    h = sys.block
    top = power[:h, :h]
    spread = _row_spread(top)
    top_right = float(np.max(np.abs(power[:h, h:])))
    floor = 1e3 * np.finfo(float).eps * max(1.0, float(np.linalg.norm(power)))
    points = []
    cur = m.copy()
    for j in range(doublings + 1):
        resid = float(np.linalg.norm(cur - power))
        if resid > floor:
            points.append((float(2 ** j), resid))
        cur = cur @ cur
    Gamma, gamma = _fit_or_exact(points)
    passed = spread <= tol and top_right <= tol and gamma < 1.0
    return LimitReport(p=power, pi=top[0].copy(), doublings=doublings, top_block_row_spread=spread,
                       top_right_max=top_right, gamma_fit=gamma, Gamma_fit=Gamma, passed=passed)


def product_limit_time_varying(pool, draws: int, seed, tol: float = 1e-6, patience: int = 50) -> LimitReport:
    """Running product of ``draws`` factors drawn uniformly (with replacement) from ``pool``.

    Raises ``NonConvergent`` when the top-block row spread fails to reach a new
    minimum for ``patience`` consecutive draws while still above ``tol``, or
    when the budget ends above ``tol``.
    """
    pool = list(pool)
    if not pool:
        raise ValueError("empty pool")
    ns = {s.n for s in pool}
    epss = {s.eps for s in pool}
    if len(ns) != 1 or len(epss) != 1:
        raise ValueError("pool members must share n and eps")
    rng = make_rng(seed)
    h = pool[0].block
    prod = np.eye(pool[0].q.shape[0])
    best = np.inf
    stall = 0
    spreads = []
    for t in range(draws):
        prod = pool[int(rng.integers(len(pool)))].q_eps_t @ prod
        spread = _row_spread(prod[:h, :h])
        spreads.append(spread)
        if spread <= tol:
            continue
        if spread < best:
            best, stall = spread, 0
        else:
            stall += 1
            if stall >= patience:
                raise NonConvergent(f"row spread stuck at {best:.3e} for {patience} draws (draw {t + 1})")
    spread = spreads[-1]
    if spread > tol:
        raise NonConvergent(f"row spread {spread:.3e} still above {tol:.1e} after {draws} draws")
    floor = 1e3 * np.finfo(float).eps
    points = [(float(i + 1), s) for i, s in enumerate(spreads) if s > floor]
    try:
        Gamma, gamma = _fit_or_exact(points)
    except NotDecaying as exc:
        raise NonConvergent(str(exc)) from exc
    top_right = float(np.max(np.abs(prod[:h, h:])))
    return LimitReport(p=prod, pi=prod[0, :h].copy(), doublings=draws, top_block_row_spread=spread,
                       top_right_max=top_right, gamma_fit=gamma, Gamma_fit=Gamma,
                       passed=spread <= tol and gamma < 1.0)


def with_permuted_a_hat(sys: SystemMatrices) -> SystemMatrices:
    """Copy of ``sys`` whose estimate mixing is a cyclic shift (stochastic but not SIA).

    Negative control for the consensus checks.
    """
    size = sys.block
    perm = np.roll(np.eye(size), 1, axis=1)
    return _system_from_blocks(sys.n, perm, sys.d_hat, sys.eps)
