"""Node/server dynamics for the coded scheme and the DGD baseline.

Each node keeps 2n copies of the model (n descent copies, n ascent copies) and
a surplus vector per copy. A cycle runs all 2n sub-iterations; every
right-hand side is read from the state at the start of the cycle, so a cycle
is one application of the stacked linear map plus the gradient terms.

Internally the states of all nodes are packed into arrays of shape
(nodes, 2n, N): ``x[:, :n]`` are the descent copies, ``x[:, n:]`` the ascent
copies, and likewise for the surpluses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .coding import Cluster
from .errors import DimensionMismatch, NonFinite, ValidationError
from .metrics import TraceRecord, absolute_error, consensus_error
from .problem import LeastSquaresProblem, local_gradient
from .rng import make_rng

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e9
FORMS = ("general", "special")
MIXINGS = ("tee", "identity")
MATRIX_MODES = ("fixed", "random_pool")
INIT_MODES = ("zeros", "seeded_uniform")


@dataclass(frozen=True)
class StepSchedule:
    """``alpha_k = 1 / (k + offset) ** exponent``."""

    offset: float = 100.0
    exponent: float = 0.75
    kind: str = "power"

    def __post_init__(self):
        if self.kind != "power":
            raise ValidationError(f"unknown schedule kind {self.kind!r}")
        if self.offset < 0:
            raise ValidationError("schedule offset must be >= 0")
        if not 0.0 < self.exponent <= 1.0:
            raise ValidationError("schedule exponent must lie in (0, 1]")

    @property
    def square_summable(self) -> bool:
        return self.exponent > 0.5

    def __call__(self, k: int) -> float:
        return step_size(self, k)


def step_size(s: StepSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("k must be non-negative")
    base = k + s.offset
    if base <= 0:
        raise ValueError(f"k + offset = {base} must be positive")
    return float(base ** -s.exponent)


@dataclass
class NodeState:
    """One node's copies: rows of ``x_plus`` etc. are the per-slot vectors."""

    node_id: int
    x_plus: np.ndarray
    x_minus: np.ndarray
    y_plus: np.ndarray
    y_minus: np.ndarray
    last_proxy: np.ndarray

    @property
    def estimate(self) -> np.ndarray:
        """The node's model: the mean of all of its copies."""
        return np.vstack([self.x_plus, self.x_minus]).mean(axis=0)


@dataclass(frozen=True)
class RunConfig:
    form: str = "general"
    mixing: str = "tee"
    matrix_mode: str = "fixed"
    pool_size: int = 4
    epsilon: object = "auto"
    iterations: int = 20000
    seed: int = 0
    record_every: int = 10
    init: str = "zeros"
    replicate: bool = True

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValidationError(f"form must be one of {FORMS}")
        if self.mixing not in MIXINGS:
            raise ValidationError(f"mixing must be one of {MIXINGS}")
        if self.matrix_mode not in MATRIX_MODES:
            raise ValidationError(f"matrix_mode must be one of {MATRIX_MODES}")
        if self.matrix_mode == "random_pool" and self.pool_size < 2:
            raise ValidationError("random_pool needs pool_size >= 2")
        if self.epsilon != "auto":
            try:
                eps = float(self.epsilon)
            except (TypeError, ValueError):
                raise ValidationError("epsilon must be a number or 'auto'") from None
            if not np.isfinite(eps) or eps < 0:
                raise ValidationError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.record_every < 1:
            raise ValidationError("record_every must be >= 1")
        if self.init not in INIT_MODES:
            raise ValidationError(f"init must be one of {INIT_MODES}")


def initialize_states(n: int, dim: int, mode: str = "zeros", seed=0) -> list[NodeState]:
    """``n`` nodes with n descent copies, n ascent copies and matching surpluses."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be positive")
    if mode not in INIT_MODES:
        raise ValueError(f"mode must be one of {INIT_MODES}")
    rng = make_rng(seed, "init") if mode == "seeded_uniform" else None

    def draw(rows):
        if rng is None:
            return np.zeros((rows, dim))
        return rng.uniform(-1.0, 1.0, size=(rows, dim))

    return [NodeState(node_id=i, x_plus=draw(n), x_minus=draw(n), y_plus=draw(n), y_minus=draw(n),
                      last_proxy=np.zeros((2 * n, dim)))
            for i in range(n)]


def pack_states(states) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([np.vstack([s.x_plus, s.x_minus]) for s in states])
    y = np.stack([np.vstack([s.y_plus, s.y_minus]) for s in states])
    last = states[0].last_proxy.copy()
    return x, y, last


def unpack_states(x: np.ndarray, y: np.ndarray, last: np.ndarray) -> list[NodeState]:
    n = x.shape[1] // 2
    return [NodeState(node_id=i, x_plus=x[i, :n].copy(), x_minus=x[i, n:].copy(),
                      y_plus=y[i, :n].copy(), y_minus=y[i, n:].copy(), last_proxy=last.copy())
            for i in range(x.shape[0])]


@dataclass(frozen=True)
class CycleOperators:
    """Per-node arrays that drive one cycle, derived from decoders, mixers and B."""

    diag_gain: np.ndarray    # (nodes, 2n): weight of the own-slot descent copy in each proxy
    diag_index: np.ndarray   # (2n,): which copy that weight applies to (always a descent copy)
    off_diag: np.ndarray     # (nodes, 2n, 2n): decoder rows with the own-slot weight removed
    surplus_mix: np.ndarray  # (nodes, 2n, 2n): block-diagonal [D_plus, D_minus]
    grad_coef: np.ndarray    # (nodes, 2n): -B[j, i] on descent rows, +B[j, i] on ascent rows


def build_operators(decoders, mixers, b: np.ndarray) -> CycleOperators:
    decoders = list(decoders)
    mixers = list(mixers)
    nodes = len(decoders)
    n = decoders[0].n
    if len(mixers) != nodes or b.shape != (n, nodes):
        raise DimensionMismatch("decoders, mixers and B disagree on the node count")
    s = 2 * n
    diag_index = np.arange(s) % n
    stacked = np.stack([d.stacked for d in decoders])
    if stacked.shape != (nodes, s, s):
        raise DimensionMismatch("every decoder must be 2n x 2n")
    rows = np.arange(s)
    diag_gain = stacked[:, rows, diag_index].copy()
    off_diag = stacked.copy()
    off_diag[:, rows, diag_index] = 0.0
    surplus_mix = np.zeros((nodes, s, s))
    for i, m in enumerate(mixers):
        surplus_mix[i, :n, :n] = m.d_plus
        surplus_mix[i, n:, n:] = m.d_minus
    sign = np.where(rows < n, -1.0, 1.0)
    grad_coef = sign[None, :] * b[diag_index, :].T
    return CycleOperators(diag_gain=diag_gain, diag_index=diag_index, off_diag=off_diag,
                          surplus_mix=surplus_mix, grad_coef=grad_coef)


def cluster_encoding(c: Cluster) -> np.ndarray:
    # a single node has no encoding matrix; its one slot carries the whole gradient
    return np.ones((1, 1)) if c.encoding is None else c.encoding.b


def _cycle(x, y, last, ops: CycleOperators, p: LeastSquaresProblem, alpha: float, eps: float,
           form: str, mixing: str):
    grads = p.batched_local_gradients(x)
    proxy = ops.diag_gain[:, :, None] * x[:, ops.diag_index, :] + alpha * ops.grad_coef[:, :, None] * grads
    general = form == "general"
    if general:
        mixed_surplus = ops.surplus_mix @ y
        if mixing == "tee":
            proxy = proxy - eps * mixed_surplus
        else:
            proxy = proxy + eps * y
    server = proxy.mean(axis=0)
    x_new = server[None, :, :] + ops.off_diag @ x
    if general:
        x_new = x_new + eps * y
        if mixing == "tee":
            y = x - last[None, :, :] - eps * y + mixed_surplus
        else:
            y = x - last[None, :, :] + mixed_surplus
    return x_new, y, server, grads


def _guard(x: np.ndarray, cycle: int, algo: str) -> None:
    norms = np.linalg.norm(x, axis=-1)
    bad = ~np.isfinite(norms) | (norms > DIVERGENCE_LIMIT)
    if np.any(bad):
        node, slot = (int(v) for v in np.argwhere(bad)[0])
        raise NonFinite(f"{algo} diverged at cycle {cycle}, slot {slot}, node {node} "
                        f"(norm {norms[node, slot]:.3e})", cycle=cycle, slot=slot, node=node)


def _resolve_eps(cfg: RunConfig) -> float:
    if cfg.epsilon == "auto":
        raise ValueError("resolve epsilon='auto' to a number before running cycles")
    return float(cfg.epsilon)


def flue_cycle(states, decoders, mixers, b, p: LeastSquaresProblem, s: StepSchedule,
               cfg: RunConfig, k: int) -> list[NodeState]:
    """Run one full cycle (2n sub-iterations) and return the new node states."""
    b = getattr(b, "b", b)
    states = list(states)
    if len(states) != len(decoders):
        raise DimensionMismatch(f"{len(states)} states for {len(decoders)} decoders")
    x, y, last = pack_states(states)
    if x.shape[2] != p.n_dim or x.shape[1] != 2 * decoders[0].n:
        raise DimensionMismatch("state vectors do not match the problem or decoder size")
    ops = build_operators(decoders, mixers, np.asarray(b))
    x, y, last, _ = _cycle(x, y, last, ops, p, step_size(s, k), _resolve_eps(cfg), cfg.form, cfg.mixing)
    _guard(x, k, "flue")
    return unpack_states(x, y, last)


def dgd_step(xs, w, p: LeastSquaresProblem, alpha: float) -> list[np.ndarray]:
    """``x_i <- sum_j w_ij x_j - alpha * grad f_i(x_i)``."""
    xs = np.asarray(xs, dtype=float)
    w = np.asarray(w, dtype=float)
    if w.shape != (xs.shape[0], xs.shape[0]):
        raise DimensionMismatch("mixing matrix does not match the node count")
    grads = np.stack([local_gradient(p, i, xs[i]) for i in range(xs.shape[0])])
    out = w @ xs - alpha * grads
    _guard(out[:, None, :], -1, "dgd")
    return list(out)


@dataclass
class RunResult:
    algo: str
    records: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    final_y: np.ndarray | None = None
    initial_x: np.ndarray | None = None
    initial_y: np.ndarray | None = None
    grad_norm_max: float = 0.0
    radius: float = 0.0
    # distance of the node average to x_star at each recorded cycle (when x_star is given)
    dist_star: list = field(default_factory=list)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]


class _Recorder:
    """Collects thinned trace rows plus the running quantities the rate bound needs."""

    def __init__(self, algo, p: LeastSquaresProblem, f_star: float, record_every: int, slot: int,
                 x_star=None):
        self.algo = algo
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=float)
        self.p = p
        self.f_star = f_star
        self.every = record_every
        self.slot = slot
        self.result = RunResult(algo=algo)
        self._lo = None
        self._hi = None

    def observe(self, estimates: np.ndarray) -> None:
        lo = estimates.min(axis=0)
        hi = estimates.max(axis=0)
        self._lo = lo if self._lo is None else np.minimum(self._lo, lo)
        self._hi = hi if self._hi is None else np.maximum(self._hi, hi)

    def record(self, cycle: int, estimates: np.ndarray, alpha: float, slot: int) -> None:
        p = self.p
        gaps = [max(p.objective(e) - self.f_star, 0.0) for e in estimates]
        rec = TraceRecord(cycle=cycle, slot=slot, ae=absolute_error(estimates, p.x_o),
                          ce=consensus_error(estimates, p.x_o), f_gap=float(max(gaps)), alpha=alpha)
        self.result.records.append(rec)
        if self.x_star is not None:
            self.result.dist_star.append(float(np.linalg.norm(estimates.mean(axis=0) - self.x_star)))

    def finish(self) -> RunResult:
        if self._lo is not None:
            # diagonal of the bounding box of every observed estimate
            self.result.radius = float(np.linalg.norm(self._hi - self._lo))
        return self.result


def _node_estimates(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=1)


def run_flue(cluster_or_pool, p: LeastSquaresProblem, schedule: StepSchedule, cfg: RunConfig,
             eps: float, f_star: float = 0.0, states=None, x_star=None) -> RunResult:
    """Iterate ``cfg.iterations`` cycles, recording every ``cfg.record_every`` cycles.

    ``cluster_or_pool`` is a single :class:`Cluster` for fixed matrices or a
    list of clusters for ``matrix_mode='random_pool'``.
    """
    pool = list(cluster_or_pool) if isinstance(cluster_or_pool, (list, tuple)) else [cluster_or_pool]
    if cfg.matrix_mode == "fixed":
        pool = pool[:1]
    ops_pool = [build_operators(c.decoders, c.mixers, cluster_encoding(c)) for c in pool]
    n = pool[0].n
    if p.nodes != n:
        raise DimensionMismatch(f"problem has {p.nodes} nodes, cluster has {n}")
    if states is None:
        states = initialize_states(n, p.n_dim, cfg.init, cfg.seed)
    x, y, last = pack_states(states)
    if cfg.form == "special":
        y = np.zeros_like(y)
    rng = make_rng(cfg.seed, "engine", "pool")
    rec = _Recorder("flue", p, f_star, cfg.record_every, 2 * n, x_star)
    result = rec.result
    result.initial_x, result.initial_y = x.copy(), y.copy()
    est = _node_estimates(x)
    rec.observe(est)
    rec.record(0, est, step_size(schedule, 0), 0)
    grad_max = 0.0
    for k in range(cfg.iterations):
        ops = ops_pool[int(rng.integers(len(ops_pool)))] if len(ops_pool) > 1 else ops_pool[0]
        alpha = step_size(schedule, k)
        x, y, last, grads = _cycle(x, y, last, ops, p, alpha, eps, cfg.form, cfg.mixing)
        grad_max = max(grad_max, float(np.max(np.linalg.norm(grads, axis=-1))))
        _guard(x, k, "flue")
        est = _node_estimates(x)
        rec.observe(est)
        if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.iterations:
            rec.record(k + 1, est, alpha, 2 * n)
        if log.isEnabledFor(logging.DEBUG) and (k + 1) % 1000 == 0:
            log.debug("flue cycle %d ae=%.3e", k + 1, result.records[-1].ae)
    result.grad_norm_max = grad_max
    result.final_x, result.final_y = x, y
    return rec.finish()


def run_dgd(p: LeastSquaresProblem, schedule: StepSchedule, iterations: int, record_every: int,
            f_star: float = 0.0, x0=None, x_star=None) -> RunResult:
    """DGD with uniform server-style averaging ``w = ones / n``."""
    nodes = p.nodes
    x = np.zeros((nodes, 1, p.n_dim)) if x0 is None else np.asarray(x0, dtype=float).reshape(nodes, 1, p.n_dim)
    rec = _Recorder("dgd", p, f_star, record_every, 1, x_star)
    rec.result.initial_x = x.copy()
    est = x[:, 0]
    rec.observe(est)
    rec.record(0, est, step_size(schedule, 0), 0)
    grad_max = 0.0
    for k in range(iterations):
        alpha = step_size(schedule, k)
        grads = p.batched_local_gradients(x)
        grad_max = max(grad_max, float(np.max(np.linalg.norm(grads, axis=-1))))
        x = x.mean(axis=0, keepdims=True) - alpha * grads
        _guard(x, k, "dgd")
        est = x[:, 0]
        rec.observe(est)
        if (k + 1) % record_every == 0 or k + 1 == iterations:
            rec.record(k + 1, est, alpha, 1)
    rec.result.grad_norm_max = grad_max
    rec.result.final_x = x
    return rec.finish()
