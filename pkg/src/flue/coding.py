"""Encoding matrix, decoding rows, per-node decoders and surplus mixers.

Slots and nodes are 0-based throughout. A decoder row has 2n positions:
positions ``0..n-1`` carry positive decoding coefficients (descent copies of
the estimate) and positions ``n..2n-1`` carry the magnitudes of negative
coefficients (ascent copies).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .errors import (
    GammaMismatch,
    GenerationFailed,
    InfeasibleEncoding,
    InfeasibleRow,
    NotSIA,
)
from .numerics import as_matrix, left_null_basis, pseudoinverse, rank
from .rng import derive_seed, make_rng

ENTRY_GUARD = 1e-6        # distance kept from 0 and 1 in B
IDENTITY_TOL = 1e-9       # a·B = 1 residual allowed
GAMMA_TOL = 1e-12
SNAP_REL = 1e-12          # coefficients this small (relative) are treated as exact zeros
MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class EncodingMatrix:
    b: np.ndarray

    def __post_init__(self):
        b = as_matrix(self.b).astype(float)
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def p(self) -> int:
        return self.b.shape[1]

    def violations(self) -> list[str]:
        """Names of the violated invariants (empty when valid)."""
        out = []
        b = self.b
        if rank(b) > min(self.n, self.p) - 1:
            out.append("rank exceeds min(n, p) - 1")
        if np.any(np.abs(b) <= ENTRY_GUARD):
            out.append("entry too close to 0")
        if np.any(np.abs(b - 1.0) <= ENTRY_GUARD):
            out.append("entry too close to 1")
        ones = np.ones(self.p)
        if np.max(np.abs(ones @ pseudoinverse(b) @ b - ones)) > IDENTITY_TOL:
            out.append("all-ones vector not in the row space")
        return out

    @classmethod
    def from_array(cls, b) -> "EncodingMatrix":
        enc = cls(np.array(b, dtype=float))
        bad = enc.violations()
        if bad:
            raise ValueError("invalid encoding matrix: " + "; ".join(bad))
        return enc


def build_encoding_matrix(n: int, p: int, seed) -> EncodingMatrix:
    """Random singular n x p encoding matrix whose row space contains the all-ones vector.

    ``min(n, p) - 1`` generator rows are drawn from U[0.2, 0.9]^p with the first
    two forced to sum to all-ones; the remaining rows are positive combinations
    of the generators. Draws with an entry within 1e-6 of 0 or 1 are rejected.
    """
    if n < 2 or p < 2:
        raise ValueError("encoding matrix needs n >= 2 and p >= 2")
    rng = make_rng(seed)
    r = min(n, p) - 1
    for _ in range(MAX_REJECTIONS):
        if r == 1:
            gens = np.full((1, p), rng.uniform(0.2, 0.9))
        else:
            gens = rng.uniform(0.2, 0.9, size=(r, p))
            gens[1] = 1.0 - gens[0]
        coeffs = rng.uniform(0.1, 1.0, size=(n - r, r))
        b = np.vstack([gens, coeffs @ gens])
        if np.any(np.abs(b) <= ENTRY_GUARD) or np.any(np.abs(b - 1.0) <= ENTRY_GUARD):
            continue
        enc = EncodingMatrix(b)
        if not enc.violations():
            return enc
    raise GenerationFailed(f"no valid {n}x{p} encoding matrix after {MAX_REJECTIONS} draws")


@dataclass(frozen=True)
class DecodingRow:
    """Coefficients ``a`` with ``a @ B == 1`` and the slot they are designated for."""

    a: np.ndarray
    slot: int
    support: tuple = field(default=())
    weight: float = 0.0
    gamma: float = 0.0

    @classmethod
    def from_coefficients(cls, a, slot: int) -> "DecodingRow":
        a = np.array(a, dtype=float)
        if not 0 <= slot < a.size:
            raise IndexError(f"slot {slot} out of range for {a.size} coefficients")
        a[np.abs(a) <= SNAP_REL * np.max(np.abs(a))] = 0.0
        a.setflags(write=False)
        l1 = float(np.sum(np.abs(a)))
        if a[slot] == 0.0:
            raise InfeasibleRow(f"designated coefficient a[{slot}] is zero")
        if a[slot] < 0.0:
            raise InfeasibleRow(f"designated coefficient a[{slot}] is negative")
        weight = 1.0 / l1
        gamma = weight * a[slot]
        if gamma >= 1.0:
            raise InfeasibleRow("designated coefficient carries the whole row (gamma = 1)")
        support = tuple(int(j) for j in np.flatnonzero(a))
        return cls(a=a, slot=slot, support=support, weight=weight, gamma=float(gamma))

    def decoder_row(self) -> np.ndarray:
        """2n-length probability vector: w*a_j at j if a_j > 0, w*|a_j| at j+n if a_j < 0."""
        n = self.a.size
        out = np.zeros(2 * n)
        scaled = self.weight * self.a
        pos = scaled > 0
        neg = scaled < 0
        out[:n][pos] = scaled[pos]
        out[n:][neg] = -scaled[neg]
        return out


def _particular_solution(enc: EncodingMatrix) -> np.ndarray:
    ones = np.ones(enc.p)
    a0 = ones @ pseudoinverse(enc.b)
    if np.max(np.abs(a0 @ enc.b - ones)) > IDENTITY_TOL:
        raise InfeasibleEncoding("all-ones vector is not in the row space of B")
    return a0


def solve_decoding_row(enc: EncodingMatrix, beta: float, x, slot: int) -> DecodingRow:
    """Decoding row ``1^T B^+ + beta * x^T Y`` with ``Y`` the left null basis of B."""
    a0 = _particular_solution(enc)
    null = left_null_basis(enc.b)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size == 0:
        a = a0
    else:
        if x.size != null.shape[0]:
            raise ValueError(f"x has length {x.size}, null space has dimension {null.shape[0]}")
        a = a0 + beta * (x @ null)
    return DecodingRow.from_coefficients(a, slot)


def _ratio_roots(c: np.ndarray, v: np.ndarray, slot: int, gamma: float) -> list[float]:
    """All t with (c + t v)[slot] = gamma * ||c + t v||_1 and (c + t v)[slot] > 0.

    The residual is piecewise linear in t with kinks where an entry changes
    sign, so each linear piece is solved exactly.
    """
    nz = np.abs(v) > 0
    kinks = np.unique(-c[nz] / v[nz])
    edges = np.concatenate([[-np.inf], kinks, [np.inf]])
    roots = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if np.isinf(lo) and np.isinf(hi):
            probe = 0.0
        elif np.isinf(lo):
            probe = hi - 1.0
        elif np.isinf(hi):
            probe = lo + 1.0
        else:
            probe = 0.5 * (lo + hi)
        sign = np.sign(c + probe * v)
        # residual(t) = offset + slope * t on this piece
        offset = c[slot] - gamma * np.dot(sign, c)
        slope = v[slot] - gamma * np.dot(sign, v)
        if slope == 0.0:
            continue
        t = -offset / slope
        if lo <= t <= hi and c[slot] + t * v[slot] > 0:
            roots.append(float(t))
    return sorted(set(roots))


def _row_from_coefficients(enc: EncodingMatrix, a: np.ndarray, slot: int, beta: float) -> DecodingRow:
    """Express ``a`` in the ``(beta, x)`` parametrisation and rebuild it through it."""
    a0 = _particular_solution(enc)
    null = left_null_basis(enc.b)
    x = (a - a0) @ null.T / beta
    return solve_decoding_row(enc, beta, x, slot)


def _segment_row(enc: EncodingMatrix, gamma: float, slot: int, rng) -> DecodingRow | None:
    """Row on the segment from a random decoding row towards the ratio maximiser.

    Decoding rows form an affine set and the ratio is continuous on it, so any
    gamma below the supremum is crossed somewhere on such a segment.
    """
    a0 = _particular_solution(enc)
    null = left_null_basis(enc.b)
    beta = rng.uniform(0.5, 2.0)
    start = a0 + beta * (rng.standard_normal(null.shape[0]) @ null)
    _, u, tau = _reach_program(enc, slot)
    if tau > 1e-12:
        high = u / tau
    else:
        # supremum only approached along the null direction u: push far enough along it
        high = a0 + u
        while _ratio(high, slot) <= gamma and np.linalg.norm(high) < 1e12:
            high = a0 + 2.0 * (high - a0)
    if _ratio(high, slot) <= gamma:
        return None
    roots = [t for t in _ratio_roots(start, high - start, slot, gamma) if 0.0 <= t <= 1.0]
    if not roots:
        return None
    a = start + roots[0] * (high - start)
    try:
        row = _row_from_coefficients(enc, a, slot, beta)
    except InfeasibleRow:
        return None
    return row if abs(row.gamma - gamma) <= GAMMA_TOL else None


def _ratio(a: np.ndarray, slot: int) -> float:
    return float(a[slot] / np.sum(np.abs(a)))


def draw_decoding_row(enc: EncodingMatrix, gamma: float, slot: int, rng,
                      max_tries: int = 64) -> DecodingRow:
    """Random decoding row for ``slot`` whose normalised diagonal equals ``gamma``.

    Fixes ``beta`` and all but the last null-space coordinate at random and solves
    the remaining coordinate so that ``w * a[slot] == gamma``. When random slices
    keep missing (large null spaces, gamma close to its supremum) the row is
    taken on a segment towards the ratio maximiser instead.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    a0 = _particular_solution(enc)
    null = left_null_basis(enc.b)
    d = null.shape[0]
    if d == 0:
        raise InfeasibleRow("B has full row rank; the decoding row is unique")
    for attempt in range(max_tries):
        if attempt >= max_tries // 4:
            row = _segment_row(enc, gamma, slot, rng)
            if row is not None:
                return row
            continue
        beta = rng.uniform(0.5, 2.0)
        x = rng.standard_normal(d)
        base = a0 + beta * (x[:-1] @ null[:-1]) if d > 1 else a0
        roots = _ratio_roots(base, beta * null[-1], slot, gamma)
        if not roots:
            continue
        x[-1] = roots[rng.integers(len(roots))]
        try:
            row = solve_decoding_row(enc, beta, x, slot)
        except InfeasibleRow:
            continue
        if abs(row.gamma - gamma) <= GAMMA_TOL:
            return row
    raise InfeasibleRow(f"gamma={gamma:.6f} is not reachable for slot {slot}")


def _reach_program(enc: EncodingMatrix, slot: int) -> tuple[float, np.ndarray, float]:
    """Solve the ratio-maximisation program; returns (value, u, tau)."""
    n, p = enc.n, enc.p
    # variables: u_plus (n), u_minus (n), tau
    cost = np.zeros(2 * n + 1)
    cost[slot] = -1.0
    cost[n + slot] = 1.0
    eq = np.zeros((p + 1, 2 * n + 1))
    eq[:p, :n] = enc.b.T
    eq[:p, n:2 * n] = -enc.b.T
    eq[:p, -1] = -1.0
    eq[p, :2 * n] = 1.0
    rhs = np.zeros(p + 1)
    rhs[p] = 1.0
    res = scipy.optimize.linprog(cost, A_eq=eq, b_eq=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        raise InfeasibleEncoding(f"reachable-gamma program failed: {res.message}")
    u = res.x[:n] - res.x[n:2 * n]
    return float(-res.fun), u, float(res.x[-1])


def max_reachable_gamma(enc: EncodingMatrix, slot: int) -> float:
    """Supremum of ``a[slot] / ||a||_1`` over all decoding rows ``a`` of ``enc``.

    With ``u = a / ||a||_1`` and ``tau = 1 / ||a||_1`` the ratio becomes linear:
    maximise ``u[slot]`` subject to ``u B = tau * 1``, ``||u||_1 = 1``, ``tau >= 0``.
    The value is a supremum; it may only be approached, never attained.
    """
    return float(min(1.0, _reach_program(enc, slot)[0]))


def sia_check(m, max_power: int | None = None) -> bool:
    """True iff some power m^k, k <= max_power, has a column with every entry > 1e-12."""
    m = as_matrix(m)
    dim = m.shape[0]
    if m.shape != (dim, dim):
        raise ValueError("sia_check needs a square matrix")
    if np.any(m < -1e-10) or np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-10:
        raise ValueError("sia_check needs a row-stochastic matrix")
    if max_power is None:
        max_power = dim * dim
    power = m.copy()
    for _ in range(max_power):
        if np.any(np.all(power > 1e-12, axis=0)):
            return True
        nxt = power @ m
        if np.array_equal(nxt, power):
            return False
        power = nxt
    return False


@dataclass(frozen=True)
class NodeDecoder:
    node_id: int
    rows_plus: np.ndarray
    rows_minus: np.ndarray
    replicated: bool
    plus_rows: tuple = ()
    minus_rows: tuple = ()

    @property
    def n(self) -> int:
        return self.rows_plus.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.rows_plus, self.rows_minus])

    @property
    def gammas(self) -> np.ndarray:
        idx = np.arange(self.n)
        return self.rows_plus[idx, idx]

    def has_negative(self) -> bool:
        return bool(np.any(self.rows_plus[:, self.n:] > 0) or np.any(self.rows_minus[:, self.n:] > 0))


def _decoder_block(rows, gammas) -> np.ndarray:
    n = len(gammas)
    if len(rows) != n:
        raise ValueError(f"expected {n} decoding rows, got {len(rows)}")
    block = np.zeros((n, 2 * n))
    for i, row in enumerate(rows):
        if row.slot != i:
            raise ValueError(f"row {i} is designated for slot {row.slot}")
        if abs(row.gamma - gammas[i]) > GAMMA_TOL:
            raise GammaMismatch(f"slot {i}: row gamma {row.gamma!r} != cluster gamma {gammas[i]!r}")
        block[i] = row.decoder_row()
    return block


def build_node_decoder(rows, gammas, replicate: bool = True, seed=None, *,
                       node_id: int = 0, encoding: EncodingMatrix | None = None) -> NodeDecoder:
    """Stack decoding rows into a node's 2n x 2n row-stochastic decoder.

    With ``replicate`` the ascent rows repeat the descent rows; otherwise a
    second, independent set of rows with the same gammas is drawn from
    ``encoding`` using ``seed``.
    """
    gammas = np.asarray(gammas, dtype=float)
    if np.any(gammas <= 0) or np.any(gammas >= 1):
        raise ValueError("cluster gammas must lie in (0, 1)")
    rows = list(rows)
    plus = _decoder_block(rows, gammas)
    if replicate:
        minus_rows = rows
        minus = plus.copy()
    else:
        if encoding is None:
            raise ValueError("an encoding matrix is needed to draw independent ascent rows")
        rng = make_rng(seed)
        minus_rows = [draw_decoding_row(encoding, g, i, rng) for i, g in enumerate(gammas)]
        minus = _decoder_block(minus_rows, gammas)
    dec = NodeDecoder(node_id=node_id, rows_plus=plus, rows_minus=minus, replicated=replicate,
                      plus_rows=tuple(rows), minus_rows=tuple(minus_rows))
    if not sia_check(dec.stacked):
        raise NotSIA(f"stacked decoder of node {node_id} is not SIA")
    return dec


@dataclass(frozen=True)
class SurplusMixer:
    node_id: int
    d_plus: np.ndarray
    d_minus: np.ndarray
    replicated: bool


def build_surplus_mixer(n: int, node_id: int = 0, replicate: bool = True, seed=0) -> SurplusMixer:
    """Column-stochastic n x n mixers with strictly positive entries."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = make_rng(seed, "mixer", node_id)

    def draw():
        m = 1.0 - rng.random((n, n))     # (0, 1]
        return m / m.sum(axis=0, keepdims=True)

    d_plus = draw()
    d_minus = d_plus.copy() if replicate else draw()
    return SurplusMixer(node_id=node_id, d_plus=d_plus, d_minus=d_minus, replicated=replicate)


def has_positive_column(decoder: NodeDecoder) -> bool:
    """True if some descent column of the stacked decoder is positive in every row."""
    n = decoder.n
    return bool(np.any(np.all(decoder.stacked[:, :n] > 0, axis=0)))


@dataclass(frozen=True)
class Cluster:
    """Everything the server and nodes share for one run: B, the gammas, decoders and mixers."""

    encoding: EncodingMatrix | None
    gammas: np.ndarray
    decoders: tuple
    mixers: tuple

    @property
    def n(self) -> int:
        return len(self.decoders)


def trivial_decoder(gamma: float, node_id: int = 0) -> NodeDecoder:
    """Single-node decoder ``[gamma, 1 - gamma]``; there is no encoding matrix for n = 1."""
    row = np.array([[gamma, 1.0 - gamma]])
    return NodeDecoder(node_id=node_id, rows_plus=row, rows_minus=row.copy(), replicated=True)


def build_cluster(n: int, seed, *, p: int | None = None, replicate: bool = True,
                  encoding: EncodingMatrix | None = None, max_rounds: int = 200) -> Cluster:
    """Build B, coordinated gammas, one decoder and one surplus mixer per node.

    Each slot's gamma is a U[0.2, 0.8] fraction of the largest diagonal weight
    any decoding row can reach for that slot. Draws are repeated until every
    stacked decoder is SIA and at least one has a positive descent column.
    Passing ``encoding`` reuses an existing B instead of drawing one.
    """
    rng = make_rng(seed, "decoders")
    if n == 1:
        gamma = float(rng.uniform(0.2, 0.8))
        mixer = build_surplus_mixer(1, 0, replicate, seed)
        return Cluster(encoding=None, gammas=np.array([gamma]),
                       decoders=(trivial_decoder(gamma),), mixers=(mixer,))
    if encoding is not None:
        enc = encoding
        if enc.n != n:
            raise ValueError(f"encoding has {enc.n} rows, expected {n}")
    else:
        enc = build_encoding_matrix(n, n if p is None else p, make_rng(seed, "encoding"))
    reach = np.array([max_reachable_gamma(enc, i) for i in range(n)])
    for _ in range(max_rounds):
        gammas = reach * rng.uniform(0.2, 0.8, size=n)
        try:
            decoders = []
            for l in range(n):
                rows = [draw_decoding_row(enc, g, i, rng) for i, g in enumerate(gammas)]
                decoders.append(build_node_decoder(rows, gammas, replicate, rng.integers(2**63),
                                                   node_id=l, encoding=enc))
        except (InfeasibleRow, NotSIA):
            continue
        if any(has_positive_column(d) for d in decoders):
            mixers = tuple(build_surplus_mixer(n, l, replicate, seed) for l in range(n))
            return Cluster(encoding=enc, gammas=gammas, decoders=tuple(decoders), mixers=mixers)
    raise GenerationFailed(f"no SIA decoder set with a positive column after {max_rounds} rounds")


def build_cluster_pool(n: int, seed, size: int, *, p: int | None = None,
                       replicate: bool = True, shared_mixers: bool = True) -> list[Cluster]:
    """``size`` decoder sets that all share one encoding matrix.

    By default the surplus mixers are shared too, so every member has the same
    surplus fixed point and only the decoders vary between periods.
    """
    if size < 1:
        raise ValueError("pool size must be positive")
    enc = None if n == 1 else build_encoding_matrix(n, n if p is None else p, make_rng(seed, "encoding"))
    pool = [build_cluster(n, derive_seed(seed, "pool", i), replicate=replicate, encoding=enc)
            for i in range(size)]
    if shared_mixers:
        mixers = tuple(build_surplus_mixer(n, l, replicate, seed) for l in range(n))
        pool = [replace(c, mixers=mixers) for c in pool]
    return pool
