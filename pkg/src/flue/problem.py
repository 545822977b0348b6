"""Partitioned least-squares instance with exact and coded gradient oracles."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .coding import EncodingMatrix
from .errors import RankDeficient
from .numerics import norm_2inf
from .rng import make_rng
from .serialization import matrix_from_json, matrix_to_json, vector_from_json, vector_to_json

MAX_RESAMPLES = 10


def partition_rows(m: int, nodes: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) row ranges; the first ``m % nodes`` ranges get one extra row."""
    if nodes < 1 or nodes > m:
        raise ValueError(f"cannot split {m} rows across {nodes} nodes")
    base, extra = divmod(m, nodes)
    bounds, start = [], 0
    for i in range(nodes):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


@dataclass(frozen=True)
class LeastSquaresProblem:
    """``f(x) = scale * ||F x - y||^2`` split by rows into one local term per node.

    ``scale`` only rescales the objective (and so every gradient); the
    minimizer is unchanged. It lets a fixed step-size schedule stay stable
    across problem sizes.
    """

    f_mat: np.ndarray
    x_o: np.ndarray
    y: np.ndarray
    partition: tuple
    seed: object = None
    scale: float = 1.0

    def __post_init__(self):
        f_mat = np.array(self.f_mat, dtype=float)
        x_o = np.array(self.x_o, dtype=float)
        y = np.array(self.y, dtype=float)
        part = tuple((int(a), int(b)) for a, b in self.partition)
        m, n_dim = f_mat.shape
        if y.shape != (m,) or x_o.shape != (n_dim,):
            raise ValueError("inconsistent problem dimensions")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive and finite")
        object.__setattr__(self, "scale", float(self.scale))
        covered = [i for a, b in part for i in range(a, b)]
        if covered != list(range(m)):
            raise ValueError("partition must be contiguous, disjoint and cover every row")
        for arr in (f_mat, x_o, y):
            arr.setflags(write=False)
        object.__setattr__(self, "f_mat", f_mat)
        object.__setattr__(self, "x_o", x_o)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "partition", part)
        # zero-padded per-node blocks let every node's gradient be taken in one batched matmul
        width = max(b - a for a, b in part)
        f_pad = np.zeros((len(part), width, n_dim))
        y_pad = np.zeros((len(part), width))
        for i, (a, b) in enumerate(part):
            f_pad[i, :b - a] = f_mat[a:b]
            y_pad[i, :b - a] = y[a:b]
        object.__setattr__(self, "_f_pad", f_pad)
        object.__setattr__(self, "_f_pad_t", np.ascontiguousarray(f_pad.transpose(0, 2, 1)))
        object.__setattr__(self, "_y_pad", y_pad)

    @property
    def m(self) -> int:
        return self.f_mat.shape[0]

    @property
    def n_dim(self) -> int:
        return self.f_mat.shape[1]

    @property
    def nodes(self) -> int:
        return len(self.partition)

    def block(self, node: int):
        a, b = self.partition[node]
        return self.f_mat[a:b], self.y[a:b]

    def objective(self, x) -> float:
        r = self.f_mat @ np.asarray(x, dtype=float) - self.y
        return self.scale * float(r @ r)

    def local_objective(self, node: int, x) -> float:
        f_i, y_i = self.block(node)
        r = f_i @ np.asarray(x, dtype=float) - y_i
        return self.scale * float(r @ r)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * self.scale * (self.f_mat.T @ (self.f_mat @ np.asarray(x, dtype=float) - self.y))

    def batched_local_gradients(self, points: np.ndarray) -> np.ndarray:
        """Local gradients for many points at once.

        ``points`` has shape (nodes, k, N); entry ``[i, j]`` is evaluated with
        node ``i``'s data. Returns an array of the same shape.
        """
        resid = points @ self._f_pad_t - self._y_pad[:, None, :]
        return (2.0 * self.scale) * (resid @ self._f_pad)

    def to_json(self) -> str:
        doc = {
            "f_mat": matrix_to_json(self.f_mat),
            "x_o": vector_to_json(self.x_o),
            "y": vector_to_json(self.y),
            "partition": [list(r) for r in self.partition],
            "scale": repr(self.scale),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LeastSquaresProblem":
        doc = json.loads(text)
        return cls(f_mat=matrix_from_json(doc["f_mat"]), x_o=vector_from_json(doc["x_o"]),
                   y=vector_from_json(doc["y"]), partition=tuple(tuple(r) for r in doc["partition"]),
                   scale=float(doc.get("scale", "1.0")))


def generate_problem(m: int, n_dim: int, nodes: int, seed, scale: float = 1.0) -> LeastSquaresProblem:
    """Gaussian ``F`` (m x n_dim), ``x_o ~ U[-1, 1]``, consistent ``y = F x_o``."""
    if not m > n_dim >= 1:
        raise ValueError("need m > n_dim >= 1")
    part = partition_rows(m, nodes)
    rng = make_rng(seed)
    for _ in range(MAX_RESAMPLES):
        f_mat = rng.standard_normal((m, n_dim))
        if np.linalg.matrix_rank(f_mat) == n_dim and np.isfinite(np.linalg.cond(f_mat)):
            break
    else:
        raise RankDeficient(f"no full-column-rank {m}x{n_dim} draw in {MAX_RESAMPLES} tries")
    x_o = rng.uniform(-1.0, 1.0, size=n_dim)
    return LeastSquaresProblem(f_mat=f_mat, x_o=x_o, y=f_mat @ x_o, partition=tuple(part), seed=seed,
                              scale=scale)


def local_gradient(p: LeastSquaresProblem, node: int, x) -> np.ndarray:
    """``2 * scale * F_i^T (F_i x - y_i)`` for node ``i``'s rows."""
    f_i, y_i = p.block(node)
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n_dim,):
        raise ValueError(f"x must have length {p.n_dim}")
    return 2.0 * p.scale * (f_i.T @ (f_i @ x - y_i))


def coded_gradient(p: LeastSquaresProblem, b: EncodingMatrix, slot: int, node: int, x) -> np.ndarray:
    return b.b[slot, node] * local_gradient(p, node, x)


def optimum(p: LeastSquaresProblem) -> tuple[np.ndarray, float]:
    x_star, *_ = np.linalg.lstsq(p.f_mat, p.y, rcond=None)
    return x_star, p.objective(x_star)


@dataclass(frozen=True)
class GradientBounds:
    f_bound: float
    g_bound: float


def gradient_bounds(f_bound: float, b: EncodingMatrix) -> GradientBounds:
    """Coded-gradient bound ``sqrt(n) * ||B||_{2,inf} * f_bound``."""
    return GradientBounds(f_bound=float(f_bound), g_bound=float(np.sqrt(b.n) * norm_2inf(b.b) * f_bound))
