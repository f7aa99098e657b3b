"""Weighted graphs, the normalized Laplacian and Chebyshev spectral filters."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .diffmath import DimensionError, Var, add, matmul, mul, propagate, sub


class GraphError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Power iteration did not converge; ``estimate`` holds the last value."""

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected, connected graph with a symmetric nonnegative weight matrix."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise GraphError(f"weight matrix must be square, got {w.shape}")
        if w.shape[0] < 2:
            raise GraphError("graph needs at least two nodes")
        if not np.array_equal(w, w.T):
            raise GraphError("weight matrix is not symmetric")
        if np.any(w < 0):
            raise GraphError("negative edge weight")
        if np.any(np.diag(w) != 0):
            raise GraphError("self loops are not allowed")
        if not _connected(w):
            raise GraphError("graph is not connected")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def edges(self) -> list[tuple[int, int, float]]:
        iu, ju = np.nonzero(np.triu(self.weights))
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(iu, ju)]

    def hops_from(self, node: int) -> np.ndarray:
        """Breadth-first hop distance from ``node`` (-1 if unreachable)."""
        dist = np.full(self.n_nodes, -1)
        dist[node] = 0
        queue = deque([node])
        while queue:
            u = queue.popleft()
            for v in np.nonzero(self.weights[u])[0]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


def _connected(w: np.ndarray) -> bool:
    seen = np.zeros(w.shape[0], dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in np.nonzero(w[u])[0]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return bool(seen.all())


def build_grid_graph(rows: int, cols: int) -> WeightedGraph:
    """4-neighbour grid with unit weights; node ``(i, j)`` has index ``i*cols + j``."""
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise GraphError(f"grid {rows}x{cols} is too small for a connected graph")
    n = rows * cols
    w = np.zeros((n, n))
    for i in range(rows):
        for j in range(cols):
            u = i * cols + j
            if j + 1 < cols:
                w[u, u + 1] = w[u + 1, u] = 1.0
            if i + 1 < rows:
                w[u, u + cols] = w[u + cols, u] = 1.0
    return WeightedGraph(w)


def write_edge_list(graph: WeightedGraph, path) -> None:
    lines = [f"{u} {v} {w!r}" for u, v, w in graph.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path, n_nodes: int | None = None) -> WeightedGraph:
    triples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise GraphError(f"{path}:{lineno}: expected 'u v w'")
        triples.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if n_nodes is None:
        n_nodes = 1 + max(max(u, v) for u, v, _ in triples)
    w = np.zeros((n_nodes, n_nodes))
    for u, v, wt in triples:
        w[u, v] = w[v, u] = wt
    return WeightedGraph(w)


def normalized_laplacian(graph: WeightedGraph) -> np.ndarray:
    """``I - D^{-1/2} W D^{-1/2}``."""
    deg = graph.degrees
    if np.any(deg <= 0):
        raise GraphError("zero-degree node")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(graph.n_nodes) - inv_sqrt[:, None] * graph.weights * inv_sqrt[None, :]
    # exact symmetry; the elementwise products above are already symmetric
    return 0.5 * (lap + lap.T)


def estimate_lambda_max(
    lap: np.ndarray, tol: float = 1e-6, max_iter: int = 10_000, seed: int = 0
) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once the residual ``||L v - rho v||`` falls below ``tol * rho``,
    which bounds the distance from ``rho`` to the spectrum.
    """
    lap = np.asarray(lap, dtype=np.float64)
    if not np.allclose(lap, lap.T, atol=1e-12):
        raise GraphError("power iteration needs a symmetric matrix")
    v = np.random.default_rng(seed).standard_normal(lap.shape[0])
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(max_iter):
        w = lap @ v
        rho = float(v @ w)
        if np.linalg.norm(w - rho * v) <= tol * max(abs(rho), 1e-300):
            return rho
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps", rho)


@dataclass(frozen=True)
class ScaledLaplacian:
    """Normalized Laplacian, its largest eigenvalue and ``2L/lmax - I``."""

    laplacian: np.ndarray
    lambda_max: float
    scaled: sp.csr_matrix

    @classmethod
    def from_graph(cls, graph: WeightedGraph, tol: float = 1e-6) -> "ScaledLaplacian":
        lap = normalized_laplacian(graph)
        lmax = estimate_lambda_max(lap, tol=tol)
        scaled = 2.0 * lap / lmax - np.eye(graph.n_nodes)
        return cls(lap, lmax, sp.csr_matrix(scaled))

    @property
    def n_nodes(self) -> int:
        return self.laplacian.shape[0]


def chebyshev_apply(coeffs, sl: ScaledLaplacian, x) -> Var:
    """Chebyshev spectral filter ``sum_k T_k(L~) x W_k``.

    ``coeffs`` has shape ``(K, c_in, c_out)``; ``x`` has shape
    ``(..., n, c_in)``. Uses the three-term recurrence with sparse
    products, so cost grows with the edge count rather than ``n**2``.
    """
    cv = coeffs.value if isinstance(coeffs, Var) else np.asarray(coeffs)
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    if cv.ndim != 3:
        raise DimensionError(f"chebyshev_apply: coefficients must be (K, c_in, c_out), got {cv.shape}")
    if xv.ndim < 2 or xv.shape[-1] != cv.shape[1]:
        raise DimensionError(
            f"chebyshev_apply: signal {xv.shape} has wrong channel count for coefficients {cv.shape}"
        )
    if xv.shape[-2] != sl.n_nodes:
        raise DimensionError(f"chebyshev_apply: signal {xv.shape} on a {sl.n_nodes}-node graph")
    order = cv.shape[0]
    t_prev = x
    y = matmul(t_prev, coeffs[0] if isinstance(coeffs, Var) else cv[0])
    if order == 1:
        return y
    t_cur = propagate(sl.scaled, x)
    y = add(y, matmul(t_cur, coeffs[1] if isinstance(coeffs, Var) else cv[1]))
    for k in range(2, order):
        t_next = sub(mul(2.0, propagate(sl.scaled, t_cur)), t_prev)
        y = add(y, matmul(t_next, coeffs[k] if isinstance(coeffs, Var) else cv[k]))
        t_prev, t_cur = t_cur, t_next
    return y


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns,
    sorted ascending.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2) * 2.0)
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = a[:, p].copy()
                rot_q = a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p = a[p, :].copy()
                rot_q = a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError("Jacobi sweeps did not converge", float("nan"))
    w = np.diag(a).copy()
    order = np.argsort(w)
    return w[order], v[:, order]


def spectral_oracle(lap: np.ndarray, coeffs, x: np.ndarray, max_nodes: int = 64) -> np.ndarray:
    """Filter ``x`` with ``U g(Lambda) U^T`` where ``g`` is a power series in L.

    ``coeffs`` is either a 1-D vector of monomial coefficients (applied to
    every channel) or an array ``(K, c_in, c_out)``.
    """
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    if n > max_nodes:
        raise GraphError(f"spectral oracle limited to {max_nodes} nodes, got {n}")
    lam, u = jacobi_eigh(lap)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    powers = lam[None, :] ** np.arange(coeffs.shape[0])[:, None]
    if coeffs.ndim == 1:
        resp = coeffs @ powers
        return u @ (resp[:, None] * (u.T @ x.reshape(n, -1))).reshape(x.shape)
    x_hat = u.T @ x
    resp = np.einsum("kio,kn->nio", coeffs, powers)
    return u @ np.einsum("nio,ni->no", resp, x_hat)
