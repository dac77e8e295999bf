"""Weighted communication graphs and matrix-free Laplacian products.

The Laplacian acts on stacked dual vectors blockwise, one m-block per
agent, so the N m x N m Kronecker form is never materialized. The
blockwise kernel is shared with the distributed executor so that both
execution paths accumulate neighbor terms with identical float ops.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .blockvec import BlockVector
from .errors import ConfigurationError, ToleranceError

__all__ = [
    "CommGraph",
    "build_graph",
    "generate_graph",
    "apply_laplacian",
    "laplacian_block",
    "largest_eigenvalue_psd",
]


def largest_eigenvalue_psd(mat: np.ndarray, tol: float = 1e-10, max_iters: int = 200000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Converges to relative tolerance tol in the Rayleigh quotient. The
    start vector is drawn from a fixed stream, so results are
    deterministic for a given matrix.
    """
    mat = np.asarray(mat, dtype=np.float64)
    n = mat.shape[0]
    if n == 1:
        return float(mat[0, 0])
    v = np.random.default_rng(0x9E3779B9).standard_normal(n)
    v /= np.linalg.norm(v)
    prev = np.inf
    for _ in range(max_iters):
        w = mat @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v lies in the kernel and the matrix pushed it to zero;
            # for PSD matrices this only happens when mat is zero.
            return 0.0
        v = w / nw
        lam = float(v @ (mat @ v))
        if abs(lam - prev) <= tol * max(1.0, abs(lam)):
            return lam
        prev = lam
    raise ToleranceError(
        "power iteration did not reach the requested relative tolerance",
        achieved=abs(lam - prev),
    )


class CommGraph:
    """Undirected weighted graph over the agents.

    Attributes
    ----------
    weights : (N, N) array
        Symmetric, nonnegative, zero diagonal.
    laplacian : (N, N) array
        L = diag(W 1) - W.
    degrees : (N,) array
        Weighted degrees W 1.
    max_degree : float
        Largest weighted degree.
    lap_norm : float
        Largest Laplacian eigenvalue (the spectral norm of L, since L
        is symmetric PSD). Satisfies max_degree <= lap_norm <= 2 max_degree.
    """

    __slots__ = (
        "weights",
        "laplacian",
        "degrees",
        "max_degree",
        "lap_norm",
        "neighbors",
        "neighbor_weights",
    )

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ConfigurationError("weight matrix must be square", field="weights")
        if not np.all(np.isfinite(w)):
            raise ConfigurationError("weight matrix must be finite", field="weights")
        if np.any(w < 0.0):
            raise ConfigurationError("edge weights must be nonnegative", field="weights")
        if np.any(np.diagonal(w) != 0.0):
            raise ConfigurationError("self loops are not allowed (diagonal must be zero)", field="weights")
        if not np.array_equal(w, w.T):
            raise ConfigurationError("weight matrix must be symmetric", field="weights")
        n = w.shape[0]
        neighbors = tuple(np.flatnonzero(w[i] > 0.0) for i in range(n))
        if not _connected(neighbors):
            raise ConfigurationError(
                "communication graph must be connected so the dual consensus "
                "dynamics can reach agreement",
                field="weights",
            )
        self.weights = w
        self.degrees = w.sum(axis=1)
        self.laplacian = np.diag(self.degrees) - w
        self.max_degree = float(self.degrees.max()) if n > 0 else 0.0
        self.lap_norm = largest_eigenvalue_psd(self.laplacian)
        self.neighbors = neighbors
        self.neighbor_weights = tuple(w[i, neighbors[i]].copy() for i in range(n))

    @property
    def num_agents(self) -> int:
        return self.weights.shape[0]


def _connected(neighbors: tuple[np.ndarray, ...]) -> bool:
    """Breadth-first reachability over the positive-weight support."""
    n = len(neighbors)
    if n <= 1:
        return True
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in neighbors[i]:
            if not seen[j]:
                seen[j] = True
                queue.append(int(j))
    return bool(seen.all())


def build_graph(weights) -> CommGraph:
    """Validate a weight matrix and precompute Laplacian quantities."""
    return CommGraph(weights)


def generate_graph(
    name: str,
    n: int,
    p: float | None = None,
    seed: int | None = None,
    weight: float = 1.0,
) -> CommGraph:
    """Build a named topology over n agents with uniform edge weight.

    Supported names: "ring", "star", "complete", "erdos-renyi". The
    random family needs an edge probability p and a seed, and redraws
    until the sample is connected.
    """
    if n < 1:
        raise ConfigurationError("graph needs at least one agent", field="n")
    if weight <= 0.0:
        raise ConfigurationError("edge weight must be > 0", field="weight")
    w = np.zeros((n, n))
    if name == "ring":
        for i in range(n):
            j = (i + 1) % n
            if i != j:
                w[i, j] = w[j, i] = weight
    elif name == "star":
        for i in range(1, n):
            w[0, i] = w[i, 0] = weight
    elif name == "complete":
        w[:] = weight
        np.fill_diagonal(w, 0.0)
    elif name == "erdos-renyi":
        if p is None or not 0.0 < p <= 1.0:
            raise ConfigurationError("erdos-renyi needs an edge probability in (0, 1]", field="p")
        if seed is None:
            raise ConfigurationError("erdos-renyi needs a seed", field="seed")
        rng = np.random.default_rng(seed)
        for _ in range(1000):
            w[:] = 0.0
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < p:
                        w[i, j] = w[j, i] = weight
            try:
                return CommGraph(w)
            except ConfigurationError:
                continue
        raise ConfigurationError(
            "could not draw a connected graph; increase p", field="p"
        )
    else:
        raise ConfigurationError(f"unknown graph generator {name!r}", field="name")
    return CommGraph(w)


def laplacian_block(
    degree_i: float,
    weights_i: np.ndarray,
    v_i: np.ndarray,
    neighbor_values: np.ndarray,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """One agent's block of the stacked Laplacian product.

    Computes sum_j w_ij (v_i - v_j) as degree_i * v_i minus the weighted
    sum of the neighbor rows. weights_i and neighbor_values are
    restricted to the neighbors of agent i in ascending index order, so
    the kernel only ever touches locally available data. Both executors
    route every Laplacian product through it, with the same row order,
    so the floating point results are identical between them; the out
    form performs the same multiply then subtract elementwise.
    """
    if out is None:
        return degree_i * v_i - np.dot(weights_i, neighbor_values)
    np.multiply(degree_i, v_i, out=out)
    out -= np.dot(weights_i, neighbor_values)
    return out


def apply_laplacian(g: CommGraph, v: BlockVector) -> BlockVector:
    """Stacked product (L (x) I_m) v without forming the Kronecker matrix."""
    if v.kind != "dual":
        raise ConfigurationError("Laplacian acts on stacked dual vectors", field="kind")
    n = g.num_agents
    if v.partition.num_agents != n:
        raise ConfigurationError("graph size does not match the partition", field="weights")
    m = v.partition.constraint_dim
    vmat = v.data.reshape(n, m)
    out = np.empty_like(v.data)
    for i in range(n):
        nbrs = g.neighbors[i]
        out[i * m : (i + 1) * m] = laplacian_block(
            g.degrees[i], g.neighbor_weights[i], vmat[i], vmat[nbrs]
        )
    return BlockVector(v.partition, out, "dual")
