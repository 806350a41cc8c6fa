"""Deterministic neighbor-graph 2D projection for embedding visualization.

Builds a fuzzy k-nearest-neighbor graph with locally adaptive kernel widths,
initializes coordinates from the spectral decomposition of the graph
Laplacian, then refines the layout with attractive forces along graph edges
and smooth all-pairs repulsion. Everything runs in plain NumPy with a fixed
seed, so identical inputs and parameters always give identical coordinates.

Intended for patch-scale datasets (up to a few thousand points); distance and
force computations are dense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.optimize import curve_fit
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

_NEGATIVE_SAMPLE_RATE = 5.0
_BRIDGE_WEIGHT = 1e-3
_GRAD_CLIP = 4.0


@dataclass(frozen=True)
class ProjectionParams:
    """Hyperparameters of the 2D projection; fixed across a whole report."""

    n_neighbors: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int = 200
    learning_rate: float = 1.0
    repulsion_strength: float = 1.0
    seed: int = 42


def project_2d(embeddings: np.ndarray, params: ProjectionParams = ProjectionParams()) -> np.ndarray:
    """Project N x d embeddings to N x 2 coordinates.

    Duplicate input rows are collapsed before building the graph and mapped to
    identical output coordinates. Requires N >= 4.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be 2D, got shape {x.shape}")
    n = x.shape[0]
    if n < 4:
        raise ValueError(f"projection needs at least 4 points, got {n}")

    unique, inverse = np.unique(x, axis=0, return_inverse=True)
    m = unique.shape[0]
    if m <= 3:
        coords = _tiny_layout(unique)
        return coords[inverse]

    dists = _pairwise_distances(unique)
    k = min(params.n_neighbors, m - 1)
    weights = _fuzzy_graph(dists, k)
    weights = _bridge_components(weights, dists)

    init = _spectral_init(weights)
    a, b = _fit_kernel(params.min_dist, params.spread)
    coords = _optimize_layout(init, weights, a, b, params)
    return coords[inverse]


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _fuzzy_graph(dists: np.ndarray, k: int) -> np.ndarray:
    """Symmetric membership weights from locally scaled kNN kernels."""
    m = dists.shape[0]
    order = np.argsort(dists, axis=1, kind="stable")
    neighbor_idx = order[:, 1 : k + 1]  # skip self
    neighbor_d = np.take_along_axis(dists, neighbor_idx, axis=1)

    rho = neighbor_d[:, 0]
    sigma = _solve_sigmas(neighbor_d, rho, target=np.log2(max(k, 2)))

    directed = np.zeros((m, m))
    rows = np.repeat(np.arange(m), k)
    shifted = np.maximum(neighbor_d - rho[:, None], 0.0)
    vals = np.exp(-shifted / sigma[:, None])
    directed[rows, neighbor_idx.ravel()] = vals.ravel()

    # probabilistic union of the two directed memberships
    sym = directed + directed.T - directed * directed.T
    np.fill_diagonal(sym, 0.0)
    return sym


def _solve_sigmas(neighbor_d: np.ndarray, rho: np.ndarray, target: float) -> np.ndarray:
    """Per-point binary search for the kernel width hitting the target mass."""
    m = neighbor_d.shape[0]
    lo = np.full(m, 1e-8)
    hi = np.full(m, 1e4)
    shifted = np.maximum(neighbor_d - rho[:, None], 0.0)
    sigma = np.ones(m)
    for _ in range(64):
        sigma = 0.5 * (lo + hi)
        mass = np.exp(-shifted / sigma[:, None]).sum(axis=1)
        too_low = mass < target
        lo = np.where(too_low, sigma, lo)
        hi = np.where(too_low, hi, sigma)
    return sigma


def _bridge_components(weights: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """Weakly connect disconnected graph components (closest pairs first)."""
    n_comp, labels = connected_components(sparse.csr_matrix(weights > 0), directed=False)
    if n_comp == 1:
        return weights
    weights = weights.copy()
    comp_order = sorted(range(n_comp), key=lambda c: int(np.min(np.where(labels == c)[0])))
    connected = np.where(labels == comp_order[0])[0]
    for comp in comp_order[1:]:
        members = np.where(labels == comp)[0]
        sub = dists[np.ix_(connected, members)]
        i_local, j_local = np.unravel_index(np.argmin(sub), sub.shape)
        i, j = connected[i_local], members[j_local]
        weights[i, j] = weights[j, i] = _BRIDGE_WEIGHT
        connected = np.concatenate([connected, members])
    return weights


def _spectral_init(weights: np.ndarray) -> np.ndarray:
    """Coordinates from the 2nd/3rd eigenvectors of the normalized adjacency."""
    m = weights.shape[0]
    deg = weights.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    norm_adj = weights * inv_sqrt[:, None] * inv_sqrt[None, :]
    if m <= 512:
        _, vecs = eigh(norm_adj)
        top = vecs[:, [-2, -3]]
    else:
        v0 = np.full(m, 1.0 / np.sqrt(m))
        _, vecs = eigsh(sparse.csr_matrix(norm_adj), k=3, which="LA", v0=v0)
        top = vecs[:, [1, 0]]
    # canonical sign: largest-magnitude entry of each column positive
    for col in range(2):
        pivot = np.argmax(np.abs(top[:, col]))
        if top[pivot, col] < 0:
            top[:, col] = -top[:, col]
    scale = np.max(np.abs(top))
    if scale < 1e-12:
        return np.zeros((m, 2))
    return 10.0 * top / scale


def _fit_kernel(min_dist: float, spread: float) -> tuple[float, float]:
    """Least-squares fit of 1/(1 + a d^(2b)) to the target falloff curve."""
    xs = np.linspace(0.0, 3.0 * spread, 300)
    ys = np.where(xs <= min_dist, 1.0, np.exp(-(xs - min_dist) / spread))

    def kernel(d, a, b):
        return 1.0 / (1.0 + a * d ** (2.0 * b))

    (a, b), _ = curve_fit(kernel, xs, ys, p0=[1.0, 1.0], maxfev=5000)
    return float(a), float(b)


def _optimize_layout(
    init: np.ndarray, weights: np.ndarray, a: float, b: float, params: ProjectionParams
) -> np.ndarray:
    coords = init.copy()
    m = coords.shape[0]
    rep_scale = (
        params.repulsion_strength * _NEGATIVE_SAMPLE_RATE * min(params.n_neighbors, m - 1) / m
    )
    complement = np.clip(1.0 - weights, 0.0, 1.0)
    np.fill_diagonal(complement, 0.0)

    chunk = 256
    for epoch in range(params.n_epochs):
        lr = params.learning_rate * (1.0 - epoch / params.n_epochs)
        grad = np.empty_like(coords)
        for start in range(0, m, chunk):
            stop = min(start + chunk, m)
            diff = coords[start:stop, None, :] - coords[None, :, :]
            d2 = np.sum(diff * diff, axis=2)
            d2_safe = np.maximum(d2, 1e-10)
            denom = 1.0 + a * d2_safe**b
            attract = (-2.0 * a * b * d2_safe ** (b - 1.0) / denom) * weights[start:stop]
            repulse = (
                2.0 * rep_scale * b / ((0.001 + d2_safe) * denom)
            ) * complement[start:stop]
            pair_grad = np.clip((attract + repulse)[:, :, None] * diff, -_GRAD_CLIP, _GRAD_CLIP)
            grad[start:stop] = pair_grad.sum(axis=1)
        coords += lr * grad
    return coords


def _tiny_layout(unique: np.ndarray) -> np.ndarray:
    """Deterministic fallback for <= 3 distinct points: centered PCA coords."""
    centered = unique - unique.mean(axis=0, keepdims=True)
    if unique.shape[0] == 1:
        return np.zeros((1, 2))
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((unique.shape[0], 2))
    take = min(2, s.shape[0])
    coords[:, :take] = u[:, :take] * s[:take]
    return coords
