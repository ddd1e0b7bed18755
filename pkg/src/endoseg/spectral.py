"""Per-image spectral clustering.

Symmetric normalized Laplacian, iterative smallest-eigenpair solver with a
residual contract, eigenvalue-magnitude segment-count rule, and K-means
discretization of the row-normalized spectral embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .affinity import AffinityMatrix
from .data_model import EigGapRule
from .errors import ConfigError, NumericalError

ISOLATED_SELF_LOOP = 1e-12
# ARPACK wants k well below n; tiny problems go through the dense path,
# which satisfies the same residual/determinism contract.
_DENSE_CUTOFF = 64


@dataclass(frozen=True)
class SpectralEmbedding:
    """Ascending smallest eigenpairs of the symmetric normalized Laplacian."""

    eigenvalues: np.ndarray   # [m]
    eigenvectors: np.ndarray  # [n, m], orthonormal columns
    laplacian_kind: str = "symmetric-normalized"


@dataclass(frozen=True)
class SegmentMap:
    """Per-cell segment assignment with ids contiguous from 0, largest first."""

    image_id: str
    assignment: np.ndarray  # [grid_h, grid_w] int
    n_segments: int
    bboxes: tuple[tuple[int, int, int, int], ...]  # pixel (x0, y0, x1, y1)
    patch_size: int


def laplacian(w: AffinityMatrix | sp.spmatrix) -> sp.csr_matrix:
    """L = I - D^{-1/2} W D^{-1/2}, self-weights ignored, isolated vertices
    patched with an epsilon self-loop so degrees stay positive."""
    mat = w.matrix if isinstance(w, AffinityMatrix) else w
    adj = sp.csr_matrix(mat, dtype=np.float64, copy=True)
    adj.setdiag(0.0)
    adj.eliminate_zeros()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    isolated = degree <= 0
    if isolated.any():
        adj = adj.tolil()
        for i in np.flatnonzero(isolated):
            adj[i, i] = ISOLATED_SELF_LOOP
        adj = adj.tocsr()
        degree = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(degree))
    normalized = inv_sqrt @ adj @ inv_sqrt
    normalized = (normalized + normalized.T) / 2.0
    lap = sp.eye(adj.shape[0], format="csr") - normalized
    return sp.csr_matrix(lap)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Deterministic sign: largest-magnitude entry of each column positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0:
            out[:, j] = -col
    return out


def smallest_eigenpairs(lap: sp.spmatrix, m: int, tol: float = 1e-6,
                        seed: int = 0) -> SpectralEmbedding:
    """m smallest eigenpairs of a sparse symmetric PSD matrix.

    Shift-inverted Lanczos iteration with a fixed start vector derived from
    the seed; small problems use a dense decomposition.  Every returned pair
    satisfies ||L v - lambda v|| <= tol or a NumericalError carrying the
    residuals is raised.
    """
    n = lap.shape[0]
    if not 1 <= m < n:
        raise ConfigError(f"eigenpair count must satisfy 1 <= m < n, got m={m}, n={n}")
    if tol <= 0:
        raise ConfigError(f"tolerance must be > 0, got {tol}")

    if n <= max(_DENSE_CUTOFF, 4 * m):
        vals, vecs = scipy.linalg.eigh(np.asarray(lap.todense()))
        vals, vecs = vals[:m], vecs[:, :m]
    else:
        v0 = np.random.default_rng(seed).uniform(-1.0, 1.0, size=n)
        try:
            # sigma < 0 keeps L - sigma*I positive definite for the factorization
            vals, vecs = spla.eigsh(lap.tocsc(), k=m, sigma=-0.1, which="LM", v0=v0)
        except spla.ArpackNoConvergence as exc:
            raise NumericalError(f"eigensolver did not converge: {exc}") from exc
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]

    residuals = np.linalg.norm(lap @ vecs - vecs * vals[None, :], axis=0)
    if np.any(residuals > tol):
        raise NumericalError(f"eigenpair residuals exceed tol={tol}: "
                             f"{residuals.tolist()}")
    if vals[0] < -1e-8:
        raise NumericalError(f"Laplacian produced eigenvalue {vals[0]} below the "
                             f"numerical-zero floor")
    vals = np.where((vals < 0) & (vals >= -1e-8), 0.0, vals)
    return SpectralEmbedding(eigenvalues=vals, eigenvectors=_fix_signs(vecs))


def choose_segment_count(eigenvalues: np.ndarray | list[float],
                         rule: EigGapRule) -> int:
    """Count of eigenvalues <= tau, clamped to [2, max_segments]."""
    vals = np.asarray(eigenvalues, dtype=np.float64)
    if vals.size < 2:
        raise ConfigError(f"segment-count rule needs >= 2 eigenvalues, got {vals.size}")
    count = int(np.sum(vals <= rule.tau))
    return max(2, min(count, rule.max_segments))


def discretize(emb: SpectralEmbedding, k: int, seed: int, *, image_id: str,
               grid_hw: tuple[int, int], patch_size: int,
               restarts: int = 8) -> SegmentMap:
    """K-means on row-normalized first-k spectral coordinates.

    Segment ids are relabeled by descending cell count; per-segment pixel
    bboxes are the tight cell bounds scaled by patch_size.
    """
    from .concepts import kmeans

    m = emb.eigenvectors.shape[1]
    if not 1 <= k <= m:
        raise ConfigError(f"discretize needs k <= m, got k={k}, m={m}")
    coords = emb.eigenvectors[:, :k].copy()
    norms = np.linalg.norm(coords, axis=1)
    safe = norms > 1e-12
    coords[safe] /= norms[safe, None]

    assignment = None
    for attempt in range(5):
        _, labels, _ = kmeans(coords, k, seed=seed + attempt, restarts=restarts)
        if len(np.unique(labels)) == k:
            assignment = labels
            break
    if assignment is None:
        raise NumericalError(f"k-means produced an empty cluster for image "
                             f"{image_id!r} after 5 re-seeds (k={k})")

    # Contiguous relabeling by segment size descending, ties by old id.
    sizes = np.bincount(assignment, minlength=k)
    order = np.lexsort((np.arange(k), -sizes))
    relabel = np.empty(k, dtype=np.int32)
    relabel[order] = np.arange(k, dtype=np.int32)
    assignment = relabel[assignment]

    grid_h, grid_w = grid_hw
    grid = assignment.reshape(grid_h, grid_w).astype(np.int32)
    bboxes = []
    for s in range(k):
        rows, cols = np.nonzero(grid == s)
        bboxes.append((int(cols.min()) * patch_size, int(rows.min()) * patch_size,
                       (int(cols.max()) + 1) * patch_size,
                       (int(rows.max()) + 1) * patch_size))
    return SegmentMap(image_id=image_id, assignment=grid, n_segments=k,
                      bboxes=tuple(bboxes), patch_size=patch_size)
