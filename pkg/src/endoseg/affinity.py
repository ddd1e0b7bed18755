"""Per-image patch affinity: clipped feature correlation plus a weighted
sparse KNN-matting color term.

The feature half fuses the requested blocks (concatenation by default),
unit-normalizes each patch vector, and clips negative correlations to zero
so the downstream Laplacian stays valid.  The color half builds a sparse
k-nearest-neighbor graph in (r, g, b, lambda*x, lambda*y) space over the
image downsampled to the patch grid, with weights 1 - d/d_max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .data_model import PatchFeatureTensor
from .errors import ConfigError, DataError, NumericalError
from .features import resolve_blocks


@dataclass(frozen=True)
class AffinityMatrix:
    """Sparse symmetric nonnegative patch-graph weights."""

    n: int
    matrix: sp.csr_matrix
    color_weight_used: float = 0.0

    def __post_init__(self) -> None:
        if self.matrix.shape != (self.n, self.n):
            raise DataError(f"affinity matrix shape {self.matrix.shape} != ({self.n}, {self.n})")

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


@dataclass(frozen=True)
class ColorGraphParams:
    knn_k_color: int = 10
    spatial_scale: float | None = None  # None -> 1 / max(grid_h, grid_w)


def fused_patch_vectors(tensor: PatchFeatureTensor, block_fusion: str = "concat",
                        blocks: tuple[int, ...] | None = None) -> np.ndarray:
    """Unit-norm per-cell feature rows [n_cells, fused_dim]."""
    idx = resolve_blocks(tensor, blocks)
    data = tensor.data.astype(np.float64)
    n = tensor.n_cells
    if block_fusion == "concat":
        feats = np.concatenate([data[b].reshape(n, tensor.dim) for b in idx], axis=1)
    elif block_fusion == "mean":
        feats = data[list(idx)].mean(axis=0).reshape(n, tensor.dim)
    else:
        raise ConfigError(f"block_fusion {block_fusion!r} not recognized")
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms <= 1e-12):
        flat = int(np.argmax(norms <= 1e-12))
        r, c = divmod(flat, tensor.grid_w)
        raise NumericalError(f"zero-norm patch vector at cell (row={r}, col={c}) "
                             f"of image {tensor.image_id!r}")
    return feats / norms[:, None]


def feature_affinity(tensor: PatchFeatureTensor, block_fusion: str = "concat",
                     blocks: tuple[int, ...] | None = None) -> AffinityMatrix:
    """w_ij = max(0, <f_i, f_j>) over unit-normalized fused patch vectors."""
    feats = fused_patch_vectors(tensor, block_fusion, blocks)
    w = feats @ feats.T
    w = (w + w.T) / 2.0
    np.maximum(w, 0.0, out=w)
    return AffinityMatrix(n=feats.shape[0], matrix=sp.csr_matrix(w))


def color_feature_map(image: np.ndarray, spatial_scale: float | None) -> np.ndarray:
    """Per-pixel (r, g, b, lambda*x, lambda*y) rows for the downsampled image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"color affinity expects an RGB [grid_h, grid_w, 3] image, "
                        f"got shape {image.shape}")
    grid_h, grid_w = image.shape[:2]
    lam = 1.0 / max(grid_h, grid_w) if spatial_scale is None else spatial_scale
    ys, xs = np.mgrid[0:grid_h, 0:grid_w].astype(np.float64)
    rgb = image.reshape(-1, 3).astype(np.float64)
    return np.column_stack([rgb, lam * xs.ravel(), lam * ys.ravel()])


def color_affinity(image: np.ndarray, params: ColorGraphParams) -> AffinityMatrix:
    """Sparse KNN-matting style color graph on the patch-grid image.

    For each pixel and each of its k nearest neighbors in feature-map space,
    w_ij = 1 - d(i, j) / d_max with d_max the largest retained distance for
    this image; the result is symmetrized by max(w_ij, w_ji).  Neighbor ties
    resolve by index order, so degenerate images stay deterministic.
    """
    feats = color_feature_map(image, params.spatial_scale)
    n = feats.shape[0]
    k = params.knn_k_color
    if not 1 <= k < n:
        raise ConfigError(f"knn_k_color must be in [1, {n}), got {k}")

    dist = cdist(feats, feats)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = order.ravel()
    d = dist[rows, cols]
    d_max = float(d.max())
    weights = np.ones_like(d) if d_max <= 0 else 1.0 - d / d_max
    mat = sp.coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    mat = mat.maximum(mat.T)
    return AffinityMatrix(n=n, matrix=mat)


def combine(feat: AffinityMatrix, color: AffinityMatrix,
            color_weight: float) -> AffinityMatrix:
    """W = W_feat + color_weight * W_color."""
    if feat.n != color.n:
        raise DataError(f"affinity dimension mismatch: {feat.n} vs {color.n}")
    if color_weight < 0:
        raise ConfigError(f"color_weight must be >= 0, got {color_weight}")
    return AffinityMatrix(n=feat.n,
                          matrix=(feat.matrix + color_weight * color.matrix).tocsr(),
                          color_weight_used=color_weight)
