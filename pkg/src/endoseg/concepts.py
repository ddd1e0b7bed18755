"""Dataset-wide concept discovery: PCA reduction, K-means over segment
vectors, cluster labeling, and semantic mask rendering.

Also home of the generic deterministic K-means shared with the spectral
discretization step.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_model import RunConfig, SemanticMask
from .errors import ConfigError, DataError, NumericalError
from .segments import SegmentRecord
from .spectral import SegmentMap

CONCEPT_MAGIC = b"CPT1"
CONCEPT_VERSION = 1
_CONCEPT_HEADER = struct.Struct("<4sHIIIq")

BACKGROUND_ID = 0
BACKGROUND_NAME = "background"


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared euclidean distances [N, k]."""
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    while len(chosen) < k:
        total = d2.sum()
        if total <= 0:
            # all remaining points duplicate a centroid; take lowest free index
            free = [i for i in range(n) if i not in chosen]
            chosen.append(free[0])
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, _sq_dists(points, points[chosen[-1:]])[:, 0])
    return points[chosen].copy()


def lloyd_iterations(points: np.ndarray, centroids: np.ndarray,
                     max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Lloyd updates until the assignment is a fixpoint or max_iter.

    Empty clusters are re-seeded at the point farthest from its assigned
    centroid.  Returns (centroids, assignment, inertia, inertia history).
    """
    centroids = centroids.copy()
    k = centroids.shape[0]
    history: list[float] = []
    assignment = None
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        new_assignment = np.argmin(d2, axis=1)  # ties -> lowest cluster id
        history.append(float(d2[np.arange(len(points)), new_assignment].sum()))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(k):
            members = points[assignment == c]
            if len(members) == 0:
                farthest = int(np.argmax(d2[np.arange(len(points)), assignment]))
                centroids[c] = points[farthest]
                assignment[farthest] = c
                d2[farthest] = _sq_dists(points[farthest:farthest + 1], centroids)[0]
            else:
                centroids[c] = members.mean(axis=0)
    d2 = _sq_dists(points, centroids)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), assignment].sum())
    return centroids, assignment, inertia, history


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 300,
           restarts: int = 8) -> tuple[np.ndarray, np.ndarray, float]:
    """Deterministic k-means++ with best-of-restarts by inertia."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError(f"k-means expects 2-D points, got shape {points.shape}")
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for r in range(restarts):
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, r])
        init = _kmeans_pp_init(points, k, rng)
        centroids, assignment, inertia, _ = lloyd_iterations(points, init, max_iter)
        if best is None or inertia < best[2] - 1e-15:
            best = (centroids, assignment, inertia)
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def fit_pca(vectors: np.ndarray | Sequence[np.ndarray],
            p: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-p principal directions of centered data.

    Returns (mean, basis) with basis of shape [D, p], orthonormal columns,
    sign fixed so each column's largest-magnitude entry is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"PCA expects 2-D data, got shape {x.shape}")
    n, d = x.shape
    if p > d:
        raise ConfigError(f"PCA target dim {p} exceeds data dim {d}")
    if n < p + 1:
        raise ConfigError(f"PCA needs at least p+1={p + 1} vectors, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(n, d) * np.finfo(np.float64).eps)) if s.size else 0
    if rank < p:
        raise NumericalError(f"PCA target dim {p} exceeds data rank {rank}")
    basis = vt[:p].T.copy()
    for j in range(p):
        col = basis[:, j]
        if col[int(np.argmax(np.abs(col)))] < 0:
            basis[:, j] = -col
    return mean, basis


# ---------------------------------------------------------------------------
# Concept model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConceptModel:
    """PCA basis + K-means centroids + human-assigned cluster labels."""

    pca_mean: np.ndarray   # [D]
    pca_basis: np.ndarray  # [D, p]
    centroids: np.ndarray  # [K, p]
    labels: Mapping[int, str]
    k: int
    seed: int

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError(f"concept model needs K >= 2, got {self.k}")
        if self.centroids.shape[0] != self.k:
            raise DataError(f"centroid count {self.centroids.shape[0]} != K={self.k}")
        if set(self.labels) != set(range(self.k)):
            raise DataError("concept labels must cover exactly clusters 0..K-1")
        gram = self.pca_basis.T @ self.pca_basis
        if not np.allclose(gram, np.eye(self.pca_basis.shape[1]), atol=1e-6):
            raise NumericalError("PCA basis columns are not orthonormal")
        object.__setattr__(self, "labels", dict(self.labels))

    @property
    def dim(self) -> int:
        return self.pca_basis.shape[0]

    @property
    def pca_dim(self) -> int:
        return self.pca_basis.shape[1]

    def project(self, vectors: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if v.shape[1] != self.dim:
            raise DataError(f"vector dim {v.shape[1]} != model dim {self.dim}")
        return (v - self.pca_mean) @ self.pca_basis


@dataclass(frozen=True)
class ClusterAssignment:
    image_id: str
    segment_id: int
    cluster_id: int
    distance: float


def default_labels(k: int) -> dict[int, str]:
    return {i: f"cluster-{i}" for i in range(k)}


def fit_concepts(records: Sequence[SegmentRecord], cfg: RunConfig) -> ConceptModel:
    """PCA + K-means over training-fold segment vectors.

    The PCA dimension is clamped to min(cfg.pca_dim, D, N-1) so small runs
    stay feasible; K comes from cfg.kmeans_k.
    """
    if not records:
        raise DataError("fit_concepts: no segment records")
    vectors = np.stack([r.vector for r in records])
    n, d = vectors.shape
    if cfg.kmeans_k > n:
        raise ConfigError(f"kmeans_k={cfg.kmeans_k} exceeds the {n} available "
                          f"segment records")
    p = min(cfg.pca_dim, d, n - 1)
    mean, basis = fit_pca(vectors, p)
    projected = (vectors - mean) @ basis
    centroids, _, _ = kmeans(projected, cfg.kmeans_k, seed=cfg.seed,
                             restarts=cfg.kmeans_restarts)
    return ConceptModel(pca_mean=mean, pca_basis=basis, centroids=centroids,
                        labels=default_labels(cfg.kmeans_k), k=cfg.kmeans_k,
                        seed=cfg.seed)


def assign_segments(model: ConceptModel,
                    records: Sequence[SegmentRecord]) -> list[ClusterAssignment]:
    """Nearest centroid in PCA space for each record; ties -> lowest id."""
    out: list[ClusterAssignment] = []
    if not records:
        return out
    projected = model.project(np.stack([r.vector for r in records]))
    d2 = _sq_dists(projected, model.centroids)
    nearest = np.argmin(d2, axis=1)
    for i, (rec, cid) in enumerate(zip(records, nearest)):
        out.append(ClusterAssignment(image_id=rec.image_id,
                                     segment_id=rec.segment_id,
                                     cluster_id=int(cid),
                                     distance=float(np.sqrt(d2[i, cid]))))
    return out


def mask_legend(model: ConceptModel) -> dict[int, str]:
    legend = {BACKGROUND_ID: BACKGROUND_NAME}
    legend.update({cid + 1: name for cid, name in model.labels.items()})
    return legend


def render_mask(model: ConceptModel, seg_map: SegmentMap,
                assignments: Sequence[ClusterAssignment],
                field_mask: np.ndarray | None = None) -> SemanticMask:
    """Paint each segment's cluster id (+1; 0 stays out-of-field/background)."""
    by_segment = {a.segment_id: a.cluster_id for a in assignments
                  if a.image_id == seg_map.image_id}
    if len(by_segment) != seg_map.n_segments:
        raise DataError(f"render: expected {seg_map.n_segments} assignments for "
                        f"image {seg_map.image_id!r}, got {len(by_segment)}")
    grid = np.zeros_like(seg_map.assignment, dtype=np.uint8)
    for seg_id, cid in by_segment.items():
        grid[seg_map.assignment == seg_id] = cid + 1
    labels = np.kron(grid, np.ones((seg_map.patch_size, seg_map.patch_size),
                                   dtype=np.uint8))
    if field_mask is not None:
        if field_mask.shape != labels.shape:
            raise DataError(f"field mask shape {field_mask.shape} != rendered mask "
                            f"shape {labels.shape} for {seg_map.image_id!r}")
        labels = np.where(field_mask > 0, labels, np.uint8(BACKGROUND_ID))
    return SemanticMask(image_id=seg_map.image_id, labels=labels,
                        legend=mask_legend(model))


def assign_and_render(model: ConceptModel, maps: Sequence[SegmentMap],
                      records: Sequence[SegmentRecord],
                      field_masks: Mapping[str, np.ndarray] | None = None,
                      ) -> tuple[list[ClusterAssignment], dict[str, SemanticMask]]:
    assignments = assign_segments(model, records)
    masks: dict[str, SemanticMask] = {}
    for seg_map in maps:
        field = (field_masks or {}).get(seg_map.image_id)
        masks[seg_map.image_id] = render_mask(model, seg_map, assignments, field)
    return assignments, masks


def apply_labels(model: ConceptModel, label_map: Mapping[int, str]) -> ConceptModel:
    """Merge human labels; unlabeled clusters keep their defaults."""
    for cid in label_map:
        if not 0 <= int(cid) < model.k:
            raise ConfigError(f"cluster id {cid} out of range [0, {model.k})")
    merged = dict(model.labels)
    merged.update({int(k): str(v) for k, v in label_map.items()})
    return replace(model, labels=merged)


# ---------------------------------------------------------------------------
# Persistence: concept_model.bin + concepts.json
# ---------------------------------------------------------------------------

def write_concept_model(path: str | Path, model: ConceptModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _CONCEPT_HEADER.pack(CONCEPT_MAGIC, CONCEPT_VERSION, model.dim,
                                  model.pca_dim, model.k, model.seed)
    blob = b"".join([
        header,
        np.ascontiguousarray(model.pca_mean, dtype="<f4").tobytes(),
        np.ascontiguousarray(model.pca_basis, dtype="<f4").tobytes(),
        np.ascontiguousarray(model.centroids, dtype="<f4").tobytes(),
    ])
    path.write_bytes(blob)
    return path


def read_concept_model(path: str | Path,
                       labels_path: str | Path | None = None) -> ConceptModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"concept model not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CONCEPT_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, d, p, k, seed = _CONCEPT_HEADER.unpack_from(raw)
    if magic != CONCEPT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CONCEPT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = (d + d * p + k * p) * 4
    payload = raw[_CONCEPT_HEADER.size:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    mean = np.frombuffer(payload, dtype="<f4", count=d).astype(np.float64)
    basis = np.frombuffer(payload, dtype="<f4", count=d * p,
                          offset=d * 4).astype(np.float64).reshape(d, p)
    centroids = np.frombuffer(payload, dtype="<f4", count=k * p,
                              offset=(d + d * p) * 4).astype(np.float64).reshape(k, p)
    labels = default_labels(k)
    if labels_path is not None and Path(labels_path).is_file():
        doc = json.loads(Path(labels_path).read_text())
        labels.update({int(cid): str(name) for cid, name in doc.items()})
    # float32 round-trip can nudge the basis off exact orthonormality
    q, _ = np.linalg.qr(basis)
    signs = np.sign(np.einsum("dp,dp->p", q, basis))
    signs[signs == 0] = 1.0
    basis = q * signs
    return ConceptModel(pca_mean=mean, pca_basis=basis, centroids=centroids,
                        labels=labels, k=k, seed=seed)
