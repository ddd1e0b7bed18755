"""Uniform source of patch feature tensors and segment-crop embeddings.

Two modes: ``precomputed`` reads PFT1 files from a directory; the
``external-command`` mode shells out to a user-supplied extractor that
writes a PFT1 file, which keeps the engine model-free while still
supporting true re-extraction of segment crops.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import ImageEntry, PatchFeatureTensor, read_features
from .errors import ConfigError, DataError, NumericalError

MODE_PRECOMPUTED = "precomputed"
MODE_EXTERNAL = "external-command"


@dataclass(frozen=True)
class FeatureSource:
    """Where patch features come from for a given image or crop."""

    mode: str = MODE_PRECOMPUTED
    root: Path | None = None
    command: str | None = None
    patch_size: int = 16
    blocks: tuple[int, ...] | None = None  # None pools every block in the file
    expected_grid: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.mode not in (MODE_PRECOMPUTED, MODE_EXTERNAL):
            raise ConfigError(f"feature source mode {self.mode!r} not recognized")
        if self.mode == MODE_PRECOMPUTED and self.root is None:
            raise ConfigError("precomputed feature source requires a root directory")
        if self.mode == MODE_EXTERNAL and not self.command:
            raise ConfigError("external feature source requires a command template")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.blocks is not None and len(self.blocks) == 0:
            raise ConfigError("blocks_requested must be non-empty")

    def feature_path(self, image_id: str) -> Path:
        assert self.root is not None
        return Path(self.root) / f"{image_id}.pft"

    def cls_path(self, image_id: str) -> Path:
        assert self.root is not None
        return Path(self.root) / f"{image_id}.cls.pft"


@dataclass(frozen=True)
class CropRequest:
    """Pixel-space crop of one image, bbox inclusive-exclusive (x0,y0,x1,y1)."""

    image_id: str
    bbox: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if x1 <= x0 or y1 <= y0:
            raise DataError(f"crop for {self.image_id!r} has empty bbox {self.bbox}")


def _run_extractor(command: str, image: str, out: Path,
                   bbox: tuple[int, int, int, int] | None = None) -> None:
    rendered = command.format(
        image=image, out=str(out),
        bbox="" if bbox is None else ",".join(str(v) for v in bbox))
    proc = subprocess.run(shlex.split(rendered), capture_output=True, text=True)
    if proc.returncode != 0:
        raise DataError(
            f"external extractor failed (exit {proc.returncode}): {rendered}\n"
            f"stderr: {proc.stderr.strip()}")


def features_for(image: ImageEntry | str, source: FeatureSource) -> PatchFeatureTensor:
    """Resolve the full patch feature tensor for one image."""
    image_id = image if isinstance(image, str) else image.id
    if source.mode == MODE_PRECOMPUTED:
        path = source.feature_path(image_id)
        if not path.is_file():
            raise DataError(f"missing feature file for image {image_id!r}: {path}")
        tensor = read_features(path, image_id=image_id)
    else:
        if isinstance(image, str):
            raise ConfigError("external feature source needs the full image entry")
        with tempfile.TemporaryDirectory(prefix="endoseg-pft-") as tmp:
            out = Path(tmp) / f"{image_id}.pft"
            _run_extractor(source.command or "", str(image.image_path), out)
            tensor = read_features(out, image_id=image_id)
    if source.expected_grid is not None:
        if (tensor.grid_h, tensor.grid_w) != tuple(source.expected_grid):
            raise DataError(
                f"image {image_id!r}: feature grid {tensor.grid_h}x{tensor.grid_w} "
                f"does not match configured grid "
                f"{source.expected_grid[0]}x{source.expected_grid[1]}")
    return tensor


def resolve_blocks(tensor: PatchFeatureTensor,
                   blocks: tuple[int, ...] | None) -> tuple[int, ...]:
    if blocks is None:
        return tuple(range(tensor.n_blocks))
    for b in blocks:
        if not 0 <= b < tensor.n_blocks:
            raise ConfigError(f"block index {b} out of range for tensor with "
                              f"{tensor.n_blocks} blocks")
    return tuple(blocks)


def cells_in_bbox(grid_hw: tuple[int, int], patch_size: int,
                  bbox: tuple[int, int, int, int]) -> np.ndarray:
    """Boolean [grid_h, grid_w] mask of cells whose center lies in the bbox."""
    grid_h, grid_w = grid_hw
    x0, y0, x1, y1 = bbox
    cx = (np.arange(grid_w) + 0.5) * patch_size
    cy = (np.arange(grid_h) + 0.5) * patch_size
    inside_x = (cx >= x0) & (cx < x1)
    inside_y = (cy >= y0) & (cy < y1)
    return inside_y[:, None] & inside_x[None, :]


def cell_field_weights(grid_hw: tuple[int, int], patch_size: int,
                       field_mask: np.ndarray | None) -> np.ndarray:
    """Per-cell weight: 1 if the cell-center pixel is in-field, else 0."""
    grid_h, grid_w = grid_hw
    if field_mask is None:
        return np.ones((grid_h, grid_w))
    rows = (np.arange(grid_h) * patch_size + patch_size // 2).clip(0, field_mask.shape[0] - 1)
    cols = (np.arange(grid_w) * patch_size + patch_size // 2).clip(0, field_mask.shape[1] - 1)
    return (field_mask[np.ix_(rows, cols)] > 0).astype(np.float64)


def pooled_mean(tensor: PatchFeatureTensor, cell_mask: np.ndarray,
                blocks: tuple[int, ...], weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted mean feature over (block, cell) pairs; no normalization."""
    w = np.ones(tensor.data.shape[1:3]) if weights is None else weights
    w = np.where(cell_mask, w, 0.0)
    total = w.sum()
    if total <= 0:
        raise DataError("crop contains no usable (in-field) patch cells")
    stacked = tensor.data[list(blocks)].astype(np.float64)  # [B, gh, gw, d]
    return np.tensordot(stacked, w, axes=([1, 2], [0, 1])).mean(axis=0) / total


def embed_crop(crop: CropRequest, source: FeatureSource,
               tensor: PatchFeatureTensor | None = None,
               field_mask: np.ndarray | None = None,
               image_path: str | Path | None = None) -> np.ndarray:
    """Pool a crop into a single unit-norm feature vector.

    Precomputed mode averages the patch cells whose centers fall inside the
    bbox, over the requested blocks; external mode re-extracts the crop via
    the extractor command and averages everything it returns.
    """
    if source.mode == MODE_EXTERNAL:
        if image_path is None:
            raise ConfigError("external crop embedding needs the image path")
        with tempfile.TemporaryDirectory(prefix="endoseg-crop-") as tmp:
            out = Path(tmp) / "crop.pft"
            _run_extractor(source.command or "", str(image_path), out, bbox=crop.bbox)
            crop_tensor = read_features(out, image_id=crop.image_id)
        blocks = resolve_blocks(crop_tensor, source.blocks)
        full = np.ones((crop_tensor.grid_h, crop_tensor.grid_w), dtype=bool)
        vec = pooled_mean(crop_tensor, full, blocks)
    else:
        if tensor is None:
            tensor = features_for(crop.image_id, source)
        grid_hw = (tensor.grid_h, tensor.grid_w)
        bounds = (grid_hw[1] * source.patch_size, grid_hw[0] * source.patch_size)
        x0, y0, x1, y1 = crop.bbox
        if x0 < 0 or y0 < 0 or x1 > bounds[0] or y1 > bounds[1]:
            raise DataError(f"crop bbox {crop.bbox} outside image bounds "
                            f"{bounds[0]}x{bounds[1]} for {crop.image_id!r}")
        mask = cells_in_bbox(grid_hw, source.patch_size, crop.bbox)
        if not mask.any():
            raise DataError(f"crop bbox {crop.bbox} for {crop.image_id!r} is smaller "
                            f"than one patch cell")
        blocks = resolve_blocks(tensor, source.blocks)
        weights = cell_field_weights(grid_hw, source.patch_size, field_mask)
        vec = pooled_mean(tensor, mask, blocks, weights)

    norm = float(np.linalg.norm(vec))
    if norm <= 1e-12:
        raise NumericalError(f"zero-norm pooled vector for crop {crop.bbox} "
                             f"of image {crop.image_id!r}")
    return vec / norm


def image_embedding(tensor: PatchFeatureTensor, pool: str = "avg-patch",
                    n_last_blocks: int = 4,
                    cls_tensor: PatchFeatureTensor | None = None) -> np.ndarray:
    """Image-level vector by pooling patch cells of the last N blocks.

    ``cls-only`` and ``cls+avg-patch`` consume a companion 1x1-grid PFT file
    holding the CLS token per block (``<image_id>.cls.pft``).
    """
    blocks = tuple(range(max(0, tensor.n_blocks - n_last_blocks), tensor.n_blocks))
    full = np.ones((tensor.grid_h, tensor.grid_w), dtype=bool)
    if pool == "avg-patch":
        vec = pooled_mean(tensor, full, blocks)
    elif pool in ("cls-only", "cls+avg-patch"):
        if cls_tensor is None:
            raise DataError(f"pool mode {pool!r} requires a CLS companion tensor "
                            f"for image {tensor.image_id!r}")
        cls_blocks = tuple(range(max(0, cls_tensor.n_blocks - n_last_blocks),
                                 cls_tensor.n_blocks))
        cls_full = np.ones((cls_tensor.grid_h, cls_tensor.grid_w), dtype=bool)
        cls_vec = pooled_mean(cls_tensor, cls_full, cls_blocks)
        if pool == "cls-only":
            vec = cls_vec
        else:
            vec = np.concatenate([cls_vec, pooled_mean(tensor, full, blocks)])
    else:
        raise ConfigError(f"pool mode {pool!r} not recognized")
    norm = float(np.linalg.norm(vec))
    if norm <= 1e-12:
        raise NumericalError(f"zero-norm image embedding for {tensor.image_id!r}")
    return vec / norm
