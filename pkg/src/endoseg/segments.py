"""Stage-two feature construction: one pooled, unit-norm vector per segment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import PatchFeatureTensor
from .errors import DataError
from .features import CropRequest, FeatureSource, embed_crop
from .spectral import SegmentMap


@dataclass(frozen=True)
class SegmentRecord:
    """One segment's geometry plus its pooled feature vector."""

    image_id: str
    segment_id: int
    bbox: tuple[int, int, int, int]
    area_cells: int
    vector: np.ndarray
    fold_id: str | None = None

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise DataError(f"segment {self.image_id!r}/{self.segment_id}: "
                            f"non-finite vector")
        if self.area_cells < 1:
            raise DataError(f"segment {self.image_id!r}/{self.segment_id}: "
                            f"empty segment")
        object.__setattr__(self, "vector", vec)


def embed_segments(seg_map: SegmentMap, source: FeatureSource,
                   tensor: PatchFeatureTensor | None = None,
                   field_mask: np.ndarray | None = None,
                   image_path: str | None = None,
                   fold_id: str | None = None,
                   masked_pool: bool = False) -> list[SegmentRecord]:
    """One record per segment, ordered by segment id.

    The crop is the segment's bbox (which may include cells of neighboring
    segments); set ``masked_pool`` to pool only the segment's own cells
    instead, for ablation.
    """
    records: list[SegmentRecord] = []
    for seg_id in range(seg_map.n_segments):
        bbox = seg_map.bboxes[seg_id]
        crop = CropRequest(image_id=seg_map.image_id, bbox=bbox)
        if masked_pool and source.mode == "precomputed":
            from .features import features_for, pooled_mean, resolve_blocks, \
                cell_field_weights
            from .errors import NumericalError
            t = tensor if tensor is not None else features_for(seg_map.image_id, source)
            cell_mask = seg_map.assignment == seg_id
            weights = cell_field_weights((t.grid_h, t.grid_w), source.patch_size,
                                         field_mask)
            vec = pooled_mean(t, cell_mask, resolve_blocks(t, source.blocks), weights)
            norm = float(np.linalg.norm(vec))
            if norm <= 1e-12:
                raise NumericalError(f"zero-norm masked pool for segment "
                                     f"{seg_map.image_id!r}/{seg_id}")
            vec = vec / norm
        else:
            vec = embed_crop(crop, source, tensor=tensor, field_mask=field_mask,
                             image_path=image_path)
        area = int(np.sum(seg_map.assignment == seg_id))
        records.append(SegmentRecord(image_id=seg_map.image_id, segment_id=seg_id,
                                     bbox=bbox, area_cells=area, vector=vec,
                                     fold_id=fold_id))
    return records
