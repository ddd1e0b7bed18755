import numpy as np
import pytest

from conftest import random_tensor
from endoseg.features import FeatureSource
from endoseg.segments import embed_segments
from endoseg.spectral import SegmentMap


def make_map(assignment, patch_size=8, image_id="img"):
    assignment = np.asarray(assignment, dtype=np.int32)
    n_segments = int(assignment.max()) + 1
    bboxes = []
    for s in range(n_segments):
        rows, cols = np.nonzero(assignment == s)
        bboxes.append((cols.min() * patch_size, rows.min() * patch_size,
                       (cols.max() + 1) * patch_size,
                       (rows.max() + 1) * patch_size))
    return SegmentMap(image_id=image_id, assignment=assignment,
                      n_segments=n_segments, bboxes=tuple(bboxes),
                      patch_size=patch_size)


@pytest.fixture
def source(tmp_path):
    return FeatureSource(root=tmp_path, patch_size=8)


def test_single_segment_equals_full_image_pool(source):
    rng = np.random.default_rng(0)
    tensor = random_tensor(rng, grid_h=3, grid_w=3, image_id="img")
    seg_map = make_map(np.zeros((3, 3)))
    [record] = embed_segments(seg_map, source, tensor=tensor)
    mean = tensor.data.astype(np.float64).mean(axis=(0, 1, 2))
    assert np.allclose(record.vector, mean / np.linalg.norm(mean), atol=1e-9)
    assert record.area_cells == 9


def test_two_segments_give_two_ordered_records(source):
    rng = np.random.default_rng(1)
    tensor = random_tensor(rng, grid_h=2, grid_w=4, image_id="img")
    assignment = np.array([[0, 0, 1, 1], [0, 0, 1, 1]])
    records = embed_segments(make_map(assignment), source, tensor=tensor)
    assert [r.segment_id for r in records] == [0, 1]
    assert all(np.isclose(np.linalg.norm(r.vector), 1.0) for r in records)


def test_matches_bbox_pooling_oracle(source):
    rng = np.random.default_rng(2)
    for _ in range(10):
        tensor = random_tensor(rng, n_blocks=3, grid_h=4, grid_w=5, dim=6,
                               image_id="img")
        assignment = rng.integers(0, 3, (4, 5))
        for s in range(3):  # guarantee non-empty segments
            assignment.ravel()[s] = s
        seg_map = make_map(assignment)
        records = embed_segments(seg_map, source, tensor=tensor)
        assert len(records) == seg_map.n_segments
        for record in records:
            x0, y0, x1, y1 = record.bbox
            acc, count = np.zeros(6), 0
            for b in range(3):
                for r in range(4):
                    for c in range(5):
                        cx, cy = (c + 0.5) * 8, (r + 0.5) * 8
                        if x0 <= cx < x1 and y0 <= cy < y1:
                            acc += tensor.data[b, r, c].astype(np.float64)
                            count += 1
            expected = acc / count
            expected /= np.linalg.norm(expected)
            assert np.allclose(record.vector, expected, atol=1e-6)


def test_masked_pool_uses_only_own_cells(source):
    data = np.zeros((1, 2, 2, 2), dtype=np.float32)
    data[0, 0, 0] = [1.0, 0.0]
    data[0, 0, 1] = [0.0, 1.0]
    data[0, 1, 0] = [1.0, 0.0]
    data[0, 1, 1] = [0.0, 1.0]
    from endoseg.data_model import PatchFeatureTensor
    tensor = PatchFeatureTensor(image_id="img", data=data)
    assignment = np.array([[0, 1], [0, 1]])
    records = embed_segments(make_map(assignment), source, tensor=tensor,
                             masked_pool=True)
    assert np.allclose(records[0].vector, [1.0, 0.0])
    assert np.allclose(records[1].vector, [0.0, 1.0])


def test_fold_id_propagates(source):
    rng = np.random.default_rng(3)
    tensor = random_tensor(rng, grid_h=2, grid_w=2, image_id="img")
    records = embed_segments(make_map(np.zeros((2, 2))), source, tensor=tensor,
                             fold_id="fold-1")
    assert records[0].fold_id == "fold-1"
