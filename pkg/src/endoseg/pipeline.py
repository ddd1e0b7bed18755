"""Stage orchestration behind the CLI verbs.

Each stage reads its inputs from disk, writes canonical artifacts into the
run directory, and is resumable: work is skipped when the output is
already newer than its inputs, unless forced.  Every stage is a pure
function of (inputs, config, seed) at the artifact level.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import cv2
import numpy as np
from PIL import Image

from . import data_model as dm
from .affinity import AffinityMatrix, ColorGraphParams, color_affinity, combine, \
    feature_affinity
from .concepts import ConceptModel, assign_segments, fit_concepts, \
    read_concept_model, render_mask
from .data_model import DatasetManifest, ImageEntry, RunConfig
from .errors import DataError, EndosegError
from .evaluation import EvalReport, merge_detection_folds, polyp_detection_report, \
    segment_overlap_labels, segment_polyp_probe, task_labels, two_fold_cv, \
    unsupervised_polyp_eval
from .features import FeatureSource, features_for, image_embedding
from .segments import SegmentRecord, embed_segments
from .spectral import SegmentMap, choose_segment_count, discretize, laplacian, \
    smallest_eigenpairs

EIG_TOL = 1e-6


def _stage_error(stage: str, image_id: str | None, exc: EndosegError) -> EndosegError:
    where = f"stage {stage}" + (f", image {image_id!r}" if image_id else "")
    wrapped = type(exc)(f"{where}: {exc}")
    return wrapped


def _fresh(output: Path, *inputs: Path) -> bool:
    if not output.exists():
        return False
    out_mtime = output.stat().st_mtime
    return all(not p.exists() or p.stat().st_mtime <= out_mtime for p in inputs)


def _map_images(entries: Iterable[ImageEntry], fn: Callable[[ImageEntry], Any],
                workers: int) -> None:
    entries = list(entries)
    if workers <= 1:
        for entry in entries:
            fn(entry)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for result in pool.map(fn, entries):
            _ = result


# ---------------------------------------------------------------------------
# Image preprocessing
# ---------------------------------------------------------------------------

def preprocess_image(entry: ImageEntry, cfg: RunConfig) -> np.ndarray:
    """RGB float image in [0, 1], resized and optionally CLAHE-equalized."""
    if not entry.image_path.is_file():
        raise DataError(f"image file not found for {entry.id!r}: {entry.image_path}")
    with Image.open(entry.image_path) as img:
        rgb = img.convert("RGB")
        if cfg.preprocess.resize_to is not None:
            h, w = cfg.preprocess.resize_to
            rgb = rgb.resize((w, h), Image.BILINEAR)
        arr = np.asarray(rgb, dtype=np.uint8)
    if cfg.preprocess.clahe:
        lab = cv2.cvtColor(arr, cv2.COLOR_RGB2LAB)
        clahe = cv2.createCLAHE(clipLimit=2.0, tileGridSize=(8, 8))
        lab[:, :, 0] = clahe.apply(lab[:, :, 0])
        arr = cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)
    return arr.astype(np.float64) / 255.0


def downsample_to_grid(image: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    grid_h, grid_w = grid_hw
    return cv2.resize(image, (grid_w, grid_h), interpolation=cv2.INTER_AREA)


def load_binary_mask(path: Path, target_shape: tuple[int, int]) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"mask file not found: {path}")
    with Image.open(path) as img:
        mask = np.asarray(img.convert("L")) > 127
    if mask.shape != target_shape:
        mask = cv2.resize(mask.astype(np.uint8),
                          (target_shape[1], target_shape[0]),
                          interpolation=cv2.INTER_NEAREST) > 0
    return mask


def _check_grid(entry: ImageEntry, tensor, cfg: RunConfig) -> tuple[int, int]:
    grid_hw = (tensor.grid_h, tensor.grid_w)
    if cfg.preprocess.resize_to is not None:
        h, w = cfg.preprocess.resize_to
        want = (h // cfg.patch_size, w // cfg.patch_size)
        if grid_hw != want:
            raise DataError(f"image {entry.id!r}: feature grid "
                            f"{grid_hw[0]}x{grid_hw[1]} does not match "
                            f"resize_to/patch_size grid {want[0]}x{want[1]}")
    return grid_hw


def _pixel_shape(grid_hw: tuple[int, int], patch_size: int) -> tuple[int, int]:
    return grid_hw[0] * patch_size, grid_hw[1] * patch_size


def _field_mask(entry: ImageEntry, grid_hw: tuple[int, int],
                patch_size: int) -> np.ndarray | None:
    if entry.field_mask_path is None:
        return None
    return load_binary_mask(entry.field_mask_path, _pixel_shape(grid_hw, patch_size))


# ---------------------------------------------------------------------------
# segment / embed / fit-concepts / render
# ---------------------------------------------------------------------------

def dump_affinity_triplets(run_dir: Path, image_id: str,
                           w: AffinityMatrix) -> Path:
    """Debug dump: one `row col weight` line per stored entry, row-major."""
    coo = w.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.row[i]} {coo.col[i]} {float(coo.data[i])!r}" for i in order]
    path = Path(run_dir) / "affinity" / f"{image_id}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def segment_stage(manifest: DatasetManifest, source: FeatureSource,
                  cfg: RunConfig, run_dir: Path, force: bool = False,
                  workers: int = 1, dump_affinity: bool = False) -> None:
    def one(entry: ImageEntry) -> None:
        out = dm.segment_path(run_dir, entry.id)
        feature_file = (source.feature_path(entry.id)
                        if source.mode == "precomputed" else entry.image_path)
        if not force and _fresh(out, feature_file):
            return
        try:
            tensor = features_for(entry, source)
            grid_hw = _check_grid(entry, tensor, cfg)
            w_feat = feature_affinity(tensor, cfg.block_fusion, source.blocks)
            if cfg.color_weight > 0:
                image = preprocess_image(entry, cfg)
                grid_img = downsample_to_grid(image, grid_hw)
                params = ColorGraphParams(
                    knn_k_color=min(cfg.color_knn_k, tensor.n_cells - 1))
                w = combine(w_feat, color_affinity(grid_img, params),
                            cfg.color_weight)
            else:
                w = AffinityMatrix(n=w_feat.n, matrix=w_feat.matrix,
                                   color_weight_used=0.0)
            if dump_affinity:
                dump_affinity_triplets(run_dir, entry.id, w)
            lap = laplacian(w)
            m = min(cfg.eig_count, tensor.n_cells - 1)
            emb = smallest_eigenpairs(lap, m, tol=EIG_TOL, seed=cfg.seed)
            k = choose_segment_count(emb.eigenvalues, cfg.eiggap_rule)
            seg_map = discretize(emb, k, cfg.seed, image_id=entry.id,
                                 grid_hw=grid_hw, patch_size=cfg.patch_size,
                                 restarts=cfg.kmeans_restarts)
            dm.write_segment_file(run_dir, seg_map, emb.eigenvalues,
                                  fold_id=manifest.fold_of(entry.id))
        except EndosegError as exc:
            raise _stage_error("segment", entry.id, exc) from exc

    _map_images(manifest.images, one, workers)


def embed_stage(manifest: DatasetManifest, source: FeatureSource,
                cfg: RunConfig, run_dir: Path, force: bool = False,
                workers: int = 1) -> None:
    def one(entry: ImageEntry) -> None:
        try:
            seg_map, eigenvalues, records, fold_id = dm.read_segment_file(
                run_dir, entry.id)
            if records is not None and not force:
                return
            tensor = (features_for(entry, source)
                      if source.mode == "precomputed" else None)
            grid_hw = seg_map.assignment.shape
            field = _field_mask(entry, grid_hw, seg_map.patch_size)
            new_records = embed_segments(seg_map, source, tensor=tensor,
                                         field_mask=field,
                                         image_path=str(entry.image_path),
                                         fold_id=manifest.fold_of(entry.id))
            dm.write_segment_file(run_dir, seg_map, eigenvalues,
                                  records=new_records,
                                  fold_id=manifest.fold_of(entry.id))
        except EndosegError as exc:
            raise _stage_error("embed", entry.id, exc) from exc

    _map_images(manifest.images, one, workers)


def load_records(manifest: DatasetManifest, run_dir: Path,
                 fold: str | None = None, require_vectors: bool = True,
                 with_gt_only: bool = False,
                 ) -> tuple[dict[str, SegmentMap], list[SegmentRecord]]:
    maps: dict[str, SegmentMap] = {}
    records: list[SegmentRecord] = []
    for entry in manifest.images:
        if with_gt_only and entry.gt_mask_path is None:
            continue
        if fold is not None and manifest.fold_of(entry.id) != fold:
            continue
        seg_map, _, recs, _ = dm.read_segment_file(run_dir, entry.id)
        if recs is None:
            if require_vectors:
                raise DataError(f"image {entry.id!r} has no segment vectors; "
                                f"run the embed stage first")
            recs = []
        maps[entry.id] = seg_map
        records.extend(recs)
    return maps, records


def fit_stage(manifest: DatasetManifest, cfg: RunConfig, run_dir: Path,
              fold: str | None = None) -> ConceptModel:
    try:
        _, records = load_records(manifest, run_dir, fold=fold)
        model = fit_concepts(records, cfg)
        dm.write_run_artifact(run_dir, model)
        return model
    except EndosegError as exc:
        raise _stage_error("fit-concepts", None, exc) from exc


def load_model(run_dir: Path) -> ConceptModel:
    return read_concept_model(dm.concept_model_path(run_dir),
                              labels_path=dm.concepts_json_path(run_dir))


def render_stage(manifest: DatasetManifest, cfg: RunConfig, run_dir: Path,
                 force: bool = False, workers: int = 1) -> None:
    model = load_model(run_dir)
    maps, records = load_records(manifest, run_dir)
    assignments = assign_segments(model, records)
    dm.dump_json(dm.assignments_path(run_dir), {
        "k": model.k,
        "assignments": [
            {"image_id": a.image_id, "segment_id": a.segment_id,
             "cluster_id": a.cluster_id, "distance": a.distance}
            for a in sorted(assignments,
                            key=lambda a: (a.image_id, a.segment_id))
        ],
    })

    def one(entry: ImageEntry) -> None:
        out = dm.mask_path(run_dir, entry.id)
        inputs = (dm.concept_model_path(run_dir), dm.concepts_json_path(run_dir),
                  dm.segment_path(run_dir, entry.id))
        if not force and _fresh(out, *inputs):
            return
        try:
            seg_map = maps[entry.id]
            field = _field_mask(entry, seg_map.assignment.shape,
                                seg_map.patch_size)
            mask = render_mask(model, seg_map, assignments, field)
            dm.write_mask(run_dir, mask)
        except EndosegError as exc:
            raise _stage_error("render", entry.id, exc) from exc

    _map_images(manifest.images, one, workers)


# ---------------------------------------------------------------------------
# Evaluation stages
# ---------------------------------------------------------------------------

def _load_cls_tensor(entry: ImageEntry, source: FeatureSource):
    from .data_model import read_features
    path = source.cls_path(entry.id)
    return read_features(path, image_id=entry.id) if path.is_file() else None


def build_image_embeddings(manifest: DatasetManifest, source: FeatureSource,
                           cfg: RunConfig, ids: Iterable[str],
                           ) -> dict[str, np.ndarray]:
    embeddings: dict[str, np.ndarray] = {}
    for image_id in ids:
        entry = manifest.entry(image_id)
        tensor = features_for(entry, source)
        cls_tensor = (None if cfg.probe.pool == "avg-patch"
                      else _load_cls_tensor(entry, source))
        embeddings[image_id] = image_embedding(tensor, pool=cfg.probe.pool,
                                               n_last_blocks=cfg.probe.blocks,
                                               cls_tensor=cls_tensor)
    return embeddings


def eval_classification_stage(manifest: DatasetManifest, source: FeatureSource,
                              cfg: RunConfig, run_dir: Path, task: str,
                              method: str) -> EvalReport:
    try:
        labels, _ = task_labels(manifest, task)
        embeddings = build_image_embeddings(manifest, source, cfg, labels)
        report = two_fold_cv(
            manifest, task, method, embeddings,
            knn_k=cfg.knn_k, knn_temperature=cfg.knn_temperature,
            probe=cfg.probe, seed=cfg.seed,
            config_echo=dm.config_to_dict(cfg))
        report = EvalReport(task=f"{task}-{method}", method=report.method,
                            per_fold=report.per_fold, averaged=report.averaged,
                            config=report.config, per_class=report.per_class)
        dm.write_run_artifact(run_dir, report)
        return report
    except EndosegError as exc:
        raise _stage_error(f"eval-{method}", None, exc) from exc


def _gt_masks(manifest: DatasetManifest,
              maps: Mapping[str, SegmentMap]) -> dict[str, np.ndarray]:
    gts: dict[str, np.ndarray] = {}
    for image_id, seg_map in maps.items():
        entry = manifest.entry(image_id)
        if entry.gt_mask_path is None:
            continue
        shape = _pixel_shape(seg_map.assignment.shape, seg_map.patch_size)
        gts[image_id] = load_binary_mask(entry.gt_mask_path, shape)
    return gts


def eval_polyp_probe_stage(manifest: DatasetManifest, cfg: RunConfig,
                           run_dir: Path) -> EvalReport:
    try:
        if len(manifest.folds) != 2:
            raise DataError(f"polyp evaluation needs exactly 2 folds, manifest "
                            f"has {len(manifest.folds)}")
        maps, records = load_records(manifest, run_dir, with_gt_only=True)
        gts = _gt_masks(manifest, maps)
        by_image: dict[str, list[SegmentRecord]] = {}
        for rec in records:
            by_image.setdefault(rec.image_id, []).append(rec)

        fold_ids = sorted(manifest.folds)
        fold_of = {i: manifest.fold_of(i) for i in maps}
        fold_results = []
        for test_fold in fold_ids:
            train_fold = fold_ids[1] if test_fold == fold_ids[0] else fold_ids[0]
            train_ids = [i for i in maps if fold_of[i] == train_fold]
            test_ids = [i for i in maps if fold_of[i] == test_fold]
            if not train_ids or not test_ids:
                raise DataError(f"fold {test_fold!r} or its complement has no "
                                f"annotated images")
            train_records, train_labels = [], []
            for image_id in train_ids:
                labels = segment_overlap_labels(maps[image_id], gts[image_id])
                for rec in by_image[image_id]:
                    train_records.append(rec)
                    train_labels.append(labels[rec.segment_id])
            val_records = [r for i in test_ids for r in by_image[i]]
            val_maps = {i: maps[i] for i in test_ids}
            preds = segment_polyp_probe(train_records, np.asarray(train_labels),
                                        val_records, val_maps, cfg.probe,
                                        seed=cfg.seed)
            fold_report = polyp_detection_report(
                preds, {i: gts[i] for i in test_ids})
            fold_results.append((test_fold, dict(fold_report.per_fold[0])))

        report = merge_detection_folds("polyp-probe", "probe", fold_results,
                                       dm.config_to_dict(cfg))
        dm.write_run_artifact(run_dir, report)
        return report
    except EndosegError as exc:
        raise _stage_error("eval-polyp", None, exc) from exc


def eval_polyp_unsup_stage(manifest: DatasetManifest, cfg: RunConfig,
                           run_dir: Path, chosen_cluster: int,
                           fold: str | None = None) -> EvalReport:
    try:
        model = load_model(run_dir)
        maps, records = load_records(manifest, run_dir, fold=fold,
                                     with_gt_only=True)
        gts = _gt_masks(manifest, maps)
        report = unsupervised_polyp_eval(model, chosen_cluster, maps, records,
                                         gts, config_echo=dm.config_to_dict(cfg))
        dm.write_run_artifact(run_dir, report)
        return report
    except EndosegError as exc:
        raise _stage_error("eval-polyp-unsup", None, exc) from exc


# ---------------------------------------------------------------------------
# Review export (shared with the HTTP service)
# ---------------------------------------------------------------------------

def cluster_summaries(run_dir: Path, exemplars_per_cluster: int = 8,
                      ) -> list[dict[str, Any]]:
    """Per-cluster label, size, mean distance, and nearest-centroid exemplars."""
    assignments_file = dm.assignments_path(run_dir)
    if not assignments_file.is_file():
        raise DataError(f"assignments not found ({assignments_file}); "
                        f"run the render stage first")
    doc = json.loads(assignments_file.read_text())
    labels: dict[int, str] = {}
    concepts_file = dm.concepts_json_path(run_dir)
    if concepts_file.is_file():
        labels = {int(k): str(v) for k, v in
                  json.loads(concepts_file.read_text()).items()}
    k = int(doc["k"])
    by_cluster: dict[int, list[dict[str, Any]]] = {c: [] for c in range(k)}
    for a in doc["assignments"]:
        by_cluster[int(a["cluster_id"])].append(a)
    summaries = []
    for c in range(k):
        members = sorted(by_cluster[c],
                         key=lambda a: (a["distance"], a["image_id"],
                                        a["segment_id"]))
        summaries.append({
            "cluster_id": c,
            "label": labels.get(c, f"cluster-{c}"),
            "segment_count": len(members),
            "mean_distance": (float(np.mean([m["distance"] for m in members]))
                              if members else 0.0),
            "exemplars": [
                {"image_id": m["image_id"], "segment_id": m["segment_id"],
                 "distance": m["distance"]}
                for m in members[:exemplars_per_cluster]
            ],
        })
    return summaries


def export_review_stage(manifest: DatasetManifest, run_dir: Path,
                        exemplars_per_cluster: int = 8) -> Path:
    summaries = cluster_summaries(run_dir, exemplars_per_cluster)
    maps, _ = load_records(manifest, run_dir, require_vectors=False)
    bboxes = {
        image_id: {str(s): list(seg_map.bboxes[s])
                   for s in range(seg_map.n_segments)}
        for image_id, seg_map in sorted(maps.items())
    }
    return dm.dump_json(Path(run_dir) / "review_export.json",
                        {"clusters": summaries, "segment_bboxes": bboxes})
