"""Persistent data types, file formats, and the run-directory layout.

Everything that touches disk lives here: the dataset manifest, the PFT1
patch-feature tensor format, palette-PNG semantic masks, the run
configuration, and the canonical paths inside a run directory that the
CLI stages share.
"""

from __future__ import annotations

import base64
import colorsys
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

MCES_VALUES = (1, 2, 3)

PFT_MAGIC = b"PFT1"
PFT_VERSION = 1
# magic | u16 version | u16 n_blocks | u32 grid_h | u32 grid_w | u32 dim
_PFT_HEADER = struct.Struct("<4sHHIII")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageEntry:
    """One dataset image plus its optional labels and masks."""

    id: str
    image_path: Path
    label: int | None = None
    mces_label: int | None = None
    gt_mask_path: Path | None = None
    field_mask_path: Path | None = None

    @property
    def is_labeled(self) -> bool:
        return self.label is not None or self.mces_label is not None


@dataclass(frozen=True)
class DatasetManifest:
    """Images with splits, class labels, and optional ground-truth masks."""

    dataset_id: str
    images: tuple[ImageEntry, ...]
    classes: tuple[str, ...]
    folds: Mapping[str, tuple[str, ...]]

    def entry(self, image_id: str) -> ImageEntry:
        for img in self.images:
            if img.id == image_id:
                return img
        raise DataError(f"manifest: unknown image id {image_id!r}")

    def fold_of(self, image_id: str) -> str | None:
        for fold_id, ids in self.folds.items():
            if image_id in ids:
                return fold_id
        return None

    def labeled(self) -> tuple[ImageEntry, ...]:
        return tuple(img for img in self.images if img.is_labeled)

    def __iter__(self) -> Iterator[ImageEntry]:
        return iter(self.images)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DataError(msg)


def _image_size(path: Path) -> tuple[int, int]:
    """(height, width) from the file header, without decoding pixels."""
    with Image.open(path) as img:
        w, h = img.size
    return h, w


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest.

    All relative paths in the document are resolved against the manifest's
    own directory.  Raises :class:`DataError` with a field-level message on
    any schema or invariant violation.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path}: not valid JSON ({exc})") from exc
    _require(isinstance(doc, dict), f"manifest {path}: top level must be an object")

    for key in ("dataset_id", "classes", "images"):
        _require(key in doc, f"manifest: missing required field {key!r}")
    classes = doc["classes"]
    _require(isinstance(classes, list) and all(isinstance(c, str) for c in classes),
             "manifest: classes must be a list of strings")
    images_doc = doc["images"]
    _require(isinstance(images_doc, list), "manifest: images must be a list")
    folds_doc = doc.get("folds", {})
    _require(isinstance(folds_doc, dict), "manifest: folds must be an object")

    base = path.parent
    entries: list[ImageEntry] = []
    seen: set[str] = set()
    for i, item in enumerate(images_doc):
        where = f"manifest: images[{i}]"
        _require(isinstance(item, dict), f"{where}: must be an object")
        _require(isinstance(item.get("id"), str) and item["id"],
                 f"{where}.id: required non-empty string")
        image_id = item["id"]
        _require(image_id not in seen, f"{where}.id: duplicate image id {image_id!r}")
        seen.add(image_id)
        _require(isinstance(item.get("image_path"), str),
                 f"{where}.image_path: required string")

        label = item.get("label")
        if label is not None:
            _require(isinstance(label, int) and 0 <= label < len(classes),
                     f"{where}.label: must be an int in [0, {len(classes)})")
        mces = item.get("mces_label")
        if mces is not None:
            _require(mces in MCES_VALUES, f"{where}.mces_label: must be one of {MCES_VALUES}")

        def _opt_path(key: str) -> Path | None:
            value = item.get(key)
            if value is None:
                return None
            _require(isinstance(value, str), f"{where}.{key}: must be a string")
            return base / value

        entry = ImageEntry(
            id=image_id,
            image_path=base / item["image_path"],
            label=label,
            mces_label=mces,
            gt_mask_path=_opt_path("gt_mask_path"),
            field_mask_path=_opt_path("field_mask_path"),
        )
        # Mask geometry can only be verified against an image that exists;
        # declaring a mask makes both files mandatory at load time.
        for key, mask_path in (("gt_mask_path", entry.gt_mask_path),
                               ("field_mask_path", entry.field_mask_path)):
            if mask_path is None:
                continue
            _require(mask_path.is_file(), f"{where}.{key}: file not found: {mask_path}")
            _require(entry.image_path.is_file(),
                     f"{where}.image_path: file not found: {entry.image_path}")
            if _image_size(mask_path) != _image_size(entry.image_path):
                raise DataError(f"{where}.{key}: mask dimensions "
                                f"{_image_size(mask_path)} != image dimensions "
                                f"{_image_size(entry.image_path)}")
        entries.append(entry)

    folds: dict[str, tuple[str, ...]] = {}
    assigned: set[str] = set()
    for fold_id, ids in folds_doc.items():
        _require(isinstance(ids, list) and all(isinstance(x, str) for x in ids),
                 f"manifest: folds[{fold_id!r}] must be a list of image ids")
        for image_id in ids:
            _require(image_id in seen,
                     f"manifest: folds[{fold_id!r}] references unknown id {image_id!r}")
            _require(image_id not in assigned,
                     f"manifest: image {image_id!r} appears in more than one fold")
            assigned.add(image_id)
        folds[str(fold_id)] = tuple(ids)

    if folds:
        labeled_ids = {e.id for e in entries if e.is_labeled}
        missing = labeled_ids - assigned
        _require(not missing,
                 f"manifest: folds do not cover labeled images: {sorted(missing)[:5]}")
        extra = assigned - labeled_ids
        _require(not extra,
                 f"manifest: folds reference unlabeled images: {sorted(extra)[:5]}")

    return DatasetManifest(
        dataset_id=str(doc["dataset_id"]),
        images=tuple(entries),
        classes=tuple(classes),
        folds=folds,
    )


# ---------------------------------------------------------------------------
# Patch feature tensors (PFT1 binary format)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchFeatureTensor:
    """Per-image grid of patch feature vectors from one or more ViT blocks.

    ``data`` is float32 with shape [n_blocks, grid_h, grid_w, dim].
    """

    image_id: str
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4:
            raise DataError(f"feature tensor {self.image_id!r}: expected 4 axes "
                            f"[blocks, grid_h, grid_w, dim], got shape {data.shape}")
        if min(data.shape) < 1:
            raise DataError(f"feature tensor {self.image_id!r}: all extents must be >= 1, "
                            f"got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"feature tensor {self.image_id!r}: non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def n_blocks(self) -> int:
        return self.data.shape[0]

    @property
    def grid_h(self) -> int:
        return self.data.shape[1]

    @property
    def grid_w(self) -> int:
        return self.data.shape[2]

    @property
    def dim(self) -> int:
        return self.data.shape[3]

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w


def write_features(path: str | Path, tensor: PatchFeatureTensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _PFT_HEADER.pack(PFT_MAGIC, PFT_VERSION, tensor.n_blocks,
                              tensor.grid_h, tensor.grid_w, tensor.dim)
    payload = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    return path


def read_features(path: str | Path, image_id: str | None = None) -> PatchFeatureTensor:
    """Read a PFT1 file, rejecting any header or payload corruption."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PFT_HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n_blocks, grid_h, grid_w, dim = _PFT_HEADER.unpack_from(raw)
    if magic != PFT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != PFT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if min(n_blocks, grid_h, grid_w, dim) < 1:
        raise DataError(f"{path}: header declares a zero extent "
                        f"(blocks={n_blocks}, grid={grid_h}x{grid_w}, dim={dim})")
    expected = n_blocks * grid_h * grid_w * dim * 4
    payload = raw[_PFT_HEADER.size:]
    if len(payload) < expected:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise DataError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_blocks, grid_h, grid_w, dim)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite values in payload")
    return PatchFeatureTensor(image_id=image_id or path.stem, data=data.copy())


# ---------------------------------------------------------------------------
# Semantic masks (8-bit palette PNG + JSON legend sidecar)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemanticMask:
    """Per-pixel cluster/concept ids; id 0 is reserved for out-of-field."""

    image_id: str
    labels: np.ndarray
    legend: Mapping[int, str]

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DataError(f"mask {self.image_id!r}: labels must be 2-D")
        present = set(np.unique(labels).tolist())
        missing = present - set(self.legend)
        if missing:
            raise DataError(f"mask {self.image_id!r}: ids {sorted(missing)} missing "
                            f"from legend")
        if labels.min() < 0 or labels.max() > 255:
            raise DataError(f"mask {self.image_id!r}: ids must fit in 8 bits")
        object.__setattr__(self, "labels", labels.astype(np.uint8))
        object.__setattr__(self, "legend", dict(self.legend))


def mask_palette(n_ids: int) -> list[tuple[int, int, int]]:
    """Deterministic id -> RGB palette; id 0 is black (background)."""
    colors = [(0, 0, 0)]
    for i in range(1, n_ids):
        hue = (i * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    return colors


def write_mask(run_dir: str | Path, mask: SemanticMask) -> Path:
    png_path = mask_path(run_dir, mask.image_id)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    n_ids = max(int(mask.labels.max()) + 1, max(mask.legend) + 1, 1)
    palette = mask_palette(n_ids)
    img = Image.fromarray(mask.labels, mode="P")
    flat = [c for rgb in palette for c in rgb]
    flat.extend([0] * (768 - len(flat)))
    img.putpalette(flat)
    img.save(png_path, format="PNG")
    dump_json(mask_legend_path(run_dir, mask.image_id), {
        "image_id": mask.image_id,
        "legend": {str(k): v for k, v in mask.legend.items()},
        "palette": {str(i): list(rgb) for i, rgb in enumerate(palette)},
    })
    return png_path


def read_mask(run_dir: str | Path, image_id: str) -> SemanticMask:
    png_path = mask_path(run_dir, image_id)
    legend_path = mask_legend_path(run_dir, image_id)
    if not png_path.is_file() or not legend_path.is_file():
        raise DataError(f"mask artifacts for {image_id!r} not found in {run_dir}")
    with Image.open(png_path) as img:
        labels = np.asarray(img, dtype=np.uint8)
    sidecar = json.loads(legend_path.read_text())
    legend = {int(k): v for k, v in sidecar["legend"].items()}
    return SemanticMask(image_id=image_id, labels=labels, legend=legend)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigGapRule:
    """Segment count = number of eigenvalues <= tau, clamped to [2, max]."""

    tau: float = 0.2
    max_segments: int = 12


@dataclass(frozen=True)
class PreprocessConfig:
    resize_to: tuple[int, int] | None = None  # (height, width); None keeps native size
    clahe: bool = False


@dataclass(frozen=True)
class ProbeConfig:
    """Linear-probe hyperparameters; epochs stays 100 unless overridden."""

    learning_rates: tuple[float, ...] = (0.1, 0.03, 0.01)
    epochs: int = 100
    pool: str = "avg-patch"  # avg-patch | cls-only | cls+avg-patch
    blocks: int = 4          # pool over the last N blocks of the tensor
    batch_size: int = 32


@dataclass(frozen=True)
class RunConfig:
    color_weight: float = 1.0
    eig_count: int = 15
    eiggap_rule: EigGapRule = EigGapRule()
    pca_dim: int = 64
    kmeans_k: int = 15
    kmeans_restarts: int = 8
    knn_k: int = 20
    knn_temperature: float = 0.07
    probe: ProbeConfig = ProbeConfig()
    seed: int = 0
    patch_size: int = 16
    block_fusion: str = "concat"  # concat | mean
    color_knn_k: int = 10
    preprocess: PreprocessConfig = PreprocessConfig()

    def with_overrides(self, **kwargs: Any) -> "RunConfig":
        cfg = replace(self, **kwargs)
        validate_config(cfg)
        return cfg


def validate_config(cfg: RunConfig) -> None:
    def check(cond: bool, msg: str) -> None:
        if not cond:
            raise ConfigError(f"config: {msg}")

    check(cfg.color_weight >= 0, "color_weight must be >= 0")
    check(cfg.eig_count >= 2, "eig_count must be >= 2")
    check(cfg.eiggap_rule.tau > 0, "eiggap_rule.tau must be > 0")
    check(cfg.eiggap_rule.max_segments >= 2, "eiggap_rule.max_segments must be >= 2")
    check(cfg.pca_dim >= 1, "pca_dim must be >= 1")
    check(2 <= cfg.kmeans_k <= 255, "kmeans_k must be in [2, 255]")
    check(cfg.kmeans_restarts >= 1, "kmeans_restarts must be >= 1")
    check(cfg.knn_k >= 1, "knn_k must be >= 1")
    check(cfg.knn_temperature > 0, "knn_temperature must be > 0")
    check(len(cfg.probe.learning_rates) > 0, "probe.learning_rates must be non-empty")
    check(all(lr > 0 for lr in cfg.probe.learning_rates),
          "probe.learning_rates must be positive")
    check(cfg.probe.epochs >= 1, "probe.epochs must be >= 1")
    check(cfg.probe.pool in ("avg-patch", "cls-only", "cls+avg-patch"),
          f"probe.pool {cfg.probe.pool!r} not recognized")
    check(cfg.probe.blocks >= 1, "probe.blocks must be >= 1")
    check(cfg.probe.batch_size >= 1, "probe.batch_size must be >= 1")
    check(-(2**63) <= cfg.seed < 2**63, "seed must fit in 64 bits")
    check(cfg.patch_size >= 1, "patch_size must be >= 1")
    check(cfg.block_fusion in ("concat", "mean"),
          f"block_fusion {cfg.block_fusion!r} not recognized")
    check(cfg.color_knn_k >= 1, "color_knn_k must be >= 1")
    if cfg.preprocess.resize_to is not None:
        h, w = cfg.preprocess.resize_to
        check(h >= 1 and w >= 1, "preprocess.resize_to extents must be >= 1")
        check(h % cfg.patch_size == 0 and w % cfg.patch_size == 0,
              "preprocess.resize_to must be divisible by patch_size")


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return {
        "color_weight": cfg.color_weight,
        "eig_count": cfg.eig_count,
        "eiggap_rule": {"tau": cfg.eiggap_rule.tau,
                        "max_segments": cfg.eiggap_rule.max_segments},
        "pca_dim": cfg.pca_dim,
        "kmeans_k": cfg.kmeans_k,
        "kmeans_restarts": cfg.kmeans_restarts,
        "knn_k": cfg.knn_k,
        "knn_temperature": cfg.knn_temperature,
        "probe": {
            "learning_rates": list(cfg.probe.learning_rates),
            "epochs": cfg.probe.epochs,
            "pool": cfg.probe.pool,
            "blocks": cfg.probe.blocks,
            "batch_size": cfg.probe.batch_size,
        },
        "seed": cfg.seed,
        "patch_size": cfg.patch_size,
        "block_fusion": cfg.block_fusion,
        "color_knn_k": cfg.color_knn_k,
        "preprocess": {
            "resize_to": list(cfg.preprocess.resize_to) if cfg.preprocess.resize_to else None,
            "clahe": cfg.preprocess.clahe,
        },
    }


def config_from_dict(doc: Mapping[str, Any]) -> RunConfig:
    try:
        probe_doc = doc.get("probe", {})
        pre_doc = doc.get("preprocess", {})
        resize = pre_doc.get("resize_to")
        cfg = RunConfig(
            color_weight=float(doc["color_weight"]),
            eig_count=int(doc["eig_count"]),
            eiggap_rule=EigGapRule(tau=float(doc["eiggap_rule"]["tau"]),
                                   max_segments=int(doc["eiggap_rule"]["max_segments"])),
            pca_dim=int(doc["pca_dim"]),
            kmeans_k=int(doc["kmeans_k"]),
            kmeans_restarts=int(doc["kmeans_restarts"]),
            knn_k=int(doc["knn_k"]),
            knn_temperature=float(doc["knn_temperature"]),
            probe=ProbeConfig(
                learning_rates=tuple(float(x) for x in probe_doc["learning_rates"]),
                epochs=int(probe_doc["epochs"]),
                pool=str(probe_doc["pool"]),
                blocks=int(probe_doc["blocks"]),
                batch_size=int(probe_doc["batch_size"]),
            ),
            seed=int(doc["seed"]),
            patch_size=int(doc["patch_size"]),
            block_fusion=str(doc["block_fusion"]),
            color_knn_k=int(doc["color_knn_k"]),
            preprocess=PreprocessConfig(
                resize_to=tuple(int(x) for x in resize) if resize else None,
                clahe=bool(pre_doc["clahe"]),
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"config.json: malformed document ({exc!r})") from exc
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Run-directory layout
# ---------------------------------------------------------------------------

def config_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / "config.json"


def segment_path(run_dir: str | Path, image_id: str) -> Path:
    return Path(run_dir) / "segments" / f"{image_id}.json"


def mask_path(run_dir: str | Path, image_id: str) -> Path:
    return Path(run_dir) / "masks" / f"{image_id}.png"


def mask_legend_path(run_dir: str | Path, image_id: str) -> Path:
    return Path(run_dir) / "masks" / f"{image_id}.json"


def concept_model_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / "concept_model.bin"


def concepts_json_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / "concepts.json"


def assignments_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / "assignments.json"


def report_path(run_dir: str | Path, task: str) -> Path:
    return Path(run_dir) / "reports" / f"{task}.json"


def dump_json(path: str | Path, obj: Any) -> Path:
    """Canonical JSON dump: sorted keys, stable float repr, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_run_artifact(run_dir: str | Path, artifact: Any) -> Path:
    """Serialize a persisted type at its canonical run-directory location."""
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create run directory {run_dir}: {exc}") from exc

    if isinstance(artifact, RunConfig):
        return dump_json(config_path(run_dir), config_to_dict(artifact))
    if isinstance(artifact, SemanticMask):
        return write_mask(run_dir, artifact)

    from .concepts import ConceptModel, write_concept_model
    if isinstance(artifact, ConceptModel):
        out = write_concept_model(concept_model_path(run_dir), artifact)
        dump_json(concepts_json_path(run_dir),
                  {str(k): v for k, v in artifact.labels.items()})
        return out

    from .evaluation import EvalReport
    if isinstance(artifact, EvalReport):
        return dump_json(report_path(run_dir, artifact.task), artifact.to_dict())

    raise ConfigError(f"no canonical location for artifact type "
                      f"{type(artifact).__name__}")


# ---------------------------------------------------------------------------
# Segment files (segments/<image_id>.json)
# ---------------------------------------------------------------------------

def write_segment_file(run_dir: str | Path, seg_map: Any,
                       eigenvalues: np.ndarray | list[float],
                       records: list[Any] | None = None,
                       fold_id: str | None = None) -> Path:
    doc: dict[str, Any] = {
        "image_id": seg_map.image_id,
        "grid_h": int(seg_map.assignment.shape[0]),
        "grid_w": int(seg_map.assignment.shape[1]),
        "patch_size": int(seg_map.patch_size),
        "n_segments": int(seg_map.n_segments),
        "assignment": [int(x) for x in seg_map.assignment.ravel()],
        "bboxes": [list(b) for b in seg_map.bboxes],
        "eigenvalues": [float(v) for v in np.asarray(eigenvalues)],
        "fold_id": fold_id,
    }
    if records is not None:
        vectors = np.stack([r.vector for r in records]).astype("<f4")
        doc["segment_vectors"] = {
            "dim": int(vectors.shape[1]),
            "data": base64.b64encode(vectors.tobytes()).decode("ascii"),
        }
    return dump_json(segment_path(run_dir, seg_map.image_id), doc)


def read_segment_file(run_dir: str | Path, image_id: str):
    """Returns (SegmentMap, eigenvalues, records-or-None, fold_id)."""
    from .spectral import SegmentMap
    from .segments import SegmentRecord

    path = segment_path(run_dir, image_id)
    if not path.is_file():
        raise DataError(f"segment file not found for image {image_id!r}: {path}")
    doc = json.loads(path.read_text())
    grid_h, grid_w = int(doc["grid_h"]), int(doc["grid_w"])
    assignment = np.asarray(doc["assignment"], dtype=np.int32).reshape(grid_h, grid_w)
    seg_map = SegmentMap(
        image_id=image_id,
        assignment=assignment,
        n_segments=int(doc["n_segments"]),
        bboxes=tuple(tuple(int(v) for v in b) for b in doc["bboxes"]),
        patch_size=int(doc["patch_size"]),
    )
    eigenvalues = np.asarray(doc["eigenvalues"], dtype=np.float64)
    fold_id = doc.get("fold_id")
    records = None
    if "segment_vectors" in doc:
        block = doc["segment_vectors"]
        dim = int(block["dim"])
        vectors = np.frombuffer(base64.b64decode(block["data"]), dtype="<f4")
        vectors = vectors.reshape(seg_map.n_segments, dim)
        records = [
            SegmentRecord(image_id=image_id, segment_id=s,
                          bbox=seg_map.bboxes[s],
                          area_cells=int(np.sum(assignment == s)),
                          vector=vectors[s].astype(np.float64),
                          fold_id=fold_id)
            for s in range(seg_map.n_segments)
        ]
    return seg_map, eigenvalues, records, fold_id
