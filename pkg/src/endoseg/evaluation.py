"""Classification and detection evaluation protocols.

Weighted KNN classifier, linear probing with SGD on cross-entropy,
two-fold cross-validation with macro/micro F1, polyp detection F1 at an
IoU threshold plus mean IoU, segment-level polyp probing, and the
unsupervised cluster-as-detector evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .concepts import ConceptModel
from .data_model import DatasetManifest, ProbeConfig
from .errors import ConfigError, DataError, NumericalError
from .segments import SegmentRecord
from .spectral import SegmentMap

DETECTION_IOU_THRESHOLD = 0.3
SEGMENT_POSITIVE_CELL_FRACTION = 0.5
TASK_FULL = "full-23"
TASK_MCES = "mces-3"


@dataclass(frozen=True)
class ImageEmbedding:
    image_id: str
    vector: np.ndarray
    label: int
    fold_id: str


@dataclass(frozen=True)
class EvalReport:
    """Per-fold and averaged metrics with a config echo."""

    task: str
    method: str
    per_fold: tuple[dict[str, float], ...]
    averaged: dict[str, float]
    config: dict[str, Any]
    per_class: tuple[dict[str, Any], ...] = ()

    def __post_init__(self) -> None:
        for key, value in self.averaged.items():
            if not 0.0 <= value <= 1.0:
                raise DataError(f"report {self.task!r}: averaged {key}={value} "
                                f"outside [0, 1]")
            fold_vals = [f[key] for f in self.per_fold if key in f]
            if fold_vals and abs(value - float(np.mean(fold_vals))) > 1e-9:
                raise DataError(f"report {self.task!r}: averaged {key} is not the "
                                f"mean of the fold values")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "method": self.method,
            "per_fold": list(self.per_fold),
            "averaged": dict(self.averaged),
            "config": dict(self.config),
            "per_class": list(self.per_class),
        }

    def to_csv(self) -> str:
        """Flat table: one row per fold plus the averaged row."""
        metrics = sorted(self.averaged)
        lines = [",".join(["task", "method", "fold"] + metrics)]
        for fold in self.per_fold:
            fold_name = str(fold.get("fold", "0"))
            cells = [f"{fold[m]:.6f}" if m in fold else "" for m in metrics]
            lines.append(",".join([self.task, self.method, fold_name] + cells))
        lines.append(",".join([self.task, self.method, "averaged"]
                              + [f"{self.averaged[m]:.6f}" for m in metrics]))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Weighted KNN classifier
# ---------------------------------------------------------------------------

def knn_classify(train_vectors: np.ndarray, train_labels: np.ndarray,
                 query: np.ndarray, k: int, temperature: float,
                 n_classes: int) -> np.ndarray:
    """Class scores from a cosine-similarity weighted k-nearest-neighbor vote.

    Each of the k nearest training vectors votes for its class with weight
    exp(similarity / temperature).  Neighbor ties resolve by training index.
    """
    train_vectors = np.asarray(train_vectors, dtype=np.float64)
    if train_vectors.shape[0] == 0:
        raise DataError("knn_classify: empty training set")
    if k > train_vectors.shape[0]:
        raise ConfigError(f"knn k={k} exceeds training size {train_vectors.shape[0]}")
    train_norm = train_vectors / np.maximum(
        np.linalg.norm(train_vectors, axis=1, keepdims=True), 1e-12)
    q = np.asarray(query, dtype=np.float64)
    q = q / max(float(np.linalg.norm(q)), 1e-12)
    sims = train_norm @ q
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    scores = np.zeros(n_classes)
    for idx in order:
        scores[int(train_labels[idx])] += np.exp(sims[idx] / temperature)
    return scores


def knn_predict(train_vectors: np.ndarray, train_labels: np.ndarray,
                queries: np.ndarray, k: int, temperature: float,
                n_classes: int) -> np.ndarray:
    preds = np.empty(len(queries), dtype=np.int64)
    for i, q in enumerate(queries):
        scores = knn_classify(train_vectors, train_labels, q, k, temperature,
                              n_classes)
        preds[i] = int(np.argmax(scores))  # lowest index wins ties
    return preds


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearProbe:
    weights: np.ndarray  # [D, C]
    bias: np.ndarray     # [C]
    learning_rate: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits = np.asarray(x, dtype=np.float64) @ self.weights + self.bias
        return np.argmax(logits, axis=1)


def cross_entropy_loss_and_grad(weights: np.ndarray, bias: np.ndarray,
                                x: np.ndarray, y: np.ndarray,
                                ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    logits = x @ weights + bias
    logits = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = x.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return loss, x.T @ delta, delta.sum(axis=0)


def _sgd_train(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float,
               epochs: int, batch_size: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray] | None:
    """Returns (weights, bias), or None if the loss diverged."""
    weights = np.zeros((x.shape[1], n_classes))
    bias = np.zeros(n_classes)
    n = x.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = order[start:start + batch_size]
                loss, gw, gb = cross_entropy_loss_and_grad(weights, bias,
                                                           x[batch], y[batch])
                if not np.isfinite(loss):
                    return None
                weights -= lr * gw
                bias -= lr * gb
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
        return None
    return weights, bias


def train_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int,
                       cfg: ProbeConfig, seed: int = 0) -> LinearProbe:
    """Mini-batch SGD on softmax cross-entropy for cfg.epochs epochs.

    Each learning-rate candidate is scored on a held-out 10% slice of the
    training fold; the winner is retrained on the full fold.  Candidates
    whose loss goes non-finite are discarded.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DataError("linear probe needs at least 2 classes in the training data")
    n = x.shape[0]
    holdout = max(1, n // 10)
    perm = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 101]).permutation(n)
    val_idx, fit_idx = perm[:holdout], perm[holdout:]
    if len(np.unique(y[fit_idx])) < 2:
        fit_idx = perm  # tiny folds: tune on the full set rather than degenerate

    best: tuple[float, int] | None = None
    for i, lr in enumerate(cfg.learning_rates):
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 202, i])
        fitted = _sgd_train(x[fit_idx], y[fit_idx], n_classes, lr, cfg.epochs,
                            cfg.batch_size, rng)
        if fitted is None:
            continue
        weights, bias = fitted
        acc = float(np.mean(np.argmax(x[val_idx] @ weights + bias, axis=1)
                            == y[val_idx]))
        if best is None or acc > best[0] + 1e-12:
            best = (acc, i)
    if best is None:
        raise NumericalError("all learning-rate candidates diverged")

    lr_index = best[1]
    lr = cfg.learning_rates[lr_index]
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 303, lr_index])
    fitted = _sgd_train(x, y, n_classes, lr, cfg.epochs, cfg.batch_size, rng)
    if fitted is None:
        raise NumericalError(f"selected learning rate {lr} diverged on the full fold")
    return LinearProbe(weights=fitted[0], bias=fitted[1], learning_rate=lr)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

def f1_scores(y_true: np.ndarray, y_pred: np.ndarray,
              n_classes: int) -> tuple[float, float]:
    """(macro_f1, micro_f1) with the 0/0 -> 0 convention per class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"f1_scores: length mismatch {y_true.shape} vs {y_pred.shape}")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= n_classes):
        raise DataError("f1_scores: labels out of range")
    confusion = np.bincount(y_true * n_classes + y_pred,
                            minlength=n_classes * n_classes)
    confusion = confusion.reshape(n_classes, n_classes).astype(np.float64)
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    macro = float(f1.mean())
    pooled_tp, pooled_fp, pooled_fn = tp.sum(), fp.sum(), fn.sum()
    denom = 2 * pooled_tp + pooled_fp + pooled_fn
    micro = float(2 * pooled_tp / denom) if denom > 0 else 0.0
    return macro, micro


def per_class_f1(y_true: np.ndarray, y_pred: np.ndarray,
                 n_classes: int) -> np.ndarray:
    confusion = np.bincount(np.asarray(y_true) * n_classes + np.asarray(y_pred),
                            minlength=n_classes * n_classes)
    confusion = confusion.reshape(n_classes, n_classes).astype(np.float64)
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / denom, 0.0)


# ---------------------------------------------------------------------------
# Two-fold cross-validation
# ---------------------------------------------------------------------------

def task_labels(manifest: DatasetManifest, task: str) -> tuple[dict[str, int], list[str]]:
    """(image_id -> class index, class names) for a classification task."""
    if task == TASK_FULL:
        mapping = {img.id: img.label for img in manifest.images
                   if img.label is not None}
        return mapping, list(manifest.classes)
    if task == TASK_MCES:
        mapping = {img.id: img.mces_label - 1 for img in manifest.images
                   if img.mces_label is not None}
        return mapping, ["mces-1", "mces-2", "mces-3"]
    raise ConfigError(f"unknown classification task {task!r}")


def two_fold_cv(manifest: DatasetManifest, task: str, method: str,
                embeddings: Mapping[str, np.ndarray],
                knn_k: int = 20, knn_temperature: float = 0.07,
                probe: ProbeConfig | None = None, seed: int = 0,
                config_echo: dict[str, Any] | None = None) -> EvalReport:
    """Train on fold A / test on fold B, then swap; report averaged F1."""
    if len(manifest.folds) != 2:
        raise DataError(f"two-fold CV needs exactly 2 folds, manifest has "
                        f"{len(manifest.folds)}")
    if method not in ("knn", "probe"):
        raise ConfigError(f"unknown evaluation method {method!r}")
    labels, class_names = task_labels(manifest, task)
    if not labels:
        raise DataError(f"no images carry labels for task {task!r}")
    n_classes = len(class_names)

    fold_ids = sorted(manifest.folds)
    fold_members = {
        fold: [i for i in manifest.folds[fold] if i in labels and i in embeddings]
        for fold in fold_ids
    }
    for fold in fold_ids:
        if not fold_members[fold]:
            raise DataError(f"fold {fold!r} has no usable images for task {task!r}")

    per_fold = []
    class_f1_sums = np.zeros(n_classes)
    for test_fold in fold_ids:
        train_fold = fold_ids[1] if test_fold == fold_ids[0] else fold_ids[0]
        x_train = np.stack([embeddings[i] for i in fold_members[train_fold]])
        y_train = np.array([labels[i] for i in fold_members[train_fold]])
        x_test = np.stack([embeddings[i] for i in fold_members[test_fold]])
        y_test = np.array([labels[i] for i in fold_members[test_fold]])
        if method == "knn":
            k = min(knn_k, len(x_train))
            preds = knn_predict(x_train, y_train, x_test, k, knn_temperature,
                                n_classes)
        else:
            model = train_linear_probe(x_train, y_train, n_classes,
                                       probe or ProbeConfig(), seed=seed)
            preds = model.predict(x_test)
        macro, micro = f1_scores(y_test, preds, n_classes)
        per_fold.append({"fold": test_fold, "macro_f1": macro, "micro_f1": micro,
                         "n_test": len(y_test)})
        class_f1_sums += per_class_f1(y_test, preds, n_classes)

    averaged = {
        "macro_f1": float(np.mean([f["macro_f1"] for f in per_fold])),
        "micro_f1": float(np.mean([f["micro_f1"] for f in per_fold])),
    }
    per_class = tuple(
        {"class": name, "f1": float(class_f1_sums[c] / len(fold_ids))}
        for c, name in enumerate(class_names)
    )
    return EvalReport(task=task, method=method, per_fold=tuple(per_fold),
                      averaged=averaged, config=config_echo or {},
                      per_class=per_class)


# ---------------------------------------------------------------------------
# Masks and detection
# ---------------------------------------------------------------------------

def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """|A∩B| / |A∪B|; empty∪empty is defined as 1.0 (vacuous agreement)."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise DataError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


_CC_STRUCTURE = np.ones((3, 3), dtype=int)  # 8-connectivity


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    labeled, count = ndimage.label(np.asarray(mask).astype(bool),
                                   structure=_CC_STRUCTURE)
    return [labeled == i for i in range(1, count + 1)]


def polyp_detection_report(preds: Mapping[str, np.ndarray],
                           gts: Mapping[str, np.ndarray],
                           threshold: float = DETECTION_IOU_THRESHOLD,
                           config_echo: dict[str, Any] | None = None,
                           task: str = "polyp-detection") -> EvalReport:
    """Detection F1 at an IoU threshold plus mean IoU over annotated images.

    Each connected component of a predicted mask is one predicted object:
    TP if its IoU against the image's ground-truth mask reaches the
    threshold, FP otherwise.  Each ground-truth component with no
    intersecting TP counts as a FN.
    """
    tp = fp = fn = 0
    ious = []
    for image_id, gt in gts.items():
        if image_id not in preds:
            raise DataError(f"missing prediction entry for annotated image "
                            f"{image_id!r}")
        pred = np.asarray(preds[image_id]).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth shape "
                            f"{gt.shape} for image {image_id!r}")
        tp_components = []
        for comp in connected_components(pred):
            if iou(comp, gt) >= threshold:
                tp += 1
                tp_components.append(comp)
            else:
                fp += 1
        for gt_comp in connected_components(gt):
            if not any(np.logical_and(gt_comp, c).any() for c in tp_components):
                fn += 1
        ious.append(iou(pred, gt))

    denom = 2 * tp + fp + fn
    f1 = float(2 * tp / denom) if denom > 0 else 1.0
    mean_iou = float(np.mean(ious)) if ious else 1.0
    fold_metrics = {"f1_at_iou": f1, "mean_iou": mean_iou, "tp": float(tp),
                    "fp": float(fp), "fn": float(fn)}
    echo = dict(config_echo or {})
    echo.setdefault("iou_threshold", threshold)
    return EvalReport(task=task, method="detection", per_fold=(fold_metrics,),
                      averaged={"f1_at_iou": f1, "mean_iou": mean_iou}, config=echo)


def merge_detection_folds(task: str, method: str,
                          fold_reports: Sequence[tuple[str, dict[str, float]]],
                          config_echo: dict[str, Any]) -> EvalReport:
    per_fold = tuple({"fold": fold} | metrics for fold, metrics in fold_reports)
    averaged = {k: float(np.mean([m[k] for _, m in fold_reports]))
                for k in ("f1_at_iou", "mean_iou")}
    return EvalReport(task=task, method=method, per_fold=per_fold,
                      averaged=averaged, config=config_echo)


# ---------------------------------------------------------------------------
# Segment-level polyp protocols
# ---------------------------------------------------------------------------

def segment_overlap_labels(seg_map: SegmentMap, gt_mask: np.ndarray,
                           positive_fraction: float = SEGMENT_POSITIVE_CELL_FRACTION,
                           ) -> np.ndarray:
    """Per-segment binary label: positive iff >= positive_fraction of the
    segment's cells sit on the ground-truth mask (cell-center convention)."""
    gt = np.asarray(gt_mask).astype(bool)
    ps = seg_map.patch_size
    grid_h, grid_w = seg_map.assignment.shape
    rows = (np.arange(grid_h) * ps + ps // 2).clip(0, gt.shape[0] - 1)
    cols = (np.arange(grid_w) * ps + ps // 2).clip(0, gt.shape[1] - 1)
    cell_pos = gt[np.ix_(rows, cols)]
    labels = np.zeros(seg_map.n_segments, dtype=bool)
    for s in range(seg_map.n_segments):
        member = seg_map.assignment == s
        labels[s] = cell_pos[member].mean() >= positive_fraction
    return labels


def segment_pixel_mask(seg_map: SegmentMap, segment_ids: Sequence[int]) -> np.ndarray:
    """Binary pixel mask of the union of the given segments' cells."""
    grid = np.isin(seg_map.assignment, np.asarray(list(segment_ids), dtype=int))
    return np.kron(grid, np.ones((seg_map.patch_size, seg_map.patch_size),
                                 dtype=bool))


def segment_polyp_probe(train_records: Sequence[SegmentRecord],
                        train_labels: np.ndarray,
                        val_records: Sequence[SegmentRecord],
                        val_maps: Mapping[str, SegmentMap],
                        probe: ProbeConfig, seed: int = 0,
                        ) -> dict[str, np.ndarray]:
    """Linear probe on segment vectors -> per-image binary polyp masks.

    Positive validation segments' pixels union into each image's mask;
    images whose segments all classify negative get an empty mask.
    """
    if not np.any(train_labels):
        raise DataError("segment polyp probe: no positive segments in the "
                        "training fold")
    x_train = np.stack([r.vector for r in train_records])
    y_train = np.asarray(train_labels, dtype=np.int64)
    model = train_linear_probe(x_train, y_train, 2, probe, seed=seed)

    masks: dict[str, np.ndarray] = {}
    by_image: dict[str, list[SegmentRecord]] = {}
    for rec in val_records:
        by_image.setdefault(rec.image_id, []).append(rec)
    for image_id, seg_map in val_maps.items():
        recs = by_image.get(image_id, [])
        if recs:
            preds = model.predict(np.stack([r.vector for r in recs]))
            positive = [r.segment_id for r, p in zip(recs, preds) if p == 1]
        else:
            positive = []
        shape = (seg_map.assignment.shape[0] * seg_map.patch_size,
                 seg_map.assignment.shape[1] * seg_map.patch_size)
        masks[image_id] = (segment_pixel_mask(seg_map, positive) if positive
                           else np.zeros(shape, dtype=bool))
    return masks


def unsupervised_polyp_eval(model: ConceptModel, chosen_cluster: int,
                            val_maps: Mapping[str, SegmentMap],
                            val_records: Sequence[SegmentRecord],
                            gts: Mapping[str, np.ndarray],
                            threshold: float = DETECTION_IOU_THRESHOLD,
                            config_echo: dict[str, Any] | None = None) -> EvalReport:
    """Score the segments assigned to one cluster as the polyp detector."""
    if not 0 <= chosen_cluster < model.k:
        raise ConfigError(f"cluster id {chosen_cluster} out of range [0, {model.k})")
    from .concepts import assign_segments
    assignments = assign_segments(model, list(val_records))
    positive: dict[str, list[int]] = {i: [] for i in val_maps}
    for a in assignments:
        if a.cluster_id == chosen_cluster and a.image_id in positive:
            positive[a.image_id].append(a.segment_id)
    preds = {}
    for image_id, seg_map in val_maps.items():
        shape = (seg_map.assignment.shape[0] * seg_map.patch_size,
                 seg_map.assignment.shape[1] * seg_map.patch_size)
        ids = positive.get(image_id, [])
        preds[image_id] = (segment_pixel_mask(seg_map, ids) if ids
                           else np.zeros(shape, dtype=bool))
    echo = dict(config_echo or {})
    echo["chosen_cluster"] = chosen_cluster
    return polyp_detection_report(preds, gts, threshold=threshold,
                                  config_echo=echo, task="polyp-unsup")
