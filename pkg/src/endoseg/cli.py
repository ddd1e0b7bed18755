"""Command-line entry point orchestrating the pipeline stages.

Artifacts land in a run directory (config echo, per-image segment files,
masks, concept model, reports); every verb is resumable and deterministic
given the same inputs and seed.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import data_model as dm
from . import pipeline
from .data_model import EigGapRule, PreprocessConfig, RunConfig, \
    load_manifest, validate_config
from .errors import ConfigError, DataError, EndosegError
from .features import MODE_EXTERNAL, MODE_PRECOMPUTED, FeatureSource


def _abort(exc: EndosegError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


def _parse_resize(value: str | None) -> tuple[int, int] | None:
    if value is None:
        return None
    try:
        h, w = (int(v) for v in value.lower().split("x"))
        return h, w
    except ValueError:
        raise ConfigError(f"--resize expects HxW, got {value!r}")


def write_config(run_dir: Path, cfg: RunConfig, manifest: str,
                 features: str | None, extractor_cmd: str | None) -> None:
    doc = dm.config_to_dict(cfg)
    doc["inputs"] = {"manifest": manifest, "features": features,
                     "extractor_cmd": extractor_cmd}
    dm.dump_json(dm.config_path(run_dir), doc)


def read_run(run_dir: str | Path):
    """(config, manifest, feature source) recorded in a run directory."""
    run_dir = Path(run_dir)
    path = dm.config_path(run_dir)
    if not path.is_file():
        raise DataError(f"no config.json in run directory {run_dir}; "
                        f"run `segment` first")
    doc = json.loads(path.read_text())
    cfg = dm.config_from_dict(doc)
    inputs = doc.get("inputs", {})
    manifest = load_manifest(inputs["manifest"])
    source = build_source(cfg, inputs.get("features"),
                          inputs.get("extractor_cmd"))
    return cfg, manifest, source


def build_source(cfg: RunConfig, features: str | None,
                 extractor_cmd: str | None) -> FeatureSource:
    expected = None
    if cfg.preprocess.resize_to is not None:
        h, w = cfg.preprocess.resize_to
        expected = (h // cfg.patch_size, w // cfg.patch_size)
    if extractor_cmd:
        return FeatureSource(mode=MODE_EXTERNAL, command=extractor_cmd,
                             root=Path(features) if features else None,
                             patch_size=cfg.patch_size, expected_grid=expected)
    if not features:
        raise ConfigError("either --features or --extractor-cmd is required")
    return FeatureSource(mode=MODE_PRECOMPUTED, root=Path(features),
                         patch_size=cfg.patch_size, expected_grid=expected)


run_dir_option = click.option("--run-dir", required=True,
                              type=click.Path(file_okay=False))
workers_option = click.option("--workers", default=1, show_default=True)
force_option = click.option("--force", is_flag=True,
                            help="recompute even when outputs look fresh")
csv_option = click.option("--csv", "csv_out", is_flag=True,
                          help="also write the report as reports/<task>.csv")


def _maybe_csv(run_dir, report, csv_out: bool) -> None:
    if csv_out:
        path = dm.report_path(run_dir, report.task).with_suffix(".csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.to_csv())


@click.group()
def main() -> None:
    """Unsupervised spectral segmentation and concept discovery."""


@main.command()
@click.option("--manifest", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--features", type=click.Path(file_okay=False))
@click.option("--extractor-cmd", help="external extractor template with "
                                      "{image} {bbox} {out} placeholders")
@run_dir_option
@click.option("--color-weight", default=1.0, show_default=True)
@click.option("--patch-size", default=16, show_default=True)
@click.option("--eig-count", default=15, show_default=True)
@click.option("--eig-tau", default=0.2, show_default=True)
@click.option("--max-segments", default=12, show_default=True)
@click.option("--k", "kmeans_k", default=15, show_default=True,
              help="K for dataset-wide K-means")
@click.option("--pca-dim", default=64, show_default=True)
@click.option("--knn-k", default=20, show_default=True)
@click.option("--temperature", default=0.07, show_default=True)
@click.option("--block-fusion", default="concat", show_default=True,
              type=click.Choice(["concat", "mean"]))
@click.option("--color-knn-k", default=10, show_default=True)
@click.option("--resize", help="preprocess resize as HxW")
@click.option("--clahe/--no-clahe", default=False, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--dump-affinity", is_flag=True,
              help="write combined affinities as `row col weight` triplets")
@workers_option
@force_option
def segment(manifest, features, extractor_cmd, run_dir, color_weight,
            patch_size, eig_count, eig_tau, max_segments, kmeans_k, pca_dim,
            knn_k, temperature, block_fusion, color_knn_k, resize, clahe,
            seed, dump_affinity, workers, force) -> None:
    """Spectrally decompose every manifest image into segments."""
    try:
        cfg = RunConfig(
            color_weight=color_weight, eig_count=eig_count,
            eiggap_rule=EigGapRule(tau=eig_tau, max_segments=max_segments),
            pca_dim=pca_dim, kmeans_k=kmeans_k, knn_k=knn_k,
            knn_temperature=temperature, seed=seed, patch_size=patch_size,
            block_fusion=block_fusion, color_knn_k=color_knn_k,
            preprocess=PreprocessConfig(resize_to=_parse_resize(resize),
                                        clahe=clahe),
        )
        validate_config(cfg)
        source = build_source(cfg, features, extractor_cmd)
        data = load_manifest(manifest)
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        write_config(run_path, cfg, manifest, features, extractor_cmd)
        pipeline.segment_stage(data, source, cfg, run_path, force=force,
                               workers=workers, dump_affinity=dump_affinity)
        click.echo(f"segmented {len(data.images)} images into {run_dir}")
    except EndosegError as exc:
        _abort(exc)


@main.command()
@run_dir_option
@workers_option
@force_option
def embed(run_dir, workers, force) -> None:
    """Pool each segment crop into a unit-norm feature vector."""
    try:
        cfg, manifest, source = read_run(run_dir)
        pipeline.embed_stage(manifest, source, cfg, Path(run_dir), force=force,
                             workers=workers)
        click.echo(f"embedded segments for {len(manifest.images)} images")
    except EndosegError as exc:
        _abort(exc)


@main.command("fit-concepts")
@run_dir_option
@click.option("--fold", help="restrict fitting to one fold (training fold)")
def fit_concepts_cmd(run_dir, fold) -> None:
    """Fit PCA + K-means over segment vectors."""
    try:
        cfg, manifest, _ = read_run(run_dir)
        model = pipeline.fit_stage(manifest, cfg, Path(run_dir), fold=fold)
        click.echo(f"fitted concept model with K={model.k} "
                   f"(pca dim {model.pca_dim})")
    except EndosegError as exc:
        _abort(exc)


@main.command()
@run_dir_option
@workers_option
@force_option
def render(run_dir, workers, force) -> None:
    """Assign segments to clusters and paint semantic masks."""
    try:
        cfg, manifest, _ = read_run(run_dir)
        pipeline.render_stage(manifest, cfg, Path(run_dir), force=force,
                              workers=workers)
        click.echo(f"rendered masks for {len(manifest.images)} images")
    except EndosegError as exc:
        _abort(exc)


@main.command("eval-knn")
@run_dir_option
@click.option("--task", required=True, type=click.Choice(["full-23", "mces-3"]))
@click.option("--knn-k", "--k", "knn_k", type=int,
              help="neighbor count (defaults to the run config)")
@click.option("--temperature", type=float)
@csv_option
def eval_knn(run_dir, task, knn_k, temperature, csv_out) -> None:
    """Two-fold CV with the weighted KNN classifier."""
    try:
        cfg, manifest, source = read_run(run_dir)
        if knn_k is not None:
            cfg = cfg.with_overrides(knn_k=knn_k)
        if temperature is not None:
            cfg = cfg.with_overrides(knn_temperature=temperature)
        report = pipeline.eval_classification_stage(
            manifest, source, cfg, Path(run_dir), task, "knn")
        _maybe_csv(run_dir, report, csv_out)
        click.echo(json.dumps(report.averaged, sort_keys=True))
    except EndosegError as exc:
        _abort(exc)


@main.command("eval-probe")
@run_dir_option
@click.option("--task", required=True, type=click.Choice(["full-23", "mces-3"]))
@click.option("--pool", type=click.Choice(["avg-patch", "cls-only",
                                           "cls+avg-patch"]))
@click.option("--blocks", type=int, help="pool over the last N blocks")
@csv_option
def eval_probe(run_dir, task, pool, blocks, csv_out) -> None:
    """Two-fold CV with a linear probe on image embeddings."""
    try:
        cfg, manifest, source = read_run(run_dir)
        probe = cfg.probe
        if pool is not None:
            probe = replace(probe, pool=pool)
        if blocks is not None:
            probe = replace(probe, blocks=blocks)
        cfg = cfg.with_overrides(probe=probe)
        report = pipeline.eval_classification_stage(
            manifest, source, cfg, Path(run_dir), task, "probe")
        _maybe_csv(run_dir, report, csv_out)
        click.echo(json.dumps(report.averaged, sort_keys=True))
    except EndosegError as exc:
        _abort(exc)


@main.command("eval-polyp")
@run_dir_option
@csv_option
def eval_polyp(run_dir, csv_out) -> None:
    """Two-fold segment-level linear probing for polyp masks."""
    try:
        cfg, manifest, _ = read_run(run_dir)
        report = pipeline.eval_polyp_probe_stage(manifest, cfg, Path(run_dir))
        _maybe_csv(run_dir, report, csv_out)
        click.echo(json.dumps(report.averaged, sort_keys=True))
    except EndosegError as exc:
        _abort(exc)


@main.command("eval-polyp-unsup")
@run_dir_option
@click.option("--cluster", required=True, type=int,
              help="cluster id identified as the polyp concept")
@click.option("--fold", help="restrict evaluation to one fold")
@csv_option
def eval_polyp_unsup(run_dir, cluster, fold, csv_out) -> None:
    """Score one concept cluster as an unsupervised polyp detector."""
    try:
        cfg, manifest, _ = read_run(run_dir)
        report = pipeline.eval_polyp_unsup_stage(manifest, cfg, Path(run_dir),
                                                 cluster, fold=fold)
        _maybe_csv(run_dir, report, csv_out)
        click.echo(json.dumps(report.averaged, sort_keys=True))
    except EndosegError as exc:
        _abort(exc)


@main.command("export-review")
@run_dir_option
@click.option("--exemplars", default=8, show_default=True)
def export_review(run_dir, exemplars) -> None:
    """Write a static review bundle (cluster summaries + segment bboxes)."""
    try:
        _, manifest, _ = read_run(run_dir)
        out = pipeline.export_review_stage(manifest, Path(run_dir),
                                           exemplars_per_cluster=exemplars)
        click.echo(f"wrote {out}")
    except EndosegError as exc:
        _abort(exc)


def _default_frontend_dist() -> Path | None:
    candidates = (Path("frontend/dist"),
                  Path(__file__).resolve().parents[2] / "frontend" / "dist")
    for candidate in candidates:
        if candidate.is_dir():
            return candidate
    return None


@main.command()
@run_dir_option
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--frontend", type=click.Path(file_okay=False),
              help="built frontend to serve at / (defaults to frontend/dist)")
def serve(run_dir, port, host, frontend) -> None:
    """Serve the cluster review API (and frontend, if built)."""
    try:
        import uvicorn
        from .service import create_app
        dist = Path(frontend) if frontend else _default_frontend_dist()
        app = create_app(Path(run_dir), frontend_dist=dist)
        click.echo(f"review service on http://{host}:{port}"
                   + (f" (frontend: {dist})" if dist else " (API only)"))
        uvicorn.run(app, host=host, port=port, log_level="warning")
    except EndosegError as exc:
        _abort(exc)


if __name__ == "__main__":
    main()
