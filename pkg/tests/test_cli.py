import json

import numpy as np
from click.testing import CliRunner
from sklearn.metrics import adjusted_rand_score

from endoseg import data_model as dm
from endoseg.cli import main


def run_cli(args):
    result = CliRunner().invoke(main, args, catch_exceptions=False)
    return result


def invoke_ok(args):
    result = run_cli(args)
    assert result.exit_code == 0, result.output
    return result


def find_polyp_cluster(run_dir, manifest, truth):
    """Majority cluster among segments whose cells sit on the planted polyp."""
    doc = json.loads(dm.assignments_path(run_dir).read_text())
    votes = {}
    for entry in manifest.images:
        if entry.gt_mask_path is None:
            continue
        seg_map, _, _, _ = dm.read_segment_file(run_dir, entry.id)
        planted = truth.concept_maps[entry.id]
        for a in doc["assignments"]:
            if a["image_id"] != entry.id:
                continue
            cells = seg_map.assignment == a["segment_id"]
            if (planted[cells] == truth.polyp_concept).mean() > 0.5:
                votes[a["cluster_id"]] = votes.get(a["cluster_id"], 0) + 1
    return max(votes, key=votes.get)


class TestPipelineVerbs:
    def test_segment_writes_per_image_files(self, pipeline_run):
        run_dir, root, _ = pipeline_run
        manifest = dm.load_manifest(root / "manifest.json")
        for entry in manifest.images:
            assert dm.segment_path(run_dir, entry.id).is_file()

    def test_masks_match_planted_truth(self, pipeline_run):
        run_dir, root, truth = pipeline_run
        manifest = dm.load_manifest(root / "manifest.json")
        preds, trues = [], []
        for entry in manifest.images:
            mask = dm.read_mask(run_dir, entry.id)
            planted = np.repeat(np.repeat(truth.concept_maps[entry.id],
                                          truth.patch_size, 0),
                                truth.patch_size, 1)
            preds.append(mask.labels.ravel())
            trues.append(planted.ravel())
        ari = adjusted_rand_score(np.concatenate(trues), np.concatenate(preds))
        assert ari >= 0.9

    def test_eval_knn_writes_report(self, pipeline_run):
        run_dir, _, _ = pipeline_run
        invoke_ok(["eval-knn", "--run-dir", str(run_dir), "--task", "mces-3",
                   "--k", "5"])
        report = json.loads(dm.report_path(run_dir, "mces-3-knn").read_text())
        assert set(report["averaged"]) == {"macro_f1", "micro_f1"}
        assert report["config"]["knn_k"] == 5

    def test_eval_probe_writes_report(self, pipeline_run):
        run_dir, _, _ = pipeline_run
        invoke_ok(["eval-probe", "--run-dir", str(run_dir),
                   "--task", "full-23"])
        report = json.loads(dm.report_path(run_dir, "full-23-probe").read_text())
        assert 0.0 <= report["averaged"]["micro_f1"] <= 1.0

    def test_eval_polyp(self, pipeline_run):
        run_dir, _, _ = pipeline_run
        invoke_ok(["eval-polyp", "--run-dir", str(run_dir)])
        report = json.loads(dm.report_path(run_dir, "polyp-probe").read_text())
        assert report["averaged"]["f1_at_iou"] == 1.0

    def test_eval_polyp_unsup_with_planted_cluster(self, pipeline_run):
        run_dir, root, truth = pipeline_run
        manifest = dm.load_manifest(root / "manifest.json")
        cluster = find_polyp_cluster(run_dir, manifest, truth)
        invoke_ok(["eval-polyp-unsup", "--run-dir", str(run_dir),
                   "--cluster", str(cluster)])
        report = json.loads(dm.report_path(run_dir, "polyp-unsup").read_text())
        assert report["averaged"]["f1_at_iou"] == 1.0
        assert report["config"]["chosen_cluster"] == cluster

    def test_eval_csv_export(self, pipeline_run):
        run_dir, _, _ = pipeline_run
        invoke_ok(["eval-knn", "--run-dir", str(run_dir), "--task", "full-23",
                   "--csv"])
        csv_path = run_dir / "reports" / "full-23-knn.csv"
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "task,method,fold,macro_f1,micro_f1"
        assert lines[-1].startswith("full-23-knn,knn,averaged,")
        assert len(lines) == 4  # header + 2 folds + averaged

    def test_export_review(self, pipeline_run):
        run_dir, _, _ = pipeline_run
        invoke_ok(["export-review", "--run-dir", str(run_dir)])
        doc = json.loads((run_dir / "review_export.json").read_text())
        assert len(doc["clusters"]) == 3
        assert all("exemplars" in c for c in doc["clusters"])


class TestResumability:
    def test_rerun_without_force_skips_work(self, pipeline_run):
        run_dir, root, _ = pipeline_run
        manifest = dm.load_manifest(root / "manifest.json")
        before = {e.id: dm.segment_path(run_dir, e.id).stat().st_mtime_ns
                  for e in manifest.images}
        invoke_ok(["segment", "--manifest", str(root / "manifest.json"),
                   "--features", str(root / "features"), "--patch-size", "8",
                   "--k", "3", "--pca-dim", "8", "--max-segments", "6",
                   "--seed", "0", "--run-dir", str(run_dir)])
        after = {e.id: dm.segment_path(run_dir, e.id).stat().st_mtime_ns
                 for e in manifest.images}
        assert before == after


class TestExitCodes:
    def test_config_error_is_exit_2(self, synthetic_dataset, tmp_path):
        root, _ = synthetic_dataset
        result = run_cli(["segment", "--manifest", str(root / "manifest.json"),
                          "--features", str(root / "features"),
                          "--patch-size", "8", "--resize", "65x64",
                          "--run-dir", str(tmp_path / "r")])
        assert result.exit_code == 2

    def test_data_error_is_exit_3(self, tmp_path):
        result = run_cli(["embed", "--run-dir", str(tmp_path / "nothing")])
        assert result.exit_code == 3

    def test_missing_feature_file_names_stage_and_image(self, synthetic_dataset,
                                                        tmp_path):
        root, _ = synthetic_dataset
        result = run_cli(["segment", "--manifest", str(root / "manifest.json"),
                          "--features", str(tmp_path / "empty"),
                          "--patch-size", "8",
                          "--run-dir", str(tmp_path / "r")])
        assert result.exit_code == 3
        assert "stage segment" in result.output
        assert "img-000" in result.output

    def test_numerical_failure_is_exit_4(self, tmp_path):
        import json as json_mod

        import numpy as np

        from endoseg.data_model import PatchFeatureTensor, write_features

        data = np.ones((1, 2, 2, 3), dtype=np.float32)
        data[0, 0, 1] = 0.0  # zero-norm patch vector
        write_features(tmp_path / "features" / "z.pft",
                       PatchFeatureTensor(image_id="z", data=data))
        from PIL import Image
        Image.new("RGB", (16, 16)).save(tmp_path / "z.png")
        (tmp_path / "manifest.json").write_text(json_mod.dumps({
            "dataset_id": "z", "classes": [],
            "images": [{"id": "z", "image_path": "z.png"}]}))
        result = run_cli(["segment", "--manifest",
                          str(tmp_path / "manifest.json"),
                          "--features", str(tmp_path / "features"),
                          "--patch-size", "8",
                          "--run-dir", str(tmp_path / "r")])
        assert result.exit_code == 4
        assert "zero-norm" in result.output


class TestAffinityDump:
    def test_dump_affinity_triplets(self, synthetic_dataset, tmp_path):
        root, _ = synthetic_dataset
        run_dir = tmp_path / "r"
        invoke_ok(["segment", "--manifest", str(root / "manifest.json"),
                   "--features", str(root / "features"), "--patch-size", "8",
                   "--dump-affinity", "--run-dir", str(run_dir)])
        dump = run_dir / "affinity" / "img-000.txt"
        assert dump.is_file()
        first = dump.read_text().splitlines()[0].split()
        assert len(first) == 3
        int(first[0]), int(first[1]), float(first[2])
