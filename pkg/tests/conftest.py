import numpy as np
import pytest
from click.testing import CliRunner

from endoseg.data_model import PatchFeatureTensor
from endoseg.synthetic import generate_dataset


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Small planted dataset shared by pipeline-level tests."""
    root = tmp_path_factory.mktemp("synth")
    truth = generate_dataset(root, n_images=12, grid=(8, 8), patch_size=8,
                             dim=16, n_concepts=3, seed=7)
    return root, truth


@pytest.fixture(scope="session")
def pipeline_run(synthetic_dataset, tmp_path_factory):
    """Run segment/embed/fit/render once for CLI- and service-level tests."""
    from endoseg.cli import main

    root, truth = synthetic_dataset
    run_dir = tmp_path_factory.mktemp("run")
    args = ["segment", "--manifest", str(root / "manifest.json"),
            "--features", str(root / "features"), "--patch-size", "8",
            "--k", "3", "--pca-dim", "8", "--max-segments", "6",
            "--seed", "0", "--run-dir", str(run_dir)]
    runner = CliRunner()
    for verb_args in (args, ["embed", "--run-dir", str(run_dir)],
                      ["fit-concepts", "--run-dir", str(run_dir)],
                      ["render", "--run-dir", str(run_dir)]):
        result = runner.invoke(main, verb_args, catch_exceptions=False)
        assert result.exit_code == 0, result.output
    return run_dir, root, truth


def random_tensor(rng, n_blocks=4, grid_h=4, grid_w=4, dim=8, image_id="t"):
    data = rng.standard_normal((n_blocks, grid_h, grid_w, dim)).astype(np.float32)
    return PatchFeatureTensor(image_id=image_id, data=data)
