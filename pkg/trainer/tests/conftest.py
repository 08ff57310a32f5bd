import json
import subprocess
import sys
from pathlib import Path

import pytest

from nas_trainer.data import make_synthetic_dataset
from nas_trainer.train import TrainConfig, load_dataset

ENGINE_SPACE = Path(__file__).resolve().parents[2] / "configs" / "cifar10_space.json"
TOY_SPACE = Path(__file__).resolve().parents[2] / "configs" / "toy_space.json"


def run_engine(*argv: str) -> subprocess.CompletedProcess:
    """Invoke the search engine through its CLI (the only allowed surface)."""
    return subprocess.run(
        [sys.executable, "-m", "hybridnas.cli", *map(str, argv)],
        capture_output=True,
        text=True,
        check=True,
    )


def sample_graph(space: Path, seed: int, out_dir: Path) -> tuple[dict, dict]:
    """Sample one valid architecture; returns (graph JSON, engine summary)."""
    path = out_dir / f"arch_{seed}.json"
    result = run_engine("sample", "--space", space, "--seed", seed, "--out", path)
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh), json.loads(result.stdout)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar_synth")
    make_synthetic_dataset(root, n_train=2000, n_test=400, seed=0)
    return root


@pytest.fixture(scope="session")
def small_config(synthetic_root):
    return TrainConfig(
        epochs=1,
        dataset_root=str(synthetic_root),
        auto_download=False,
        limit=1000,
        seed=0,
        augment=False,
    )


@pytest.fixture(scope="session")
def small_data(small_config):
    return load_dataset(small_config, with_test=True)


@pytest.fixture(scope="session")
def toy_graph(tmp_path_factory):
    out = tmp_path_factory.mktemp("graphs")
    graph_doc, summary = sample_graph(TOY_SPACE, seed=5, out_dir=out)
    return graph_doc, summary
