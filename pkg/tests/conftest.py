import numpy as np
import pytest

from s2corr import numerics


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_tiny_bundle(path, seed=3, height=4, width=4, d=8, num_classes=3, domains=2, drop=None):
    r = np.random.default_rng(seed)
    tensors = {
        "visual_features": r.normal(size=(height * width, d)),
        "text_embeddings": r.normal(size=(num_classes, d)),
        "domain_text_embeddings": r.normal(size=(domains, d)),
    }
    data = {"class_names": [f"c{j}" for j in range(num_classes)], "grid": [height, width]}
    if drop in tensors:
        del tensors[drop]
    if drop in data:
        del data[drop]
    numerics.save_bundle(path, tensors, data)
    return path


@pytest.fixture
def tiny_bundle(tmp_path):
    return write_tiny_bundle(tmp_path / "bundle")


PINNED_TRAIN_ARGS = ["--grid", "16", "--num-classes", "8", "--feat-dim", "16", "--d-f", "16",
                     "--seed", "42", "--steps", "500", "--lr", "2e-4"]


@pytest.fixture(scope="session")
def pinned_training(tmp_path_factory):
    """The pinned synthetic denoising run, executed once through the CLI."""
    import json

    from s2corr.cli import main

    out = tmp_path_factory.mktemp("train")
    code = main(["train-synth", "--out", str(out), *PINNED_TRAIN_ARGS])
    return code, json.loads((out / "train_report.json").read_text()), out
