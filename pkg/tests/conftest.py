import os

import pytest
import yaml

from latent_cascade.cascade import StageSpec
from latent_cascade.main import LatentCascadeApp
from latent_cascade.manifold import SphereDatasetSpec

SMALL_CORPUS = [
    "CCO",
    "CCN",
    "CCC",
    "CCCC",
    "CO",
    "CN",
    "C1CC1",
    "C1CCC1",
    "c1ccccc1",
    "CC(=O)O",
    "CC(C)C",
    "C=CC",
    "CC#N",
    "OCCO",
    "NCCN",
    "c1ccccc1O",
]


def gaussian_stage(latent_dim=3, epochs=2, hidden=(8,), batch_size=32, **extra):
    return StageSpec(latent_dim=latent_dim, hidden=list(hidden), epochs=epochs,
                     batch_size=batch_size, **extra)


def categorical_stage(latent_dim=4, epochs=2, **extra):
    values = dict(latent_dim=latent_dim, head="categorical", epochs=epochs, beta=0.1, lr=3e-3,
                  batch_size=8, embed_dim=8, hidden_size=12, max_len=16)
    values.update(extra)
    return StageSpec(**values)


@pytest.fixture
def small_corpus():
    return list(SMALL_CORPUS)


@pytest.fixture
def small_sphere():
    return SphereDatasetSpec(sphere_dim=2, ambient_dim=5, n_points=64, seed=0)


@pytest.fixture
def app():
    return LatentCascadeApp()


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.smi"
    path.write_text("# test corpus\n" + "\n".join(SMALL_CORPUS) + "\n", encoding="utf-8")
    return str(path)


def write_config(path, data) -> str:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f)
    return str(path)


@pytest.fixture
def sphere_config(tmp_path):
    data = {
        "experiment": "sphere",
        "seeds": [0],
        "output_dir": os.path.join(str(tmp_path), "sphere_run"),
        "sphere": {"sphere_dim": 2, "ambient_dim": 5, "n_points": 48},
        "stages": [
            {"latent_dim": 3, "hidden": [8], "epochs": 2, "batch_size": 16},
            {"latent_dim": 3, "hidden": [8], "epochs": 2, "batch_size": 16},
        ],
        "sampling": {"n": 20},
        "metrics": {"bins": 5, "eps": 0.1},
    }
    return write_config(tmp_path / "sphere.yaml", data)


@pytest.fixture
def smiles_config(tmp_path, corpus_file):
    data = {
        "experiment": "smiles",
        "seeds": [0],
        "output_dir": os.path.join(str(tmp_path), "smiles_run"),
        "corpus": {"train": corpus_file, "reference": corpus_file},
        "stages": [
            {"latent_dim": 4, "head": "categorical", "epochs": 1, "beta": 0.1, "batch_size": 8,
             "embed_dim": 8, "hidden_size": 12, "max_len": 16},
            {"latent_dim": 4, "hidden": [8], "epochs": 1, "batch_size": 8},
        ],
        "sampling": {"n": 6, "max_len": 12},
        "metrics": {"k": 4},
    }
    return write_config(tmp_path / "smiles.yaml", data)
