from pathlib import Path

import numpy as np
import pytest

from src.data.factor_faces import generate_dataset
from src.models.components import init_bundle
from src.steps.preprocessing import Batch, split_loso
from src.utils.config import ArchitectureConfig, FactorSpec, TrainConfig, load_train_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

TINY_SPEC = FactorSpec(
    n_subjects=3, n_expressions=3, n_poses=3, image_side=16, samples_per_cell=2, noise_sigma=0.02, seed=0
)
TINY_ARCH = ArchitectureConfig(
    image_side=4, n_poses=3, n_expressions=4, trunk_hidden=6, d_p=3, d_e=4, head_hidden=5, gen_hidden=6
)


@pytest.fixture(scope="session")
def tiny_spec():
    return TINY_SPEC


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate_dataset(tiny_spec)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return split_loso(tiny_dataset, held_out_subject=0, seed=0)


@pytest.fixture
def tiny_config():
    return TrainConfig(
        epochs=2,
        batch_size=4,
        trunk_hidden=8,
        d_p=3,
        d_e=4,
        head_hidden=6,
        gen_hidden=8,
        probe_steps=20,
        seed=0,
    )


@pytest.fixture
def tiny_bundle():
    return init_bundle(7, TINY_ARCH)


def make_batches(arch: ArchitectureConfig, m: int = 5, seed: int = 3):
    """Labeled source batch and unlabeled target batch of random pixels."""
    rng = np.random.default_rng(seed)
    source = Batch(
        images=rng.uniform(0.0, 1.0, size=(m, arch.n_pixels)),
        positions=np.arange(m),
        expressions=rng.integers(0, arch.n_expressions, size=m),
        poses=rng.integers(0, arch.n_poses, size=m),
    )
    target = Batch(images=rng.uniform(0.0, 1.0, size=(m, arch.n_pixels)), positions=np.arange(m))
    return source, target


@pytest.fixture
def tiny_batches():
    return make_batches(TINY_ARCH)


@pytest.fixture(scope="session")
def face_dataset():
    """The default synthetic benchmark."""
    return generate_dataset(FactorSpec())


@pytest.fixture(scope="session")
def face_split(face_dataset):
    return split_loso(face_dataset, held_out_subject=0, seed=0)


@pytest.fixture(scope="session")
def benchmark_config():
    return load_train_config(CONFIG_DIR / "benchmark.cfg")
