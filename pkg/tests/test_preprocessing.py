import numpy as np
import pytest

from src.data.dataset import Dataset
from src.steps.preprocessing import batch_at, sample_batch, split_loso
from src.utils.config import FactorSpec
from src.utils.exceptions import LabelError, UsageError


def default_sized_dataset():
    """Blank images with the default spec's label layout."""
    spec = FactorSpec()
    per_subject = spec.n_samples // spec.n_subjects
    subjects = np.repeat(np.arange(spec.n_subjects), per_subject)
    cells = np.arange(per_subject)
    return Dataset(
        images=np.zeros((spec.n_samples, spec.image_side, spec.image_side)),
        expressions=np.tile(cells % spec.n_expressions, spec.n_subjects),
        poses=np.tile((cells // spec.n_expressions) % spec.n_poses, spec.n_subjects),
        subjects=subjects,
        domains=np.full(spec.n_samples, "source"),
        sample_ids=np.arange(spec.n_samples),
        spec=spec,
    )


def test_default_split_sizes():
    source, target_train, target_test = split_loso(default_sized_dataset(), 0, seed=0)
    assert (len(source), len(target_train), len(target_test)) == (1620, 120, 60)


@pytest.mark.parametrize("subject", [0, 1, 2])
def test_partition(tiny_dataset, subject):
    source, target_train, target_test = split_loso(tiny_dataset, subject, seed=3)
    ids = [set(part.sample_ids.tolist()) for part in (source, target_train, target_test)]
    assert ids[0].isdisjoint(ids[1]) and ids[0].isdisjoint(ids[2]) and ids[1].isdisjoint(ids[2])
    assert set().union(*ids) == set(tiny_dataset.sample_ids.tolist())
    assert (len(target_train), len(target_test)) == (12, 6)
    assert np.all(source.subjects != subject)
    assert np.all(target_train.subjects == subject)


def test_domains_and_label_visibility(tiny_split):
    source, target_train, target_test = tiny_split
    assert set(source.domains) == {"source"}
    assert set(target_train.domains) == set(target_test.domains) == {"target"}
    with pytest.raises(LabelError):
        target_train.expressions
    assert len(target_test.expressions) == len(target_test)
    assert target_train.provenance == {"held_out_subject": 0, "split_seed": 0}


def test_split_is_seeded(tiny_dataset):
    first = split_loso(tiny_dataset, 1, seed=5)
    second = split_loso(tiny_dataset, 1, seed=5)
    for a, b in zip(first, second):
        assert a == b


def test_unknown_subject(tiny_dataset):
    with pytest.raises(UsageError, match="unknown subject"):
        split_loso(tiny_dataset, 9, seed=0)


def test_sample_batch(tiny_split):
    source, target_train, _ = tiny_split
    labeled = sample_batch(source, 7, np.random.default_rng(0))
    assert len(labeled) == 7 and labeled.labeled
    assert labeled.images.shape == (7, 256)
    np.testing.assert_array_equal(labeled.poses, source.poses[labeled.positions])

    unlabeled = sample_batch(target_train, 7, np.random.default_rng(0))
    assert not unlabeled.labeled
    assert unlabeled.expressions is None

    again = sample_batch(source, 7, np.random.default_rng(0))
    np.testing.assert_array_equal(again.positions, labeled.positions)


def test_sample_batch_errors(tiny_split):
    source, _, _ = tiny_split
    with pytest.raises(UsageError):
        sample_batch(source, 0, np.random.default_rng(0))
    with pytest.raises(UsageError):
        sample_batch(source.subset([]), 3, np.random.default_rng(0))


def test_batch_at_reads_flat_rows(tiny_split):
    source, _, _ = tiny_split
    batch = batch_at(source, [2, 0])
    np.testing.assert_array_equal(batch.images, source.images_flat[[2, 0]])
    assert batch.x.shape == (2, 256)
