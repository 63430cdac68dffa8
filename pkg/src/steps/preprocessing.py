import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from src.data.dataset import Dataset
from src.models.tensor import Tensor
from src.utils.exceptions import UsageError
from src.utils.seeding import derive_seed, sklearn_seed

logger = logging.getLogger(__name__)


def split_loso(dataset: Dataset, held_out_subject: int, seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Leave one subject out: (source, target_train, target_test).

    The held-out subject's samples are shuffled by ``seed`` and split 2/3 for
    unlabeled adaptation, 1/3 for scoring. ``target_train`` hides its labels.
    """
    labeled = dataset.reveal()
    held_out = labeled.subjects == held_out_subject
    if not np.any(held_out):
        raise UsageError(f"unknown subject {held_out_subject}; dataset has {sorted(set(labeled.subjects.tolist()))}")

    source_pos = np.flatnonzero(~held_out)
    target_pos = np.flatnonzero(held_out)
    n_train = (2 * len(target_pos)) // 3
    train_pos, test_pos = train_test_split(
        target_pos,
        train_size=n_train,
        random_state=sklearn_seed(derive_seed(seed, "split_loso", held_out_subject)),
        shuffle=True,
    )

    provenance = {"held_out_subject": int(held_out_subject), "split_seed": int(seed)}
    source = labeled.subset(source_pos, domain="source", labels_hidden=False, provenance=provenance)
    target_train = labeled.subset(np.sort(train_pos), domain="target", labels_hidden=True, provenance=provenance)
    target_test = labeled.subset(np.sort(test_pos), domain="target", labels_hidden=False, provenance=provenance)

    logger.info(
        f"LOSO split for subject {held_out_subject}: source={len(source)}, "
        f"target_train={len(target_train)}, target_test={len(target_test)}"
    )
    return source, target_train, target_test


@dataclass
class Batch:
    """Images drawn for one step; labels are None for unlabeled data."""

    images: np.ndarray
    positions: np.ndarray
    expressions: Optional[np.ndarray] = None
    poses: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def x(self) -> Tensor:
        return Tensor(self.images)

    @property
    def labeled(self) -> bool:
        return self.expressions is not None and self.poses is not None


def sample_batch(dataset: Dataset, m: int, rng: np.random.Generator) -> Batch:
    """Uniform draw of ``m`` samples with replacement."""
    if len(dataset) == 0:
        raise UsageError("cannot sample a batch from an empty dataset")
    if m < 1:
        raise UsageError(f"batch size must be at least 1, got {m}")
    positions = rng.integers(0, len(dataset), size=m)
    return batch_at(dataset, positions)


def batch_at(dataset: Dataset, positions: np.ndarray) -> Batch:
    positions = np.asarray(positions, dtype=np.int64)
    batch = Batch(images=dataset.images_flat[positions], positions=positions)
    if not dataset.labels_hidden:
        batch.expressions = dataset.expressions[positions]
        batch.poses = dataset.poses[positions]
    return batch
