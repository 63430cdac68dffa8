import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, Iterator, Optional, Sequence

import numpy as np

from src.utils.config import FactorSpec
from src.utils.exceptions import LabelError, UsageError

logger = logging.getLogger(__name__)

DOMAINS = ("source", "target")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    expression: Optional[int]
    pose: Optional[int]
    subject: int
    domain: str
    sample_id: int


class LabelIndex:
    """(pose, expression) -> positions, with uniform draws from a bucket.

    Built from true labels for labeled data, or from pseudo-labels for the
    unlabeled target pool. ``images`` are the flattened rows the positions
    refer to.
    """

    def __init__(self, images: np.ndarray, poses: np.ndarray, expressions: np.ndarray):
        self.images = images
        self.poses = np.asarray(poses, dtype=np.int64)
        self.expressions = np.asarray(expressions, dtype=np.int64)
        self._buckets: Dict[tuple, np.ndarray] = {}
        self._by_expression: Dict[int, np.ndarray] = {}

        order = np.lexsort((self.expressions, self.poses))
        for pos in order:
            self._buckets.setdefault((int(self.poses[pos]), int(self.expressions[pos])), []).append(int(pos))
        self._buckets = {k: np.array(sorted(v), dtype=np.int64) for k, v in self._buckets.items()}
        for expression in np.unique(self.expressions):
            self._by_expression[int(expression)] = np.flatnonzero(self.expressions == expression)

    def __len__(self) -> int:
        return len(self.poses)

    def bucket(self, pose: int, expression: int) -> np.ndarray:
        return self._buckets.get((int(pose), int(expression)), np.empty(0, dtype=np.int64))

    def bucket_sizes(self) -> Dict[tuple, int]:
        return {k: len(v) for k, v in self._buckets.items()}

    def draw(self, pose: int, expression: int, rng: np.random.Generator) -> Optional[int]:
        """A uniformly random position from the bucket, or None when it is empty."""
        bucket = self.bucket(pose, expression)
        if len(bucket) == 0:
            return None
        return int(bucket[rng.integers(len(bucket))])

    def draw_expression(self, expression: int, rng: np.random.Generator) -> Optional[int]:
        bucket = self._by_expression.get(int(expression))
        if bucket is None or len(bucket) == 0:
            return None
        return int(bucket[rng.integers(len(bucket))])


class Dataset:
    """Immutable collection of samples plus the manifest needed to rebuild it.

    When ``labels_hidden`` is set (the target training split) expression and
    pose labels are not reachable through this interface; ``reveal()`` gives
    the labeled view used only for scoring and probes.
    """

    def __init__(
        self,
        images: np.ndarray,
        expressions: np.ndarray,
        poses: np.ndarray,
        subjects: np.ndarray,
        domains: np.ndarray,
        sample_ids: np.ndarray,
        spec: FactorSpec,
        labels_hidden: bool = False,
        provenance: Optional[Dict[str, Any]] = None,
    ):
        n = len(images)
        for label, arr in (
            ("expressions", expressions),
            ("poses", poses),
            ("subjects", subjects),
            ("domains", domains),
            ("sample_ids", sample_ids),
        ):
            if len(arr) != n:
                raise UsageError(f"{label} has {len(arr)} entries for {n} images")

        self.spec = spec
        self.labels_hidden = labels_hidden
        self.provenance = dict(provenance or {})
        self._images = self._frozen(np.asarray(images, dtype=np.float32))
        self._expressions = self._frozen(np.asarray(expressions, dtype=np.int64))
        self._poses = self._frozen(np.asarray(poses, dtype=np.int64))
        self.subjects = self._frozen(np.asarray(subjects, dtype=np.int64))
        self.domains = self._frozen(np.asarray(domains, dtype="<U6"))
        self.sample_ids = self._frozen(np.asarray(sample_ids, dtype=np.int64))

    @staticmethod
    def _frozen(arr: np.ndarray) -> np.ndarray:
        arr = np.array(arr)
        arr.setflags(write=False)
        return arr

    def __len__(self) -> int:
        return len(self._images)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.labels_hidden == other.labels_hidden
            and np.array_equal(self._images, other._images)
            and np.array_equal(self._expressions, other._expressions)
            and np.array_equal(self._poses, other._poses)
            and np.array_equal(self.subjects, other.subjects)
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.sample_ids, other.sample_ids)
        )

    def _labels(self, name: str, values: np.ndarray) -> np.ndarray:
        if self.labels_hidden:
            raise LabelError(f"{name} labels are hidden for this dataset (unlabeled target training split)")
        return values

    @property
    def images(self) -> np.ndarray:
        return self._images

    @cached_property
    def images_flat(self) -> np.ndarray:
        flat = self._images.reshape(len(self), -1).astype(np.float64)
        flat.setflags(write=False)
        return flat

    @property
    def expressions(self) -> np.ndarray:
        return self._labels("expression", self._expressions)

    @property
    def poses(self) -> np.ndarray:
        return self._labels("pose", self._poses)

    @cached_property
    def index(self) -> LabelIndex:
        return LabelIndex(self.images_flat, self.poses, self.expressions)

    def sample(self, i: int) -> Sample:
        hidden = self.labels_hidden
        return Sample(
            image=self._images[i],
            expression=None if hidden else int(self._expressions[i]),
            pose=None if hidden else int(self._poses[i]),
            subject=int(self.subjects[i]),
            domain=str(self.domains[i]),
            sample_id=int(self.sample_ids[i]),
        )

    def subset(
        self,
        positions: Sequence[int],
        domain: Optional[str] = None,
        labels_hidden: Optional[bool] = None,
        provenance: Optional[Dict[str, Any]] = None,
    ) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        if domain is not None and domain not in DOMAINS:
            raise UsageError(f"domain must be one of {DOMAINS}, got {domain!r}")
        domains = self.domains[positions] if domain is None else np.full(len(positions), domain)
        return Dataset(
            images=self._images[positions],
            expressions=self._expressions[positions],
            poses=self._poses[positions],
            subjects=self.subjects[positions],
            domains=domains,
            sample_ids=self.sample_ids[positions],
            spec=self.spec,
            labels_hidden=self.labels_hidden if labels_hidden is None else labels_hidden,
            provenance={**self.provenance, **(provenance or {})},
        )

    def reveal(self) -> "Dataset":
        """Labeled view of this dataset, for evaluation and oracles only."""
        if not self.labels_hidden:
            return self
        return self.subset(np.arange(len(self)), labels_hidden=False)

    def counts(self) -> Dict[str, int]:
        return {
            "total": len(self),
            "source": int(np.sum(self.domains == "source")),
            "target": int(np.sum(self.domains == "target")),
        }

    @property
    def manifest(self) -> Dict[str, Any]:
        return {
            "spec": self.spec.model_dump(),
            "seed": self.spec.seed,
            "counts": self.counts(),
            "labels_hidden": self.labels_hidden,
            "provenance": self.provenance,
        }


def lookup_by_labels(dataset: Dataset, pose: int, expression: int, rng: np.random.Generator) -> Optional[Sample]:
    """Uniformly random sample with the given labels, or None for an empty bucket."""
    spec = dataset.spec
    if not 0 <= pose < spec.n_poses or not 0 <= expression < spec.n_expressions:
        raise UsageError(f"label ids out of range: pose={pose}, expression={expression}")
    position = dataset.index.draw(pose, expression, rng)
    return None if position is None else dataset.sample(position)
