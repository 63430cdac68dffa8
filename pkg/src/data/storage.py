"""Dataset persistence: ``manifest.json`` plus an ``images.bin`` blob.

The blob starts with the 8-byte magic ``FFACES01`` followed by every image as
H·W little-endian float32 values, row-major, in manifest order. Each manifest
record carries the byte offset of its image.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.data.dataset import Dataset
from src.utils.config import FactorSpec
from src.utils.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"FFACES01"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "images.bin"
RECORD_FIELDS = ("sample_id", "subject", "expression", "pose", "domain", "offset")


def _image_bytes(spec: FactorSpec) -> int:
    return spec.n_pixels * 4


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    labeled = dataset.reveal()
    stride = _image_bytes(dataset.spec)

    records = [
        {
            "sample_id": int(labeled.sample_ids[i]),
            "subject": int(labeled.subjects[i]),
            "expression": int(labeled.expressions[i]),
            "pose": int(labeled.poses[i]),
            "domain": str(labeled.domains[i]),
            "offset": len(MAGIC) + i * stride,
        }
        for i in range(len(labeled))
    ]
    manifest = {**dataset.manifest, "records": records}

    blob = MAGIC + np.ascontiguousarray(labeled.images, dtype="<f4").tobytes()
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"✅ Dataset with {len(dataset)} samples saved to {path}")
    return path


def _read_manifest(path: Path) -> Dict[str, Any]:
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
    try:
        return json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise FormatError(f"{manifest_path}: not valid JSON ({e})") from e


def load_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    manifest = _read_manifest(path)
    blob_path = path / BLOB_NAME
    if not blob_path.exists():
        raise FileNotFoundError(f"Dataset blob not found: {blob_path}")

    try:
        spec = FactorSpec.model_validate(manifest["spec"])
        records = manifest["records"]
        counts = manifest["counts"]
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path / MANIFEST_NAME}: bad manifest field ({e})") from e

    if counts.get("total") != len(records):
        raise FormatError(
            f"{path / MANIFEST_NAME}: field 'counts.total' is {counts.get('total')} but {len(records)} records are listed"
        )

    raw = blob_path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{blob_path}: bad magic {raw[: len(MAGIC)]!r} at offset 0, expected {MAGIC!r}")

    stride = _image_bytes(spec)
    side = spec.image_side
    n = len(records)
    images = np.empty((n, side, side), dtype=np.float32)
    columns: Dict[str, list] = {name: [] for name in RECORD_FIELDS}
    for i, record in enumerate(records):
        missing = [name for name in RECORD_FIELDS if name not in record]
        if missing:
            raise FormatError(f"{path / MANIFEST_NAME}: record {i} lacks field(s) {missing}")
        offset = record["offset"]
        if offset + stride > len(raw):
            raise FormatError(f"{blob_path}: image {i} at offset {offset} runs past end of blob ({len(raw)} bytes)")
        images[i] = np.frombuffer(raw, dtype="<f4", count=spec.n_pixels, offset=offset).reshape(side, side)
        for name in RECORD_FIELDS:
            columns[name].append(record[name])

    if len(MAGIC) + n * stride != len(raw):
        raise FormatError(f"{blob_path}: expected {len(MAGIC) + n * stride} bytes for {n} images, found {len(raw)}")

    return Dataset(
        images=images,
        expressions=np.array(columns["expression"], dtype=np.int64),
        poses=np.array(columns["pose"], dtype=np.int64),
        subjects=np.array(columns["subject"], dtype=np.int64),
        domains=np.array(columns["domain"]),
        sample_ids=np.array(columns["sample_id"], dtype=np.int64),
        spec=spec,
        labels_hidden=bool(manifest.get("labels_hidden", False)),
        provenance=manifest.get("provenance", {}),
    )


def dataset_hash(path: Union[str, Path]) -> str:
    """sha256 over manifest and blob bytes, as recorded in run manifests."""
    path = Path(path)
    digest = hashlib.sha256()
    for name in (MANIFEST_NAME, BLOB_NAME):
        digest.update((path / name).read_bytes())
    return digest.hexdigest()
