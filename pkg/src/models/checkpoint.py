"""Binary checkpoint format for a ModelBundle.

Layout: 8-byte magic ``UPADA001``, 8-byte little-endian header length, a JSON
header (architecture, components, tensor names/shapes/offsets, metadata), then
the raw little-endian float64 blobs in header order.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from src.models.components import ModelBundle, init_bundle
from src.utils.config import ArchitectureConfig
from src.utils.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"UPADA001"


def _encode(bundle: ModelBundle, metadata: Optional[Dict[str, Any]]) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for name, param in bundle.params.items():
        blob = np.ascontiguousarray(param.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(param.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "architecture": bundle.arch.model_dump(),
        "components": bundle.params.components,
        "tensors": tensors,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)


def save_checkpoint(
    bundle: ModelBundle, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(bundle, metadata))
    logger.info(f"✅ Checkpoint saved to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelBundle, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()

    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated before header length")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header_end = 16 + header_len
    if header_end > len(raw):
        raise FormatError(f"{path}: header length {header_len} runs past end of file")
    try:
        header = json.loads(raw[16:header_end].decode("utf-8"))
        arch = ArchitectureConfig.model_validate(header["architecture"])
        entries = header["tensors"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e

    # structure only; every value is overwritten below
    bundle = init_bundle(0, arch)
    blob = memoryview(raw)[header_end:]
    names = [entry.get("name") for entry in entries]
    if names != list(bundle.params):
        raise FormatError(f"{path}: tensor list does not match architecture (field 'tensors')")

    for entry in entries:
        name, shape, offset, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        param = bundle.params[name]
        if shape != param.shape or nbytes != 8 * int(np.prod(shape)):
            raise FormatError(f"{path}: tensor {name} has shape {shape}, expected {param.shape}")
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: tensor {name} at offset {offset} runs past end of file")
        param.data = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
    return bundle, header.get("metadata", {})
