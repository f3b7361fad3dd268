"""
Binary tensor container.

Layout (all integers little-endian)::

    b"AXCK" | u32 version | u64 header length | JSON header | payload | u64 checksum(payload)

The JSON header maps tensor names to ``{"dtype", "shape", "offset", "length"}``
(offsets relative to the payload start), names the payload checksum under
``checksum`` and carries a free-form ``metadata`` object. ``sha256-64`` is the
first eight bytes of SHA-256 read as a little-endian u64; headers without a
``checksum`` key carry FNV-1a. Tensors are stored as contiguous little-endian
arrays.
"""
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, ClassVar, Dict, Optional, Union

import numpy as np

from ..core.errors import CorruptionError, FormatError, VersionError
from ..core.models import ModelSpec, Precision
from ..model.resnet import Model, build_axial_resnet

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: Union[bytes, memoryview]) -> int:
    h = FNV_OFFSET
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def sha256_64(data: Union[bytes, memoryview]) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


CHECKSUMS: Dict[str, Callable[[Union[bytes, memoryview]], int]] = {
    "sha256-64": sha256_64,
    "fnv1a-64": fnv1a64,
}
DEFAULT_CHECKSUM = "sha256-64"
LEGACY_CHECKSUM = "fnv1a-64"


def atomic_write(path: PathLike, data: Union[bytes, str]) -> Path:
    """Write ``data`` to a temporary sibling file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


@dataclass
class Checkpoint:
    """Named arrays plus JSON metadata."""
    MAGIC: ClassVar[bytes] = b"AXCK"
    VERSION: ClassVar[int] = 1
    prefix: ClassVar[struct.Struct] = struct.Struct("<4sIQ")
    trailer: ClassVar[struct.Struct] = struct.Struct("<Q")

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    checksum: str = DEFAULT_CHECKSUM

    def encode(self) -> bytes:
        if self.checksum not in CHECKSUMS:
            raise FormatError(f"unknown checksum {self.checksum!r}; choose from {sorted(CHECKSUMS)}")
        entries: Dict[str, Dict[str, Any]] = {}
        chunks = []
        offset = 0
        for name, array in self.tensors.items():
            array = np.asarray(array)
            little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
            raw = little.tobytes()
            entries[name] = {"dtype": little.dtype.str, "shape": list(array.shape), "offset": offset, "length": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        header = json.dumps({"tensors": entries, "metadata": self.metadata, "payload_length": len(payload),
                             "checksum": self.checksum}, sort_keys=True).encode("utf-8")
        return (self.prefix.pack(self.MAGIC, self.VERSION, len(header)) + header + payload
                + self.trailer.pack(CHECKSUMS[self.checksum](payload)))

    @classmethod
    def decode(cls, blob: bytes) -> "Checkpoint":
        """Validate magic, version, layout and checksum, then materialize the arrays."""
        magic = blob[:4]
        if magic != cls.MAGIC[:len(magic)] or not magic:
            raise FormatError(f"not an axial-lab checkpoint (magic {magic!r})")
        if len(blob) < cls.prefix.size + cls.trailer.size:
            raise CorruptionError(f"checkpoint truncated to {len(blob)} bytes")
        _, version, header_len = cls.prefix.unpack_from(blob)
        if version > cls.VERSION:
            raise VersionError(f"checkpoint version {version} is newer than supported version {cls.VERSION}")
        if version < 1:
            raise FormatError(f"invalid checkpoint version {version}")
        start = cls.prefix.size
        payload_start = start + header_len
        payload_end = len(blob) - cls.trailer.size
        if payload_start > payload_end:
            raise CorruptionError(f"header of {header_len} bytes runs past the end of a {len(blob)}-byte file")
        try:
            header = json.loads(blob[start:payload_start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptionError(f"unreadable checkpoint header: {e}")
        payload = memoryview(blob)[payload_start:payload_end]
        if header.get("payload_length") != len(payload):
            raise CorruptionError(f"payload holds {len(payload)} bytes, header declares {header.get('payload_length')}")
        checksum = header.get("checksum", LEGACY_CHECKSUM)
        if checksum not in CHECKSUMS:
            raise FormatError(f"unknown payload checksum {checksum!r}")
        (stored,) = cls.trailer.unpack_from(blob, payload_end)
        if CHECKSUMS[checksum](payload) != stored:
            raise CorruptionError(f"payload {checksum} checksum mismatch")

        tensors: Dict[str, np.ndarray] = {}
        spans = []
        for name, entry in header.get("tensors", {}).items():
            offset, length = entry["offset"], entry["length"]
            dtype = np.dtype(entry["dtype"])
            if offset < 0 or offset + length > len(payload):
                raise CorruptionError(f"tensor {name} lies outside the payload")
            if int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize != length:
                raise CorruptionError(f"tensor {name}: {length} bytes do not fit shape {entry['shape']} of {dtype}")
            spans.append((offset, offset + length, name))
            array = np.frombuffer(payload[offset:offset + length], dtype=dtype).reshape(entry["shape"])
            tensors[name] = array.astype(dtype.newbyteorder("="))
        spans.sort()
        for (_, end, first), (begin, _, second) in zip(spans, spans[1:]):
            if begin < end:
                raise CorruptionError(f"tensors {first} and {second} overlap")
        return cls(tensors, header.get("metadata", {}), checksum)


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, Any]] = None,
                    checksum: str = DEFAULT_CHECKSUM) -> Path:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    blob = Checkpoint(dict(tensors), dict(metadata or {}), checksum).encode()
    path = atomic_write(path, blob)
    logger.info(f"checkpoint written: {path} ({len(tensors)} tensors, {len(blob):,} bytes)")
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    checkpoint = Checkpoint.decode(blob)
    logger.debug(f"checkpoint read: {path} ({len(checkpoint.tensors)} tensors)")
    return checkpoint


def save_model(model: Model, path: PathLike, config_hash: Optional[str] = None,
               metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Parameters and running statistics, with the spec needed to rebuild the model."""
    header = dict(metadata or {})
    header.update({
        "kind": "model",
        "spec": model.spec.to_dict(),
        "precision": model.precision.value,
        "resolution": model.plan.resolution,
        "config_hash": config_hash,
    })
    return save_checkpoint(path, model.state_dict(), header)


def load_model(path: PathLike) -> Model:
    checkpoint = load_checkpoint(path)
    meta = checkpoint.metadata
    if meta.get("kind") != "model":
        raise FormatError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a model")
    spec = ModelSpec.from_dict(meta["spec"])
    model = build_axial_resnet(spec, precision=Precision(meta["precision"]), resolution=meta["resolution"])
    model.load_state(checkpoint.tensors)
    return model


def save_dataset(dataset, path: PathLike) -> Path:
    metadata = dict(dataset.metadata)
    metadata["kind"] = "dataset"
    tensors = {"images": dataset.images, "labels": dataset.labels, "markers": dataset.markers}
    return save_checkpoint(path, tensors, metadata)


def load_dataset(path: PathLike):
    from ..train.task import Dataset

    checkpoint = load_checkpoint(path)
    metadata = dict(checkpoint.metadata)
    if metadata.pop("kind", None) != "dataset":
        raise FormatError(f"{path} does not hold a dataset")
    t = checkpoint.tensors
    return Dataset(t["images"], t["labels"], t["markers"], metadata)
