"""Versioned model container: header, sha256 checksum and pickled forest."""

import hashlib
import logging
import os
import pickle
import struct
import tempfile
from pathlib import Path
from typing import Union

from errors import CorruptModelError, ModelFileError, ModelVersionError
from tree import Forest

logger = logging.getLogger(__name__)

MAGIC = b"DAREFRST"
FORMAT_VERSION = 1
PICKLE_PROTOCOL = 5
HEADER = struct.Struct("<8sIQ32s")  # magic, version, payload length, sha256


def sha256_bytes(b: bytes) -> bytes:
    h = hashlib.sha256()
    h.update(b)
    return h.digest()


def encode_model(forest: Forest) -> bytes:
    snapshot = Forest(forest.params, forest.trees, forest.database.compact())
    payload = pickle.dumps(snapshot, protocol=PICKLE_PROTOCOL)
    return HEADER.pack(MAGIC, FORMAT_VERSION, len(payload), sha256_bytes(payload)) + payload


def decode_model(blob: bytes) -> Forest:
    if len(blob) < HEADER.size:
        raise CorruptModelError("model file is truncated")
    magic, version, length, digest = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptModelError("not a model file (bad magic)")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    payload = blob[HEADER.size:]
    if len(payload) != length:
        raise CorruptModelError(f"payload is {len(payload)} bytes, header says {length}")
    if sha256_bytes(payload) != digest:
        raise CorruptModelError("checksum mismatch")
    try:
        forest = pickle.loads(payload)
    except Exception as exc:
        raise CorruptModelError(f"cannot decode model payload: {exc}") from exc
    if not isinstance(forest, Forest):
        raise CorruptModelError(f"payload holds {type(forest).__name__}, not a forest")
    return forest


def save_model(forest: Forest, path: Union[str, Path]) -> None:
    """Write atomically: a failed save leaves any previous file intact."""
    path = Path(path)
    blob = encode_model(forest)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.info("Saved model to %s (%d bytes)", path, len(blob))


def load_model(path: Union[str, Path]) -> Forest:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model {path}: {exc.strerror or exc}") from exc
    return decode_model(blob)
