# agrg/core/checkpoint.py

"""
Checkpoint bundles (`*.agrg`), little-endian:

    b"AGRG" | u16 version | 64 ASCII hex chars of the config hash
    u32 metadata length | metadata JSON (sorted keys)
    u32 tensor count    | per tensor: u16 name length | name | u8 ndim | u32 extents... | u8 width | data
    u32 vector count    | per threshold vector: u16 name length | name | u32 K | float64 values | u8 flag codes
    u32 vocab length    | UTF-8 vocabulary, one token per line

Weights are stored as float32 (width 4) and are kept float32-representable in memory,
so a save/load cycle reproduces the model exactly. Optimizer moments are stored as
float64 (width 8), so a resumed run continues from the exact optimizer state.
"""

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
import orjson

from agrg.core.heads import FLAG_NO_NEGATIVES, FLAG_NO_POSITIVES, FLAG_OK, ThresholdVector
from agrg.core.nn import Module
from agrg.core.optim import Adam, OptimizerState
from agrg.core.textgen import Vocabulary
from agrg.errors import ConfigError, DatasetFormatError, MissingPrerequisiteError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AGRG"
CHECKPOINT_VERSION = 2
OPTIMIZER_PREFIX = "optim."
FLAG_CODES = {FLAG_OK: 0, FLAG_NO_POSITIVES: 1, FLAG_NO_NEGATIVES: 2}
FLAG_NAMES = {code: name for name, code in FLAG_CODES.items()}
TENSOR_DTYPES = {4: "<f4", 8: "<f8"}

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    config_hash: str
    metadata: dict = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    thresholds: Dict[str, ThresholdVector] = field(default_factory=dict)
    vocab: Optional[Vocabulary] = None

    def add_module(self, prefix: str, module: Module) -> None:
        for name, param in module.named_parameters():
            self.tensors[f"{prefix}.{name}"] = param.data.copy()

    def load_module(self, prefix: str, module: Module) -> None:
        module.load_state_dict(self.tensors, prefix=f"{prefix}.")

    def has_prefix(self, prefix: str) -> bool:
        return any(name.startswith(f"{prefix}.") for name in self.tensors)

    def add_optimizer(self, group: str, optimizer: Adam) -> None:
        state = optimizer.state
        for name, moment in state.m.items():
            self.tensors[f"{OPTIMIZER_PREFIX}{group}.m.{name}"] = moment.copy()
        for name, moment in state.v.items():
            self.tensors[f"{OPTIMIZER_PREFIX}{group}.v.{name}"] = moment.copy()
        self.metadata.setdefault("optimizers", {})[group] = {
            "t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "weight_decay": state.weight_decay, "decoupled_decay": state.decoupled_decay,
        }

    def optimizer_state(self, group: str) -> Optional[OptimizerState]:
        """Restored Adam state (moments and step counter) for `group`, if stored."""
        settings = self.metadata.get("optimizers", {}).get(group)
        if settings is None:
            return None
        state = OptimizerState(**settings)
        for kind, target in (("m", state.m), ("v", state.v)):
            prefix = f"{OPTIMIZER_PREFIX}{group}.{kind}."
            for name, values in self.tensors.items():
                if name.startswith(prefix):
                    target[name[len(prefix):]] = values.astype(np.float64)
        return state

# ==============================================================================
# 1. SAVE
# ==============================================================================

def _write_name(buffer: BinaryIO, name: str) -> None:
    encoded = name.encode("utf-8")
    buffer.write(struct.pack("<H", len(encoded)))
    buffer.write(encoded)


def serialize_checkpoint(checkpoint: Checkpoint) -> bytes:
    if len(checkpoint.config_hash) != 64:
        raise ConfigError("config hash must be a 64-character SHA-256 hex digest")
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<H", CHECKPOINT_VERSION))
    buffer.write(checkpoint.config_hash.encode("ascii"))

    metadata = orjson.dumps(checkpoint.metadata, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
    buffer.write(struct.pack("<I", len(metadata)))
    buffer.write(metadata)

    buffer.write(struct.pack("<I", len(checkpoint.tensors)))
    for name in sorted(checkpoint.tensors):
        values = np.asarray(checkpoint.tensors[name])
        _write_name(buffer, name)
        buffer.write(struct.pack("<B", values.ndim))
        buffer.write(struct.pack(f"<{values.ndim}I", *values.shape))
        dtype = "<f8" if name.startswith(OPTIMIZER_PREFIX) else "<f4"
        buffer.write(struct.pack("<B", np.dtype(dtype).itemsize))
        buffer.write(np.ascontiguousarray(values, dtype=dtype).tobytes())

    buffer.write(struct.pack("<I", len(checkpoint.thresholds)))
    for name in sorted(checkpoint.thresholds):
        vector = checkpoint.thresholds[name]
        flags = vector.flags or [FLAG_OK] * len(vector.values)
        _write_name(buffer, name)
        buffer.write(struct.pack("<I", len(vector.values)))
        buffer.write(np.ascontiguousarray(vector.values, dtype="<f8").tobytes())
        buffer.write(bytes(FLAG_CODES[flag] for flag in flags))

    vocab = checkpoint.vocab.to_lines().encode("utf-8") if checkpoint.vocab else b""
    buffer.write(struct.pack("<I", len(vocab)))
    buffer.write(vocab)
    return buffer.getvalue()


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_checkpoint(checkpoint))
    logger.info(f"[Checkpoint] saved {len(checkpoint.tensors)} tensors to {path}")
    return path

# ==============================================================================
# 2. LOAD
# ==============================================================================

class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise DatasetFormatError("truncated checkpoint")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")


def deserialize_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DatasetFormatError("not an AGRG checkpoint (bad magic)")
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {version}")
    config_hash = reader.take(64).decode("ascii")
    (meta_length,) = reader.unpack("<I")
    metadata = orjson.loads(reader.take(meta_length))

    tensors: Dict[str, np.ndarray] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        name = reader.name()
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        (width,) = reader.unpack("<B")
        if width not in TENSOR_DTYPES:
            raise DatasetFormatError(f"tensor '{name}' has unsupported element width {width}")
        data = np.frombuffer(reader.take(width * size), dtype=TENSOR_DTYPES[width])
        tensors[name] = data.reshape(shape).astype(np.float64)

    thresholds: Dict[str, ThresholdVector] = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        name = reader.name()
        (k,) = reader.unpack("<I")
        values = np.frombuffer(reader.take(8 * k), dtype="<f8").astype(np.float64)
        flags = [FLAG_NAMES[code] for code in reader.take(k)]
        thresholds[name] = ThresholdVector(values=values, flags=flags)

    (vocab_length,) = reader.unpack("<I")
    vocab_block = reader.take(vocab_length).decode("utf-8")
    vocab = Vocabulary.from_lines(vocab_block) if vocab_block else None
    if reader.offset != len(payload):
        raise DatasetFormatError("trailing bytes after checkpoint vocabulary block")
    return Checkpoint(config_hash, metadata, tensors, thresholds, vocab)


def load_checkpoint(path: PathLike, expected_hash: Optional[str] = None, force: bool = False) -> Checkpoint:
    """Reads a checkpoint; refuses one stamped with another config hash unless forced."""
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"checkpoint {path} does not exist")
    checkpoint = deserialize_checkpoint(path.read_bytes())
    if expected_hash is not None and checkpoint.config_hash != expected_hash:
        if not force:
            raise ConfigError(f"checkpoint {path.name} was built from config {checkpoint.config_hash[:12]}, "
                              f"current config is {expected_hash[:12]} (use --force to override)")
        logger.warning(f"[Checkpoint] loading {path.name} despite config hash mismatch (forced)")
    return checkpoint

