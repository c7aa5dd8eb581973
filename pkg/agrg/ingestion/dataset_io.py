# agrg/ingestion/dataset_io.py

"""
On-disk formats owned by the ingestion side.

Split files (`*.agds`), all little-endian:

    header   magic b"AGDS" | u16 version | u16 K | u32 D | u32 H | u32 W | u32 case count
    per case u64 seed | u32 label bitmask (bit i = label i) | u32 report byte length
             | UTF-8 report | D*H*W float32 voxels (row-major)

Plus the JSON / JSON-lines helpers used for manifests, generations and metrics.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Iterator, List, Tuple, Union

import numpy as np
import orjson

from agrg.errors import DatasetFormatError
from agrg.ingestion.common_utils import progress
from agrg.ingestion.synth import SyntheticCase

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"AGDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHHIIII")
_CASE_PREFIX = struct.Struct("<QII")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class DatasetHeader:
    k: int
    shape: Tuple[int, int, int]
    count: int

    @property
    def voxels(self) -> int:
        return int(np.prod(self.shape))


def labels_to_bitmask(labels: np.ndarray) -> int:
    return sum(1 << int(i) for i in np.flatnonzero(labels))


def bitmask_to_labels(mask: int, k: int) -> np.ndarray:
    if mask >> k:
        raise DatasetFormatError(f"label bitmask {mask:#x} has bits beyond K={k}")
    return np.array([(mask >> i) & 1 for i in range(k)], dtype=np.uint8)

# ==============================================================================
# 1. WRITING
# ==============================================================================

def write_dataset(path: PathLike, cases: Iterable[SyntheticCase], count: int, k: int,
                  shape: Tuple[int, int, int], desc: str = "write") -> int:
    """Streams `count` cases to a split file; returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with path.open("wb") as handle:
        handle.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, k, *shape, count))
        for case in progress(cases, desc=desc, total=count):
            if case.volume.shape != tuple(shape) or case.labels.shape != (k,):
                raise DatasetFormatError(f"case {case.seed} does not match header K={k}, shape={shape}")
            report = case.report.encode("utf-8")
            handle.write(_CASE_PREFIX.pack(case.seed, labels_to_bitmask(case.labels), len(report)))
            handle.write(report)
            handle.write(np.ascontiguousarray(case.volume, dtype="<f4").tobytes())
            written += 1
    if written != count:
        raise DatasetFormatError(f"header announced {count} cases but {written} were written to {path}")
    return written

# ==============================================================================
# 2. READING
# ==============================================================================

def _read_exact(handle: BinaryIO, size: int, what: str) -> bytes:
    payload = handle.read(size)
    if len(payload) != size:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return payload


def read_header(handle: BinaryIO) -> DatasetHeader:
    magic, version, k, depth, height, width, count = _HEADER.unpack(_read_exact(handle, _HEADER.size, "header"))
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    return DatasetHeader(k=k, shape=(depth, height, width), count=count)


def iter_dataset(path: PathLike) -> Iterator[SyntheticCase]:
    with Path(path).open("rb") as handle:
        header = read_header(handle)
        voxel_bytes = header.voxels * 4
        for _ in range(header.count):
            seed, mask, length = _CASE_PREFIX.unpack(_read_exact(handle, _CASE_PREFIX.size, "case prefix"))
            report = _read_exact(handle, length, "report").decode("utf-8")
            volume = np.frombuffer(_read_exact(handle, voxel_bytes, "voxels"), dtype="<f4")
            yield SyntheticCase(seed=seed, volume=volume.reshape(header.shape).astype(np.float32),
                                labels=bitmask_to_labels(mask, header.k), report=report)
        if handle.read(1):
            raise DatasetFormatError(f"trailing bytes after {header.count} cases in {path}")


def read_dataset(path: PathLike) -> List[SyntheticCase]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} does not exist")
    cases = list(iter_dataset(path))
    logger.debug(f"[Dataset] read {len(cases)} cases from {path}")
    return cases


def dataset_header(path: PathLike) -> DatasetHeader:
    with Path(path).open("rb") as handle:
        return read_header(handle)

# ==============================================================================
# 3. JSON / JSON-LINES
# ==============================================================================

def write_json(path: PathLike, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS
                                  | orjson.OPT_SERIALIZE_NUMPY) + b"\n")


def read_json(path: PathLike) -> Any:
    return orjson.loads(Path(path).read_bytes())


def write_jsonl(path: PathLike, records: Iterable[Any]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("wb") as handle:
        for record in records:
            handle.write(orjson.dumps(record, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY) + b"\n")
            count += 1
    return count


def read_jsonl(path: PathLike) -> List[Any]:
    records = []
    with Path(path).open("rb") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(orjson.loads(line))
            except orjson.JSONDecodeError as error:
                raise DatasetFormatError(f"{path}:{number}: invalid JSON line") from error
    return records
