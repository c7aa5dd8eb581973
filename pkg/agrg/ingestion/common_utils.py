# agrg/ingestion/common_utils.py

"""
Common utilities shared across the dataset generator, the training stages and the
command line.

This module centralizes logging setup, the seeded random streams every stage draws
from, stable hashing of configs and parameter buffers, the word-level text helpers
used by both the tokenizer and the metrics, and the batching / thread-capped
parallel map helpers.
"""

import hashlib
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import coloredlogs
import numpy as np
from dotenv import load_dotenv
from threadpoolctl import threadpool_limits
from tqdm import tqdm

# --- CONFIGURATION ---
load_dotenv()

DEFAULT_LOG_LEVEL = os.getenv("AGRG_LOG_LEVEL", "INFO")
PROGRESS_DISABLED = os.getenv("AGRG_NO_PROGRESS", "0") == "1"
LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

MASK64 = (1 << 64) - 1

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)

# ==============================================================================
# 1. LOGGING & PROGRESS
# ==============================================================================

def setup_logging(level: Optional[str] = None) -> None:
    """Installs coloured console logging for the whole `agrg` package."""
    coloredlogs.install(level=(level or DEFAULT_LOG_LEVEL).upper(), fmt=LOG_FORMAT)


def progress(iterable: Iterable[T], desc: str, total: Optional[int] = None) -> Iterable[T]:
    """Wraps a loop in a tqdm bar unless progress output is switched off."""
    return tqdm(iterable, desc=desc, total=total, leave=False, disable=PROGRESS_DISABLED or None)

# ==============================================================================
# 2. SEEDED RANDOM STREAMS
# ==============================================================================

def splitmix64(state: int) -> int:
    """One splitmix64 output step; used to derive independent sub-seeds."""
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, *tags) -> int:
    """
    Derives a 64-bit seed from a base seed and a path of tags (ints or strings).

    The same (base, tags) always yields the same seed, and different tag paths give
    statistically independent streams, so every stage can own its generator.
    """
    state = splitmix64(int(base) & MASK64)
    for tag in tags:
        if isinstance(tag, str):
            tag_value = int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")
        else:
            tag_value = int(tag) & MASK64
        state = splitmix64(state ^ tag_value)
    return state


def make_rng(base: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(base, *tags)))

# ==============================================================================
# 3. STABLE HASHING
# ==============================================================================

def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def digest_arrays(named_arrays: Iterable[Tuple[str, np.ndarray]]) -> str:
    """SHA-256 over (name, float32 little-endian buffer) pairs, in the order given."""
    digest = hashlib.sha256()
    for name, array in named_arrays:
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return digest.hexdigest()

# ==============================================================================
# 4. WORD-LEVEL TEXT HELPERS
# ==============================================================================

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_SENTENCE_BREAK = re.compile(r"(?<=\.)\s+")
ATTACHED_PUNCTUATION = frozenset({".", ",", ";", ":"})


def word_tokenize(text: str) -> List[str]:
    """Lowercased words and single punctuation marks, in order."""
    return _TOKEN_PATTERN.findall(text.lower())


def join_words(words: Sequence[str]) -> str:
    """Inverse of word_tokenize on normalized text: punctuation attaches to the word before it."""
    pieces: List[str] = []
    for word in words:
        if pieces and word in ATTACHED_PUNCTUATION:
            pieces[-1] += word
        else:
            pieces.append(word)
    return " ".join(pieces)


def split_sentences(report: str) -> List[str]:
    """Splits a report on sentence-final periods; an empty report has no sentences."""
    report = report.strip()
    if not report:
        return []
    return [sentence for sentence in _SENTENCE_BREAK.split(report) if sentence]

# ==============================================================================
# 5. BATCHING & THREAD-CAPPED PARALLEL MAP
# ==============================================================================

def iter_batches(items: Sequence[T], batch_size: int) -> Iterator[Sequence[T]]:
    """Yields consecutive slices of at most `batch_size` items."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]


@contextmanager
def blas_thread_cap(threads: Optional[int]):
    """Caps BLAS worker threads for the duration of the block (None leaves them alone)."""
    if threads is None:
        yield
        return
    with threadpool_limits(limits=max(1, int(threads)), user_api="blas"):
        yield


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1, desc: str = "work") -> List[R]:
    """
    Applies `fn` to every item and returns results in input order.

    With more than one thread the work runs on a thread pool and BLAS is pinned to
    one thread per worker so the `--threads` cap holds overall.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in progress(items, desc=desc, total=len(items))]

    with blas_thread_cap(1), ThreadPoolExecutor(max_workers=threads) as executor:
        return list(progress(executor.map(fn, items), desc=desc, total=len(items)))
