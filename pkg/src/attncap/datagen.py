"""Synthetic sequence libraries.

Tokens are i.i.d. uniform over ``[0, T)`` with every (N-1)-token prefix
distinct; duplicate prefixes with different final tokens would make full
memorization impossible. Randomness comes from numpy's counter-based Philox
generator so a library is reproducible from ``(K, N, T, seed)`` on any
platform.

Library file layout (all little-endian)::

    magic   4s   b"ATLB"
    version u32
    K, N, T u32 x 3
    seed    u64
    tokens  i32 x K*N   (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LIBRARY_MAGIC = b"ATLB"
LIBRARY_VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")

# Below this many candidate prefixes per requested row, sample prefixes
# without replacement instead of rejecting duplicates.
_ENUMERATE_RATIO = 4


class InfeasibleLibraryError(ValueError):
    """More unique prefixes requested than exist."""


@dataclass(frozen=True, eq=False)
class SequenceLibrary:
    K: int
    N: int
    T: int
    seed: int
    sequences: np.ndarray

    @property
    def prefixes(self) -> np.ndarray:
        return self.sequences[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.sequences[:, -1]

    def descriptor(self) -> dict:
        return {"K": self.K, "N": self.N, "T": self.T, "seed": self.seed}

    def __eq__(self, other):
        if not isinstance(other, SequenceLibrary):
            return NotImplemented
        return self.descriptor() == other.descriptor() and np.array_equal(self.sequences, other.sequences)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def prefixes_unique(sequences: np.ndarray) -> bool:
    pre = np.ascontiguousarray(sequences[:, :-1])
    return np.unique(pre, axis=0).shape[0] == pre.shape[0]


def generate_library(K: int, N: int, T: int, seed: int) -> SequenceLibrary:
    if N < 2 or T < 2:
        raise ValueError(f"need N >= 2 and T >= 2, got N={N}, T={T}")
    if K < 0:
        raise ValueError(f"K must be nonnegative, got {K}")
    space = T ** (N - 1)
    if K > space:
        raise InfeasibleLibraryError(f"K={K} exceeds the {space} distinct prefixes of length {N - 1} over {T} tokens")
    rng = _rng(seed)
    if space <= _ENUMERATE_RATIO * K:
        codes = rng.choice(space, size=K, replace=False)
        digits = np.empty((K, N - 1), dtype=np.int64)
        for j in range(N - 2, -1, -1):
            digits[:, j] = codes % T
            codes = codes // T
        seqs = np.concatenate([digits, rng.integers(0, T, size=(K, 1))], axis=1)
    else:
        seqs = rng.integers(0, T, size=(K, N))
        while True:
            _, first = np.unique(seqs[:, :-1], axis=0, return_index=True)
            if first.size == K:
                break
            dup = np.setdiff1d(np.arange(K), first)
            seqs[dup] = rng.integers(0, T, size=(dup.size, N))
    return SequenceLibrary(K, N, T, int(seed), seqs.astype(np.int32))


def batches(lib: SequenceLibrary | int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Shuffle ``range(K)`` for this (seed, epoch) and cut it into batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    K = lib if isinstance(lib, int) else lib.K
    perm = _rng(seed, epoch).permutation(K)
    return [perm[i : i + batch_size] for i in range(0, K, batch_size)]


def write_library(path: str | Path, lib: SequenceLibrary) -> None:
    header = _HEADER.pack(LIBRARY_MAGIC, LIBRARY_VERSION, lib.K, lib.N, lib.T, lib.seed)
    Path(path).write_bytes(header + lib.sequences.astype("<i4").tobytes())


def read_library(path: str | Path) -> SequenceLibrary:
    raw = Path(path).read_bytes()
    magic, version, K, N, T, seed = _HEADER.unpack_from(raw)
    if magic != LIBRARY_MAGIC or version != LIBRARY_VERSION:
        raise ValueError(f"{path}: not a version-{LIBRARY_VERSION} library file")
    body = np.frombuffer(raw, dtype="<i4", offset=_HEADER.size)
    if body.size != K * N:
        raise ValueError(f"{path}: expected {K * N} tokens, found {body.size}")
    return SequenceLibrary(K, N, T, seed, body.reshape(K, N).astype(np.int32))
