import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attncap.datagen import (
    InfeasibleLibraryError,
    batches,
    generate_library,
    prefixes_unique,
    read_library,
    write_library,
)


def test_deterministic_and_seed_sensitive():
    a, b, c = (generate_library(500, 6, 10, s) for s in (3, 3, 4))
    assert a == b
    assert a.sequences.tobytes() == b.sequences.tobytes()
    assert a != c


def test_shapes_ranges_and_dtype():
    lib = generate_library(300, 7, 13, 0)
    assert lib.sequences.shape == (300, 7) and lib.sequences.dtype == np.int32
    assert lib.sequences.min() >= 0 and lib.sequences.max() < 13
    assert lib.prefixes.shape == (300, 6) and lib.targets.shape == (300,)


def test_large_library_has_unique_prefixes():
    lib = generate_library(16000, 32, 128, 0)
    assert prefixes_unique(lib.sequences)


def test_enumeration_regime_exhausts_prefix_space():
    lib = generate_library(8, 4, 2, 1)  # 2**3 = 8 prefixes, all used
    assert prefixes_unique(lib.sequences)
    assert sorted(map(tuple, lib.prefixes.tolist())) == [tuple(int(b) for b in f"{i:03b}") for i in range(8)]


def test_infeasible_and_invalid():
    with pytest.raises(InfeasibleLibraryError):
        generate_library(9, 4, 2, 0)
    with pytest.raises(ValueError):
        generate_library(5, 1, 10, 0)
    with pytest.raises(ValueError):
        generate_library(5, 4, 1, 0)
    assert generate_library(0, 4, 5, 0).sequences.shape == (0, 4)


def test_token_frequencies_are_uniform():
    K, N, T = 20000, 8, 16
    lib = generate_library(K, N, T, 5)
    counts = np.bincount(lib.sequences.ravel(), minlength=T)
    n = K * N
    sigma = np.sqrt(n * (1 / T) * (1 - 1 / T))
    assert np.all(np.abs(counts - n / T) < 4 * sigma)
    tgt = np.bincount(lib.targets, minlength=T)
    assert np.all(np.abs(tgt - K / T) < 4 * np.sqrt(K / T * (1 - 1 / T)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 5), st.integers(0, 3))
def test_batches_partition_the_library(K, size, seed, epoch):
    parts = batches(K, size, seed, epoch)
    flat = np.concatenate(parts)
    assert sorted(flat.tolist()) == list(range(K))
    assert all(len(p) == size for p in parts[:-1]) and 0 < len(parts[-1]) <= size
    assert [p.tolist() for p in batches(K, size, seed, epoch)] == [p.tolist() for p in parts]


def test_batches_differ_between_epochs():
    assert not np.array_equal(np.concatenate(batches(100, 10, 0, 0)), np.concatenate(batches(100, 10, 0, 1)))
    with pytest.raises(ValueError):
        batches(10, 0, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 200), st.integers(2, 6), st.integers(2, 40), st.integers(0, 2**40))
def test_generated_prefixes_always_unique(K, N, T, seed):
    if K > T ** (N - 1):
        with pytest.raises(InfeasibleLibraryError):
            generate_library(K, N, T, seed)
        return
    assert prefixes_unique(generate_library(K, N, T, seed).sequences)


def test_library_file_round_trip(tmp_path):
    lib = generate_library(123, 5, 17, 2**33 + 1)
    path = tmp_path / "lib.bin"
    write_library(path, lib)
    assert read_library(path) == lib
    raw = path.read_bytes()
    assert raw[:4] == b"ATLB" and len(raw) == 28 + 123 * 5 * 4
    write_library(tmp_path / "b.bin", read_library(path))
    assert (tmp_path / "b.bin").read_bytes() == raw


def test_library_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(24))
    with pytest.raises(ValueError):
        read_library(path)
    lib = generate_library(4, 3, 5, 0)
    write_library(path, lib)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        read_library(path)
