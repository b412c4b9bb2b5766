import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langshift.errors import CorruptionError, FormatError, InvalidInputError, UnknownKeyError
from langshift.repstore import (
    PREAMBLE,
    ActivationDump,
    PoolingMethod,
    pool,
    read_container,
    read_dump,
    sentence_vectors,
    write_container,
    write_dump,
)


def make_dump(languages, num_layers, d, num_sentences, seed=0, max_len=6):
    rng = np.random.default_rng(seed)
    dump = ActivationDump("test-model", num_layers, d, list(languages))
    for lang in languages:
        lengths = rng.integers(1, max_len + 1, size=num_sentences)
        off = np.concatenate([[0], np.cumsum(lengths)])
        for layer in range(1, num_layers + 1):
            dump.tokens[(lang, layer)] = rng.normal(size=(off[-1], d))
            dump.offsets[(lang, layer)] = off
    return dump


def test_minimal_dump_round_trips_bit_exactly(tmp_path):
    dump = ActivationDump("m", 1, 2, [0], {(0, 1): np.array([[1.5, -2.25]])}, {(0, 1): np.array([0, 1])})
    write_dump(dump, tmp_path / "a.shfc")
    back = read_dump(tmp_path / "a.shfc")
    assert back == dump
    assert back.tokens[(0, 1)].tobytes() == dump.tokens[(0, 1)].tobytes()


def test_mismatched_language_sets_refused(tmp_path):
    dump = make_dump([0, 1], 2, 3, 4)
    del dump.tokens[(1, 2)]
    with pytest.raises(InvalidInputError):
        write_dump(dump, tmp_path / "x.shfc")
    assert not (tmp_path / "x.shfc").exists()


@pytest.mark.parametrize("offsets", [[0, 2, 2, 5], [1, 3, 5], [0, 3, 4]])
def test_bad_offsets_refused(tmp_path, offsets):
    dump = ActivationDump("m", 1, 2, [0], {(0, 1): np.zeros((5, 2))}, {(0, 1): np.array(offsets)})
    with pytest.raises(InvalidInputError):
        write_dump(dump, tmp_path / "x.shfc")


def test_file_size_is_header_plus_payload(tmp_path):
    dump = make_dump([0, 1, 2], 8, 5, 100, seed=1)
    path = tmp_path / "big.shfc"
    write_dump(dump, path)
    raw = path.read_bytes()
    _, _, header_len = PREAMBLE.unpack(raw[:PREAMBLE.size])
    payload = sum(m.size * 8 for m in dump.tokens.values())
    assert len(raw) == PREAMBLE.size + header_len + payload
    assert read_dump(path) == dump


def test_wrong_magic(tmp_path):
    path = tmp_path / "a.shfc"
    write_dump(make_dump([0], 1, 2, 2), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_dump(path)


def test_wrong_version(tmp_path):
    path = tmp_path / "a.shfc"
    write_dump(make_dump([0], 1, 2, 2), path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_dump(path)


def test_truncation_names_the_block(tmp_path):
    dump = make_dump(["en", "sw"], 3, 4, 5, seed=2)
    path = tmp_path / "a.shfc"
    write_dump(dump, path)
    raw = path.read_bytes()
    _, _, header_len = PREAMBLE.unpack(raw[:PREAMBLE.size])
    header = json.loads(raw[PREAMBLE.size:PREAMBLE.size + header_len])
    target = next(b for b in header["blocks"] if b["language"] == "sw" and b["layer"] == 2)
    cut = PREAMBLE.size + header_len + target["offset"] + target["nbytes"] // 2
    path.write_bytes(raw[:cut])
    with pytest.raises(CorruptionError) as info:
        read_dump(path)
    assert info.value.block == "(language='sw', layer=2)"
    assert info.value.offset == cut


def test_container_kind_is_checked(tmp_path):
    write_container(tmp_path / "c.shfc", "corpus", {}, [("a", np.arange(3), {})])
    with pytest.raises(FormatError):
        read_container(tmp_path / "c.shfc", expected_kind="activations")
    kind, _, _, arrays = read_container(tmp_path / "c.shfc")
    assert kind == "corpus" and arrays["a"].dtype == np.int64


@pytest.mark.parametrize("method,expected", [("mean", [2.0, 3.0]), ("max", [3.0, 4.0]), ("last", [3.0, 4.0])])
def test_pool_examples(method, expected):
    np.testing.assert_array_equal(pool([[1.0, 2.0], [3.0, 4.0]], method), expected)


def test_pool_rejects_empty():
    with pytest.raises(InvalidInputError):
        pool(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        pool([[1.0]], "median")


def test_pool_of_identical_rows_is_that_row():
    row = np.array([0.1, 0.7, -3.3])
    assert np.array_equal(pool(np.tile(row, (7, 1)), PoolingMethod.MEAN), row)


def test_single_token_sentences():
    toks = np.array([[1.0, 2.0], [5.0, -1.0]])
    dump = ActivationDump("m", 1, 2, [0], {(0, 1): toks}, {(0, 1): np.array([0, 1, 2])})
    for method in PoolingMethod:
        np.testing.assert_array_equal(sentence_vectors(dump, 0, 1, method), toks)


def test_sentence_vectors_match_loop_oracle():
    dump = make_dump([0], 1, 4, 100, seed=5)
    mat, off = dump.block(0, 1)
    got = sentence_vectors(dump, 0, 1)
    for i in range(100):
        rows = mat[off[i]:off[i + 1]]
        total = np.zeros(4)
        for r in rows:
            total += r
        np.testing.assert_allclose(got[i], total / len(rows), rtol=0, atol=1e-12)


def test_sentence_vectors_unknown_key():
    with pytest.raises(UnknownKeyError):
        sentence_vectors(make_dump([0], 2, 2, 3), 1, 1)
    with pytest.raises(UnknownKeyError):
        sentence_vectors(make_dump([0], 2, 2, 3), 0, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6), st.integers(1, 10), st.integers(0, 999))
def test_round_trip_property(tmp_path_factory, n_lang, n_layers, d, n_sent, seed):
    dump = make_dump(list(range(n_lang)), n_layers, d, n_sent, seed=seed)
    path = tmp_path_factory.mktemp("rt") / "d.shfc"
    write_dump(dump, path)
    assert read_dump(path) == dump


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 999))
def test_equal_length_mean_of_means_is_token_mean(n_sent, length, seed):
    rng = np.random.default_rng(seed)
    toks = rng.normal(size=(n_sent * length, 3))
    dump = ActivationDump("m", 1, 3, [0], {(0, 1): toks},
                          {(0, 1): np.arange(0, n_sent * length + 1, length)})
    np.testing.assert_allclose(sentence_vectors(dump, 0, 1).mean(axis=0), toks.mean(axis=0), atol=1e-12)
