import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabvio.place import (
    D_MAX,
    VLAD_BYTES,
    BinaryVlad,
    BinaryVocabulary,
    Keyframe,
    build_vlad,
    popcount,
    query_keyframes,
    score,
    should_create_keyframe,
    train_vocabulary,
)
from collabvio.sim import flip_bits, random_descriptors


@pytest.fixture(scope="module")
def vocab():
    return train_vocabulary(random_descriptors(np.random.default_rng(0), 500), seed=0)


def test_sizes():
    assert VLAD_BYTES == 2048 and D_MAX == 16384


def test_vocabulary_of_exact_corpus_is_the_corpus():
    corpus = random_descriptors(np.random.default_rng(1), 64)
    v = train_vocabulary(corpus, seed=3)
    assert v.cost == 0
    assert sorted(map(bytes, v.centroids)) == sorted(map(bytes, corpus))


def test_vocabulary_invariant_to_duplication():
    corpus = random_descriptors(np.random.default_rng(2), 300)
    a = train_vocabulary(corpus, seed=4)
    b = train_vocabulary(np.vstack([corpus, corpus]), seed=4)
    assert np.array_equal(a.centroids, b.centroids)


def test_vocabulary_deterministic_and_distinct():
    corpus = random_descriptors(np.random.default_rng(3), 10_000)
    a, b = train_vocabulary(corpus, seed=9), train_vocabulary(corpus, seed=9)
    assert np.array_equal(a.centroids, b.centroids) and a.cost == b.cost
    assert len({bytes(c) for c in a.centroids}) == 64


def test_vocabulary_needs_64_descriptors():
    with pytest.raises(ValueError):
        train_vocabulary(random_descriptors(np.random.default_rng(0), 63))


def test_vocabulary_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.bin"
    vocab.save(path)
    assert path.stat().st_size == 8 + 20 + 64 * 32
    loaded = BinaryVocabulary.load(path)
    assert np.array_equal(loaded.centroids, vocab.centroids) and loaded.seed == vocab.seed
    path.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        BinaryVocabulary.load(path)


def test_empty_vlad_is_zero(vocab):
    v = build_vlad(np.zeros((0, 32), np.uint8), vocab)
    assert v.blocks.shape == (64, 32) and not v.blocks.any()
    assert len(v.tobytes()) == 2048


def test_single_descriptor_fills_its_block(vocab):
    d = flip_bits(np.random.default_rng(0), vocab.centroids[3:4], 0.01)
    assert vocab.assign(d)[0] == 3
    v = build_vlad(d, vocab)
    assert np.array_equal(v.blocks[3], d[0])
    assert not np.delete(v.blocks, 3, axis=0).any()


def test_same_word_descriptors_are_ored(vocab):
    rng = np.random.default_rng(1)
    d = flip_bits(rng, np.repeat(vocab.centroids[5:6], 2, axis=0), 0.01)
    assert list(vocab.assign(d)) == [5, 5]
    v = build_vlad(d, vocab)
    assert np.array_equal(v.blocks[5], d[0] | d[1])
    assert popcount(v.blocks[5]) >= max(popcount(d[0]), popcount(d[1]))


def test_assignment_ties_go_to_lowest_index():
    cents = np.array([[0b00000011], [0b00001100]], np.uint8)
    v = BinaryVocabulary(cents)
    # 0b00000101 is one bit away from... both centroids are at distance 2
    assert v.assign(np.array([[0b00000101]], np.uint8))[0] == 0


def test_score_examples():
    zero = np.zeros((64, 32), np.uint8)
    ones = np.full((64, 32), 255, np.uint8)
    half = zero.copy()
    half[:16] = 255
    assert score(BinaryVlad(half), BinaryVlad(ones - half)) == 0.0
    assert score(BinaryVlad(ones), BinaryVlad(ones)) == 1.0
    assert score(BinaryVlad(half), BinaryVlad(half)) == 0.25
    with pytest.raises(ValueError):
        score(zero, np.zeros((64, 16), np.uint8))


def _random_vlad(rng, density):
    return np.packbits(rng.random((64, 256)) < density, axis=1)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_score_algebra(seed, da, db, dc):
    rng = np.random.default_rng(seed)
    a, b, c = _random_vlad(rng, da), _random_vlad(rng, db), _random_vlad(rng, dc)
    s = score(a, b)
    assert s == score(b, a)
    assert 0.0 <= s <= 1.0
    assert score(a | c, b) >= s
    assert score(a, a) == popcount(a) / D_MAX


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_build_vlad_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    v = train_vocabulary(random_descriptors(np.random.default_rng(0), 200), seed=0)
    d = random_descriptors(rng, 40)
    assert build_vlad(d, v) == build_vlad(d[rng.permutation(40)], v)


def test_query_examples(vocab):
    rng = np.random.default_rng(11)
    assert query_keyframes([], BinaryVlad(np.zeros((64, 32), np.uint8)), 0.0) is None
    frames = [random_descriptors(rng, 60) for _ in range(10)]
    db = [Keyframe(i, build_vlad(f, vocab), None) for i, f in enumerate(frames)]
    req = build_vlad(flip_bits(rng, frames[6], 0.02), vocab)
    hit = query_keyframes(db, req, 0.0)
    assert hit is not None and hit.id == 6
    assert query_keyframes(db, req, 1.0) is None
    # ties resolve to the lower keyframe id
    twin = [Keyframe(4, db[6].vlad, None), Keyframe(2, db[6].vlad, None)]
    assert query_keyframes(twin, req, 0.0).id == 2


def test_keyframe_rule_examples():
    assert not should_create_keyframe([0, 0, 0], [0, 0, 0], [5.0])
    assert should_create_keyframe([0, 0, 0], [1, 0, 0], [5.0])
    assert not should_create_keyframe([0, 0, 0], [0.5, 0, 0], [5.0])
    assert should_create_keyframe(None, [0, 0, 0], [5.0])
    assert should_create_keyframe([0, 0, 0], [0, 0, 0], [])
