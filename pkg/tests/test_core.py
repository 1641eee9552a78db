import numpy as np
import pytest
from hypothesis import given, strategies as st

from rldif.core import (
    AA_LETTERS,
    Alphabet,
    Backbone,
    CategoricalDist,
    DatasetEntry,
    InvalidResidue,
    LengthMismatch,
    Sequence,
    decode_sequence,
    encode_sequence,
)


def test_alphabet_is_the_canonical_ordering():
    assert AA_LETTERS == "ACDEFGHIKLMNPQRSTVWY"
    assert len(set(AA_LETTERS)) == 20
    a = Alphabet()
    for i, ch in enumerate(AA_LETTERS):
        assert a.index(ch) == i
        assert a.symbol(i) == ch


def test_encode_full_alphabet_round_trip():
    seq = encode_sequence(AA_LETTERS)
    assert list(seq.indices) == list(range(20))
    assert decode_sequence(seq) == AA_LETTERS


def test_encode_decode_round_trip():
    assert decode_sequence(encode_sequence("ACD")) == "ACD"


@pytest.mark.parametrize("bad", ["AXA", "B", "ACZ", "acd", "A A"])
def test_nonstandard_residues_rejected(bad):
    with pytest.raises(InvalidResidue):
        encode_sequence(bad)


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        encode_sequence("")


@given(st.text(alphabet=AA_LETTERS, min_size=1, max_size=200))
def test_round_trip_identity_property(text):
    assert decode_sequence(encode_sequence(text)) == text


def test_one_hot_rows_sum_to_one():
    seq = encode_sequence("ACDW")
    oh = seq.one_hot()
    assert oh.shape == (4, 20)
    assert np.array_equal(oh.sum(axis=1), np.ones(4))
    assert np.array_equal(np.count_nonzero(oh, axis=1), np.ones(4))
    assert np.array_equal(oh.argmax(axis=1), seq.indices)


def test_sequence_rejects_out_of_range_indices():
    with pytest.raises(InvalidResidue):
        Sequence(np.array([0, 20]))


def test_backbone_shape_and_views():
    coords = np.arange(24, dtype=float).reshape(2, 4, 3)
    bb = Backbone(coords)
    assert len(bb) == 2
    assert np.array_equal(bb.ca, coords[:, 1])
    assert np.array_equal(bb.o, coords[:, 3])
    with pytest.raises(ValueError):
        Backbone(np.full((2, 4, 3), np.nan))


def test_backbone_is_immutable():
    bb = Backbone(np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        bb.ca[0, 0] = 1.0


def test_categorical_dist_validation():
    ok = np.full((3, 20), 0.05)
    assert len(CategoricalDist(ok)) == 3
    with pytest.raises(ValueError):
        CategoricalDist(ok * 2)
    bad = ok.copy()
    bad[0, 0] = -0.05
    bad[0, 1] = 0.15
    with pytest.raises(ValueError):
        CategoricalDist(bad)


def test_dataset_entry_checks_lengths():
    seq = encode_sequence("ACD")
    bb = Backbone(np.random.default_rng(0).normal(size=(2, 4, 3)))
    with pytest.raises(LengthMismatch):
        DatasetEntry(id="x", sequence=seq, backbone=bb)
