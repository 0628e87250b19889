import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairprobe.domain import (
    FEMALE, GENUINE, IMPOSTOR, MALE, ComparisonPolicy, ComparisonStore, DataError,
    attach_embeddings, cosine_scores, generate_comparisons, genuine_pairs, impostor_pairs,
    load_annotations, load_comparisons, save_annotations, save_comparisons, save_embeddings,
)

from conftest import make_store, make_table


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_three_rows(tmp_path):
    p = write(tmp_path / "a.csv",
              "template_id,identity_id,gender,Bangs,Eyeglasses\n"
              "0,p1,M,1,-1\n1,p1,M,0,-1\n2,p2,F,-1,1\n")
    t = load_annotations(p)
    assert len(t) == 3
    assert t.attribute_names == ("Bangs", "Eyeglasses")
    assert t.labels.tolist() == [[1, -1], [0, -1], [-1, 1]]
    assert t.gender.tolist() == [MALE, MALE, FEMALE]
    assert t.identity_codes[0] == t.identity_codes[1] != t.identity_codes[2]


@pytest.mark.parametrize("row, line", [
    ("1,p2,F,2", 3),        # bad label
    ("1,p2,X,1", 3),        # bad gender
    ("0,p2,F,1", 3),        # duplicate id
    ("5,p2,F,1", 3),        # not the row index
])
def test_malformed_row_names_line(tmp_path, row, line):
    p = write(tmp_path / "a.csv", f"template_id,identity_id,gender,A\n0,p1,M,1\n{row}\n")
    with pytest.raises(DataError, match=f"line {line}"):
        load_annotations(p)


def test_bad_header(tmp_path):
    p = write(tmp_path / "a.csv", "id,identity_id,gender,A\n0,p1,M,1\n")
    with pytest.raises(DataError, match="header"):
        load_annotations(p)


def test_annotation_round_trip(tmp_path, small_data):
    _, table, _ = small_data
    save_annotations(table, tmp_path / "t.csv")
    back = load_annotations(tmp_path / "t.csv")
    assert back.attribute_names == table.attribute_names
    np.testing.assert_array_equal(back.labels, table.labels)
    np.testing.assert_array_equal(back.gender, table.gender)
    np.testing.assert_array_equal(back.identity_codes, table.identity_codes)


def test_table_is_immutable(small_data):
    _, table, store = small_data
    with pytest.raises(ValueError):
        table.labels[0, 0] = 1
    with pytest.raises(ValueError):
        store.score[0] = 0.0


def test_identical_embeddings_give_genuine_score_one():
    t = make_table([1, 1], [MALE, MALE], ["p", "p"], embeddings=np.array([[1.0, 2.0], [1.0, 2.0]]))
    s = generate_comparisons(t)
    assert len(s) == 1
    assert s.kind[0] == GENUINE
    assert s.score[0] == pytest.approx(1.0, abs=1e-7)


def test_orthogonal_embeddings_give_impostor_score_zero():
    t = make_table([1, 1], [FEMALE, FEMALE], ["p", "q"], embeddings=np.array([[1.0, 0.0], [0.0, 3.0]]))
    s = generate_comparisons(t)
    assert len(s) == 1
    assert s.kind[0] == IMPOSTOR
    assert s.score[0] == 0.0


def test_mixed_gender_pair_not_emitted():
    t = make_table([1, 1], [MALE, FEMALE], ["p", "q"], embeddings=np.eye(2))
    assert len(generate_comparisons(t)) == 0


def test_policy_caps_impostors():
    rng = np.random.default_rng(0)
    ids = [f"p{i // 3}" for i in range(30)]
    t = make_table(np.ones(30), [MALE] * 30, ids, embeddings=rng.normal(size=(30, 4)))
    s = generate_comparisons(t, ComparisonPolicy(impostor_factor=2.0, seed=1))
    n_gen = s.genuine_count
    assert n_gen == 10 * 3
    assert len(s) - n_gen == 60
    s.validate(t)
    again = generate_comparisons(t, ComparisonPolicy(impostor_factor=2.0, seed=1))
    assert again.fingerprint == s.fingerprint


def test_zero_embedding_rejected():
    with pytest.raises(DataError):
        cosine_scores(np.zeros((2, 3)), np.array([0]), np.array([1]))


def test_comparison_round_trip(tmp_path):
    s = make_store([(0, 1, 0.5, GENUINE, MALE)] * 5 + [(2, 3, -0.25, IMPOSTOR, FEMALE)] * 5)
    save_comparisons(s, tmp_path / "c.fpcm", sidecar=True)
    back = load_comparisons(tmp_path / "c.fpcm")
    assert back == s
    raw = (tmp_path / "c.fpcm").read_bytes()
    assert raw[-32:] == hashlib.sha256(raw[:-32]).digest()
    assert (tmp_path / "c.fpcm.sha256").read_text().strip() == raw[-32:].hex()
    assert s.fingerprint == hashlib.sha256(raw[:-32]).hexdigest()


def test_corrupt_comparison_file(tmp_path):
    s = make_store([(0, 1, 0.5, GENUINE, MALE)])
    p = tmp_path / "c.fpcm"
    save_comparisons(s, p)
    raw = bytearray(p.read_bytes())
    raw[20] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_comparisons(p)


def test_unknown_template_id(tmp_path):
    t = make_table([1, 1], [MALE, MALE], ["p", "p"])
    s = make_store([(0, 7, 0.5, GENUINE, MALE)])
    save_comparisons(s, tmp_path / "c.fpcm")
    with pytest.raises(DataError, match="unknown template_id"):
        load_comparisons(tmp_path / "c.fpcm", t)


def test_kind_must_match_identity():
    t = make_table([1, 1], [MALE, MALE], ["p", "q"])
    with pytest.raises(DataError, match="kind"):
        make_store([(0, 1, 0.5, GENUINE, MALE)]).validate(t)


def test_embedding_file_round_trip(tmp_path):
    t = make_table([1, 0, -1], [MALE, MALE, FEMALE], ["p", "q", "r"])
    vec = np.arange(6, dtype=np.float32).reshape(3, 2) + 1
    save_embeddings(tmp_path / "e.fpem", [2, 0, 1], vec[[2, 0, 1]])
    t2 = attach_embeddings(t, tmp_path / "e.fpem")
    np.testing.assert_array_equal(t2.embeddings, vec)


def test_genuine_pairs_enumerates_within_identity():
    codes = np.array([0, 0, 1, 0, 1, 2])
    a, b = genuine_pairs(np.arange(6), codes)
    assert list(zip(a.tolist(), b.tolist())) == [(0, 1), (0, 3), (1, 3), (2, 4)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40), st.integers(1, 300), st.integers(0, 99))
def test_impostor_pairs_are_distinct_cross_identity(ident, count, seed):
    codes = np.array(ident)
    a, b = impostor_pairs(np.arange(codes.size), codes, count, np.random.default_rng(seed))
    assert np.all(a < b)
    assert np.all(codes[a] != codes[b])
    pairs = set(zip(a.tolist(), b.tolist()))
    assert len(pairs) == a.size
    available = sum(1 for i in range(codes.size) for j in range(i + 1, codes.size)
                    if codes[i] != codes[j])
    assert a.size == min(count, available)


def test_fingerprint_changes_with_content():
    s1 = make_store([(0, 1, 0.5, GENUINE, MALE)])
    s2 = make_store([(0, 1, 0.5000001, GENUINE, MALE)])
    assert s1.fingerprint != s2.fingerprint
    assert isinstance(s1, ComparisonStore)
