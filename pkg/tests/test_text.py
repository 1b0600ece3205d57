import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundingdesk.data import GroundingSample, Instance
from groundingdesk.errors import AnnotationError, CapacityError, FormatError, SamplingError
from groundingdesk.text import (
    Vocabulary,
    append_phrases,
    assemble_ovd_caption,
    build_positive_map,
    sample_negatives,
    tokenize,
)

WORD = st.text(alphabet=string.ascii_letters + string.digits + "-'", min_size=1, max_size=8)
CATEGORY = st.lists(WORD, min_size=1, max_size=3).map(" ".join)


def vocab_for(*texts):
    return Vocabulary.build(texts)


def test_vocabulary_specials_and_unknown():
    v = vocab_for("cat dog")
    assert v.tokens[:3] == ["[PAD]", "[UNK]", "."] and v.pad_id == 0
    assert v.lookup("zebra") == v.unk_id


def test_vocabulary_file_round_trip(tmp_path):
    v = vocab_for("a b. c")
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


def test_tokenize_single_word():
    cap = tokenize("Cat.", vocab_for("cat"))
    assert cap.tokens == ["cat", "."]
    assert cap.char_spans == [(0, 3), (3, 4)]


def test_tokenize_detection_prompt():
    text = "People. Ball. Racket. Cat."
    cap = tokenize(text, vocab_for(text))
    assert len(cap) == 8
    assert len(cap.phrase_groups) == 4
    assert [cap.token_range_text(g.phrase_id) for g in cap.phrase_groups] == ["People", "Ball", "Racket", "Cat"]


def test_tokenize_rejects_empty():
    with pytest.raises(FormatError):
        tokenize("", vocab_for("x"))


def test_truncation_through_phrase_is_capacity_error():
    text, spans = assemble_ovd_caption(["a b", "c d e"])
    with pytest.raises(CapacityError, match="c d e"):
        tokenize(text, vocab_for(text), max_len=4, phrase_spans=spans)


def test_truncation_after_phrases_is_allowed():
    cap = tokenize("a b. c d.", vocab_for("a b c d"), max_len=3, phrase_spans=[(0, 0, 3)])
    assert len(cap) == 3


def test_assemble_examples():
    assert assemble_ovd_caption(["People", "Ball", "Racket", "Cat"])[0] == "People. Ball. Racket. Cat."
    assert assemble_ovd_caption(["dog"])[0] == "dog."


@pytest.mark.parametrize("bad", ["a. b", "trailing.", " padded", ""])
def test_assemble_rejects_separator_and_padding(bad):
    with pytest.raises(FormatError):
        assemble_ovd_caption(["ok", bad])


@settings(max_examples=1000, deadline=None)
@given(st.lists(CATEGORY, min_size=1, max_size=8))
def test_assemble_tokenize_round_trip(categories):
    text, spans = assemble_ovd_caption(categories)
    assert [text[s:e] for _, s, e in spans] == categories
    cap = tokenize(text, vocab_for(text), max_len=256, phrase_spans=spans)
    assert [cap.token_range_text(i) for i in range(len(categories))] == categories
    ends = [e for _, e in cap.char_spans]
    starts = [s for s, _ in cap.char_spans]
    assert all(e <= s for e, s in zip(ends, starts[1:]))
    assert all(max(g.token_indices) < len(cap) for g in cap.phrase_groups)


def test_append_phrases_keeps_existing_spans():
    text, spans = assemble_ovd_caption(["cat"])
    out, new = append_phrases(text, spans, ["dog", "car"], first_id=1)
    assert out == "cat. dog. car."
    assert [out[s:e] for _, s, e in new] == ["cat", "dog", "car"]


def test_positive_map_whole_caption():
    cap = tokenize("big red ball", vocab_for("big red ball"), phrase_spans=[(0, 0, 12)])
    assert build_positive_map(cap, [0]).tolist() == [[1.0, 1.0, 1.0]]


def test_positive_map_shared_phrase_rows_identical():
    cap = tokenize("two dogs. a cat.", vocab_for("two dogs a cat"))
    pm = build_positive_map(cap, [0, 0, 1])
    assert np.array_equal(pm[0], pm[1])
    assert pm[0].tolist() == [1, 1, 0, 0, 0, 0] and pm[2].tolist() == [0, 0, 0, 1, 1, 0]


def test_positive_map_dangling_phrase():
    cap = tokenize("cat.", vocab_for("cat"))
    with pytest.raises(AnnotationError):
        build_positive_map(cap, [3])


@settings(max_examples=200, deadline=None)
@given(st.lists(CATEGORY, min_size=1, max_size=6), st.data())
def test_positive_map_support_equals_group(categories, data):
    text, spans = assemble_ovd_caption(categories)
    cap = tokenize(text, vocab_for(text), max_len=256, phrase_spans=spans)
    ids = data.draw(st.lists(st.integers(0, len(categories) - 1), min_size=1, max_size=6))
    pm = build_positive_map(cap, ids)
    for row, pid in zip(pm, ids):
        assert set(np.flatnonzero(row)) == set(cap.group(pid).token_indices)


def ovd_sample(names, present):
    return GroundingSample(0, 10, 10, "OVD", categories=list(names),
                           instances=[Instance((0, 0, 5, 5), category_id=c) for c in present])


def test_negatives_zero_is_unchanged():
    s = ovd_sample(["cat", "dog"], [0])
    v = vocab_for("cat dog car")
    cap, pm = sample_negatives(s, ["car"], 0, rng_seed=1, vocab=v)
    assert cap.text == "cat." and pm.tolist() == [[1.0, 0.0]]


def test_negatives_appended_without_positives():
    s = ovd_sample(["cat"], [0])
    v = vocab_for("cat dog car")
    cap, pm = sample_negatives(s, ["dog", "car"], 2, rng_seed=5, vocab=v)
    assert cap.text in ("cat. dog. car.", "cat. car. dog.")
    assert pm.tolist() == [[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]
    assert sample_negatives(s, ["dog", "car"], 2, rng_seed=5, vocab=v)[0].text == cap.text


def test_negatives_pool_too_small():
    with pytest.raises(SamplingError):
        sample_negatives(ovd_sample(["cat"], [0]), ["dog", "CAT"], 2, rng_seed=0, vocab=vocab_for("cat dog"))


def test_negatives_never_duplicate_positives():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(12)]
    v = vocab_for(" ".join(words))
    for trial in range(1000):
        present = sorted(set(rng.choice(len(words), size=3).tolist()))
        s = ovd_sample(words, present)
        pool = [w.upper() if rng.random() < 0.5 else w for w in words]
        n_neg = int(rng.integers(0, len(words) - len(present) + 1))
        cap, pm = sample_negatives(s, pool, n_neg, rng_seed=trial, vocab=v)
        phrases = [cap.token_range_text(g.phrase_id).lower() for g in cap.phrase_groups]
        assert len(phrases) == len(set(phrases)) == len(present) + n_neg
        positive_cols = set(np.flatnonzero(pm.sum(axis=0)))
        for g in cap.phrase_groups[len(present):]:
            assert not positive_cols & set(g.token_indices)
