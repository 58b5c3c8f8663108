"""Tokenizer contract: special ids, normalization, round-trips, file format."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidcloze.vocab import (CLS, MASK, PAD, SEP, SPECIAL_TOKENS, UNK,
                            Vocabulary, build_vocab, decode, encode,
                            load_vocab, normalize, save_vocab)


def test_special_ids_zero_through_four():
    v = build_vocab(["hello world"])
    assert v.id_to_token[:5] == tuple(SPECIAL_TOKENS)
    assert (CLS, SEP, MASK, PAD, UNK) == (0, 1, 2, 3, 4)


def test_build_vocab_counts_and_order():
    v = build_vocab(["a a b"], min_count=1)
    assert v.size == 7
    assert v.id_to_token[5:] == ("a", "b")


def test_build_vocab_deterministic():
    corpus = ["the red ball", "a blue cup", "the ball again"]
    assert build_vocab(corpus) == build_vocab(list(corpus))


def test_min_count_drops_rare_words_to_unk():
    v = build_vocab(["a a b"], min_count=2)
    assert "b" not in v
    assert encode("b", v, 2).ids[0] == UNK


def test_build_vocab_empty_corpus_errors():
    with pytest.raises(ValueError):
        build_vocab([])


def test_order_is_count_desc_then_lexicographic():
    v = build_vocab(["b b c a a z z z"])
    assert v.id_to_token[5:] == ("z", "a", "b", "c")


def test_normalize_lowercase_and_punct_split():
    assert normalize("What? It's Red.") == ["what", "?", "it", "'", "s", "red", "."]
    assert normalize("answer: [MASK].") == ["answer", ":", "[MASK]", "."]
    assert normalize("") == []


def test_encode_empty_is_all_pad():
    v = build_vocab(["x"])
    seq = encode("", v, 4)
    assert seq.ids == [PAD] * 4
    assert seq.attention_mask == [0, 0, 0, 0]


def test_encode_special_passthrough_and_padding():
    v = build_vocab(["x"])
    seq = encode("[MASK]", v, 3)
    assert seq.ids == [MASK, PAD, PAD]
    assert seq.attention_mask == [1, 0, 0]


def test_encode_truncates_to_max_len():
    v = build_vocab(["a b c d"])
    seq = encode("a b c d", v, 2)
    assert len(seq.ids) == 2
    assert seq.attention_mask == [1, 1]


def test_encode_rejects_tiny_max_len():
    v = build_vocab(["x"])
    with pytest.raises(ValueError):
        encode("x", v, 1)


def test_decode_drops_pad_and_keeps_specials():
    v = build_vocab(["a"])
    assert decode([v.id_of("a"), PAD], v) == "a"
    assert decode([CLS], v) == "[CLS]"


def test_decode_out_of_range_errors():
    v = build_vocab(["a"])
    with pytest.raises(ValueError):
        decode([v.size], v)


def test_round_trip_on_prompt_like_text():
    corpus = ["question : what color is the ball ? answer : red ."]
    v = build_vocab(corpus)
    s = "[CLS] question : what color is the ball ? answer : [MASK] . [SEP]"
    seq = encode(s, v, 32)
    assert decode(seq.ids, v) == s


_WORDS = st.sampled_from("the a red ball cup is rolling kitchen what color".split())


@settings(max_examples=60, deadline=None)
@given(st.lists(_WORDS, min_size=1, max_size=10))
def test_round_trip_property_in_vocab(words):
    corpus = ["the a red ball cup is rolling kitchen what color ? . , ! ' :"]
    v = build_vocab(corpus)
    s = " ".join(words)
    assert decode(encode(s, v, 16).ids, v) == " ".join(normalize(s))


def test_attention_mask_marks_exactly_non_pad():
    v = build_vocab(["a b"])
    seq = encode("a b", v, 5)
    for i, m in zip(seq.ids, seq.attention_mask):
        assert (i != PAD) == bool(m)


def test_save_load_round_trip(tmp_path):
    v = build_vocab(["some words for a vocabulary file ."])
    path = tmp_path / "vocab.txt"
    save_vocab(v, str(path))
    lines = path.read_text().splitlines()
    assert lines[:5] == SPECIAL_TOKENS
    assert load_vocab(str(path)) == v


def test_load_rejects_wrong_special_order(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("\n".join(["[SEP]", "[CLS]", "[MASK]", "[PAD]", "[UNK]", "a"]))
    with pytest.raises(ValueError):
        load_vocab(str(path))


def test_vocabulary_is_bijection():
    v = build_vocab(["many different words in this line ."])
    for i, tok in enumerate(v.id_to_token):
        assert v.token_to_id[tok] == i
    assert len(v.token_to_id) == v.size
