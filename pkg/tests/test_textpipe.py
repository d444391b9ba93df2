import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphads import textpipe as tp
from graphads.errors import DomainError, ParseError


# ---------------------------------------------------------------------------
# tokenize
# ---------------------------------------------------------------------------

def test_tokenize_folds_and_drops_punctuation():
    assert tp.tokenize("Apple iPhone 15!") == ["apple", "iphone", "15"]


def test_tokenize_empty():
    assert tp.tokenize("") == []


def test_tokenize_collapses_whitespace():
    assert tp.tokenize("  a\tb ") == ["a", "b"]


@given(st.text(max_size=40))
def test_tokenize_output_is_clean(text):
    for tok in tp.tokenize(text):
        assert tok == tok.casefold()
        assert tp.tokenize(tok) == [tok]


# ---------------------------------------------------------------------------
# stopwords
# ---------------------------------------------------------------------------

EN_STOPS = tp.StopwordSet.build({"en": ["the"]})


def test_remove_stopwords_filters_in_order():
    assert tp.remove_stopwords(["the", "red", "shoe"], "en", EN_STOPS) == ["red", "shoe"]


def test_remove_stopwords_can_empty_the_input():
    assert tp.remove_stopwords(["the", "the"], "en", EN_STOPS) == []


def test_remove_stopwords_empty_set_is_identity():
    stops = tp.StopwordSet.build({"en": []})
    assert tp.remove_stopwords(["a", "b"], "en", stops) == ["a", "b"]


def test_remove_stopwords_unknown_lang_warns_and_keeps_all():
    with pytest.warns(UserWarning, match="xx"):
        out = tp.remove_stopwords(["the", "red"], "xx", EN_STOPS)
    assert out == ["the", "red"]


def test_stopword_lookup_is_case_folded():
    assert tp.remove_stopwords(["The"], "en", EN_STOPS) == []


# ---------------------------------------------------------------------------
# BPE training
# ---------------------------------------------------------------------------

def low_corpus():
    return [["low"] * 5 + ["lower"] * 2 + ["lowest"] * 2]


def test_train_bpe_hand_counted_merges():
    # pair counts over {low x5, lower x2, lowest x2}: (l,o)=9 ties (o,w)=9,
    # lexicographic tie-break picks (l,o); then (lo,w)=9 dominates.
    model = tp.train_bpe(low_corpus(), 2)
    assert model.merges == (("l", "o"), ("lo", "w"))


def test_train_bpe_zero_merges_is_character_level():
    model = tp.train_bpe(low_corpus(), 0)
    assert model.merges == ()
    vocab = tp.build_vocab(low_corpus(), model)
    ids = tp.bpe_encode("low", model, vocab)
    assert [vocab.token_of(i) for i in ids] == ["l", "o", "w"]


def test_train_bpe_stops_when_no_pairs_remain():
    model = tp.train_bpe([["a"]], 10)
    assert len(model.merges) <= 1


def test_train_bpe_empty_corpus_is_domain_error():
    with pytest.raises(DomainError):
        tp.train_bpe([[]], 5)


def test_train_bpe_negative_merges_is_domain_error():
    with pytest.raises(DomainError):
        tp.train_bpe(low_corpus(), -1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.text(alphabet="abcd", min_size=1, max_size=5),
                         min_size=1, max_size=6),
                min_size=1, max_size=4),
       st.integers(min_value=0, max_value=8))
def test_train_bpe_is_deterministic(corpus, num_merges):
    first = tp.train_bpe(corpus, num_merges)
    second = tp.train_bpe(corpus, num_merges)
    assert first.merges == second.merges
    assert len(set(first.merges)) == len(first.merges)


# ---------------------------------------------------------------------------
# BPE encoding
# ---------------------------------------------------------------------------

def trained_assets(num_merges=6):
    corpus = low_corpus()
    model = tp.train_bpe(corpus, num_merges)
    return corpus, model, tp.build_vocab(corpus, model)


def test_fully_merged_word_is_a_single_id():
    _, model, vocab = trained_assets(num_merges=16)
    ids = tp.bpe_encode("low", model, vocab)
    assert len(ids) == 1
    assert vocab.token_of(ids[0]) == "low" + tp.END_MARK


def test_unseen_characters_become_unk():
    _, model, vocab = trained_assets()
    assert tp.bpe_encode("xyz", model, vocab) == [tp.UNK_ID] * 3


def test_encode_decode_round_trip():
    _, model, vocab = trained_assets()
    for token in ("low", "lower", "lowest", "wool", "sole"):
        ids = tp.bpe_encode(token, model, vocab)
        assert tp.decode_token(ids, vocab) == token


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="lowerst", min_size=1, max_size=10))
def test_encode_properties_on_in_alphabet_tokens(token):
    _, model, vocab = trained_assets()
    ids = tp.bpe_encode(token, model, vocab)
    assert all(0 <= i < len(vocab) for i in ids)
    assert len(ids) <= len(token) + 1
    assert tp.decode_token(ids, vocab) == token


# ---------------------------------------------------------------------------
# vocab
# ---------------------------------------------------------------------------

def test_vocab_reserved_ids_fixed():
    vocab = tp.Vocab(["aa", "bb"])
    assert vocab.id_of("<pad>") == tp.PAD_ID == 0
    assert vocab.id_of("<unk>") == tp.UNK_ID == 1
    assert vocab.id_of("<cls>") == tp.CLS_ID == 2
    assert vocab.id_of("<sep>") == tp.SEP_ID == 3
    assert vocab.id_of("aa") == 4
    assert vocab.id_of("bb") == 5


def test_vocab_is_a_bijection():
    vocab = tp.Vocab(["aa", "bb", "aa"])
    assert len(vocab) == 4 + 2
    for idx in range(len(vocab)):
        assert vocab.id_of(vocab.token_of(idx)) == idx


def test_vocab_unknown_token_maps_to_unk():
    assert tp.Vocab().id_of("missing") == tp.UNK_ID


# ---------------------------------------------------------------------------
# encode_text
# ---------------------------------------------------------------------------

def tiny_pipeline(max_len=8):
    corpus = low_corpus()
    model = tp.train_bpe(corpus, 6)
    vocab = tp.build_vocab(corpus, model)
    return tp.TextPipeline(vocab=vocab, bpe=model, stopwords=EN_STOPS,
                           max_len=max_len)


def test_encode_text_empty_text():
    pipe = tiny_pipeline(max_len=4)
    ids, mask = tp.encode_text("", "en", pipe)
    np.testing.assert_array_equal(ids, [tp.CLS_ID, tp.PAD_ID, tp.PAD_ID, tp.PAD_ID])
    np.testing.assert_array_equal(mask, [1, 0, 0, 0])


def test_encode_text_truncates_after_cls():
    pipe = tiny_pipeline(max_len=4)
    ids, mask = tp.encode_text("lowest lowest lowest lowest", "en", pipe)
    assert ids.shape == (4,) and mask.shape == (4,)
    assert ids[0] == tp.CLS_ID
    assert mask.tolist() == [1, 1, 1, 1]


def test_encode_text_is_deterministic():
    pipe = tiny_pipeline()
    a_ids, a_mask = tp.encode_text("lower low", "en", pipe)
    b_ids, b_mask = tp.encode_text("lower low", "en", pipe)
    np.testing.assert_array_equal(a_ids, b_ids)
    np.testing.assert_array_equal(a_mask, b_mask)


def test_encode_text_applies_stopword_filter():
    pipe = tiny_pipeline()
    with_stop, _ = tp.encode_text("the low", "en", pipe)
    without, _ = tp.encode_text("low", "en", pipe)
    np.testing.assert_array_equal(with_stop, without)


def test_encode_text_rejects_tiny_max_len():
    pipe = tiny_pipeline(max_len=1)
    with pytest.raises(DomainError):
        tp.encode_text("low", "en", pipe)


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="lowerst ", max_size=30))
def test_encode_text_shape_and_range(text):
    pipe = tiny_pipeline()
    ids, mask = tp.encode_text(text, "en", pipe)
    assert ids.shape == (pipe.max_len,) and mask.shape == (pipe.max_len,)
    assert ids[0] == tp.CLS_ID and mask[0] == 1
    assert np.all(ids >= 0) and np.all(ids < len(pipe.vocab))
    assert np.all((mask == 0) | (mask == 1))
    # mask is a prefix of ones
    assert np.all(np.diff(mask) <= 0)
    assert np.all(ids[mask == 0] == tp.PAD_ID)


# ---------------------------------------------------------------------------
# asset files
# ---------------------------------------------------------------------------

def test_vocab_file_round_trip(tmp_path):
    _, model, vocab = trained_assets()
    path = tmp_path / "vocab.txt"
    tp.save_vocab(path, vocab)
    loaded = tp.load_vocab(path)
    assert len(loaded) == len(vocab)
    for idx in range(len(vocab)):
        assert loaded.token_of(idx) == vocab.token_of(idx)


def test_merges_file_round_trip(tmp_path):
    _, model, _ = trained_assets()
    path = tmp_path / "merges.txt"
    tp.save_merges(path, model)
    assert tp.load_merges(path).merges == model.merges


def test_merges_file_bad_line_reports_position(tmp_path):
    path = tmp_path / "merges.txt"
    path.write_text("l o\nbroken\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        tp.load_merges(path)
    assert exc.value.line == 2


def test_stopword_file_round_trip(tmp_path):
    path = tmp_path / "en.txt"
    tp.save_stopwords(path, ["The", "and"])
    assert tp.load_stopwords(path) == frozenset({"the", "and"})


def test_fit_pipeline_end_to_end(tmp_path):
    texts = {"en": ["low lower", "lowest low"], "xx": ["lost solo"]}
    stops = tp.StopwordSet.build({"en": [], "xx": []})
    pipe = tp.fit_pipeline(texts, stops, num_merges=10, max_len=6)
    ids, mask = tp.encode_text("solo low", "xx", pipe)
    assert ids[0] == tp.CLS_ID
    assert int(mask.sum()) >= 3
    # shared vocabulary: the same surface form encodes identically per language
    a, _ = tp.encode_text("low", "en", pipe)
    b, _ = tp.encode_text("low", "xx", pipe)
    np.testing.assert_array_equal(a, b)
