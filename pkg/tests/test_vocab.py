"""Word-level closed vocabulary: tokenization, ids, round-trips."""

import numpy as np

from tsgen.vocab import BOS, EOS, PAD, UNK, WordVocab, detokenize, tokenize


def test_specials_occupy_first_ids():
    vocab = WordVocab.from_texts(["hello world"])
    assert vocab.pad_id == 0 and vocab.bos_id == 1 and vocab.eos_id == 2 and vocab.unk_id == 3
    assert vocab.tokens()[:4] == [PAD, BOS, EOS, UNK]


def test_tokenize_lowercases_and_keeps_hyphenated_words():
    assert tokenize("Answer: class-0 frequency pattern.") == [
        "answer", ":", "class-0", "frequency", "pattern", ".",
    ]


def test_tokenize_keeps_apostrophes():
    assert tokenize("it's fine") == ["it's", "fine"]


def test_detokenize_restores_punctuation_spacing():
    tokens = tokenize("Answer: walking.")
    assert detokenize(tokens) == "answer: walking."


def test_encode_decode_round_trip():
    vocab = WordVocab.from_texts(["the quick brown fox", "jumps over"])
    text = "the quick fox jumps"
    ids = vocab.encode(text)
    assert vocab.decode(ids) == text


def test_encode_marks_oov_as_unk():
    vocab = WordVocab.from_texts(["known words only"])
    ids = vocab.encode("known zebra")
    assert ids[1] == vocab.unk_id
    # specials never render back into text
    assert vocab.decode(ids) == "known"


def test_encode_bos_eos_flags():
    vocab = WordVocab.from_texts(["a b"])
    ids = vocab.encode("a b", bos=True, eos=True)
    assert ids[0] == vocab.bos_id and ids[-1] == vocab.eos_id
    assert len(ids) == 4


def test_decode_until_eos_stops():
    vocab = WordVocab.from_texts(["a b c"])
    ids = vocab.encode("a b", eos=True) + vocab.encode("c")
    assert vocab.decode_until_eos(ids) == "a b"


def test_vocabulary_is_sorted_and_deterministic():
    a = WordVocab.from_texts(["beta alpha", "gamma"])
    b = WordVocab.from_texts(["gamma", "alpha beta"])
    assert a.tokens() == b.tokens()
    body = a.tokens()[4:]
    assert body == sorted(body)


def test_config_round_trip():
    vocab = WordVocab.from_texts(["some words here", "class-1 pattern"])
    again = WordVocab.from_config(vocab.to_config())
    assert again.tokens() == vocab.tokens()
    assert again.encode("class-1 pattern") == vocab.encode("class-1 pattern")


def test_random_texts_round_trip():
    rng = np.random.default_rng(7)
    words = ["alpha", "beta", "gamma", "delta", "class-2", "x9"]
    for _ in range(50):
        text = " ".join(rng.choice(words, size=rng.integers(1, 8)))
        vocab = WordVocab.from_texts([text])
        assert vocab.decode(vocab.encode(text)) == text
