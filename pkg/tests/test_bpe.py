import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.bpe import (
    BASE_VOCAB, BYTE_OFFSET, MASK_ID, PAD_ID, SPECIALS, BpeVocab, decode,
    decode_bytes, encode, load_vocab, save_vocab, train_bpe,
)
from flowcast.errors import CorpusEmpty, UnknownId

A = ord("a") + BYTE_OFFSET
B = ord("b") + BYTE_OFFSET


def test_special_ids_are_fixed():
    assert SPECIALS == ("<FLOW_BEGIN>", "<FLOW_END>", "<CLS>", "<SEP>", "<MASK>", "<PAD>")
    assert MASK_ID == 4 and PAD_ID == 5
    assert BASE_VOCAB == 262


def test_single_merge_on_aaaa():
    vocab = train_bpe("aaaa", vocab_size=263)
    assert vocab.merges == [(A, A)]
    assert vocab.token_bytes(262) == b"aa"


def test_vocab_size_262_learns_nothing():
    vocab = train_bpe("aaaa", vocab_size=262)
    assert vocab.merges == []


def test_rare_pairs_are_not_merged():
    # every pair occurs once: no merge clears the >=2 bar
    vocab = train_bpe("abcdef", vocab_size=500)
    assert vocab.merges == []


def test_tie_breaks_toward_smallest_bytes():
    # (a,a), (a,b), (b,b) all occur twice; lexicographically (a,a) wins
    vocab = train_bpe("aabbaabb", vocab_size=263)
    assert vocab.merges[0] == (A, A)


def test_training_is_deterministic():
    corpus = "timestamp=0.01 frame_len=122\n" * 50 + "timestamp=0.02 frame_len=124\n" * 50
    v1 = train_bpe(corpus, vocab_size=300)
    v2 = train_bpe(corpus, vocab_size=300)
    assert v1.merges == v2.merges
    assert len(v1.merges) > 0


def test_empty_corpus_raises():
    with pytest.raises(CorpusEmpty):
        train_bpe("", vocab_size=300)
    with pytest.raises(CorpusEmpty):
        train_bpe("<PAD><PAD><FLOW_END>", vocab_size=300)


def test_specials_map_to_reserved_ids():
    vocab = train_bpe("aaaa", vocab_size=263)
    seq = encode("<FLOW_BEGIN>aa<FLOW_END>", vocab)
    assert seq.ids[0] == 0
    assert seq.ids[-1] == 1
    assert decode(seq, vocab) == "<FLOW_BEGIN>aa<FLOW_END>"


def test_no_merge_across_special_boundary():
    vocab = train_bpe("abababab", vocab_size=263)
    assert vocab.merges == [(A, B)]
    seq = encode("a<PAD>b", vocab)
    assert seq.ids == [A, PAD_ID, B]


def test_no_learned_token_spans_lines():
    corpus = "ab\nab\nab\nab\n"
    vocab = train_bpe(corpus, vocab_size=400)
    for tid in range(BASE_VOCAB, vocab.size):
        tb = vocab.token_bytes(tid)
        assert b"\n" not in tb[:-1]  # newline only ever terminal


def test_compression_and_length_bound():
    corpus = "frame_len=122 window=512\n" * 200
    vocab = train_bpe(corpus, vocab_size=400)
    line = "frame_len=122 window=512\n"
    seq = encode(line, vocab)
    assert len(seq) < len(line)
    assert decode(seq, vocab) == line


def test_round_trip_on_corpus():
    corpus = "<FLOW_BEGIN>\nts=1 len=100\nts=2 len=102\n<FLOW_END>\n" * 30
    vocab = train_bpe(corpus, vocab_size=320)
    assert decode(encode(corpus, vocab), vocab) == corpus


def test_unknown_id_raises():
    vocab = train_bpe("aaaa", vocab_size=263)
    with pytest.raises(UnknownId):
        decode_bytes([900], vocab)


def test_encode_only_emits_defined_ids():
    vocab = train_bpe("abcabcabc", vocab_size=270)
    seq = encode("xyzabc<MASK>", vocab)
    assert all(0 <= t < vocab.size for t in seq.ids)


def test_save_load_round_trip(tmp_path):
    corpus = "dst_port=443 ttl=64\n" * 100
    vocab = train_bpe(corpus, vocab_size=300)
    path = tmp_path / "vocab.json"
    save_vocab(vocab, path)
    back = load_vocab(path)
    assert back.merges == vocab.merges
    assert back.vocab_size == vocab.vocab_size
    assert encode(corpus, back).ids == encode(corpus, vocab).ids


def test_vocab_validation():
    with pytest.raises(ValueError):
        BpeVocab(merges=[], vocab_size=100)
    with pytest.raises(ValueError):
        BpeVocab(merges=[(0, 7)], vocab_size=300)  # merge may not touch specials


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=0, max_size=200))
def test_byte_round_trip_random(data):
    vocab = _shared_vocab()
    assert decode_bytes(encode(data, vocab), vocab) == data


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=0, max_size=120))
def test_text_round_trip_random(text):
    vocab = _shared_vocab()
    assert decode_bytes(encode(text, vocab), vocab) == text.encode()


_VOCAB = None


def _shared_vocab():
    global _VOCAB
    if _VOCAB is None:
        corpus = "timestamp=0.01 frame_len=122 l4=tcp\n" * 60 + "aa bb cc dd\n" * 40
        _VOCAB = train_bpe(corpus, vocab_size=350)
    return _VOCAB
