import base64
import random

import pytest
from hypothesis import given, settings, strategies as st

from deskllm.tokenizer import (
    ENDOFTEXT,
    RankFileParseError,
    Vocabulary,
    VocabularyIntegrityError,
    byte_vocabulary,
    compression_rate,
    decode,
    encode,
    load_vocabulary,
    pretokenize,
    save_vocabulary,
    train_vocabulary,
)


def byte_rank_lines():
    return [f"{base64.b64encode(bytes([b])).decode()} {b}" for b in range(256)]


def vocab_with(extra: list[bytes]) -> Vocabulary:
    merges = {bytes([b]): b for b in range(256)}
    for tok in extra:
        merges[tok] = len(merges)
    return Vocabulary(merges, {})


# -- pretokenize ----------------------------------------------------------------

@pytest.mark.parametrize("text, chunks", [
    ("12345", [b"1", b"2", b"3", b"4", b"5"]),
    ("", []),
    ("abc 42", [b"abc", b" ", b"4", b"2"]),
    ("x=3.14", [b"x", b"=", b"3", b".", b"1", b"4"]),
    ("hello world", [b"hello", b" world"]),
    ("don't", [b"don", b"'t"]),
])
def test_pretokenize_examples(text, chunks):
    assert pretokenize(text) == chunks


@given(st.binary(max_size=200))
def test_pretokenize_concatenates_to_input(data):
    assert b"".join(pretokenize(data)) == data


@given(st.text(alphabet=st.sampled_from("0123456789 ab.,\n-"), max_size=80))
def test_digits_are_singleton_chunks(text):
    for chunk in pretokenize(text):
        if any(c in b"0123456789" for c in chunk):
            assert len(chunk) == 1


# -- load / save ------------------------------------------------------------------

def test_load_minimal_byte_vocabulary():
    v = load_vocabulary(byte_rank_lines(), [ENDOFTEXT])
    assert v.base_vocab_size == 256
    assert v.specials[ENDOFTEXT] == 256


def test_duplicate_rank_is_integrity_error():
    lines = byte_rank_lines()
    lines[8] = f"{base64.b64encode(b'x').decode()} 7"
    with pytest.raises(VocabularyIntegrityError):
        load_vocabulary(lines + [f"{base64.b64encode(b'ab').decode()} 256"])


def test_missing_single_byte_is_integrity_error():
    lines = byte_rank_lines()[:-1] + [f"{base64.b64encode(b'ab').decode()} 255"]
    with pytest.raises(VocabularyIntegrityError, match="single-byte"):
        load_vocabulary(lines)


def test_malformed_line_reports_line_number():
    lines = byte_rank_lines()
    lines.insert(10, "not-a-valid-line")
    with pytest.raises(RankFileParseError) as exc:
        load_vocabulary(lines)
    assert exc.value.lineno == 11


def test_bad_base64_and_bad_rank():
    with pytest.raises(RankFileParseError):
        load_vocabulary(["!!!! 3"])
    with pytest.raises(RankFileParseError):
        load_vocabulary([f"{base64.b64encode(b'a').decode()} x1"])


def test_train_save_reload_round_trip(tmp_path, toy_docs):
    v = train_vocabulary(toy_docs, 256 + 1000)
    assert v.base_vocab_size == 1256
    path = tmp_path / "ranks.txt"
    save_vocabulary(v, path)
    again = load_vocabulary(path)
    assert again.merges == v.merges
    assert again.specials == v.specials


# -- encode / decode ----------------------------------------------------------------

def test_byte_vocab_encodes_raw_bytes():
    assert encode(byte_vocabulary(), "hi").ids == (ord("h"), ord("i"))


def test_single_merge_applies_twice():
    v = vocab_with([b"ab"])
    assert v.merges[b"ab"] == 256
    assert encode(v, "abab").ids == (256, 256)


def test_lowest_rank_merge_wins():
    # "bc" outranks "ab", so "abc" -> a + bc rather than ab + c
    v = vocab_with([b"bc", b"ab"])
    assert encode(v, "abc").ids == (ord("a"), 256)


def test_specials_only_when_allowed():
    v = byte_vocabulary()
    text = f"a{ENDOFTEXT}b"
    assert encode(v, text, allow_specials=True).ids == (97, v.specials[ENDOFTEXT], 98)
    plain = encode(v, text).ids
    assert v.specials[ENDOFTEXT] not in plain
    assert decode(v, plain) == text.encode()


def test_decode_empty_and_unknown():
    v = byte_vocabulary()
    assert decode(v, []) == b""
    with pytest.raises(ValueError):
        decode(v, [10**9])


def test_byte_len_recorded():
    assert encode(byte_vocabulary(), "héllo").byte_len == 6


@settings(max_examples=300, deadline=None)
@given(data=st.binary(max_size=1024))
def test_round_trip_arbitrary_bytes(small_vocab, data):
    assert decode(small_vocab, encode(small_vocab, data).ids) == data


def test_digit_atomicity_in_encoded_tokens(small_vocab):
    rng = random.Random(5)
    alphabet = "0123456789" * 4 + "abc xyz.,;-+\n"
    for _ in range(300):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 120)))
        for tid in encode(small_vocab, text).ids:
            tok = small_vocab.token_bytes(tid)
            if any(c in b"0123456789" for c in tok):
                assert len(tok) == 1


def test_encode_deterministic(small_vocab, toy_docs):
    a = encode(small_vocab, toy_docs[0]).ids
    b = encode(small_vocab, toy_docs[0]).ids
    assert a == b


# -- training ----------------------------------------------------------------------

def test_train_aaaa_learns_exactly_aa():
    v = train_vocabulary(["aaaa"], 257)
    new = [tok for tok, r in v.merges.items() if r >= 256]
    assert new == [b"aa"]


def test_target_256_is_byte_only():
    v = train_vocabulary(["some text here"], 256)
    assert v.base_vocab_size == 256


def test_target_below_256_rejected():
    with pytest.raises(ValueError):
        train_vocabulary(["x"], 255)


def test_stops_when_no_pair_repeats():
    v = train_vocabulary(["abcdef"], 300)
    assert v.base_vocab_size == 256


def test_tie_break_is_lexicographic():
    # "ab" and "cd" both occur twice; ("a","b") < ("c","d")
    v = train_vocabulary(["cd", "ab", "cd", "ab"], 257)
    assert [t for t, r in v.merges.items() if r == 256] == [b"ab"]


def test_chunk_order_does_not_change_merges():
    docs = ["the cat sat", "on the mat", "the hat"]
    a = train_vocabulary(docs, 270)
    b = train_vocabulary(list(reversed(docs)), 270)
    assert [t for t, _ in sorted(a.merges.items(), key=lambda kv: kv[1])] == \
           [t for t, _ in sorted(b.merges.items(), key=lambda kv: kv[1])]


def pair_frequency_oracle(docs):
    """Most frequent adjacent byte pair by brute-force counting."""
    counts = {}
    for d in docs:
        for chunk in pretokenize(d):
            for i in range(len(chunk) - 1):
                key = (chunk[i:i + 1], chunk[i + 1:i + 2])
                counts[key] = counts.get(key, 0) + 1
    best = max(counts.values())
    return min(k for k, n in counts.items() if n == best)


def test_first_merge_matches_frequency_oracle(toy_docs):
    v = train_vocabulary(toy_docs[:3], 257)
    a, b = pair_frequency_oracle(toy_docs[:3])
    assert v.token_bytes(256) == a + b


# -- compression ---------------------------------------------------------------------

def test_compression_self_is_one(small_vocab, toy_docs):
    assert compression_rate(small_vocab, toy_docs[:3], small_vocab) == 1.0


def test_compression_aa_merge_is_two():
    v = vocab_with([b"aa"])
    assert compression_rate(v, ["a" * 1000], vocab_with([])) == 2.0


def test_compression_empty_corpus_rejected(small_vocab):
    with pytest.raises(ValueError):
        compression_rate(small_vocab, [], small_vocab)


def test_adding_merges_never_increases_token_count(toy_docs):
    full = train_vocabulary(toy_docs[:5], 400)
    ordered = [t for t, _ in sorted(full.merges.items(), key=lambda kv: kv[1])]
    text = "\n".join(toy_docs[5:7])
    prev = None
    for k in range(256, 401, 16):
        v = Vocabulary({t: i for i, t in enumerate(ordered[:k])}, {})
        n = len(encode(v, text).ids)
        if prev is not None:
            assert n <= prev
        prev = n
