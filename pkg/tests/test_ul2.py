import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edlm.errors import DataError, FormatError, VersionError
from edlm.ul2 import (MULTI_SPAN, PREFIX_LM_TAG, SINGLE_SUFFIX, STANDARD_BANK, DenoiserSpec, ExamplePair,
                      WhitespaceTokenizer, build_examples, check_pair, chunk, corrupt_spans,
                      corruption_stats, decode_shard, encode_shard, example_rng, random_composition,
                      read_shard, sample_denoiser, uncorrupt, vision_prefix_split, write_shard)
from edlm.vision import Image

SENT = list(range(1000, 1100))  # ids above every test token


def test_standard_bank():
    got = [(s.mu, s.r, s.span_policy, s.weight) for s in STANDARD_BANK]
    assert got == [(3, 0.15, MULTI_SPAN, 1), (12, 0.5, MULTI_SPAN, 1), (32, 0.15, MULTI_SPAN, 1),
                   (32, 0.5, MULTI_SPAN, 1), (None, 0.75, SINGLE_SUFFIX, 4)]
    assert STANDARD_BANK[4].mean_span(512) == 384


def test_suffix_example_length_8():
    toks = list(range(8))
    pair = corrupt_spans(toks, STANDARD_BANK[4], np.random.default_rng(0), SENT)
    assert pair.input == [0, 1, SENT[0]]
    assert pair.target == [SENT[0], 2, 3, 4, 5, 6, 7, SENT[1]]
    assert uncorrupt(pair, SENT) == toks


def test_span_count_length_100():
    for seed in range(20):
        pair = corrupt_spans(list(range(100)), STANDARD_BANK[0], np.random.default_rng(seed), SENT)
        in_s = [t for t in pair.input if t in SENT]
        assert len(in_s) == 5
        assert len(pair.target) - 6 == 15


def test_minimal_case():
    spec = DenoiserSpec(1, 0.25, MULTI_SPAN, 1)
    for seed in range(10):
        pair = corrupt_spans([7, 8, 9, 10], spec, np.random.default_rng(seed), SENT)
        assert sum(t in SENT for t in pair.input) == 1
        assert len(pair.target) == 3
        assert uncorrupt(pair, SENT) == [7, 8, 9, 10]


def test_infeasible_placement_falls_back_to_suffix():
    spec = DenoiserSpec(1, 0.9, MULTI_SPAN, 1)
    pair = corrupt_spans([1, 2, 3], spec, np.random.default_rng(0), SENT)
    assert pair.input == [SENT[0]]
    assert pair.target == [SENT[0], 1, 2, 3, SENT[1]]


def test_tiny_rate_still_corrupts_one_token():
    for seed in range(10):
        pair = corrupt_spans([4, 5], STANDARD_BANK[0], np.random.default_rng(seed), SENT)
        assert len(pair.target) == 3
        assert uncorrupt(pair, SENT) == [4, 5]


def test_span_count_capped_by_sentinels():
    sent = SENT[:8]
    pairs = [corrupt_spans(list(range(512)), STANDARD_BANK[0], np.random.default_rng(s), sent, 0)
             for s in range(50)]
    for pair in pairs:
        assert sum(t in sent for t in pair.input) == 7
    stats = corruption_stats(pairs, sent)
    assert stats.corruption_rate(0) == pytest.approx(0.15, abs=1e-3)


def test_short_trailing_chunk_is_kept():
    pairs = build_examples([list(range(514))] * 20, SENT, seed=0, max_len=512)
    assert len(pairs) == 40
    assert all(uncorrupt(p, SENT) == list(range(512, 514)) for p in pairs[1::2])


def test_short_input_rejected():
    with pytest.raises(DataError):
        corrupt_spans([1], STANDARD_BANK[0], np.random.default_rng(0), SENT)


def test_uncorrupt_rejects_malformed_targets():
    good = corrupt_spans(list(range(40)), STANDARD_BANK[1], np.random.default_rng(1), SENT)
    missing = ExamplePair(good.input, [t for t in good.target if t != SENT[1]], good.tag)
    with pytest.raises(DataError):
        uncorrupt(missing, SENT)
    with pytest.raises(DataError):
        uncorrupt(ExamplePair(good.input, good.target[1:], good.tag), SENT)


def test_random_composition():
    rng = np.random.default_rng(0)
    for total, parts in [(1, 1), (10, 10), (15, 5), (100, 7)]:
        c = random_composition(total, parts, rng)
        assert len(c) == parts and sum(c) == total and min(c) >= 1
    with pytest.raises(DataError):
        random_composition(3, 4, rng)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 999), min_size=2, max_size=300), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_round_trip_and_sentinel_structure(tokens, which, seed):
    spec = STANDARD_BANK[which]
    pair = corrupt_spans(tokens, spec, np.random.default_rng(seed), SENT, tag=which)
    check_pair(pair, SENT)
    in_s = [t for t in pair.input if t in SENT]
    assert in_s == SENT[:len(in_s)]
    tgt_s = [t for t in pair.target if t in SENT]
    assert tgt_s == SENT[:len(in_s) + 1]
    assert uncorrupt(pair, SENT) == tokens


def test_sampler_frequencies():
    rng = np.random.default_rng(2024)
    counts = np.zeros(5)
    for _ in range(80_000):
        counts[STANDARD_BANK.index(sample_denoiser(STANDARD_BANK, rng))] += 1
    np.testing.assert_allclose(counts / counts.sum(), [1 / 8] * 4 + [1 / 2], atol=0.02)
    w = np.array([s.weight for s in STANDARD_BANK])
    assert w.sum() == 8 and w[4] / w.sum() == 0.5


def test_single_entry_bank():
    rng = np.random.default_rng(0)
    assert all(sample_denoiser(STANDARD_BANK[1:2], rng) is STANDARD_BANK[1] for _ in range(50))


def test_vision_prefix_split():
    a, b = Image(index=0), Image(index=1)
    pair = vision_prefix_split([5, a, 6, 7])
    assert pair.input == [5, a] and pair.target == [6, 7] and pair.tag == PREFIX_LM_TAG
    pair = vision_prefix_split([a, 5, b, 6])
    assert pair.input == [a, 5, b] and pair.target == [6]
    assert vision_prefix_split([a]) is None
    with pytest.raises(DataError):
        vision_prefix_split([1, 2, 3])


def test_build_examples_chunks_long_documents():
    rng = np.random.default_rng(0)
    doc = [int(x) for x in rng.integers(0, 900, size=1000)]
    pairs = build_examples([doc], SENT, seed=3, max_len=128)
    assert len(pairs) == len(chunk(doc, 128)) == 8
    for p in pairs:
        assert len(p.input) <= 128 and len(p.target) <= 128
    rebuilt = [t for p in pairs for t in uncorrupt(p, SENT)]
    assert rebuilt == doc


def test_build_examples_routes_images_and_skips_empty_targets():
    img = Image(index=0)
    pairs = build_examples([[1, img, 2], [img], [4, 5, 6, 7]], SENT, seed=0)
    assert [p.tag == PREFIX_LM_TAG for p in pairs] == [True, False]


def test_build_examples_per_example_streams():
    rng = np.random.default_rng(1)
    docs = [[int(x) for x in rng.integers(0, 900, size=int(rng.integers(20, 80)))] for _ in range(30)]
    full = build_examples(docs, SENT, seed=9)
    assert build_examples(docs, SENT, seed=9) == full
    assert build_examples(docs[:10], SENT, seed=9) == full[:10]
    assert build_examples(docs, SENT, seed=10) != full
    # example i depends only on (seed, i)
    tag = full[4].tag
    rng4 = example_rng(9, 4)
    rng4.choice(5, p=np.array([1, 1, 1, 1, 4]) / 8)
    assert corrupt_spans(docs[4], STANDARD_BANK[tag], rng4, SENT, tag) == full[4]


def test_stats_on_small_sample():
    rng = np.random.default_rng(5)
    pairs = [corrupt_spans(list(range(512)), STANDARD_BANK[1], rng, SENT, 1) for _ in range(200)]
    stats = corruption_stats(pairs, SENT)
    assert stats.corruption_rate(1) == pytest.approx(0.5, abs=1e-3)
    assert stats.mean_span(1) == pytest.approx(12, rel=0.15)


def test_tokenizer_is_injective_and_maps_images():
    tok = WhitespaceTokenizer(max_id=10)
    ids = tok.encode("a b a c <img:3> b")
    assert ids == [0, 1, 0, 2, Image(index=3), 1]
    with pytest.raises(DataError):
        WhitespaceTokenizer(max_id=2).encode("x y z")


# shard files ----------------------------------------------------------------------


def _some_pairs():
    rng = np.random.default_rng(0)
    docs = [[int(x) for x in rng.integers(0, 900, size=int(rng.integers(2, 200)))] for _ in range(50)]
    docs.append([3, Image(index=7), 4, 300_000])
    return build_examples(docs, SENT, seed=1)


def test_shard_round_trip(tmp_path):
    pairs = _some_pairs()
    write_shard(pairs, tmp_path / "a.ul2s")
    back = read_shard(tmp_path / "a.ul2s")
    assert back == pairs
    write_shard(back, tmp_path / "b.ul2s")
    assert (tmp_path / "a.ul2s").read_bytes() == (tmp_path / "b.ul2s").read_bytes()


def test_empty_shard():
    raw = encode_shard([])
    assert decode_shard(raw) == []


def test_truncated_shard_reports_sizes():
    raw = encode_shard(_some_pairs())
    with pytest.raises(FormatError, match=f"expected {len(raw)} bytes, got {len(raw) - 5}"):
        decode_shard(raw[:-5])
    with pytest.raises(FormatError):
        decode_shard(raw[:7])


def test_shard_magic_and_version():
    raw = bytearray(encode_shard(_some_pairs()[:3]))
    bad = bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        decode_shard(bad)
    raw[4] = 9
    with pytest.raises(VersionError):
        decode_shard(bytes(raw))
