"""UL2 mixture-of-denoisers preprocessing and the example shard format.

Text documents are turned into ``(input, target)`` pairs by one of five span
corruption tasks; documents containing images use a prefix-LM split
instead. Removed spans are replaced by sentinel ids in the input and
reproduced in the target, each introduced by its sentinel::

    tokens  a b c d e f g h
    input   a S0 d e S1 h
    target  S0 b c S1 f g S2
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, VersionError
from .vision import Image, Item, expanded_length

MULTI_SPAN = "multi_span"
SINGLE_SUFFIX = "single_suffix"
PREFIX_LM_TAG = 5  # vision documents


@dataclass(frozen=True)
class DenoiserSpec:
    """One corruption task. ``mu`` is ``None`` for the suffix task, whose
    span length is derived from the document length."""

    mu: Optional[float]
    r: float
    span_policy: str
    weight: float
    name: str = ""

    def __post_init__(self):
        if not 0 < self.r < 1:
            raise DataError(f"corruption rate must be in (0, 1), got {self.r}")
        if self.span_policy not in (MULTI_SPAN, SINGLE_SUFFIX):
            raise DataError(f"unknown span policy {self.span_policy!r}")
        if self.span_policy == MULTI_SPAN and (self.mu is None or self.mu <= 0):
            raise DataError("multi-span denoisers need a positive mean span length")
        if self.weight <= 0:
            raise DataError(f"mixture weight must be positive, got {self.weight}")

    def mean_span(self, length: int) -> float:
        return self.r * length if self.mu is None else self.mu


STANDARD_BANK: tuple[DenoiserSpec, ...] = (
    DenoiserSpec(3, 0.15, MULTI_SPAN, 1, "R-3-0.15"),
    DenoiserSpec(12, 0.5, MULTI_SPAN, 1, "X-12-0.5"),
    DenoiserSpec(32, 0.15, MULTI_SPAN, 1, "R-32-0.15"),
    DenoiserSpec(32, 0.5, MULTI_SPAN, 1, "X-32-0.5"),
    DenoiserSpec(None, 0.75, SINGLE_SUFFIX, 4, "S-0.75"),
)


def tag_name(tag: int, bank: Sequence[DenoiserSpec] = STANDARD_BANK) -> str:
    if tag == PREFIX_LM_TAG:
        return "prefix-lm"
    return bank[tag].name or f"denoiser-{tag}"


@dataclass
class ExamplePair:
    input: list[Item]
    target: list[int]
    tag: int = 0

    def __eq__(self, other):
        return (isinstance(other, ExamplePair) and self.tag == other.tag
                and list(self.input) == list(other.input) and list(self.target) == list(other.target))


# --------------------------------------------------------------------------
# corruption


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per example, so sharding does not change results."""
    return np.random.default_rng([seed, index])


def random_composition(total: int, parts: int, rng: np.random.Generator) -> list[int]:
    """Uniformly random split of ``total`` into ``parts`` positive integers."""
    if parts < 1 or total < parts:
        raise DataError(f"cannot split {total} into {parts} positive parts")
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False)) + 1 if parts > 1 else np.array([], int)
    edges = np.concatenate([[0], cuts, [total]])
    return [int(x) for x in np.diff(edges)]


def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    lo = math.floor(x)
    return lo + int(rng.random() < x - lo)


def _suffix_pair(tokens: list[int], r: float, sentinels: Sequence[int], tag: int) -> ExamplePair:
    k = round(r * len(tokens))
    k = min(max(k, 1), len(tokens))
    prefix, suffix = tokens[:len(tokens) - k], tokens[len(tokens) - k:]
    return ExamplePair(prefix + [sentinels[0]], [sentinels[0]] + suffix + [sentinels[1]], tag)


def corrupt_spans(tokens: Sequence[int], spec: DenoiserSpec, rng: np.random.Generator,
                  sentinels: Sequence[int], tag: int = 0) -> ExamplePair:
    """Apply one denoiser to a token list.

    Multi-span: ``round(r*L)`` noise tokens (at least one) in about
    ``noise/mu`` spans (the count is rounded stochastically so its
    expectation is exact, and capped by the sentinels available), span
    lengths a uniform random composition, spans separated by at least one
    kept token. If the spans cannot be separated the suffix task is used.
    """
    tokens = [int(t) for t in tokens]
    L = len(tokens)
    if L < 2:
        raise DataError(f"need at least 2 tokens to corrupt, got {L}")
    if len(sentinels) < 2:
        raise DataError("need at least two sentinel ids")
    if spec.span_policy == SINGLE_SUFFIX:
        return _suffix_pair(tokens, spec.r, sentinels, tag)

    num_noise = max(round(spec.r * L), 1)
    n = max(1, min(_stochastic_round(num_noise / spec.mu, rng), num_noise, len(sentinels) - 1))
    kept = L - num_noise
    if n - 1 > kept:
        return _suffix_pair(tokens, spec.r, sentinels, tag)

    spans = random_composition(num_noise, n, rng)
    # n+1 gaps: interior ones hold >= 1 token, the two ends >= 0
    gaps = [g - 1 for g in random_composition(kept - (n - 1) + n + 1, n + 1, rng)]
    for j in range(1, n):
        gaps[j] += 1

    inp: list[int] = []
    tgt: list[int] = []
    pos = 0
    for k in range(n):
        inp.extend(tokens[pos:pos + gaps[k]])
        pos += gaps[k]
        inp.append(sentinels[k])
        tgt.append(sentinels[k])
        tgt.extend(tokens[pos:pos + spans[k]])
        pos += spans[k]
    inp.extend(tokens[pos:])
    tgt.append(sentinels[n])
    return ExamplePair(inp, tgt, tag)


def _split_target(target: Sequence[int], sentinel_set: set[int]) -> list[tuple[int, list[int]]]:
    if not target or target[0] not in sentinel_set:
        raise DataError("target must start with a sentinel")
    parts: list[tuple[int, list[int]]] = []
    for t in target:
        if t in sentinel_set:
            parts.append((t, []))
        else:
            parts[-1][1].append(t)
    return parts


def check_pair(pair: ExamplePair, sentinels: Sequence[int], max_len: Optional[int] = None) -> None:
    """Raise :class:`DataError` unless the pair has a well-formed sentinel structure."""
    sset = set(sentinels)
    if max_len is not None:
        if expanded_length(pair.input) > max_len or len(pair.target) > max_len:
            raise DataError(f"pair exceeds the length cap of {max_len}")
    if pair.tag == PREFIX_LM_TAG:
        return
    in_s = [t for t in pair.input if not isinstance(t, Image) and t in sset]
    parts = _split_target(pair.target, sset)
    tgt_s = [s for s, _ in parts]
    if any(b <= a for a, b in zip(in_s, in_s[1:])):
        raise DataError("input sentinels are not strictly increasing")
    if tgt_s[:-1] != in_s:
        raise DataError(f"target sentinels {tgt_s[:-1]} do not match input sentinels {in_s}")
    if parts[-1][1]:
        raise DataError("target does not end with a closing sentinel")
    if any(not span for _, span in parts[:-1]):
        raise DataError("empty span in target")


def uncorrupt(pair: ExamplePair, sentinels: Sequence[int]) -> list[Item]:
    """Splice the target spans back into the input at their sentinels."""
    check_pair(pair, sentinels)
    if pair.tag == PREFIX_LM_TAG:
        return list(pair.input) + list(pair.target)
    spans = dict(_split_target(pair.target, set(sentinels)))
    out: list[Item] = []
    for item in pair.input:
        if not isinstance(item, Image) and item in spans:
            out.extend(spans[item])
        else:
            out.append(item)
    return out


def sample_denoiser(bank: Sequence[DenoiserSpec], rng: np.random.Generator) -> DenoiserSpec:
    return bank[_draw_index(bank, rng)]


def _draw_index(bank: Sequence[DenoiserSpec], rng: np.random.Generator) -> int:
    w = np.array([s.weight for s in bank], dtype=np.float64)
    return int(rng.choice(len(bank), p=w / w.sum()))


def vision_prefix_split(doc: Sequence[Item]) -> Optional[ExamplePair]:
    """Everything up to the last image is input, the trailing text is target.

    Returns ``None`` when nothing follows the last image.
    """
    last = max((i for i, it in enumerate(doc) if isinstance(it, Image)), default=None)
    if last is None:
        raise DataError("vision prefix split needs a document with an image")
    target = [int(t) for t in doc[last + 1:]]
    if not target:
        return None
    return ExamplePair(list(doc[:last + 1]), target, PREFIX_LM_TAG)


def chunk(tokens: Sequence[int], max_len: int) -> list[list[int]]:
    return [list(tokens[i:i + max_len]) for i in range(0, len(tokens), max_len)]


def build_examples(docs: Iterable[Sequence[Item]], sentinels: Sequence[int], seed: int,
                   bank: Sequence[DenoiserSpec] = STANDARD_BANK, max_len: int = 16_384) -> list[ExamplePair]:
    """Preprocess documents; example ``i`` draws from ``example_rng(seed, i)``.

    Text documents longer than ``max_len`` are chunked before corruption.
    Chunks shorter than two tokens and image documents without trailing
    text are dropped.
    """
    pairs: list[ExamplePair] = []
    index = 0
    for doc in docs:
        if any(isinstance(it, Image) for it in doc):
            pair = vision_prefix_split(doc)
            if pair is not None:
                check_pair(pair, sentinels, max_len)
                pairs.append(pair)
            continue
        for piece in chunk(doc, max_len):
            if len(piece) < 2:
                continue
            rng = example_rng(seed, index)
            index += 1
            tag = _draw_index(bank, rng)
            pair = corrupt_spans(piece, bank[tag], rng, sentinels, tag)
            check_pair(pair, sentinels, max_len)
            pairs.append(pair)
    return pairs


@dataclass
class CorruptionStats:
    counts: dict[int, int] = field(default_factory=dict)
    noise_tokens: dict[int, int] = field(default_factory=dict)
    source_tokens: dict[int, int] = field(default_factory=dict)
    spans: dict[int, int] = field(default_factory=dict)

    def add(self, pair: ExamplePair, sentinels: Sequence[int]) -> None:
        t = pair.tag
        self.counts[t] = self.counts.get(t, 0) + 1
        if t == PREFIX_LM_TAG:
            return
        sset = set(sentinels)
        n_spans = sum(1 for x in pair.target if x in sset) - 1
        noise = len(pair.target) - n_spans - 1
        source = len(pair.input) - n_spans + noise
        self.noise_tokens[t] = self.noise_tokens.get(t, 0) + noise
        self.source_tokens[t] = self.source_tokens.get(t, 0) + source
        self.spans[t] = self.spans.get(t, 0) + n_spans

    def corruption_rate(self, tag: Optional[int] = None) -> float:
        tags = [tag] if tag is not None else list(self.noise_tokens)
        src = sum(self.source_tokens.get(t, 0) for t in tags)
        return sum(self.noise_tokens.get(t, 0) for t in tags) / src if src else 0.0

    def mean_span(self, tag: Optional[int] = None) -> float:
        tags = [tag] if tag is not None else list(self.noise_tokens)
        spans = sum(self.spans.get(t, 0) for t in tags)
        return sum(self.noise_tokens.get(t, 0) for t in tags) / spans if spans else 0.0

    def share(self, tag: int) -> float:
        total = sum(self.counts.values())
        return self.counts.get(tag, 0) / total if total else 0.0


def corruption_stats(pairs: Iterable[ExamplePair], sentinels: Sequence[int]) -> CorruptionStats:
    stats = CorruptionStats()
    for p in pairs:
        stats.add(p, sentinels)
    return stats


# --------------------------------------------------------------------------
# text stub


class WhitespaceTokenizer:
    """Injective word -> id map assigned in first-seen order.

    ``<img:K>`` words become :class:`Image` items referring to fixture
    image ``K``.
    """

    def __init__(self, max_id: int):
        self.max_id = max_id
        self.vocab: dict[str, int] = {}

    def encode(self, text: str) -> list[Item]:
        out: list[Item] = []
        for word in text.split():
            if word.startswith("<img:") and word.endswith(">"):
                out.append(Image(index=int(word[5:-1])))
                continue
            if word not in self.vocab:
                if len(self.vocab) >= self.max_id:
                    raise DataError(f"vocabulary exhausted after {self.max_id} distinct words")
                self.vocab[word] = len(self.vocab)
            out.append(self.vocab[word])
        return out


# --------------------------------------------------------------------------
# shard file
#
# b"UL2S" | u16 version | u32 count | u64 payload bytes | payload
# example: u8 tag | varint items | items | varint target len | varint ids
# item:    u8 0, varint token id  or  u8 1, varint fixture image index

SHARD_MAGIC = b"UL2S"
SHARD_VERSION = 1
_SHARD_HEADER = struct.Struct("<4sHIQ")


def _put_varint(buf: bytearray, value: int) -> None:
    if value < 0:
        raise DataError(f"cannot encode negative value {value}")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.append(byte | 0x80)
        else:
            buf.append(byte)
            return


class _Reader:
    def __init__(self, raw: bytes, offset: int):
        self.raw = raw
        self.pos = offset

    def byte(self) -> int:
        if self.pos >= len(self.raw):
            raise FormatError(f"unexpected end of shard at offset {self.pos}")
        b = self.raw[self.pos]
        self.pos += 1
        return b

    def varint(self) -> int:
        shift = value = 0
        start = self.pos
        while True:
            b = self.byte()
            value |= (b & 0x7F) << shift
            if not b & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise FormatError(f"varint too long at offset {start}")


def encode_shard(pairs: Sequence[ExamplePair]) -> bytes:
    body = bytearray()
    for p in pairs:
        if not 0 <= p.tag < 256:
            raise DataError(f"tag {p.tag} does not fit in a byte")
        body.append(p.tag)
        _put_varint(body, len(p.input))
        for it in p.input:
            if isinstance(it, Image):
                if it.index is None:
                    raise DataError("images must carry a fixture index to be written to a shard")
                body.append(1)
                _put_varint(body, it.index)
            else:
                body.append(0)
                _put_varint(body, int(it))
        _put_varint(body, len(p.target))
        for t in p.target:
            _put_varint(body, int(t))
    return _SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, len(pairs), len(body)) + bytes(body)


def decode_shard(raw: bytes) -> list[ExamplePair]:
    if len(raw) < _SHARD_HEADER.size:
        raise FormatError(f"shard truncated: expected at least {_SHARD_HEADER.size} header bytes, "
                          f"got {len(raw)}")
    magic, version, count, payload = _SHARD_HEADER.unpack_from(raw)
    if magic != SHARD_MAGIC:
        raise FormatError(f"bad shard magic {magic!r} at offset 0")
    if version != SHARD_VERSION:
        raise VersionError(f"shard version {version}, expected {SHARD_VERSION}")
    expected = _SHARD_HEADER.size + payload
    if len(raw) != expected:
        raise FormatError(f"shard size mismatch: expected {expected} bytes, got {len(raw)}")
    rd = _Reader(raw, _SHARD_HEADER.size)
    pairs = []
    for _ in range(count):
        tag = rd.byte()
        items: list[Item] = []
        for _ in range(rd.varint()):
            kind_at = rd.pos
            kind = rd.byte()
            if kind == 0:
                items.append(rd.varint())
            elif kind == 1:
                items.append(Image(index=rd.varint()))
            else:
                raise FormatError(f"unknown item tag {kind} at offset {kind_at}")
        target = [rd.varint() for _ in range(rd.varint())]
        pairs.append(ExamplePair(items, target, tag))
    if rd.pos != len(raw):
        raise FormatError(f"{len(raw) - rd.pos} trailing bytes after {count} examples at offset {rd.pos}")
    return pairs


def write_shard(pairs: Sequence[ExamplePair], path) -> None:
    Path(path).write_bytes(encode_shard(pairs))


def read_shard(path) -> list[ExamplePair]:
    return decode_shard(Path(path).read_bytes())


def iter_shards(paths: Iterable) -> Iterator[ExamplePair]:
    for p in paths:
        yield from read_shard(p)
