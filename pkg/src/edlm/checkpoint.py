"""Checkpoints: the EDCK file format, decoder-only adaptation, and averaging.

File layout (all integers little-endian)::

    b"EDCK" | u16 version | u32 metadata length | metadata (canonical JSON)
    per tensor: u32 name length | name (utf-8) | u8 rank | rank x u64 extents
                | u8 dtype code | raw payload
    u32 CRC-32 of all tensor-record bytes
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import ChecksumError, ConfigError, FormatError, ShapeError, VersionError
from .model import Model, decoder_only_shapes, init_param, param_shapes
from .tensor import Tensor

MAGIC = b"EDCK"
VERSION = 1
ENCODER_DECODER = "encoder_decoder"
DECODER_ONLY = "decoder_only"

_HEADER = struct.Struct("<4sHI")
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    tensors: dict[str, Tensor]
    config: ModelConfig
    arch: str = ENCODER_DECODER
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def dtype(self) -> str:
        dtypes = {t.dtype.name for t in self.tensors.values()}
        return dtypes.pop() if len(dtypes) == 1 else "mixed"

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.arch == ENCODER_DECODER:
            return param_shapes(self.config)
        if self.arch == DECODER_ONLY:
            shapes = decoder_only_shapes(self.config)
            if "vision_proj" in self.tensors:
                shapes["vision_proj"] = (self.config.d_vision, self.config.d_model)
            return shapes
        raise FormatError(f"unknown architecture {self.arch!r}")

    def validate(self) -> None:
        expected = self.expected_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"checkpoint tensors do not match config: missing {missing[:3]}, "
                             f"unexpected {extra[:3]}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, config gives {shape}")

    def metadata(self) -> dict:
        return {"arch": self.arch, "config": self.config.to_dict(), "dtype": self.dtype,
                "extra": self.extra, "step": self.step, "tensors": len(self.tensors)}

    @classmethod
    def from_model(cls, model: Model, step: int = 0) -> "Checkpoint":
        return cls(dict(model.params), model.cfg, ENCODER_DECODER, step)

    def to_model(self) -> Model:
        if self.arch != ENCODER_DECODER:
            raise ConfigError(f"cannot build an encoder-decoder model from a {self.arch} checkpoint")
        return Model(self.config, dict(self.tensors))

    def manifest(self) -> list[str]:
        lines = [f"arch={self.arch} step={self.step} dtype={self.dtype} tensors={len(self.tensors)}"]
        for name, t in self.tensors.items():
            lines.append(f"{name}\t{'x'.join(map(str, t.shape))}\t{t.dtype.name}\t{t.size}")
        lines.append(f"total_elements={sum(t.size for t in self.tensors.values())}")
        return lines


# --------------------------------------------------------------------------
# file format


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    meta = _canonical(ckpt.metadata())
    body = bytearray()
    for name, t in ckpt.tensors.items():
        dt = t.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"unsupported dtype {t.dtype} for {name}")
        raw_name = name.encode()
        body += struct.pack("<I", len(raw_name)) + raw_name
        body += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
        body += struct.pack("<B", _DTYPE_CODES[dt])
        body += np.ascontiguousarray(t.data, dtype=dt).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return _HEADER.pack(MAGIC, VERSION, len(meta)) + meta + bytes(body) + struct.pack("<I", crc)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _HEADER.size + 4:
        raise FormatError(f"checkpoint truncated: {len(raw)} bytes")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"not an EDCK checkpoint (magic {magic!r})")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this reader handles {VERSION}")
    body_start = _HEADER.size + meta_len
    if body_start + 4 > len(raw):
        raise FormatError(f"metadata length {meta_len} runs past end of file ({len(raw)} bytes)")
    body = raw[body_start:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint payload CRC-32 mismatch")
    try:
        meta = json.loads(raw[_HEADER.size:body_start].decode())
        cfg = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint metadata: {exc}") from None

    tensors: dict[str, Tensor] = {}
    pos = 0
    try:
        for _ in range(meta["tensors"]):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            (code,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dt = _CODE_DTYPES[code]
            nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise FormatError(f"tensor {name} payload runs past end of records")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
            pos += nbytes
            tensors[name] = Tensor._wrap(arr.astype(dt.newbyteorder("="), copy=True))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed tensor record at byte {body_start + pos}: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unread bytes after the last tensor record")
    ckpt = Checkpoint(tensors, cfg, meta["arch"], meta["step"], meta.get("extra", {}))
    ckpt.validate()
    return ckpt


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# adaptation and averaging


def decoder_only_checkpoint(params: dict[str, Tensor], cfg: ModelConfig, step: int = 0) -> Checkpoint:
    ckpt = Checkpoint(dict(params), cfg, DECODER_ONLY, step)
    ckpt.validate()
    return ckpt


def _source_name(name: str) -> Optional[str]:
    if name in ("embedding", "encoder.embedding", "decoder.embedding"):
        return "embedding"
    if name in ("encoder.final_norm", "decoder.final_norm"):
        return "final_norm"
    for stack in ("encoder.", "decoder."):
        if name.startswith(stack + "layers."):
            return name[len(stack):]
    return None


def adapt_from_decoder_only(src: Checkpoint, tgt_cfg: ModelConfig, seed: int = 0) -> Checkpoint:
    """Initialise an encoder-decoder checkpoint from a decoder-only one.

    Every encoder and decoder block is a copy of the matching source block;
    the decoder's merged attention reuses the source self-attention
    weights. The embedding is copied once. The vision projection is copied
    when the source has one, otherwise freshly initialised.
    """
    if src.arch != DECODER_ONLY:
        raise ConfigError(f"adaptation source must be decoder-only, got {src.arch}")
    if not tgt_cfg.merged_attention:
        raise ConfigError("adaptation targets the merged-attention decoder")
    used: set[str] = set()
    out: dict[str, Tensor] = {}
    dtype = src.tensors["embedding"].dtype
    for name, shape in param_shapes(tgt_cfg).items():
        if name == "vision_proj" and "vision_proj" not in src.tensors:
            out[name] = init_param(name, shape, seed, tgt_cfg.d_model, dtype)
            continue
        sname = "vision_proj" if name == "vision_proj" else _source_name(name)
        if sname not in src.tensors:
            raise ShapeError(f"{name}: source has no tensor {sname!r}")
        s = src.tensors[sname]
        if s.shape != shape:
            raise ShapeError(f"{name}: source {sname} has shape {s.shape}, target needs {shape}")
        out[name] = Tensor._wrap(s.data.copy())
        used.add(sname)
    unused = [n for n in src.tensors if n not in used]
    if unused:
        raise ShapeError(f"source tensor {unused[0]} has no counterpart in the target config")
    return Checkpoint(out, tgt_cfg, ENCODER_DECODER, 0, {"adapted_from_step": src.step})


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Elementwise mean, accumulated in float64.

    Values are summed in sorted order so the result does not depend on the
    order of ``ckpts``; entries that agree across all inputs are returned
    unchanged.
    """
    if not ckpts:
        raise ConfigError("need at least one checkpoint to average")
    first = ckpts[0]
    names = list(first.tensors)
    for c in ckpts[1:]:
        if set(c.tensors) != set(names):
            diff = sorted(set(c.tensors) ^ set(names))
            raise ShapeError(f"checkpoint name sets differ, e.g. {diff[:3]}")
        for n in names:
            if c.tensors[n].shape != first.tensors[n].shape:
                raise ShapeError(f"{n}: shapes {c.tensors[n].shape} and {first.tensors[n].shape} differ")
    out = {}
    k = len(ckpts)
    for n in names:
        stack = np.stack([c.tensors[n].data.astype(np.float64) for c in ckpts])
        same = (stack == stack[0]).all(axis=0)
        stack.sort(axis=0)
        mean = stack.sum(axis=0) / k
        mean = np.where(same, stack[0], mean)
        out[n] = Tensor._wrap(mean.astype(first.tensors[n].dtype))
    return Checkpoint(out, first.config, first.arch, max(c.step for c in ckpts), dict(first.extra))
