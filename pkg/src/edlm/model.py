"""Encoder-decoder stacks with tied embeddings and merged decoder attention.

Parameters live in one flat ``name -> Tensor`` map. With tied embeddings the
single ``embedding`` entry serves the encoder input lookup, the decoder input
lookup and the output projection.

Every block is a sandwich: ``x + post_norm(sublayer(pre_norm(x)))``.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import (
    AttentionWeights,
    causal_self_attention,
    cross_attention,
    encoder_self_attention,
    merged_attention,
)
from .config import TOKENS_PER_IMAGE, ModelConfig
from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    Tensor,
    concat,
    gelu,
    matmul,
    reshape,
    rms_norm,
    stop_gradient,
    take,
    transpose,
    zeros,
)
from .vision import Image, MixedSequence, expanded_length, resolve

ATTN_KEYS = ("q", "k", "v", "o", "q_norm", "k_norm")
FROZEN = ("vision_proj",)


# --------------------------------------------------------------------------
# parameter layout


def _attn_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dh = cfg.d_model, cfg.d_head
    return {
        "q": (d, cfg.n_q_heads * dh),
        "k": (d, cfg.n_kv_heads * dh),
        "v": (d, cfg.n_kv_heads * dh),
        "o": (cfg.n_q_heads * dh, d),
        "q_norm": (dh,),
        "k_norm": (dh,),
    }


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d_model
    out = {"pre_attn_norm": (d,)}
    out.update({f"attn.{k}": s for k, s in _attn_shapes(cfg).items()})
    out.update({
        "post_attn_norm": (d,),
        "pre_ffn_norm": (d,),
        "ffn.gate": (d, cfg.d_ffn),
        "ffn.up": (d, cfg.d_ffn),
        "ffn.down": (cfg.d_ffn, d),
        "post_ffn_norm": (d,),
    })
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes of the encoder-decoder model."""
    V, d = cfg.vocab_size, cfg.d_model
    out: dict[str, tuple[int, ...]] = {}
    if cfg.tied_embeddings:
        out["embedding"] = (V, d)
    else:
        out["encoder.embedding"] = (V, d)
        out["decoder.embedding"] = (V, d)
    out["vision_proj"] = (cfg.d_vision, d)
    block = _block_shapes(cfg)
    for stack in ("encoder", "decoder"):
        for i in range(cfg.n_layers):
            prefix = f"{stack}.layers.{i}."
            out.update({prefix + k: s for k, s in block.items()})
            if stack == "decoder" and not cfg.merged_attention and cfg.has_cross(i):
                out[prefix + "pre_cross_norm"] = (d,)
                out.update({prefix + f"cross.{k}": s for k, s in _attn_shapes(cfg).items()})
                out[prefix + "post_cross_norm"] = (d,)
        out[f"{stack}.final_norm"] = (d,)
    return out


def decoder_only_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Layout of a decoder-only source model with the same block structure."""
    out = {"embedding": (cfg.vocab_size, cfg.d_model)}
    block = _block_shapes(cfg)
    for i in range(cfg.n_layers):
        out.update({f"layers.{i}.{k}": s for k, s in block.items()})
    out["final_norm"] = (cfg.d_model,)
    return out


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_param(name: str, shape, seed: int, d_model: int, dtype=np.float64) -> Tensor:
    """Initial value of one parameter; each name has its own RNG stream."""
    if name.endswith("norm"):
        return Tensor._wrap(np.ones(shape, dtype=dtype))
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    std = 1.0 / np.sqrt(d_model) if name.endswith("embedding") else 0.02
    return Tensor._wrap(_truncated_normal(rng, shape, std).astype(dtype))


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor] = field(repr=False)

    def __post_init__(self):
        expected = param_shapes(self.cfg)
        if list(self.params) != list(expected):
            missing = [k for k in expected if k not in self.params]
            extra = [k for k in self.params if k not in expected]
            if missing or extra:
                raise ShapeError(f"parameter names do not match config: missing {missing[:3]}, "
                                 f"unexpected {extra[:3]}")
            self.params = {k: self.params[k] for k in expected}
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ShapeError(f"{k} has shape {self.params[k].shape}, config expects {shape}")

    @property
    def dtype(self):
        return self.params["vision_proj"].dtype

    def embedding(self, stack: str) -> Tensor:
        if self.cfg.tied_embeddings:
            return self.params["embedding"]
        return self.params[f"{stack}.embedding"]

    def attn(self, prefix: str) -> AttentionWeights:
        p = self.params
        return AttentionWeights(*(p[prefix + k] for k in ATTN_KEYS),
                                n_q_heads=self.cfg.n_q_heads, n_kv_heads=self.cfg.n_kv_heads)

    def frozen_names(self) -> list[str]:
        return list(FROZEN) if self.cfg.freeze_vision else []

    def trainable(self) -> dict[str, Tensor]:
        frozen = set(self.frozen_names())
        return {k: v for k, v in self.params.items() if k not in frozen}

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        return Model(self.cfg, {**self.params, **params})

    def num_elements(self) -> int:
        return sum(t.size for t in self.params.values())


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    """Fresh model: truncated normal (std 0.02) weights, embeddings std 1/sqrt(d), unit norm gains."""
    cfg.validate()
    params = {name: init_param(name, shape, seed, cfg.d_model, dtype)
              for name, shape in param_shapes(cfg).items()}
    return Model(cfg, params)


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts; independent of :func:`param_shapes`."""
    d, dh, hq, hkv = cfg.d_model, cfg.d_head, cfg.n_q_heads, cfg.n_kv_heads
    attn = 2 * d * hq * dh + 2 * d * hkv * dh + 2 * dh
    layer = attn + 3 * d * cfg.d_ffn + 4 * d
    encoder = cfg.n_layers * layer + d
    decoder = cfg.n_layers * layer + d
    if not cfg.merged_attention:
        n_cross = cfg.n_layers if cfg.cross_attention_layers == "all" else cfg.n_global_layers()
        decoder += n_cross * (attn + 2 * d)
    out = {
        "embedding": cfg.vocab_size * d * (1 if cfg.tied_embeddings else 2),
        "encoder": encoder,
        "decoder": decoder,
        "vision_projection": cfg.d_vision * d,
    }
    out["total"] = sum(out.values())
    return out


# --------------------------------------------------------------------------
# forward pass


def _ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    gate = gelu(matmul(x, p[prefix + "ffn.gate"]))
    return matmul(gate * matmul(x, p[prefix + "ffn.up"]), p[prefix + "ffn.down"])


def embed_tokens(model: Model, ids, stack: str) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return take(model.embedding(stack), ids) * float(np.sqrt(model.cfg.d_model))


def embed_sequence(model: Model, seq: MixedSequence, images: Optional[np.ndarray] = None) -> Tensor:
    """Encoder input rows ``[n, d]`` for a mixed token/image sequence."""
    pieces: list[Tensor] = []
    run: list[int] = []
    for item in seq:
        if isinstance(item, Image):
            if run:
                pieces.append(embed_tokens(model, run, "encoder"))
                run = []
            emb = resolve(item, images)
            if not isinstance(emb, Tensor):
                emb = Tensor(emb, model.dtype)
            if emb.shape != (TOKENS_PER_IMAGE, model.cfg.d_vision):
                raise ShapeError(f"image embedding {emb.shape}, expected "
                                 f"{(TOKENS_PER_IMAGE, model.cfg.d_vision)}")
            proj = matmul(emb, model.params["vision_proj"])
            pieces.append(stop_gradient(proj) if model.cfg.freeze_vision else proj)
        else:
            run.append(int(item))
    if run:
        pieces.append(embed_tokens(model, run, "encoder"))
    return pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)


def encoder_stack(model: Model, x: Tensor, key_valid=None) -> Tensor:
    """Run the encoder on embedded inputs ``x [B, n, d]``."""
    cfg, p, eps = model.cfg, model.params, model.cfg.norm_eps
    for i, kind in enumerate(cfg.layer_kinds()):
        pre = f"encoder.layers.{i}."
        h = rms_norm(x, p[pre + "pre_attn_norm"], eps)
        h = encoder_self_attention(h, model.attn(pre + "attn."), kind, cfg.rope(kind), key_valid=key_valid,
                                   full_visibility=cfg.encoder_full_visibility, eps=eps)
        x = x + rms_norm(h, p[pre + "post_attn_norm"], eps)
        h = _ffn(p, pre, rms_norm(x, p[pre + "pre_ffn_norm"], eps))
        x = x + rms_norm(h, p[pre + "post_ffn_norm"], eps)
    return rms_norm(x, p["encoder.final_norm"], eps)


def decoder_stack(model: Model, ids, H: Tensor, key_valid=None, probe: Optional[dict] = None) -> Tensor:
    """Decoder logits ``[B, m, V]`` for input ids ``[B, m]`` given ``H [B, n, d]``.

    With ``probe`` set, each layer reads its own recorded view of ``H``
    (``probe["H"][i]``) so gradients can be attributed per layer.
    """
    cfg, p, eps = model.cfg, model.params, model.cfg.norm_eps
    ids = np.asarray(ids, dtype=np.int64)
    B, m = ids.shape
    n = H.shape[1]
    if H.shape[0] != B:
        raise ShapeError(f"batch mismatch: ids {ids.shape}, H {H.shape}")
    if cfg.position_scheme == "continued":
        lengths = np.full(B, n) if key_valid is None else np.asarray(key_valid).sum(axis=1)
        dec_pos = lengths[:, None] + np.arange(m)[None, :]
    else:
        dec_pos = np.broadcast_to(np.arange(m), (B, m))
    enc_pos = np.arange(n)
    empty = zeros((B, 0, cfg.d_model), model.dtype)
    no_pos = np.zeros((B, 0))

    x = embed_tokens(model, ids, "decoder")
    for i, kind in enumerate(cfg.layer_kinds()):
        pre = f"decoder.layers.{i}."
        rope = cfg.rope(kind)
        Hi = H
        if probe is not None:
            Hi = reshape(H, H.shape)
            probe.setdefault("H", []).append(Hi)
        h = rms_norm(x, p[pre + "pre_attn_norm"], eps)
        if cfg.merged_attention and cfg.has_cross(i):
            h = merged_attention(h, Hi, model.attn(pre + "attn."), kind, rope, dec_pos, enc_pos,
                                 key_valid=key_valid, eps=eps)
        else:
            h = merged_attention(h, empty, model.attn(pre + "attn."), kind, rope, dec_pos, no_pos, eps=eps)
        x = x + rms_norm(h, p[pre + "post_attn_norm"], eps)
        if not cfg.merged_attention and cfg.has_cross(i):
            h = rms_norm(x, p[pre + "pre_cross_norm"], eps)
            h = cross_attention(h, Hi, model.attn(pre + "cross."), rope, dec_pos, enc_pos,
                                key_valid=key_valid, eps=eps)
            x = x + rms_norm(h, p[pre + "post_cross_norm"], eps)
        h = _ffn(p, pre, rms_norm(x, p[pre + "pre_ffn_norm"], eps))
        x = x + rms_norm(h, p[pre + "post_ffn_norm"], eps)
    x = rms_norm(x, p["decoder.final_norm"], eps)
    return matmul(x, transpose(model.embedding("decoder")))


def _check_length(model: Model, n: int) -> None:
    if n < 1:
        raise DataError("cannot encode an empty sequence")
    if n > model.cfg.max_seq:
        raise DataError(f"sequence of expanded length {n} exceeds max_seq={model.cfg.max_seq}")


def encode(model: Model, seq: MixedSequence, images: Optional[np.ndarray] = None) -> Tensor:
    """Encoder output ``H [n, d]`` where ``n`` counts 256 rows per image."""
    n = expanded_length(seq)
    _check_length(model, n)
    x = embed_sequence(model, seq, images)
    H = encoder_stack(model, reshape(x, (1,) + x.shape))
    return reshape(H, H.shape[1:])


def encode_batch(model: Model, seqs: Sequence[MixedSequence],
                 images: Optional[np.ndarray] = None) -> tuple[Tensor, np.ndarray]:
    """Right-padded batch encoding; returns ``H [B, n_max, d]`` and the validity mask."""
    embs = []
    for seq in seqs:
        _check_length(model, expanded_length(seq))
        embs.append(embed_sequence(model, seq, images))
    n_max = max(e.shape[0] for e in embs)
    valid = np.zeros((len(embs), n_max), dtype=bool)
    rows = []
    for b, e in enumerate(embs):
        valid[b, :e.shape[0]] = True
        if e.shape[0] < n_max:
            e = concat([e, zeros((n_max - e.shape[0], e.shape[1]), e.dtype)], axis=0)
        rows.append(reshape(e, (1,) + e.shape))
    x = rows[0] if len(rows) == 1 else concat(rows, axis=0)
    return encoder_stack(model, x, key_valid=None if valid.all() else valid), valid


def decode(model: Model, H: Optional[Tensor], target_ids, probe: Optional[dict] = None) -> Tensor:
    """Logits ``[m, V]`` for decoder inputs ``target_ids`` (already starting with BOS).

    ``H`` may have zero rows, which reduces every decoder layer to plain
    causal self-attention.
    """
    if H is None:
        raise ConfigError("decoder needs an encoder output (pass a [0, d] tensor for none)")
    ids = np.asarray(target_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise DataError("decode needs at least one decoder input id")
    H3 = reshape(H, (1,) + H.shape)
    logits = decoder_stack(model, ids[None], H3, probe=probe)
    return reshape(logits, logits.shape[1:])


def greedy_decode(model: Model, seq: MixedSequence, max_new_tokens: int,
                  images: Optional[np.ndarray] = None) -> list[int]:
    """Argmax decoding; stops after emitting EOS (which is included)."""
    if max_new_tokens < 1:
        raise ConfigError("max_new_tokens must be >= 1")
    H = encode(model, seq, images)
    ids = [model.cfg.bos_id]
    out: list[int] = []
    for _ in range(max_new_tokens):
        logits = decode(model, H, ids)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        if nxt == model.cfg.eos_id:
            break
        ids.append(nxt)
    return out


# --------------------------------------------------------------------------
# decoder-only source model


def build_decoder_only(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    return {name: init_param(name, shape, seed, cfg.d_model, dtype)
            for name, shape in decoder_only_shapes(cfg).items()}


def decoder_only_logits(params: dict[str, Tensor], cfg: ModelConfig, ids) -> Tensor:
    """Logits ``[m, V]`` of a decoder-only model over ``ids``, positions ``0..m-1``."""
    ids = np.asarray(ids, dtype=np.int64)
    eps = cfg.norm_eps
    x = take(params["embedding"], ids) * float(np.sqrt(cfg.d_model))
    for i, kind in enumerate(cfg.layer_kinds()):
        pre = f"layers.{i}."
        w = AttentionWeights(*(params[pre + "attn." + k] for k in ATTN_KEYS),
                             n_q_heads=cfg.n_q_heads, n_kv_heads=cfg.n_kv_heads)
        h = rms_norm(x, params[pre + "pre_attn_norm"], eps)
        h = causal_self_attention(h, w, kind, cfg.rope(kind), np.arange(len(ids)), eps)
        x = x + rms_norm(h, params[pre + "post_attn_norm"], eps)
        h = _ffn(params, pre, rms_norm(x, params[pre + "pre_ffn_norm"], eps))
        x = x + rms_norm(h, params[pre + "post_ffn_norm"], eps)
    x = rms_norm(x, params["final_norm"], eps)
    return matmul(x, transpose(params["embedding"]))
