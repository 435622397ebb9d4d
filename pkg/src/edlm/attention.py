"""Merged self/cross attention with GQA, QK-norm and rotary embeddings.

The decoder attends over the concatenation ``[X; H]`` of its own states and
the encoder output with a single set of projections and one softmax over
both parts. Column layout of every mask and key/value tensor is therefore
decoder columns first, then encoder columns.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    concat,
    masked_softmax,
    matmul,
    primitive,
    reshape,
    rms_norm,
    swapaxes,
    transpose,
)


@dataclass(frozen=True)
class LayerKind:
    """Attention span of a layer: a sliding ``window`` or global (``None``)."""

    window: Optional[int] = None

    def __post_init__(self):
        if self.window is not None and self.window < 1:
            raise ConfigError(f"local window must be positive, got {self.window}")

    @classmethod
    def local(cls, window: int) -> "LayerKind":
        return cls(window)

    @property
    def is_global(self) -> bool:
        return self.window is None

    def __str__(self) -> str:
        return "global" if self.is_global else f"local({self.window})"


GLOBAL = LayerKind()


@dataclass(frozen=True)
class RopeConfig:
    base_freq: float = 10_000.0
    pi_scale: float = 1.0

    def __post_init__(self):
        if self.pi_scale < 1:
            raise ConfigError(f"pi_scale must be >= 1, got {self.pi_scale}")


@dataclass
class AttentionWeights:
    w_q: Tensor  # d x (h_q * d_h)
    w_k: Tensor  # d x (h_kv * d_h)
    w_v: Tensor
    w_o: Tensor  # (h_q * d_h) x d
    q_norm: Tensor  # d_h
    k_norm: Tensor
    n_q_heads: int
    n_kv_heads: int

    def __post_init__(self):
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError(f"{self.n_q_heads} query heads not divisible by {self.n_kv_heads} kv heads")
        dh = self.d_head
        d = self.w_q.shape[0]
        expect = {
            "w_q": (d, self.n_q_heads * dh),
            "w_k": (d, self.n_kv_heads * dh),
            "w_v": (d, self.n_kv_heads * dh),
            "w_o": (self.n_q_heads * dh, d),
            "q_norm": (dh,),
            "k_norm": (dh,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d_head(self) -> int:
        return self.q_norm.shape[0]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


# --------------------------------------------------------------------------
# rotary embedding


def rope_apply(x: Tensor, positions, cfg: RopeConfig) -> Tensor:
    """Rotate ``x[..., T, heads, d_h]`` by position-dependent angles.

    Pair ``j`` is ``(x[..., j], x[..., j + d_h/2])`` and is rotated by
    ``(p / pi_scale) * base_freq ** (-2j / d_h)``. ``positions`` has shape
    ``(T,)`` or matches the leading axes ``x.shape[:-2]``.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {dh}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[-1:] != x.shape[-3:-2]:
        raise ShapeError(f"{pos.shape[-1] if pos.ndim else 0} positions for sequence length {x.shape[-3]}")
    half = dh // 2
    inv_freq = cfg.base_freq ** (-2.0 * np.arange(half) / dh)
    angle = (pos / cfg.pi_scale)[..., None] * inv_freq
    cos = np.cos(angle)[..., None, :].astype(x.dtype)
    sin = np.sin(angle)[..., None, :].astype(x.dtype)
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def vjp(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return primitive("rope", out, (x,), vjp)


# --------------------------------------------------------------------------
# masks


def _decoder_block(m: int, kind: LayerKind) -> np.ndarray:
    i = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    vis = j <= i
    if not kind.is_global:
        vis &= (i - j) < kind.window
    return vis


def build_merged_mask(m: int, n: int, kind: LayerKind) -> Tensor:
    """Visibility ``[m, m+n]``: causal (optionally windowed) decoder columns
    followed by ``n`` encoder columns that are always visible."""
    if m < 1:
        raise ShapeError("merged mask needs at least one decoder position")
    if n < 0:
        raise ShapeError(f"negative encoder length {n}")
    vis = np.concatenate([_decoder_block(m, kind), np.ones((m, n), dtype=bool)], axis=1)
    return Tensor._wrap(vis.astype(np.float64))


def build_encoder_mask(n: int, kind: LayerKind) -> Tensor:
    """Bidirectional visibility ``[n, n]``; local layers keep ``|i-j| < window``."""
    if n < 1:
        raise ShapeError("encoder mask needs at least one position")
    if kind.is_global:
        return Tensor._wrap(np.ones((n, n)))
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return Tensor._wrap((np.abs(i - j) < kind.window).astype(np.float64))


# --------------------------------------------------------------------------
# attention


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected [len, d] or [batch, len, d], got {x.shape}")
    return x, False


def _positions(pos, batch: int, length: int) -> np.ndarray:
    p = np.asarray(pos, dtype=np.float64)
    if p.ndim == 1:
        p = np.broadcast_to(p, (batch, p.shape[0]))
    if p.shape != (batch, length):
        raise ShapeError(f"positions of shape {p.shape} for batch {batch} x length {length}")
    return p


def attend(xq: Tensor, xkv: Tensor, w: AttentionWeights, visible, q_pos, k_pos,
           rope: RopeConfig, eps: float = 1e-6, record: Optional[dict] = None) -> Tensor:
    """Grouped-query attention of ``xq [B, m, d]`` over ``xkv [B, T, d]``.

    ``visible`` broadcasts to ``[B, m, T]``. Query head ``h`` uses kv head
    ``h // (h_q / h_kv)``.
    """
    B, m, d = xq.shape
    T = xkv.shape[1]
    if d != w.d_model or xkv.shape[2] != d:
        raise ShapeError(f"inputs {xq.shape}, {xkv.shape} do not match model dim {w.d_model}")
    hq, hkv, dh = w.n_q_heads, w.n_kv_heads, w.d_head
    group = hq // hkv

    q = reshape(matmul(xq, w.w_q), (B, m, hq, dh))
    k = reshape(matmul(xkv, w.w_k), (B, T, hkv, dh))
    v = reshape(matmul(xkv, w.w_v), (B, T, hkv, dh))
    q = rope_apply(rms_norm(q, w.q_norm, eps), q_pos, rope)
    k = rope_apply(rms_norm(k, w.k_norm, eps), k_pos, rope)

    q = transpose(reshape(q, (B, m, hkv, group, dh)), (0, 2, 3, 1, 4))  # B hkv g m dh
    k = reshape(transpose(k, (0, 2, 1, 3)), (B, hkv, 1, T, dh))
    v = reshape(transpose(v, (0, 2, 1, 3)), (B, hkv, 1, T, dh))
    logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    vis = np.asarray(visible.data if isinstance(visible, Tensor) else visible)
    vis = np.broadcast_to(vis > 0.5, (B, m, T))[:, None, None]
    probs = masked_softmax(logits, vis)
    if record is not None:
        record["probs"] = probs.data.reshape(B, hq, m, T)
    a = matmul(probs, v)  # B hkv g m dh
    a = reshape(transpose(a, (0, 3, 1, 2, 4)), (B, m, hq * dh))
    return matmul(a, w.w_o)


def merged_attention(X: Tensor, H: Tensor, w: AttentionWeights, kind: LayerKind, rope: RopeConfig,
                     dec_positions=None, enc_positions=None, *, key_valid=None, eps: float = 1e-6,
                     record: Optional[dict] = None) -> Tensor:
    """Decoder attention over ``[X; H]`` with one jointly normalised softmax.

    ``X`` is ``[m, d]`` (or batched ``[B, m, d]``), ``H`` is ``[n, d]`` with
    ``n`` possibly 0. Default positions put the encoder at ``0..n-1`` and the
    decoder after it at ``n..n+m-1``. ``key_valid`` (``[B, n]`` bool) hides
    padded encoder columns.
    """
    X, squeeze = _batched(X)
    H, _ = _batched(H)
    B, m, _ = X.shape
    n = H.shape[1]
    if H.shape[0] != B:
        raise ShapeError(f"batch mismatch between X {X.shape} and H {H.shape}")
    if enc_positions is None:
        enc_positions = np.arange(n)
    if dec_positions is None:
        dec_positions = n + np.arange(m)
    dec_p = _positions(dec_positions, B, m)
    enc_p = _positions(enc_positions, B, n)

    vis = build_merged_mask(m, n, kind).data > 0.5
    if key_valid is not None:
        kv = np.concatenate([np.ones((B, m), dtype=bool), np.asarray(key_valid, dtype=bool)], axis=1)
        vis = vis[None] & kv[:, None, :]
    xkv = concat([X, H], axis=1) if n else X
    out = attend(X, xkv, w, vis, dec_p, np.concatenate([dec_p, enc_p], axis=1), rope, eps, record)
    return reshape(out, out.shape[1:]) if squeeze else out


def encoder_self_attention(X: Tensor, w: AttentionWeights, kind: LayerKind, rope: RopeConfig,
                           positions=None, *, key_valid=None, full_visibility: bool = False,
                           eps: float = 1e-6, record: Optional[dict] = None) -> Tensor:
    """Bidirectional self-attention for encoder layers."""
    X, squeeze = _batched(X)
    B, n, _ = X.shape
    pos = _positions(np.arange(n) if positions is None else positions, B, n)
    vis = build_encoder_mask(n, GLOBAL if full_visibility else kind).data > 0.5
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)
        vis = vis[None] & kv[:, None, :]
        # padded query rows attend only to themselves; no valid row reads them
        vis = vis | (np.eye(n, dtype=bool)[None] & ~kv[:, :, None])
    out = attend(X, X, w, vis, pos, pos, rope, eps, record)
    return reshape(out, out.shape[1:]) if squeeze else out


def cross_attention(X: Tensor, H: Tensor, w: AttentionWeights, rope: RopeConfig,
                    dec_positions=None, enc_positions=None, *, key_valid=None,
                    eps: float = 1e-6) -> Tensor:
    """Separate cross-attention sub-layer (the unmerged baseline)."""
    X, squeeze = _batched(X)
    H, _ = _batched(H)
    B, m, _ = X.shape
    n = H.shape[1]
    enc_p = _positions(np.arange(n) if enc_positions is None else enc_positions, B, n)
    dec_p = _positions(n + np.arange(m) if dec_positions is None else dec_positions, B, m)
    vis = np.ones((B, m, n), dtype=bool)
    if key_valid is not None:
        vis &= np.asarray(key_valid, dtype=bool)[:, None, :]
    out = attend(X, H, w, vis, dec_p, enc_p, rope, eps)
    return reshape(out, out.shape[1:]) if squeeze else out


def causal_self_attention(X: Tensor, w: AttentionWeights, kind: LayerKind, rope: RopeConfig,
                          positions=None, eps: float = 1e-6) -> Tensor:
    """Plain decoder-only self-attention on ``X [m, d]``.

    Written head by head with explicitly repeated kv heads; it shares no
    code path with :func:`attend` beyond the primitives, which makes it a
    reference for the ``n = 0`` case of :func:`merged_attention`.
    """
    if X.ndim != 2:
        raise ShapeError(f"causal_self_attention takes [m, d], got {X.shape}")
    m = X.shape[0]
    pos = np.arange(m) if positions is None else np.asarray(positions)
    dh = w.d_head
    group = w.n_q_heads // w.n_kv_heads
    vis = _decoder_block(m, kind)
    heads = []
    for h in range(w.n_q_heads):
        g = h // group
        q = matmul(X, w.w_q[:, h * dh:(h + 1) * dh])
        k = matmul(X, w.w_k[:, g * dh:(g + 1) * dh])
        v = matmul(X, w.w_v[:, g * dh:(g + 1) * dh])
        q = rope_apply(reshape(rms_norm(q, w.q_norm, eps), (m, 1, dh)), pos, rope)
        k = rope_apply(reshape(rms_norm(k, w.k_norm, eps), (m, 1, dh)), pos, rope)
        scores = matmul(reshape(q, (m, dh)), transpose(reshape(k, (m, dh)))) * (1.0 / np.sqrt(dh))
        heads.append(matmul(masked_softmax(scores, vis), v))
    return matmul(concat(heads, axis=1), w.w_o)
