"""Positional embedding, multi-head self/external attention, pre-norm
transformer blocks, the stacked encoder/decoder, and analytic
multiply-accumulate accounting for the two attention flavours.

External attention replaces pairwise token interaction with small learnable
key/value memories shared across samples; its cost is linear in the token
count. Attention rows are double-normalized: softmax over the token axis,
then l1 over the memory axis, so every token's row sums to 1.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import BlockConfig, ModelConfig
from .layers import (embed_mlp_apply, init_affine, init_embed_mlp,
                     init_layer_norm, init_linear, init_mlp, affine, layer_norm,
                     linear, mlp_apply)
from .tensor import ParamStore, Tensor, trunc_normal


def _pos_widths(d: int, hidden: int):
    return (3, hidden, d)


def init_pos_embed(store: ParamStore, prefix: str, d: int, hidden: int,
                   rng: np.random.Generator, dtype=np.float32) -> None:
    init_embed_mlp(store, prefix, _pos_widths(d, hidden), rng, dtype)


def positional_embed(centers: np.ndarray | Tensor, store: ParamStore, prefix: str,
                     d: int, hidden: int) -> Tensor:
    """Shared 2-layer MLP mapping patch centers [m,3] to positional tokens [m,d]."""
    if not isinstance(centers, Tensor):
        dtype = store[f"{prefix}.l0.w"].data.dtype
        centers = Tensor(np.ascontiguousarray(centers, dtype=dtype))
    return embed_mlp_apply(centers, store, prefix, _pos_widths(d, hidden))


def init_block(store: ParamStore, prefix: str, cfg: BlockConfig, mode: str,
               rng: np.random.Generator, dtype=np.float32,
               ea_query_projection: bool = True) -> None:
    d = cfg.d
    # external attention is invariant to constant token shifts (the token-axis
    # softmax cancels them), which makes a pre-attention LN bias dead weight
    init_layer_norm(store, f"{prefix}.ln1", d, dtype, bias=(mode == "self"))
    init_layer_norm(store, f"{prefix}.ln2", d, dtype)
    init_mlp(store, f"{prefix}.mlp", (d, d * cfg.mlp_ratio, d), rng, dtype)
    init_affine(store, f"{prefix}.attn.out", d, d, rng, dtype)
    if mode == "self":
        init_linear(store, f"{prefix}.attn.q", d, d, rng, dtype)
        init_linear(store, f"{prefix}.attn.k", d, d, rng, dtype)
        init_linear(store, f"{prefix}.attn.v", d, d, rng, dtype)
    elif mode == "external":
        if ea_query_projection:
            init_linear(store, f"{prefix}.attn.q", d, d, rng, dtype)
        store.add(f"{prefix}.attn.mk", trunc_normal(rng, (cfg.heads, cfg.s_mem, cfg.d_head), dtype=dtype))
        store.add(f"{prefix}.attn.mv", trunc_normal(rng, (cfg.heads, cfg.s_mem, cfg.d_head), dtype=dtype))
    else:
        raise ValueError(f"unknown attention mode: {mode!r}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    m, d = x.shape
    return x.reshape((m, heads, d // heads)).transpose((1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, m, dh = x.shape
    return x.transpose((1, 0, 2)).reshape((m, h * dh))


def multi_head_self_attention(x: Tensor, store: ParamStore, prefix: str,
                              heads: int) -> Tensor:
    """Scaled dot-product attention over [m, d] tokens."""
    d_head = x.shape[-1] // heads
    q = _split_heads(linear(x, store, f"{prefix}.q"), heads)
    k = _split_heads(linear(x, store, f"{prefix}.k"), heads)
    v = _split_heads(linear(x, store, f"{prefix}.v"), heads)
    scores = T.matmul(q, k.transpose((0, 2, 1))) * (1.0 / math.sqrt(d_head))
    attn = T.softmax(scores, axis=-1)
    out = _merge_heads(T.matmul(attn, v))
    return affine(out, store, f"{prefix}.out")


def multi_head_external_attention(x: Tensor, store: ParamStore, prefix: str,
                                  heads: int) -> Tensor:
    """Attention against learnable per-head memories M_k, M_v ([heads, S, d_h]).

    Raw scores Q M_k^T are softmax-normalized over the token axis, then
    l1-normalized over the memory axis. Cost is linear in the token count.
    """
    q_name = f"{prefix}.q.w"
    if q_name in store:
        q = linear(x, store, f"{prefix}.q")
    else:
        q = x
    q = _split_heads(q, heads)                                   # [h, m, d_h]
    m_k = store[f"{prefix}.mk"]
    m_v = store[f"{prefix}.mv"]
    raw = T.matmul(q, m_k.transpose((0, 2, 1)))                  # [h, m, S]
    attn = T.softmax(raw, axis=1)
    attn = attn / attn.sum(axis=2, keepdims=True)
    out = _merge_heads(T.matmul(attn, m_v))
    return affine(out, store, f"{prefix}.out")


def transformer_block_forward(x: Tensor, pos: Tensor, mode: str,
                              store: ParamStore, prefix: str, cfg: BlockConfig) -> Tensor:
    """Pre-norm residual block; positional tokens are re-added to the
    attention input at every block."""
    h = layer_norm(x + pos, store, f"{prefix}.ln1")
    if mode == "self":
        attn = multi_head_self_attention(h, store, f"{prefix}.attn", cfg.heads)
    elif mode == "external":
        attn = multi_head_external_attention(h, store, f"{prefix}.attn", cfg.heads)
    else:
        raise ValueError(f"unknown attention mode: {mode!r}")
    x = x + attn
    x = x + mlp_apply(layer_norm(x, store, f"{prefix}.ln2"), store, f"{prefix}.mlp",
                      (cfg.d, cfg.d * cfg.mlp_ratio, cfg.d))
    return x


def init_encoder(store: ParamStore, cfg: ModelConfig, rng, dtype=np.float32) -> None:
    init_pos_embed(store, "enc.pos", cfg.d, cfg.embed_hidden, rng, dtype)
    blocks = cfg.encoder_blocks()
    for i in range(blocks.depth):
        init_block(store, f"enc.b{i:02d}", blocks, "external", rng, dtype,
                   ea_query_projection=cfg.ea_query_projection)
    init_layer_norm(store, "enc.ln", cfg.d, dtype)


def init_decoder(store: ParamStore, cfg: ModelConfig, rng, dtype=np.float32) -> None:
    init_pos_embed(store, "dec.pos", cfg.d, cfg.embed_hidden, rng, dtype)
    store.add("dec.mask_token", trunc_normal(rng, (cfg.d,), dtype=dtype))
    blocks = cfg.decoder_blocks()
    for i in range(blocks.depth):
        init_block(store, f"dec.b{i:02d}", blocks, "self", rng, dtype)
    init_layer_norm(store, "dec.ln", cfg.d, dtype)


def encoder_forward(tokens: Tensor, centers: np.ndarray, store: ParamStore,
                    cfg: ModelConfig) -> Tensor:
    """External-attention encoder over (visible) tokens [m, d] -> [m, d]."""
    if tokens.shape[0] < 1:
        raise ValueError("mask ratio leaves no visible tokens")
    pos = positional_embed(centers, store, "enc.pos", cfg.d, cfg.embed_hidden)
    blocks = cfg.encoder_blocks()
    x = tokens
    for i in range(blocks.depth):
        x = transformer_block_forward(x, pos, "external", store, f"enc.b{i:02d}", blocks)
    return layer_norm(x, store, "enc.ln")


def decoder_forward(encoded: Tensor, centers_visible: np.ndarray,
                    centers_masked: np.ndarray, store: ParamStore,
                    cfg: ModelConfig) -> Tensor:
    """Self-attention decoder: visible encodings + duplicated mask token in,
    decoded tokens at the masked positions out."""
    masked_count = int(np.asarray(centers_masked).shape[0])
    if masked_count == 0:
        raise ValueError("nothing to reconstruct")
    n_vis = encoded.shape[0]
    mask_tokens = T.broadcast_to(store["dec.mask_token"].reshape((1, cfg.d)),
                                 (masked_count, cfg.d))
    x = T.concat([encoded, mask_tokens], axis=0)
    all_centers = np.concatenate([np.asarray(centers_visible, dtype=np.float64),
                                  np.asarray(centers_masked, dtype=np.float64)], axis=0)
    pos = positional_embed(all_centers, store, "dec.pos", cfg.d, cfg.embed_hidden)
    blocks = cfg.decoder_blocks()
    for i in range(blocks.depth):
        x = transformer_block_forward(x, pos, "self", store, f"dec.b{i:02d}", blocks)
    x = layer_norm(x, store, "dec.ln")
    return x[n_vis:]


# ---------------------------------------------------------------------------
# analytic multiply-accumulate accounting
# ---------------------------------------------------------------------------

def attention_macs(mode: str, m: int, cfg: BlockConfig,
                   ea_query_projection: bool = True) -> int:
    """Exact multiply-accumulate count of one attention layer on m tokens."""
    d, s = cfg.d, cfg.s_mem
    if mode == "self":
        proj = 3 * m * d * d            # q, k, v
        scores = m * m * d              # heads * m * m * d_head
        mix = m * m * d                 # attn @ v
        out = m * d * d
        return proj + scores + mix + out
    if mode == "external":
        proj = m * d * d if ea_query_projection else 0
        scores = m * s * d              # q @ m_k^T across heads
        mix = m * s * d                 # attn @ m_v
        out = m * d * d
        return proj + scores + mix + out
    raise ValueError(f"unknown attention mode: {mode!r}")


def block_macs(mode: str, m: int, cfg: BlockConfig,
               ea_query_projection: bool = True) -> int:
    """Attention + feed-forward MACs of one transformer block."""
    mlp = 2 * m * cfg.d * cfg.d * cfg.mlp_ratio
    return attention_macs(mode, m, cfg, ea_query_projection) + mlp


def stack_macs(mode: str, m: int, cfg: BlockConfig,
               ea_query_projection: bool = True) -> int:
    return cfg.depth * block_macs(mode, m, cfg, ea_query_projection)


def fit_mac_polynomial(token_counts, macs) -> np.ndarray:
    """Least-squares fit of MAC counts to c0 + c1*m + c2*m^2; returns (c0,c1,c2)."""
    ms = np.asarray(token_counts, dtype=np.float64)
    design = np.stack([np.ones_like(ms), ms, ms * ms], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, np.asarray(macs, dtype=np.float64), rcond=None)
    return coeffs
