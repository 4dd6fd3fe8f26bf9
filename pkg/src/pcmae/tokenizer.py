"""Token embedding for point patches: per-point patch features, SPFH
descriptor features, channel/spatial saliency gating, and max-pool fusion
into one latent token per patch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .geometry import PatchSet
from .layers import init_embed_mlp, embed_mlp_apply, init_mlp, mlp_apply
from .tensor import ParamStore, Tensor


@dataclass
class SaliencyWeights:
    """Sigmoid gates: channel [g,1,c_p] and spatial [g,k,1], entries in (0,1)."""

    channel: Tensor
    spatial: Tensor


@dataclass
class TokenSequence:
    """One latent token per patch plus the patch centers for positional use."""

    tokens: Tensor          # [g, d]
    centers: np.ndarray     # [g, 3]


def _patch_widths(cfg: ModelConfig):
    return (3, cfg.embed_hidden, cfg.c_p)


def _desc_widths(cfg: ModelConfig):
    return (3 * cfg.bins, cfg.embed_hidden, cfg.c_d)


def _ca_widths(cfg: ModelConfig):
    return (cfg.c_p, max(1, cfg.c_p // 8), cfg.c_p)


_SA_WIDTHS = (1, 8, 1)


def _fuse_widths(cfg: ModelConfig):
    return (2 * cfg.c_p + cfg.c_d, cfg.d, cfg.d)


def init_gate(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
              dtype=np.float32) -> None:
    init_embed_mlp(store, "gate.patch_embed", _patch_widths(cfg), rng, dtype)
    init_embed_mlp(store, "gate.desc_embed", _desc_widths(cfg), rng, dtype)
    init_mlp(store, "gate.ca", _ca_widths(cfg), rng, dtype)
    init_mlp(store, "gate.sa", _SA_WIDTHS, rng, dtype)
    init_embed_mlp(store, "gate.fuse", _fuse_widths(cfg), rng, dtype)


def embed_patch_points(patches: Tensor | np.ndarray, store: ParamStore,
                       cfg: ModelConfig) -> Tensor:
    """Shared per-point MLP over centered neighbourhoods [g,k,3] -> [g,k,c_p]."""
    x = T.as_tensor(patches)
    return embed_mlp_apply(x, store, "gate.patch_embed", _patch_widths(cfg))


def embed_descriptor(descriptors: Tensor | np.ndarray, store: ParamStore,
                     cfg: ModelConfig) -> Tensor:
    """Shared MLP over per-center descriptors [g, 3*bins] -> [g, c_d]."""
    x = T.as_tensor(descriptors)
    if x.shape[-1] != 3 * cfg.bins:
        raise ValueError(f"descriptor length must be {3 * cfg.bins}")
    return embed_mlp_apply(x, store, "gate.desc_embed", _desc_widths(cfg))


def adaptive_saliency(p_t: Tensor, store: ParamStore, cfg: ModelConfig
                      ) -> tuple[SaliencyWeights, Tensor]:
    """Channel + spatial sigmoid gates over patch tokens.

    The channel gate pools over the k point positions, the spatial gate over
    channels; each runs one shared MLP on both its avg- and max-pooled
    statistics and sums the two branches before the sigmoid.
    """
    g, k, c_p = p_t.shape

    # sorted_mean keeps the pooled statistic bit-identical under point
    # permutations, which the token contract requires exactly
    ca_avg = mlp_apply(T.sorted_mean(p_t, axis=1), store, "gate.ca", _ca_widths(cfg))
    ca_max = mlp_apply(p_t.max(axis=1), store, "gate.ca", _ca_widths(cfg))
    w_ca = T.sigmoid(ca_avg + ca_max).reshape((g, 1, c_p))

    sa_avg = mlp_apply(p_t.mean(axis=2, keepdims=True), store, "gate.sa", _SA_WIDTHS)
    sa_max = mlp_apply(p_t.max(axis=2, keepdims=True), store, "gate.sa", _SA_WIDTHS)
    w_sa = T.sigmoid(sa_avg + sa_max)

    salient = p_t * w_ca * w_sa
    return SaliencyWeights(w_ca, w_sa), salient


def latent_tokens(p_t: Tensor, s_t: Tensor, d_t: Tensor, centers: np.ndarray,
                  store: ParamStore, cfg: ModelConfig) -> TokenSequence:
    """Fuse patch, salient and descriptor features into [g, d] tokens.

    The per-center descriptor row is broadcast along the k axis before
    concatenation; a shared per-point MLP maps to width d and a max-pool over
    the k axis aggregates each patch.
    """
    g, k, c_p = p_t.shape
    d_rep = T.broadcast_to(d_t.reshape((g, 1, d_t.shape[-1])), (g, k, d_t.shape[-1]))
    fused = T.concat([p_t, s_t, d_rep], axis=2)
    fused = embed_mlp_apply(fused, store, "gate.fuse", _fuse_widths(cfg))
    tokens = fused.max(axis=1)
    return TokenSequence(tokens, np.asarray(centers, dtype=np.float64))


def gate_forward(patches: PatchSet, descriptors: np.ndarray, store: ParamStore,
                 cfg: ModelConfig) -> TokenSequence:
    """Full tokenizer: centered patches + descriptors -> latent token sequence."""
    dtype = store["gate.fuse.l0.w"].data.dtype
    p_in = Tensor(np.ascontiguousarray(patches.neighborhoods, dtype=dtype))
    d_in = Tensor(np.ascontiguousarray(descriptors, dtype=dtype))
    p_t = embed_patch_points(p_in, store, cfg)
    d_t = embed_descriptor(d_in, store, cfg)
    _, s_t = adaptive_saliency(p_t, store, cfg)
    return latent_tokens(p_t, s_t, d_t, patches.centers, store, cfg)
