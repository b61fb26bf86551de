"""Multi-level feature cross-attention: two transformer branches over conv
feature maps of different depth that trade CLS summaries by cross-attention.

The large branch embeds the S2 map with coarse patches, the small branch the
S4 map with fine patches.  Each branch runs its own encoder stack once, then
``rounds`` exchange blocks update the two CLS tokens in lock-step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import (ConfigError, LayerNorm, Linear, Module, MultiHeadAttention, Parameter,
                 trunc_normal)
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BranchConfig:
    patch_size: int
    embed_dim: int
    depth: int = 3
    ffn_ratio: int = 4


@dataclass(frozen=True)
class MFCAConfig:
    small: BranchConfig = field(default_factory=lambda: BranchConfig(2, 128, 3, 12))
    large: BranchConfig = field(default_factory=lambda: BranchConfig(8, 256, 3, 4))
    rounds: int = 2
    heads: int = 6
    head_norm: bool = True


@dataclass
class TokenSet:
    """Tokens of one branch, CLS first: ``tokens`` has shape (B, N+1, D)."""

    tokens: Tensor
    branch: str
    pos: Tensor | None = None

    @property
    def cls(self) -> Tensor:
        return self.tokens[:, :1]

    @property
    def patches(self) -> Tensor:
        return self.tokens[:, 1:]

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


def valid_patch_sizes(side: int) -> list[int]:
    return [p for p in range(1, side + 1) if side % p == 0]


def num_patches(side: int, patch: int) -> int:
    if side % patch:
        raise ConfigError(f"patch size {patch} does not divide feature side {side}; "
                          f"valid sizes: {valid_patch_sizes(side)}")
    return (side // patch) ** 2


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, N, patch*patch*C), patches in row-major order."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch size {patch} does not divide feature map {h}x{w}; "
                          f"valid sizes: {sorted(set(valid_patch_sizes(h)) & set(valid_patch_sizes(w)))}")
    gh, gw = h // patch, w // patch
    t = T.reshape(x, (b, c, gh, patch, gw, patch))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (b, gh * gw, patch * patch * c))


class PatchEmbed(Module):
    """Non-overlapping patches -> linear projection, CLS prepended, positions added."""

    def __init__(self, channels: int, side: int, patch: int, dim: int, rng: np.random.Generator):
        self.channels = channels
        self.side = side
        self.patch = patch
        self.dim = dim
        self.num_patches = num_patches(side, patch)
        self.proj = Linear(patch * patch * channels, dim, rng)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, dim)))
        self.pos_embed = Parameter(trunc_normal(rng, (1, self.num_patches + 1, dim)))

    def forward(self, x: Tensor, branch: str = "") -> TokenSet:
        if x.ndim != 4 or x.shape[1] != self.channels or x.shape[2] != self.side or x.shape[3] != self.side:
            raise ShapeError(f"PatchEmbed expects (B, {self.channels}, {self.side}, {self.side}), got {x.shape}")
        b = x.shape[0]
        patches = self.proj(patchify(x, self.patch))
        cls = T.broadcast_to(self.cls_token, (b, 1, self.dim))
        tokens = T.concat([cls, patches], axis=1) + self.pos_embed
        return TokenSet(tokens, branch, self.pos_embed)


class FeedForward(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * ratio, rng)
        self.fc2 = Linear(dim * ratio, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class Encoder(Module):
    def __init__(self, dim: int, depth: int, heads: int, ffn_ratio: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, heads, ffn_ratio, rng) for _ in range(depth)]

    def forward(self, tokens: TokenSet) -> TokenSet:
        x = tokens.tokens
        for blk in self.blocks:
            x = blk(x)
        return TokenSet(x, tokens.branch, tokens.pos)


class CrossAttentionBlock(Module):
    """Updates the CLS of a source branch using a target branch's patches.

    The CLS is projected to the target width and layer-normalized, used as
    the only query over {projected CLS, target patches}, residual-added, and
    projected back.  Source patch tokens are passed through untouched.
    """

    def __init__(self, src_dim: int, dst_dim: int, heads: int, rng: np.random.Generator):
        self.src_dim = src_dim
        self.dst_dim = dst_dim
        self.align = Linear(src_dim, dst_dim, rng)
        self.norm = LayerNorm(dst_dim)
        self.attn = MultiHeadAttention(dst_dim, heads, rng)
        self.back = Linear(dst_dim, src_dim, rng)

    def forward(self, src: TokenSet, dst: TokenSet) -> TokenSet:
        if src.dim != self.src_dim or dst.dim != self.dst_dim:
            raise ShapeError(f"cross-attention {self.src_dim}->{self.dst_dim} got {src.dim}->{dst.dim}")
        cls = self.norm(self.align(src.cls))
        fused = T.concat([cls, dst.patches], axis=1)
        new_cls = self.back(self.attn(cls, fused) + cls)
        return TokenSet(T.concat([new_cls, src.patches], axis=1), src.branch, src.pos)


class CrossAttentionExchange(Module):
    """One round: both CLS tokens are updated from the round's inputs."""

    def __init__(self, large_dim: int, small_dim: int, heads: int, rng: np.random.Generator):
        self.large_to_small = CrossAttentionBlock(large_dim, small_dim, heads, rng)
        self.small_to_large = CrossAttentionBlock(small_dim, large_dim, heads, rng)

    def forward(self, large: TokenSet, small: TokenSet) -> tuple[TokenSet, TokenSet]:
        return self.large_to_small(large, small), self.small_to_large(small, large)


def cross_attention_exchange(large: TokenSet, small: TokenSet, block: CrossAttentionExchange):
    return block(large, small)


class MFCA(Module):
    def __init__(self, cfg: MFCAConfig, s2_shape: tuple[int, int], s4_shape: tuple[int, int],
                 num_classes: int, rng: np.random.Generator):
        """``s2_shape`` / ``s4_shape`` are (channels, side) of the tapped maps."""
        if cfg.rounds < 0:
            raise ConfigError(f"cross-attention rounds must be >= 0, got {cfg.rounds}")
        self.cfg = cfg
        (c2, side2), (c4, side4) = s2_shape, s4_shape
        lg, sm = cfg.large, cfg.small
        self.embed_large = PatchEmbed(c2, side2, lg.patch_size, lg.embed_dim, rng)
        self.embed_small = PatchEmbed(c4, side4, sm.patch_size, sm.embed_dim, rng)
        self.encoder_large = Encoder(lg.embed_dim, lg.depth, cfg.heads, lg.ffn_ratio, rng)
        self.encoder_small = Encoder(sm.embed_dim, sm.depth, cfg.heads, sm.ffn_ratio, rng)
        self.exchanges = [CrossAttentionExchange(lg.embed_dim, sm.embed_dim, cfg.heads, rng)
                          for _ in range(cfg.rounds)]
        self.norm_large = LayerNorm(lg.embed_dim) if cfg.head_norm else None
        self.norm_small = LayerNorm(sm.embed_dim) if cfg.head_norm else None
        self.head_large = Linear(lg.embed_dim, num_classes, rng)
        self.head_small = Linear(sm.embed_dim, num_classes, rng)

    def tokens(self, s2: Tensor, s4: Tensor) -> tuple[TokenSet, TokenSet]:
        large = self.encoder_large(self.embed_large(s2, "large"))
        small = self.encoder_small(self.embed_small(s4, "small"))
        for ex in self.exchanges:
            large, small = ex(large, small)
        return large, small

    def forward(self, s2: Tensor, s4: Tensor) -> Tensor:
        large, small = self.tokens(s2, s4)
        cl = T.reshape(large.cls, (large.tokens.shape[0], -1))
        cs = T.reshape(small.cls, (small.tokens.shape[0], -1))
        if self.norm_large is not None:
            cl, cs = self.norm_large(cl), self.norm_small(cs)
        return self.head_large(cl) + self.head_small(cs)
