"""Textual inversion: map image features onto pseudo words in text-embedding space."""
from __future__ import annotations

from . import tensor as tt
from .nn import Dropout, EncoderBlock, LayerNorm, Linear, Module
from .tensor import ShapeError


class InversionMLP(Module):
    """Three affine layers, GELU + dropout after the first two.

    Applied position-wise, so patch ``m`` of the output depends only on
    patch ``m`` of the input. No activation follows the last layer.
    """

    def __init__(self, d, hidden, p, rng, drop_rng):
        self.d = d
        self.l1 = Linear(d, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.l3 = Linear(hidden, d, rng)
        self.drop = Dropout(p, drop_rng)

    def __call__(self, image_feats):
        if image_feats.shape[-1] != self.d:
            raise ShapeError(f"inversion expects width {self.d}, got {image_feats.shape[-1]}")
        p1 = self.drop(tt.gelu(self.l1(image_feats)))
        return self.l3(self.drop(tt.gelu(self.l2(p1))))


class InversionTransformer(Module):
    """Drop-in alternative: three self-attention encoder blocks of the same width."""

    def __init__(self, d, hidden, heads, p, rng, drop_rng, layers=3):
        self.d = d
        self.blocks = [EncoderBlock(d, heads, hidden, p, rng, drop_rng) for _ in range(layers)]
        self.ln = LayerNorm(d)

    def __call__(self, image_feats):
        if image_feats.shape[-1] != self.d:
            raise ShapeError(f"inversion expects width {self.d}, got {image_feats.shape[-1]}")
        x = image_feats
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


def build_inversion(cfg, rng, drop_rng):
    if cfg.inversion_variant == "transformer":
        return InversionTransformer(cfg.D, cfg.H, cfg.heads, cfg.dropout, rng, drop_rng)
    return InversionMLP(cfg.D, cfg.H, cfg.dropout, rng, drop_rng)
