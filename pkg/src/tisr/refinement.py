"""Self-supervised refinement: align pseudo words with text, fuse, re-decode, score.

The path only exists at training time; it produces no tokens, only the
``B x B`` score matrix consumed by the contrastive objective.
"""
from __future__ import annotations

import numpy as np

from . import tensor as tt
from .nn import Linear, Module
from .tensor import ShapeError, Tensor


def cross_align(P: Tensor, T: Tensor, text_mask=None):
    """Bidirectional single-head cross attention between pseudo words and text.

    Returns ``(P', T')`` where ``P' = softmax(P T^T / sqrt(D)) T`` and
    ``T' = softmax(T P^T / sqrt(D)) P``. Padded text positions (``text_mask``
    zero) are removed from the key set of the first product.
    """
    if P.ndim != 3 or T.ndim != 3 or P.shape[0] != T.shape[0] or P.shape[2] != T.shape[2]:
        raise ShapeError(f"cross_align: incompatible shapes {P.shape} and {T.shape}")
    scale = 1.0 / np.sqrt(P.shape[2])
    scores = tt.matmul(P, T.T) * scale
    if text_mask is not None:
        keep = np.asarray(text_mask, dtype=bool)
        if keep.shape != (T.shape[0], T.shape[1]):
            raise ShapeError(f"text mask shape {keep.shape} does not fit {T.shape}")
        if not keep.any(axis=1).all():
            raise ValueError("cross_align: a sample has every text position padded")
        scores = tt.masked_fill(scores, ~keep[:, None, :], -np.inf)
    P_aligned = tt.matmul(tt.softmax_lastdim(scores), T)
    T_aligned = tt.matmul(tt.softmax_lastdim(tt.matmul(T, P.T) * scale), P)
    return P_aligned, T_aligned


class FusionMLP(Module):
    """Position-wise residual MLP ``x + L2(GELU(L1(x)))``.

    The residual form makes zeroed second-layer weights an exact identity.
    """

    def __init__(self, d, rng):
        self.l1 = Linear(d, d, rng)
        self.l2 = Linear(d, d, rng)

    def __call__(self, x):
        return x + self.l2(tt.gelu(self.l1(x)))


def fuse(P_aligned, T_aligned, mlp=None):
    """Concatenate along the sequence axis (length M + N) and apply ``mlp``."""
    if P_aligned.shape[-1] != T_aligned.shape[-1]:
        raise ShapeError(f"fuse: widths differ, {P_aligned.shape} vs {T_aligned.shape}")
    joined = tt.concat_seq(P_aligned, T_aligned)
    return joined if mlp is None else mlp(joined)


def pair_embeddings(I, O, img_head, txt_head, seq_mask=None):
    """Pooled, projected, unit-norm image and text embeddings (``B x D`` each)."""
    img = tt.l2_normalize(img_head(tt.mean_pool_seq(I)))
    txt = tt.l2_normalize(txt_head(tt.mean_pool_seq(O, seq_mask)))
    return img, txt


def score_matrix(img_emb, txt_emb, tau, contrastive=True):
    """``S[i, j] = <img_i, txt_j> / tau``; rows are images, columns texts."""
    if img_emb.shape != txt_emb.shape or img_emb.ndim != 2:
        raise ShapeError(f"score_matrix: shapes {img_emb.shape} and {txt_emb.shape}")
    if contrastive and img_emb.shape[0] < 2:
        raise ValueError("contrastive scoring needs a batch of at least 2 (no negatives otherwise)")
    return tt.matmul(img_emb, txt_emb.T) * (1.0 / tau)


class RefinementHead(Module):
    def __init__(self, d, rng):
        self.fusion = FusionMLP(d, rng)
        self.img_proj = Linear(d, d, rng)
        self.txt_proj = Linear(d, d, rng)
