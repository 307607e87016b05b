"""Parameter containers and transformer building blocks."""
from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(array) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        bound = np.sqrt(6.0 / (d_in + d_out))
        self.W = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.b = param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return tt.affine(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x):
        return tt.layer_norm(x, self.gamma, self.beta)


class Dropout(Module):
    def __init__(self, p, rng):
        self.p = p
        self.rng = rng

    def __call__(self, x):
        return tt.dropout(x, self.p, self.training, self.rng)


def causal_mask(n):
    """Boolean ``n x n`` mask, true where query i may NOT see key j (j > i)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    ``key_mask`` is ``B x L_k`` with 1 for usable keys. The last weights are
    kept on ``self.weights`` (``B x heads x L_q x L_k``) for inspection.
    """

    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        # a key bias only shifts each query's logits uniformly, so it is omitted
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.weights = None

    def _split(self, x):
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x_q, x_kv, key_mask=None, causal=False):
        B, Lq, D = x_q.shape
        Lk = x_kv.shape[1]
        q = self._split(self.q(x_q))
        k = self._split(self.k(x_kv))
        v = self._split(self.v(x_kv))
        scores = tt.matmul(q, k.T) * (1.0 / np.sqrt(D // self.heads))
        blocked = np.zeros((B, 1, Lq, Lk), dtype=bool)
        if key_mask is not None:
            blocked |= ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            blocked |= causal_mask(Lq)[None, None]
        if blocked.any():
            scores = tt.masked_fill(scores, blocked, -np.inf)
        attn = tt.softmax_lastdim(scores)
        self.weights = attn.data
        ctx = tt.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d, hidden, p, rng, drop_rng):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.drop = Dropout(p, drop_rng)

    def __call__(self, x):
        return self.fc2(self.drop(tt.gelu(self.fc1(x))))


class EncoderBlock(Module):
    """Pre-LN block: self-attention then feed-forward, each residual."""

    def __init__(self, d, heads, ff, p, rng, drop_rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, ff, p, rng, drop_rng)
        self.drop = Dropout(p, drop_rng)

    def __call__(self, x, key_mask=None, causal=False):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, key_mask, causal))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderBlock(Module):
    """Pre-LN block: causal self-attention, cross-attention to memory, feed-forward.

    With ``memory=None`` the cross-attention sublayer is skipped, which is how
    the refinement path reuses these weights as a plain self-attention stack.
    """

    def __init__(self, d, heads, ff, p, rng, drop_rng):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ln3 = LayerNorm(d)
        self.ff = FeedForward(d, ff, p, rng, drop_rng)
        self.drop = Dropout(p, drop_rng)

    def __call__(self, x, memory=None, key_mask=None, causal=True):
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, key_mask, causal))
        if memory is not None:
            x = x + self.drop(self.cross_attn(self.ln2(x), memory))
        return x + self.drop(self.ff(self.ln3(x)))
