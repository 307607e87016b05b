"""Encoder-decoder report generator with textual inversion and refinement.

Teacher forcing drives training; greedy decoding drives inference. The
refinement path (pseudo words -> cross alignment -> fusion -> re-decoding)
is only evaluated when the contrastive loss is requested.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .config import ModelConfig, config_to_text, model_config_from_text
from .inversion import build_inversion
from .nn import DecoderBlock, Dropout, EncoderBlock, LayerNorm, Linear, Module, param
from .objectives import LossBreakdown, rrg_loss, sr_loss, total_loss
from .refinement import RefinementHead, cross_align, fuse, pair_embeddings, score_matrix
from .rng import stream
from .tensor import ShapeError, Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class VocabularyOverflowError(ValueError):
    pass


@dataclass
class TokenSequence:
    """Batch of framed token ids (``B x L``) with a 1/0 real-token mask."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.atleast_2d(np.asarray(self.ids, dtype=np.int64))
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=np.int64))
        if self.ids.shape != self.mask.shape:
            raise ShapeError(f"ids {self.ids.shape} and mask {self.mask.shape} differ")

    @classmethod
    def from_ids(cls, ids):
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        return cls(ids, (ids != PAD).astype(np.int64))

    def __len__(self):
        return self.ids.shape[0]


class TISRModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = stream(seed, "init")
        self.drop_rng = stream(seed, "dropout")
        D, ff = cfg.D, cfg.D * cfg.ff_mult
        p = cfg.dropout

        self.patch_proj = Linear(cfg.D_img, D, rng)
        self.img_pos = param(rng.normal(0.0, 0.02, size=(cfg.M, D)))
        self.img_blocks = [EncoderBlock(D, cfg.heads, ff, p, rng, self.drop_rng) for _ in range(cfg.enc_layers)]
        self.img_ln = LayerNorm(D)

        self.tok_emb = param(rng.normal(0.0, 0.1, size=(cfg.V, D)))
        self.txt_pos = param(rng.normal(0.0, 0.02, size=(cfg.N_max, D)))
        self.txt_blocks = [EncoderBlock(D, cfg.heads, ff, p, rng, self.drop_rng) for _ in range(cfg.text_enc_layers)]
        if not cfg.share_embeddings:
            self.dec_tok_emb = param(rng.normal(0.0, 0.1, size=(cfg.V, D)))

        self.dec_blocks = [DecoderBlock(D, cfg.heads, ff, p, rng, self.drop_rng) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(D)
        self.vocab = Linear(D, cfg.V, rng)
        self.emb_drop = Dropout(p, self.drop_rng)

        self.inversion = build_inversion(cfg, rng, self.drop_rng)
        self.refine = RefinementHead(D, rng)

    # ------------------------------------------------------------------
    # encoders

    def encode_image(self, patches) -> Tensor:
        """``B x M x D_img`` patch array -> image features ``B x M x D``."""
        patches = tt._as_tensor(patches)
        cfg = self.cfg
        if patches.ndim != 3 or patches.shape[2] != cfg.D_img:
            raise ShapeError(f"expected B x M x {cfg.D_img} patches, got {patches.shape}")
        if patches.shape[1] != cfg.M:
            raise ShapeError(f"expected {cfg.M} patches per image, got {patches.shape[1]}")
        x = self.emb_drop(self.patch_proj(patches) + self.img_pos)
        for blk in self.img_blocks:
            x = blk(x)
        return self.img_ln(x)

    def _embed(self, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.max() >= self.cfg.V or ids.min() < 0):
            raise VocabularyOverflowError(f"token id {int(ids.max())} outside vocabulary of {self.cfg.V}")
        L = ids.shape[1]
        if L > self.cfg.N_max:
            raise ShapeError(f"sequence of length {L} exceeds N_max={self.cfg.N_max}")
        return self.emb_drop(tt.embedding(table, ids) + self.txt_pos[:L])

    def encode_text(self, ids, mask=None) -> Tensor:
        """Token ids ``B x L`` -> text embeddings ``B x L x D``; padded keys are masked."""
        x = self._embed(self.tok_emb, ids)
        for blk in self.txt_blocks:
            x = blk(x, mask, causal=False)
        return x

    # ------------------------------------------------------------------
    # decoder

    def decoder_hidden(self, I, ids, mask=None) -> Tensor:
        """Causal decoder states for every prefix position, ``B x L x D``."""
        table = self.tok_emb if self.cfg.share_embeddings else self.dec_tok_emb
        x = self._embed(table, ids)
        for blk in self.dec_blocks:
            x = blk(x, memory=I, key_mask=mask, causal=True)
        return self.dec_ln(x)

    def decode_step(self, I, prefix) -> Tensor:
        """Hidden state at the last prefix position, ``B x D``."""
        ids = prefix.ids if isinstance(prefix, TokenSequence) else np.atleast_2d(prefix)
        if ids.shape[1] < 1:
            raise ShapeError("decode_step needs a non-empty prefix starting at BOS")
        h = self.decoder_hidden(I, ids)
        return h[:, -1]

    def project_vocab(self, h) -> Tensor:
        return tt.log_softmax_lastdim(self.vocab(h))

    def teacher_forced_logprobs(self, I, targets: TokenSequence) -> Tensor:
        """Position ``s`` scores token ``s + 1``; returns ``B x (L-1) x V``."""
        ids, mask = targets.ids, targets.mask
        if ids.shape[1] < 2:
            raise ShapeError("teacher forcing needs at least BOS and one target")
        if I.shape[0] != ids.shape[0]:
            raise ShapeError(f"batch mismatch: image {I.shape[0]} vs text {ids.shape[0]}")
        return self.project_vocab(self.decoder_hidden(I, ids[:, :-1], mask[:, :-1]))

    def cross_attention_trace(self):
        """Per-layer cross-attention weights ``B x heads x L x M`` from the last decoder pass."""
        return [blk.cross_attn.weights for blk in self.dec_blocks]

    def greedy_decode(self, I, max_len=None) -> TokenSequence:
        """Argmax decoding from BOS until every sample emits EOS or hits ``max_len``.

        Ties go to the lowest token id. After EOS a sample is padded.
        """
        max_len = max_len or self.cfg.N_max
        B = I.shape[0]
        ids = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with tt.no_grad():
            while ids.shape[1] < max_len and not done.all():
                logp = self.project_vocab(self.decode_step(I, ids)).data
                nxt = np.argmax(logp, axis=-1)
                nxt[done] = PAD
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
                done |= nxt == EOS
        out = np.full((B, max_len), PAD, dtype=np.int64)
        out[:, : ids.shape[1]] = ids
        return TokenSequence.from_ids(out)

    def attention_maps(self, I, seq: TokenSequence):
        """Cross-attention for each generated token, averaged over layers and heads.

        Returns a list (one per sample) of ``n_tokens x M`` arrays; row ``j``
        belongs to the ``j``-th token after BOS and comes from the query that
        predicted it.
        """
        with tt.no_grad():
            self.decoder_hidden(I, seq.ids[:, :-1], seq.mask[:, :-1])
        trace = np.mean([w.mean(axis=1) for w in self.cross_attention_trace()], axis=0)
        out = []
        for b in range(seq.ids.shape[0]):
            n = int(seq.mask[b].sum()) - 1
            out.append(trace[b, :n])
        return out

    # ------------------------------------------------------------------
    # refinement path

    def refine_decode(self, fused, seq_mask=None) -> Tensor:
        """Run the decoder stack over the fused sequence, full attention, no cross-attention."""
        if not self.cfg.use_refine_decoder:
            return fused
        x = fused
        for blk in self.dec_blocks:
            x = blk(x, memory=None, key_mask=seq_mask, causal=False)
        return self.dec_ln(x)

    def contrastive_embeddings(self, I, T, text_mask):
        """Image and text embeddings feeding the score matrix, per the ablation flags."""
        cfg = self.cfg
        P = self.inversion(I) if cfg.use_textual_inversion else I
        if not cfg.use_refinement:
            return pair_embeddings(I, P, self.refine.img_proj, self.refine.txt_proj)
        if cfg.use_cross_modal_interaction:
            P_al, T_al = cross_align(P, T, text_mask)
        else:
            P_al, T_al = P, T
        fused = fuse(P_al, T_al, self.refine.fusion if cfg.use_fusion_mlp else None)
        B, M = P.shape[0], P.shape[1]
        seq_mask = np.concatenate([np.ones((B, M), dtype=np.int64), np.asarray(text_mask, dtype=np.int64)], axis=1)
        O = self.refine_decode(fused, seq_mask)
        return pair_embeddings(I, O, self.refine.img_proj, self.refine.txt_proj, seq_mask)

    def compute_losses(self, patches, targets: TokenSequence, use_rrg=True, use_sr=True, sr_weight=1.0):
        """Full training objective on one batch; returns a :class:`LossBreakdown`."""
        I = self.encode_image(patches)
        l_rrg = l_sr = None
        if use_rrg:
            logp = self.teacher_forced_logprobs(I, targets)
            l_rrg = rrg_loss(logp, targets.ids[:, 1:], targets.mask[:, 1:])
        if use_sr and self.cfg.sr_active:
            in_ids, in_mask = targets.ids[:, :-1], targets.mask[:, :-1]
            T = self.encode_text(in_ids, in_mask)
            img, txt = self.contrastive_embeddings(I, T, in_mask)
            l_sr = sr_loss(score_matrix(img, txt, self.cfg.tau))
        return LossBreakdown(l_rrg, l_sr, total_loss(l_rrg, l_sr, sr_weight))

    # ------------------------------------------------------------------
    # state

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint {state[name].shape} vs model {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


# ----------------------------------------------------------------------
# checkpoint file: magic, version, config text, then named float64 tensors

CKPT_MAGIC = b"TISRCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: TISRModel, path) -> None:
    cfg_bytes = config_to_text(model.cfg).encode("utf-8")
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TISRModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    cfg = model_config_from_text(raw[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    model = TISRModel(cfg)
    model.load_state_dict(state)
    return model
