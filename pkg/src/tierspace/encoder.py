"""Deterministic token-feature stub standing in for a pretrained text encoder.

Whitespace tokenization over a closed synthetic vocabulary, a frozen
embedding table with sinusoidal positions, an optional single self-attention
layer, and an output head that low-rank adapters can wrap.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, add, embed, matmul, reshape, scale, softmax, transpose
from .lora import LoraAdapter, lora_apply

__all__ = ["Vocabulary", "EncoderStub", "EmptyCaptionError", "sinusoidal_positions"]

UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"


class EmptyCaptionError(ValueError):
    """Caption tokenized to zero tokens."""


class Vocabulary:
    """token -> id map with a dedicated UNK id and a padding id."""

    def __init__(self, tokens):
        base = [UNK_TOKEN, PAD_TOKEN]
        seen = set(base)
        self.tokens = list(base)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                self.tokens.append(t)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def unk_id(self):
        return 0

    @property
    def pad_id(self):
        return 1

    def encode(self, caption):
        words = caption.lower().split()
        if not words:
            raise EmptyCaptionError("caption has no tokens")
        return [self.index.get(w, self.unk_id) for w in words]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        if tokens[:2] != [UNK_TOKEN, PAD_TOKEN]:
            raise ValueError("vocabulary file missing reserved tokens")
        vocab = cls.__new__(cls)
        vocab.tokens = tokens
        vocab.index = {t: i for i, t in enumerate(tokens)}
        return vocab


def sinusoidal_positions(t_max, dim):
    pe = np.zeros((t_max, dim))
    pos = np.arange(t_max)[:, None]
    idx = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, idx / dim)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : pe[:, 1::2].shape[1]])
    return pe


class EncoderStub:
    """Embedding + positions (+ optional self-attention) + adapted head.

    The table, positions, and base weights are frozen; only adapters train.
    """

    def __init__(self, vocab, d_model, t_max, seed, self_attention=False,
                 adapter_rank=0, adapter_scale=1.0, table_bias=1.0, table_noise=0.35):
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.d_model = d_model
        self.t_max = t_max
        self.self_attention = self_attention
        # anisotropic table: a shared dominant direction plus per-token noise,
        # the usual geometry of trained text encoders
        direction = rng.standard_normal(d_model)
        direction /= np.linalg.norm(direction)
        self.table = Tensor(table_bias * direction
                            + table_noise * rng.standard_normal((len(vocab), d_model)))
        self.positions = sinusoidal_positions(t_max, d_model) * 0.05
        self.head_w = Tensor(np.eye(d_model))
        if self_attention:
            s = 0.2 / math.sqrt(d_model)
            self.attn_w = {k: Tensor(rng.standard_normal((d_model, d_model)) * s)
                           for k in ("q", "k", "v")}
        else:
            self.attn_w = None
        self.adapter = None
        if adapter_rank > 0:
            self.adapter = LoraAdapter(d_model, d_model, adapter_rank,
                                       adapter_scale, "encoder.head", rng)

    def params(self):
        return dict(self.adapter.params()) if self.adapter is not None else {}

    def tokenize(self, captions):
        """Pad a list of captions to a shared length; returns (ids, mask)."""
        token_ids = [self.vocab.encode(c) for c in captions]
        t_pad = max(len(ids) for ids in token_ids)
        if t_pad > self.t_max:
            raise ValueError(f"caption length {t_pad} exceeds t_max={self.t_max}")
        ids = np.full((len(captions), t_pad), self.vocab.pad_id, dtype=np.intp)
        mask = np.zeros((len(captions), t_pad))
        for i, row in enumerate(token_ids):
            ids[i, : len(row)] = row
            mask[i, : len(row)] = 1.0
        return ids, mask

    def forward_ids(self, ids, mask):
        """(S, T) ids -> (S, T, d_model) features."""
        t = ids.shape[1]
        x = embed(self.table, ids)
        x = add(x, Tensor(self.positions[:t]))
        if self.self_attention:
            x = add(x, self._self_attn(x, mask))
        return lora_apply(self.adapter, self.head_w, x)

    def _self_attn(self, x, mask):
        d = x.shape[-1]
        q = matmul(x, self.attn_w["q"])
        k = matmul(x, self.attn_w["k"])
        v = matmul(x, self.attn_w["v"])
        scores = matmul(q, transpose(k, (0, 2, 1)))
        bias = np.where(mask[:, None, :] > 0, 0.0, -1e9)
        scores = add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
        attn = softmax(scale(scores, 1.0 / math.sqrt(d)))
        return matmul(attn, v)

    def encode(self, caption):
        """Single caption -> (T, d_model) Tensor."""
        ids, mask = self.tokenize([caption])
        out = self.forward_ids(ids, mask)
        return reshape(out, out.shape[1:])

    def encode_batch(self, captions):
        """Captions -> ((S, T, d_model) Tensor, (S, T) mask array)."""
        ids, mask = self.tokenize(captions)
        return self.forward_ids(ids, mask), mask
