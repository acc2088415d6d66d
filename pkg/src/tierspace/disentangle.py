"""Three-component text disentanglement.

Token features are refined (residual FFN, projection, layer norm), split
into object / attribute / relation components by multi-head cross-attention
against learnable slot vectors, and re-aggregated into one sentence
embedding. The companion loss keeps components mutually decorrelated while
margin terms tie each component to its role across tiers.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    Tensor, absolute, add, masked_mean, matmul, mul, layer_norm,
    gelu, relu, reshape, rows, scale, softmax, tile_batch, transpose, tsum, unit,
)
from .lora import LoraAdapter, lora_apply

__all__ = [
    "COMPONENTS", "MissingComponentError", "Disentangler",
    "cross_attention", "disentangle_loss", "batch_disentangle_loss",
    "component_orthogonality",
]

COMPONENTS = ("object", "attribute", "relation")

ATTENTION_VARIANTS = ("learnable_kv", "learnable_query", "self")
PLACEMENTS = ("token", "pooled", "none")


class MissingComponentError(KeyError):
    """A tier lacks a component embedding the loss needs."""


def _affine(x, w, b, adapter=None):
    return add(lora_apply(adapter, w, x), b)


def _identity_block(d_in, d_out):
    w = np.zeros((d_in, d_out))
    n = min(d_in, d_out)
    w[:n, :n] = np.eye(n)
    return w


def _orthogonal(rng, n, m=None):
    m = n if m is None else m
    q, _ = np.linalg.qr(rng.standard_normal((max(n, m), max(n, m))))
    return q[:n, :m]


class Disentangler:
    """Learnable module state plus the forward pass.

    ``init`` is "identity" (projections start at identity, slots are three
    orthogonal rotations of a shared base, so the module starts near
    pass-through with distinct component subspaces) or "uniform".
    """

    def __init__(self, d_model, dim, heads, n_slots, seed, init="identity",
                 components=COMPONENTS, attention="learnable_kv",
                 placement="token", adapter_rank=0, adapter_scale=1.0):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        if attention not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {attention!r}")
        if placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {placement!r}")
        if init not in ("identity", "uniform"):
            raise ValueError(f"unknown init {init!r}")
        self.d_model = d_model
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.n_slots = n_slots
        self.components = tuple(components)
        self.attention = attention
        self.placement = placement
        rng = np.random.default_rng(seed)
        p = {}

        def mat(shape, identity=None):
            if init == "identity" and identity is not None:
                return identity
            bound = 1.0 / math.sqrt(shape[0])
            return rng.uniform(-bound, bound, size=shape)

        p["ffn_in.w1"] = mat((d_model, d_model), np.eye(d_model))
        p["ffn_in.b1"] = np.zeros(d_model)
        p["ffn_in.w2"] = mat((d_model, d_model), np.zeros((d_model, d_model)))
        p["ffn_in.b2"] = np.zeros(d_model)
        p["proj.w"] = mat((d_model, dim), _identity_block(d_model, dim))
        p["proj.b"] = np.zeros(dim)
        p["ln_in.g"] = np.ones(dim)
        p["ln_in.b"] = np.zeros(dim)
        base = _orthogonal(rng, n_slots, dim)
        for c in self.components:
            rot = _orthogonal(rng, dim)
            p[f"slots.{c}"] = (base @ rot) if init == "identity" else mat((n_slots, dim))
            for kind in ("q", "k", "v"):
                p[f"attn.{c}.{kind}"] = mat((dim, dim), np.eye(dim))
        p["ln_out.g"] = np.ones(dim)
        p["ln_out.b"] = np.zeros(dim)
        p["ffn_out.w1"] = mat((dim, dim), np.eye(dim))
        p["ffn_out.b1"] = np.zeros(dim)
        p["ffn_out.w2"] = mat((dim, dim), np.zeros((dim, dim)))
        p["ffn_out.b2"] = np.zeros(dim)
        self.p = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
        self.adapter = None
        if adapter_rank > 0:
            self.adapter = LoraAdapter(d_model, dim, adapter_rank, adapter_scale,
                                       "disentangle.proj", rng)

    def params(self):
        out = dict(self.p)
        if self.adapter is not None:
            out.update(self.adapter.params())
        return out

    def _component_attention(self, xp, mask, name):
        """One component's cross-attention, wired per the configured variant."""
        wq = self.p[f"attn.{name}.q"]
        wk = self.p[f"attn.{name}.k"]
        wv = self.p[f"attn.{name}.v"]
        slots = self.p[f"slots.{name}"]
        if self.attention == "learnable_kv":
            return cross_attention(xp, slots, wq, wk, wv, self.heads)
        if self.attention == "learnable_query":
            q = tile_batch(slots, xp.shape[0])
            return cross_attention(q, xp, wq, wk, wv, self.heads, key_mask=mask)
        return cross_attention(xp, xp, wq, wk, wv, self.heads, key_mask=mask)

    def forward(self, x, mask):
        """(S, T, d_model) features -> (components, pooled units, E).

        Residual paths wrap both FFN blocks and (shape permitting) the
        cross-attention, so zeroed weights reduce the module to a mean-pooled
        layer-norm projection. ``pooled`` maps name -> unit (S, dim) vectors.
        """
        h = add(x, _ffn(x, self.p, "ffn_in"))
        xp = _affine(h, self.p["proj.w"], self.p["proj.b"], self.adapter)
        xp = layer_norm(xp, self.p["ln_in.g"], self.p["ln_in.b"])
        if self.placement == "none":
            e = masked_mean(xp, mask, axis=1)
            return {}, {}, e
        if self.placement == "pooled":
            pooled_tokens = masked_mean(xp, mask, axis=1)
            xp = reshape(pooled_tokens, (xp.shape[0], 1, self.dim))
            mask = np.ones((xp.shape[0], 1))
        residual = self.attention != "learnable_query"  # slot-axis outputs can't add tokens
        comps = {}
        for c in self.components:
            out = self._component_attention(xp, mask, c)
            comps[c] = add(xp, out) if residual else out
        total = None
        for c in self.components:
            total = comps[c] if total is None else add(total, comps[c])
        z = layer_norm(total, self.p["ln_out.g"], self.p["ln_out.b"])
        f = add(z, _ffn(z, self.p, "ffn_out"))
        pool_mask = mask if residual else np.ones(f.shape[:2])
        e = masked_mean(f, pool_mask, axis=1)
        pooled = {c: unit(masked_mean(comps[c], pool_mask, axis=1), eps=1e-12)
                  for c in self.components}
        return comps, pooled, e


def _ffn(x, p, prefix):
    h = gelu(_affine(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _affine(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _split_heads(t, heads):
    s, n, d = t.shape
    return transpose(reshape(t, (s, n, heads, d // heads)), (0, 2, 1, 3))


def cross_attention(q_tokens, kv_tokens, wq, wk, wv, heads, key_mask=None):
    """Multi-head attention Softmax(QK^T / sqrt(d_k)) V with concatenated
    heads and no output projection.

    ``kv_tokens`` may be (n, dim) shared slots (broadcast over the batch) or
    (S, n, dim) per-sentence tokens; ``key_mask`` hides padded key positions.
    2-D queries are treated as a single sentence and returned 2-D.
    """
    squeeze = q_tokens.ndim == 2
    if squeeze:
        q_tokens = reshape(q_tokens, (1,) + q_tokens.shape)
    dim = wq.shape[1]
    head_dim = dim // heads
    q = _split_heads(matmul(q_tokens, wq), heads)
    if kv_tokens.ndim == 2:
        n = kv_tokens.shape[0]
        k = transpose(reshape(matmul(kv_tokens, wk), (n, heads, head_dim)), (1, 0, 2))
        v = transpose(reshape(matmul(kv_tokens, wv), (n, heads, head_dim)), (1, 0, 2))
        scores = matmul(q, transpose(k, (0, 2, 1)))
    else:
        k = _split_heads(matmul(kv_tokens, wk), heads)
        v = _split_heads(matmul(kv_tokens, wv), heads)
        scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    scores = scale(scores, 1.0 / math.sqrt(head_dim))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask) > 0, 0.0, -1e9)[:, None, None, :]
        scores = add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
    attn = softmax(scores)
    out = matmul(attn, v)
    s, _, tq, _ = out.shape
    out = reshape(transpose(out, (0, 2, 1, 3)), (s, tq, dim))
    return reshape(out, (tq, dim)) if squeeze else out


# ---------------------------------------------------------------------------
# disentanglement loss
# ---------------------------------------------------------------------------

def _pair_distance(a, b, mode):
    c = tsum(mul(a, b), axis=-1)
    if mode == "distance":
        return 1.0 - c
    return c


def _hinge(t):
    return relu(t)


def component_orthogonality(pooled):
    """Sum of |i . j| over available component pairs for one sentence set."""
    names = [c for c in COMPONENTS if c in pooled]
    total = Tensor(np.zeros(pooled[names[0]].shape[:-1])) if names else Tensor(0.0)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            dot = tsum(mul(pooled[names[i]], pooled[names[j]]), axis=-1)
            total = add(total, absolute(dot))
    return total


def disentangle_loss(chains, margin=0.2, lam=0.1, cosine="distance"):
    """Margin + orthogonality objective over pooled unit components.

    ``chains`` is a list; each chain maps "pos"/"neg" to per-tier lists of
    component dicts (name -> unit (dim,) Tensor). ``cosine`` selects the
    cosine-distance reading (default) or the literal-similarity reading.
    Every margin term is hinged at zero. Returns the batch mean.
    """
    if cosine not in ("distance", "similarity"):
        raise ValueError(f"unknown cosine mode {cosine!r}")
    if not chains:
        raise ValueError("disentangle_loss: empty batch")
    total = Tensor(0.0)
    for chain in chains:
        pos, neg = chain["pos"], chain["neg"]
        tiers = len(pos)
        families = set(pos[0].keys())
        for t in range(tiers):
            for side in (pos, neg):
                if set(side[t].keys()) != families:
                    raise MissingComponentError(
                        f"tier {t} lacks components {families - set(side[t].keys())}")
        chain_total = Tensor(0.0)
        if "object" in families:
            for t in range(tiers - 1):
                term = margin + _pair_distance(pos[t]["object"], pos[t + 1]["object"], cosine) \
                    - _pair_distance(pos[t]["object"], neg[t]["object"], cosine)
                chain_total = add(chain_total, _hinge(term))
        if "attribute" in families:
            for t in range(1, tiers - 1):
                term = margin + _pair_distance(pos[t]["attribute"], pos[t + 1]["attribute"], cosine) \
                    - _pair_distance(pos[t]["attribute"], neg[t]["attribute"], cosine)
                chain_total = add(chain_total, _hinge(term))
        if "relation" in families:
            term = margin - _pair_distance(pos[tiers - 1]["relation"],
                                           neg[tiers - 1]["relation"], cosine)
            chain_total = add(chain_total, _hinge(term))
        ortho = Tensor(0.0)
        for t in range(tiers):
            for side in (pos, neg):
                ortho = add(ortho, component_orthogonality(side[t]))
        chain_total = add(chain_total, scale(ortho, lam / (2.0 * tiers)))
        total = add(total, chain_total)
    return scale(total, 1.0 / len(chains))


def batch_disentangle_loss(pooled, pos_idx, neg_idx, margin=0.2, lam=0.1,
                           cosine="distance"):
    """Vectorized variant: ``pooled`` maps name -> (S, dim) unit tensors and
    ``pos_idx``/``neg_idx`` give per-tier sentence rows, shape (l, B)."""
    if cosine not in ("distance", "similarity"):
        raise ValueError(f"unknown cosine mode {cosine!r}")
    tiers = len(pos_idx)
    b = len(pos_idx[0])
    names = [c for c in COMPONENTS if c in pooled]

    def gather(name, idx):
        return rows(pooled[name], np.asarray(idx, dtype=np.intp))

    total = Tensor(0.0)
    if "object" in pooled:
        for t in range(tiers - 1):
            term = margin + _pair_distance(gather("object", pos_idx[t]),
                                           gather("object", pos_idx[t + 1]), cosine) \
                - _pair_distance(gather("object", pos_idx[t]),
                                 gather("object", neg_idx[t]), cosine)
            total = add(total, tsum(_hinge(term)))
    if "attribute" in pooled:
        for t in range(1, tiers - 1):
            term = margin + _pair_distance(gather("attribute", pos_idx[t]),
                                           gather("attribute", pos_idx[t + 1]), cosine) \
                - _pair_distance(gather("attribute", pos_idx[t]),
                                 gather("attribute", neg_idx[t]), cosine)
            total = add(total, tsum(_hinge(term)))
    if "relation" in pooled:
        term = margin - _pair_distance(gather("relation", pos_idx[tiers - 1]),
                                       gather("relation", neg_idx[tiers - 1]), cosine)
        total = add(total, tsum(_hinge(term)))
    if len(names) >= 2:
        ortho = component_orthogonality(pooled)  # over all S sentences
        s = pooled[names[0]].shape[0]
        total = add(total, scale(tsum(ortho), lam * b / s))
    return scale(total, 1.0 / b)
