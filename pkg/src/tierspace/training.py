"""Model assembly, training loop, checkpoints, and evaluation glue.

One model bundles the encoder stub, the disentangler, a bounded box-delta
head, and a frozen zero root. Proposal features come from a frozen copy of
the initial text pipeline, standing in for a fixed vision backbone.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor, add, backward, cosine_sim, exp, index_last, log, matmul, mul,
    rows, scale, sigmoid, stack_last, sub, tsum, unit,
)
from .config import RunConfig, config_hash
from .disentangle import COMPONENTS, Disentangler, batch_disentangle_loss
from .encoder import EncoderStub, Vocabulary
from .geometry import (
    ChainBatch, ReferenceFrame, batch_alignment_loss, batch_contrast_loss,
    batch_radial_loss, chain_angle_stats,
)
from .grounding import (
    LossReport, LossWeights, evaluate, focal_loss, giou_pairwise, l1_box_loss,
    proposal_features,
)
from .optim import AdamW
from . import synthdata

__all__ = [
    "GroundingModel", "TrainedModel", "TrainingAbort",
    "prepare_items", "train", "save_checkpoint", "load_checkpoint",
    "angle_separation", "run_eval", "CHECKPOINT_SCHEMA", "CheckpointError",
]

CHECKPOINT_SCHEMA = "tierspace-checkpoint-v1"


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the config."""


class GroundingModel:
    """Trainable text pipeline plus detection heads over one config."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary):
        self.cfg = cfg
        self.vocab = vocab
        mult = cfg.adapter_multiplier
        self.encoder = EncoderStub(vocab, cfg.d_model, cfg.t_max, cfg.seed,
                                   self_attention=cfg.encoder_self_attention,
                                   adapter_rank=cfg.adapter_rank, adapter_scale=mult)
        self.disentangler = Disentangler(
            cfg.d_model, cfg.embed_dim, cfg.heads, cfg.n_slots, cfg.seed + 1,
            init=cfg.init_mode, components=COMPONENTS[: cfg.component_count],
            attention=cfg.attention_variant, placement=cfg.placement,
            adapter_rank=cfg.adapter_rank, adapter_scale=mult)
        rng = np.random.default_rng(cfg.seed + 2)
        self.box_w = Tensor(rng.standard_normal((cfg.embed_dim, 4)) * 0.01,
                            requires_grad=True)
        self.box_b = Tensor(np.zeros(4), requires_grad=True)
        self.root = np.zeros(cfg.embed_dim)  # frozen reference anchor
        self.frame = ReferenceFrame(root=self.root, mode="dynamic")
        self.global_frame = ReferenceFrame(root=self.root, mode="global")

    def param_groups(self):
        module = dict(self.disentangler.p)
        module["box.w"] = self.box_w
        module["box.b"] = self.box_b
        adapter = {}
        adapter.update(self.encoder.params())
        if self.disentangler.adapter is not None:
            adapter.update({f"proj.{k}": v for k, v in
                            self.disentangler.adapter.params().items()})
        return {"module": module, "adapter": adapter}

    def embed_batch(self, captions):
        """Captions -> (components, pooled units, E tensor, token mask)."""
        x, mask = self.encoder.encode_batch(captions)
        comps, pooled, e = self.disentangler.forward(x, mask)
        return comps, pooled, e

    def embed_np(self, captions):
        return self.embed_batch(captions)[2].data

    def refine_proposals(self, proposals):
        """Bounded box deltas from proposal features; always positive area."""
        feats = Tensor(np.stack([p.feature for p in proposals]))
        raw = sigmoid(add(matmul(feats, self.box_w), self.box_b))
        boxes = np.array([p.box for p in proposals])
        cx = Tensor((boxes[:, 0] + boxes[:, 2]) / 2.0)
        cy = Tensor((boxes[:, 1] + boxes[:, 3]) / 2.0)
        w = Tensor(boxes[:, 2] - boxes[:, 0])
        h = Tensor(boxes[:, 3] - boxes[:, 1])
        half = Tensor(np.full(len(proposals), 0.5))
        dx = scale(sub(index_last(raw, 0), Tensor(np.full(len(proposals), 0.5))), 0.1)
        dy = scale(sub(index_last(raw, 1), Tensor(np.full(len(proposals), 0.5))), 0.1)
        sw = exp(scale(sub(index_last(raw, 2), Tensor(np.full(len(proposals), 0.5))), 0.4))
        sh = exp(scale(sub(index_last(raw, 3), Tensor(np.full(len(proposals), 0.5))), 0.4))
        ncx = add(cx, dx)
        ncy = add(cy, dy)
        nw2 = mul(mul(w, sw), half)
        nh2 = mul(mul(h, sh), half)
        return stack_last([sub(ncx, nw2), sub(ncy, nh2), add(ncx, nw2), add(ncy, nh2)])

    def frozen_featurizer(self):
        """Fresh copies of the initial pipeline, used as the fixed feature
        extractor for proposals (the vision-backbone stand-in)."""
        cfg = self.cfg
        enc = EncoderStub(self.vocab, cfg.d_model, cfg.t_max, cfg.seed,
                          self_attention=cfg.encoder_self_attention, adapter_rank=0)
        dis = Disentangler(cfg.d_model, cfg.embed_dim, cfg.heads, cfg.n_slots,
                           cfg.seed + 1, init=cfg.init_mode, placement="none")
        cache = {}

        # sum pooling (mean times token count): feature norms grow with
        # description depth, giving the fixed feature space the radial
        # hierarchy the angular objectives presume
        def featurize(caption):
            if caption not in cache:
                x, mask = enc.encode_batch([caption])
                _, _, e = dis.forward(x, mask)
                cache[caption] = e.data[0] * mask[0].sum()
            return cache[caption]

        def featurize_many(captions):
            missing = sorted({c for c in captions if c not in cache})
            if missing:
                x, mask = enc.encode_batch(missing)
                _, _, e = dis.forward(x, mask)
                for c, row, m in zip(missing, e.data, mask):
                    cache[c] = row * m.sum()
            return [cache[c] for c in captions]

        featurize.many = featurize_many
        return featurize


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def prepare_items(model, scenes, chains, cfg):
    """Precompute proposals and class labels for every (scene, chain) pair."""
    featurize = model.frozen_featurizer()
    by_id = {s.id: s for s in scenes}
    # warm the featurizer cache in one batched pass
    from .grounding import canonical_description
    descriptions = [canonical_description(by_id[c.scene_id], obj)
                    for c in chains for obj in by_id[c.scene_id].objects]
    featurize.many(descriptions)
    items = []
    for chain in chains:
        scene = by_id[chain.scene_id]
        props = proposal_features(scene, featurize, noise_std=cfg.noise_std,
                                  seed=cfg.seed, box_jitter=cfg.box_jitter)
        labels = np.zeros((6, len(props)))
        for t in range(3):
            parsed = synthdata.parse_caption(chain.tiers[t]["pos"])
            for j, p in enumerate(props):
                obj = scene.object_by_id(p.source_object_id)
                labels[t, j] = 1.0 if synthdata.caption_true(parsed, obj, scene) else 0.0
        gt_boxes = np.array([scene.object_by_id(p.source_object_id).box for p in props])
        items.append({"scene": scene, "chain": chain, "proposals": props,
                      "labels": labels, "gt_boxes": gt_boxes})
    return items


def _chain_captions(chain):
    return chain.positives() + chain.negatives()


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def batch_infonce(anchors, positives, negatives, temperature):
    """Row-wise InfoNCE: -log exp(s+) / (exp(s+) + sum exp(s-)), batch mean."""
    sims = [scale(cosine_sim(anchors, positives), 1.0 / temperature)]
    sims += [scale(cosine_sim(anchors, n), 1.0 / temperature) for n in negatives]
    m = np.max(np.stack([s.data for s in sims]), axis=0)
    exps = [exp(sub(s, Tensor(m))) for s in sims]
    denom = exps[0]
    for e in exps[1:]:
        denom = add(denom, e)
    per_row = sub(log(denom), sub(sims[0], Tensor(m)))
    return scale(tsum(per_row), 1.0 / per_row.shape[0])


def structure_terms(model, e, pooled, pos_idx, neg_idx, cfg):
    """Mode-dependent text-structure loss and its itemized pieces."""
    report = {"l_disentangle": 0.0, "l_align": 0.0, "l_contrast": 0.0,
              "l_mode_term": 0.0}
    if cfg.loss_mode == "base":
        return Tensor(0.0), report
    parts = []
    if cfg.placement != "none" and pooled:
        dis = batch_disentangle_loss(pooled, pos_idx, neg_idx, margin=cfg.margin,
                                     lam=cfg.lam, cosine=cfg.cosine_mode)
        report["l_disentangle"] = dis.item()
        parts.append(dis)
    batch = ChainBatch(
        positives=[rows(e, np.asarray(ix, dtype=np.intp)) for ix in pos_idx],
        negatives=[rows(e, np.asarray(ix, dtype=np.intp)) for ix in neg_idx],
        epsilon=cfg.epsilon)
    mode = cfg.loss_mode
    if mode == "CL":
        # conventional InfoNCE: own-chain negatives plus in-batch negatives
        # (other chains' positives at the same tier, rolled by one chain)
        n = batch.size
        shift = np.roll(np.arange(n), 1)
        terms = []
        for t in range(batch.tier_count - 1):
            negs = [batch.negatives[k] for k in range(batch.tier_count)]
            if n > 1:
                negs += [rows(batch.positives[k], shift)
                         for k in range(batch.tier_count)]
            terms.append(batch_infonce(batch.positives[t], batch.positives[t + 1],
                                       negs, cfg.cl_temperature))
        term = scale(_sum(terms), 1.0 / len(terms))
        report["l_mode_term"] = term.item()
        parts.append(term)
    elif mode == "RE":
        term = batch_radial_loss(batch, model.global_frame,
                                 neg_weight=cfg.re_neg_weight)
        report["l_mode_term"] = term.item()
        parts.append(term)
    elif mode in ("H", "H+only", "H-only", "reverse-H"):
        flipped = mode == "reverse-H"
        if mode in ("H", "H+only", "reverse-H"):
            align = batch_alignment_loss(batch, model.frame, flipped=flipped)
            report["l_align"] = align.item()
            parts.append(align)
        if mode in ("H", "H-only", "reverse-H"):
            contrast = batch_contrast_loss(batch, model.frame, flipped=not flipped)
            weight = cfg.h_neg_weight if mode in ("H", "reverse-H") else 1.0
            contrast = scale(contrast, weight)
            report["l_contrast"] = contrast.item()
            parts.append(contrast)
    total = _sum(parts) if parts else Tensor(0.0)
    return total, report


def _sum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def detection_losses(model, e, items, batch_ids, cfg):
    """Focal classification + box regression over the batch's scenes."""
    l_class_parts, l_giou_parts, l_l1_parts = [], [], []
    for bi, item_id in enumerate(batch_ids):
        item = items[item_id]
        props = item["proposals"]
        feats = np.stack([p.feature for p in props])
        q_rows = rows(e, np.arange(bi * 6, bi * 6 + 6))
        qn = unit(q_rows, eps=1e-12)
        fn = unit(Tensor(feats), eps=1e-12)
        logits = scale(matmul(qn, Tensor(fn.data.T)), 1.0 / cfg.temperature)
        probs = sigmoid(logits)
        l_class_parts.append(focal_loss(probs, item["labels"],
                                        gamma=cfg.focal_gamma, alpha=cfg.focal_alpha))
        refined = model.refine_proposals(props)
        l_giou_parts.append(_mean_scalar(giou_pairwise(refined, Tensor(item["gt_boxes"]))))
        l_l1_parts.append(l1_box_loss(refined, Tensor(item["gt_boxes"])))
    b = float(len(batch_ids))
    return (scale(_sum(l_class_parts), 1.0 / b),
            scale(_sum(l_l1_parts), 1.0 / b),
            scale(_sum(l_giou_parts), 1.0 / b))


def _mean_scalar(t):
    from .autodiff import tmean
    return t if t.shape == () else tmean(t)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(cfg, scenes, chains, eval_items=None, log_fn=None, start_iteration=0,
          model=None, optimizer=None):
    """Run the training loop; returns (model, reports, items).

    Per-step chain sampling derives its stream from (seed, iteration), so a
    resumed run continues the original trajectory exactly.
    """
    vocab = Vocabulary(synthdata.build_token_list())
    if model is None:
        model = GroundingModel(cfg, vocab)
    groups = model.param_groups()
    if optimizer is None:
        optimizer = AdamW({"module": (groups["module"], cfg.lr_module),
                           "adapter": (groups["adapter"], cfg.lr_adapter)},
                          weight_decay=cfg.weight_decay)
    items = prepare_items(model, scenes, chains, cfg)
    weights = LossWeights(w_class=cfg.w_class, w_bbox=cfg.w_bbox,
                          w_giou=cfg.w_giou, w_structure=cfg.w_structure, lam=cfg.lam)
    reports = []
    b = min(cfg.images_per_batch, len(items))
    for it in range(start_iteration, cfg.iterations):
        step_rng = np.random.default_rng([cfg.seed, 777, it])
        batch_ids = step_rng.choice(len(items), size=b, replace=False)
        captions = []
        for item_id in batch_ids:
            captions.extend(_chain_captions(items[item_id]["chain"]))
        _, pooled, e = model.embed_batch(captions)
        pos_idx = [[bi * 6 + t for bi in range(b)] for t in range(3)]
        neg_idx = [[bi * 6 + 3 + t for bi in range(b)] for t in range(3)]
        l_structure, struct_report = structure_terms(model, e, pooled,
                                                     pos_idx, neg_idx, cfg)
        l_class, l_bbox, l_giou = detection_losses(model, e, items, batch_ids, cfg)
        total = add(add(scale(l_class, weights.w_class), scale(l_bbox, weights.w_bbox)),
                    add(scale(l_giou, weights.w_giou),
                        scale(l_structure, weights.w_structure)))
        if not np.isfinite(total.data):
            raise TrainingAbort(f"non-finite loss at step {it}")
        optimizer.zero_grad()
        backward(total)
        optimizer.step()
        report = LossReport(step=it, total=total.item(), l_class=l_class.item(),
                            l_bbox=l_bbox.item(), l_giou=l_giou.item(),
                            l_structure=l_structure.item(), **struct_report)
        if eval_items is not None and cfg.eval_cadence > 0 \
                and (it + 1) % cfg.eval_cadence == 0:
            report.metrics = evaluate(TrainedModel(model, cfg), eval_items,
                                      iou_threshold=cfg.iou_threshold)
        reports.append(report)
        if log_fn is not None:
            log_fn(report)
    return model, optimizer, reports, items


class TrainedModel:
    """Evaluation adapter: scores via the trained text path, boxes via the
    bounded-delta head; forward-only."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self._cache = {}

    def _embed(self, caption):
        if caption not in self._cache:
            self._cache[caption] = self.model.embed_np([caption])[0]
        return self._cache[caption]

    def score_proposals(self, caption, scene, proposals):
        e = self._embed(caption)
        feats = np.stack([p.feature for p in proposals])
        en = e / (np.linalg.norm(e) + 1e-12)
        fn = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12)
        logits = fn @ en / self.cfg.temperature
        return 1.0 / (1.0 + np.exp(-logits))

    def refine_boxes(self, scene, proposals):
        return self.model.refine_proposals(proposals).data


def run_eval(model, cfg, eval_items):
    """Detection metrics plus exterior-angle separation on held-out chains."""
    adapter = TrainedModel(model, cfg)
    metrics = evaluate(adapter, eval_items, iou_threshold=cfg.iou_threshold)
    metrics.update(angle_separation(model, [it["chain"] for it in eval_items]))
    return metrics


def angle_separation(model, chains, bins=18):
    """Mean exterior angles over positive cross-tier vs same-tier pos/neg
    pairs, plus a shared histogram; embeddings come from the current model."""
    pos_angles, neg_angles = [], []
    for chain in chains:
        e = model.embed_np(_chain_captions(chain))
        pos, neg = chain_angle_stats(list(e[:3]), list(e[3:]), model.frame)
        pos_angles.extend(pos)
        neg_angles.extend(neg)
    edges = np.linspace(0.0, np.pi, bins + 1)
    hist_pos, _ = np.histogram(pos_angles, bins=edges)
    hist_neg, _ = np.histogram(neg_angles, bins=edges)
    return {
        "mean_positive_angle": float(np.mean(pos_angles)),
        "mean_negative_angle": float(np.mean(neg_angles)),
        "angle_gap": float(np.mean(neg_angles) - np.mean(pos_angles)),
        "angle_histogram": {
            "bin_low": edges[:-1].tolist(),
            "bin_high": edges[1:].tolist(),
            "count_pos": hist_pos.tolist(),
            "count_neg": hist_neg.tolist(),
        },
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, optimizer, cfg, iteration):
    groups = model.param_groups()
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "config": cfg.effective_dict(),
        "config_hash": config_hash(cfg),
        "iteration": iteration,
        "params": {g: {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                       for k, v in params.items()}
                   for g, params in groups.items()},
        "optimizer": optimizer.state_dict(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path, expected_cfg=None):
    """Rebuild (model, optimizer, cfg, iteration) from a checkpoint file."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: expected schema {CHECKPOINT_SCHEMA!r}")
    cfg = RunConfig(**payload["config"])
    if expected_cfg is not None and config_hash(expected_cfg) != payload["config_hash"]:
        raise CheckpointError("checkpoint was produced under a different config")
    vocab = Vocabulary(synthdata.build_token_list())
    model = GroundingModel(cfg, vocab)
    groups = model.param_groups()
    for g, params in payload["params"].items():
        for k, rec in params.items():
            if k not in groups[g]:
                raise CheckpointError(f"unknown parameter {g}/{k}")
            tensor = groups[g][k]
            arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
            if arr.shape != tensor.shape:
                raise CheckpointError(f"parameter {g}/{k} shape mismatch")
            tensor.data = arr
    optimizer = AdamW({"module": (groups["module"], cfg.lr_module),
                       "adapter": (groups["adapter"], cfg.lr_adapter)},
                      weight_decay=cfg.weight_decay)
    optimizer.load_state_dict(payload["optimizer"])
    return model, optimizer, cfg, int(payload["iteration"])
