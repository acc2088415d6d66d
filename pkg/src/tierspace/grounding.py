"""Toy language-grounded detection over synthetic scenes.

Proposals carry fixed features (a frozen featurizer applied to each object's
ground-truth description, plus noise); queries are scored by scaled cosine
similarity against them. Detection losses are focal, L1 box, and GIoU;
evaluation is average precision over category-level and description-level
queries with an 11-point interpolated protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor, absolute, add, cosine_sim, div, exp, index_last, log,
    maximum, minimum, mul, power, relu, scale, sigmoid, sub, tmean, tsum,
)
from . import synthdata

__all__ = [
    "Proposal", "LossWeights", "LossReport", "DegenerateBoxError",
    "canonical_description", "proposal_features",
    "score", "focal_loss", "giou_loss", "l1_box_loss",
    "contrastive_baseline", "combine_losses", "box_iou",
    "average_precision", "evaluate", "OracleModel", "RandomModel",
]


class DegenerateBoxError(ValueError):
    """Box with non-positive area where a valid box is required."""


@dataclass
class Proposal:
    box: tuple
    feature: np.ndarray
    source_object_id: int | None = None


@dataclass
class LossWeights:
    w_class: float = 4.0
    w_bbox: float = 5.0
    w_giou: float = 2.0
    w_structure: float = 5.0
    lam: float = 0.1

    def __post_init__(self):
        for name in ("w_class", "w_bbox", "w_giou", "w_structure", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    step: int = 0
    total: float = 0.0
    l_class: float = 0.0
    l_bbox: float = 0.0
    l_giou: float = 0.0
    l_structure: float = 0.0
    l_disentangle: float = 0.0
    l_align: float = 0.0
    l_contrast: float = 0.0
    l_mode_term: float = 0.0
    metrics: dict = field(default_factory=dict)

    def to_json(self):
        import json
        return json.dumps(self.__dict__, sort_keys=True)


def canonical_description(scene, obj):
    """Deterministic full description used for the object's fixed feature."""
    attr = obj.attributes.get("color") or obj.attributes.get("spatial")
    stem = f"{attr} {obj.category}" if attr else obj.category
    if obj.accessories:
        return f"{stem} with {obj.accessories[0]}"
    edges = scene.spatial_edges(obj)
    if edges:
        template, noun = edges[0]
        return f"{stem} {template} a {noun}"
    return stem


def proposal_features(scene, embed_fn, noise_std=0.0, seed=0, box_jitter=0.0):
    """One proposal per object: frozen description embedding plus noise.

    Deterministic given (scene, seed); ``embed_fn`` maps a caption to a
    plain feature vector and must already be frozen.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng([seed, scene.id])
    proposals = []
    for obj in scene.objects:
        feat = np.asarray(embed_fn(canonical_description(scene, obj)), dtype=np.float64)
        if noise_std > 0:
            feat = feat + rng.normal(0.0, noise_std, size=feat.shape)
        box = obj.box
        if box_jitter > 0:
            x0, y0, x1, y1 = box
            w, h = x1 - x0, y1 - y0
            dx = rng.normal(0.0, box_jitter, size=4) * np.array([w, h, w, h])
            box = (min(x0 + dx[0], x1 + dx[2] - 1e-3), min(y0 + dx[1], y1 + dx[3] - 1e-3),
                   max(x1 + dx[2], x0 + dx[0] + 1e-3), max(y1 + dx[3], y0 + dx[1] + 1e-3))
            box = tuple(float(np.clip(v, 0.0, 1.0)) for v in box)
        proposals.append(Proposal(box=box, feature=feat, source_object_id=obj.id))
    return proposals


def score(query_e, features, temperature=0.07):
    """Scaled cosine logits and logistic probabilities per proposal.

    ``query_e`` is a (D,) tensor (or array); ``features`` is (P, D) plain
    data. Ranking is invariant to uniform positive feature scaling.
    """
    features = np.asarray(features, dtype=np.float64)
    q = query_e if isinstance(query_e, Tensor) else Tensor(query_e)
    if q.shape[-1] != features.shape[-1]:
        from .autodiff import ShapeMismatchError
        raise ShapeMismatchError("score", q.shape, features.shape)
    logits = scale(cosine_sim(Tensor(features), q), 1.0 / temperature)
    return logits, sigmoid(logits)


def focal_loss(probs, labels, gamma=2.0, alpha=0.25, weights=None):
    """-alpha (1 - p_t)^gamma log(p_t), averaged over proposals.

    ``probs`` must lie strictly inside (0, 1); gamma=0, alpha=1 reduces to
    binary cross-entropy. ``weights`` (constant 0/1) selects valid entries.
    """
    p = probs if isinstance(probs, Tensor) else Tensor(probs)
    if np.any(p.data <= 0.0) or np.any(p.data >= 1.0):
        raise ValueError("focal_loss: probabilities must lie strictly in (0, 1)")
    y = np.asarray(labels, dtype=np.float64)
    one = Tensor(np.ones_like(y))
    p_t = add(mul(p, Tensor(y)), mul(sub(one, p), Tensor(1.0 - y)))
    nll = scale(log(p_t), -alpha)
    term = nll if gamma == 0 else mul(power(sub(one, p_t), gamma), nll)
    if weights is None:
        return tmean(term)
    w = np.asarray(weights, dtype=np.float64)
    return scale(tsum(mul(term, Tensor(w))), 1.0 / max(w.sum(), 1.0))


def _box_parts(t):
    return [index_last(t, i) for i in range(4)]


def _areas(x0, y0, x1, y1, name):
    w = sub(x1, x0)
    h = sub(y1, y0)
    if np.any(w.data <= 0.0) or np.any(h.data <= 0.0):
        raise DegenerateBoxError(f"{name}: box has non-positive extent")
    return mul(w, h)


def giou_pairwise(pred, gt):
    """Elementwise (1 - GIoU) over (..., 4) boxes; values lie in [0, 2]."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    px0, py0, px1, py1 = _box_parts(pred)
    gx0, gy0, gx1, gy1 = _box_parts(gt)
    pa = _areas(px0, py0, px1, py1, "giou pred")
    ga = _areas(gx0, gy0, gx1, gy1, "giou gt")
    iw = relu(sub(minimum(px1, gx1), maximum(px0, gx0)))
    ih = relu(sub(minimum(py1, gy1), maximum(py0, gy0)))
    inter = mul(iw, ih)
    union = sub(add(pa, ga), inter)
    iou = div(inter, union)
    ew = sub(maximum(px1, gx1), minimum(px0, gx0))
    eh = sub(maximum(py1, gy1), minimum(py0, gy0))
    enclose = mul(ew, eh)
    giou = sub(iou, div(sub(enclose, union), enclose))
    return sub(Tensor(np.ones(giou.shape)), giou)


def giou_loss(pred_box, gt_box):
    """Scalar mean of 1 - GIoU."""
    t = giou_pairwise(pred_box, gt_box)
    return t if t.shape == () else tmean(t)


def l1_box_loss(pred_box, gt_box):
    """Mean absolute coordinate difference."""
    pred = pred_box if isinstance(pred_box, Tensor) else Tensor(pred_box)
    gt = gt_box if isinstance(gt_box, Tensor) else Tensor(gt_box)
    return tmean(absolute(sub(pred, gt)))


def contrastive_baseline(query_e, positives, negatives, temperature=0.07):
    """InfoNCE over cosine similarities; ablation baseline only."""
    if len(positives) < 1 or len(negatives) < 1:
        raise ValueError("contrastive_baseline: need >= 1 positive and negative")
    q = query_e if isinstance(query_e, Tensor) else Tensor(query_e)
    cands = [p if isinstance(p, Tensor) else Tensor(p) for p in positives] \
        + [n if isinstance(n, Tensor) else Tensor(n) for n in negatives]
    sims = [scale(cosine_sim(q, c), 1.0 / temperature) for c in cands]
    m = max(s.data for s in sims)
    exps = [exp(sub(s, Tensor(m))) for s in sims]
    denom = exps[0]
    for e in exps[1:]:
        denom = add(denom, e)
    total = Tensor(0.0)
    for k in range(len(positives)):
        total = add(total, neg_log(div(exps[k], denom)))
    return scale(total, 1.0 / len(positives))


def neg_log(t):
    return scale(log(t), -1.0)


def combine_losses(l_class, l_bbox, l_giou, l_structure, weights):
    """Weighted Eq.-style total; returns (tensor, itemized report)."""
    terms = [l_class, l_bbox, l_giou, l_structure]
    terms = [t if isinstance(t, Tensor) else Tensor(float(t)) for t in terms]
    total = add(add(scale(terms[0], weights.w_class), scale(terms[1], weights.w_bbox)),
                add(scale(terms[2], weights.w_giou), scale(terms[3], weights.w_structure)))
    report = LossReport(total=total.item(), l_class=terms[0].item(),
                        l_bbox=terms[1].item(), l_giou=terms[2].item(),
                        l_structure=terms[3].item())
    return total, report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def average_precision(detections, n_positive):
    """11-point interpolated AP over (score, is_tp) detections."""
    if n_positive == 0:
        return 0.0
    dets = sorted(detections, key=lambda d: -d[0])
    tp = fp = 0
    precisions, recalls = [], []
    for s, is_tp in dets:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_positive)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        candidates = [p for p, rec in zip(precisions, recalls) if rec >= r - 1e-12]
        ap += max(candidates) if candidates else 0.0
    return ap / 11.0


class OracleModel:
    """Scores are the ground-truth indicator; boxes are exact."""

    def score_proposals(self, caption, scene, proposals):
        gt = set(synthdata.matching_objects(caption, scene))
        return np.array([1.0 if p.source_object_id in gt else 0.0 for p in proposals])

    def refine_boxes(self, scene, proposals):
        return np.array([scene.object_by_id(p.source_object_id).box for p in proposals])


class RandomModel:
    """Uniform-random scorer, for calibration tests."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def score_proposals(self, caption, scene, proposals):
        return self.rng.uniform(size=len(proposals))

    def refine_boxes(self, scene, proposals):
        return np.array([p.box for p in proposals])


def evaluate(model, items, iou_threshold=0.5, operating_point=0.5):
    """AP and per-tier precision/recall over evaluation items.

    ``items`` are dicts with keys scene, chain, proposals. Category AP uses
    tier-1 queries, description AP tier-3; the headline score is their
    geometric mean. A detection is a true positive iff its refined box
    reaches the IoU threshold against a still-unmatched ground-truth object.
    """
    if not items:
        raise ValueError("evaluate: empty evaluation set")
    tier_dets = {0: [], 1: [], 2: []}
    tier_npos = {0: 0, 1: 0, 2: 0}
    tier_pr = {0: [0, 0, 0], 1: [0, 0, 0], 2: [0, 0, 0]}  # tp, fp, fn at op point
    for item in items:
        scene, chain, proposals = item["scene"], item["chain"], item["proposals"]
        boxes = model.refine_boxes(scene, proposals)
        for t in range(3):
            caption = chain.tiers[t]["pos"]
            gt_ids = synthdata.matching_objects(caption, scene)
            scores = np.asarray(model.score_proposals(caption, scene, proposals),
                                dtype=np.float64)
            order = np.argsort(-scores)
            matched = set()
            dets = []
            for idx in order:
                is_tp = False
                for gid in gt_ids:
                    if gid in matched:
                        continue
                    if box_iou(boxes[idx], scene.object_by_id(gid).box) >= iou_threshold:
                        matched.add(gid)
                        is_tp = True
                        break
                dets.append((float(scores[idx]), is_tp))
            tier_dets[t].extend(dets)
            tier_npos[t] += len(gt_ids)
            kept = [(s, z) for s, z in dets if s > operating_point]
            tp = sum(1 for _, z in kept if z)
            tier_pr[t][0] += tp
            tier_pr[t][1] += sum(1 for _, z in kept if not z)
            tier_pr[t][2] += len(gt_ids) - tp
    ap_c = average_precision(tier_dets[0], tier_npos[0])
    ap_d = average_precision(tier_dets[2], tier_npos[2])
    metrics = {
        "ap_category": ap_c,
        "ap_description": ap_d,
        "ap_geometric_mean": float(np.sqrt(max(ap_c, 0.0) * max(ap_d, 0.0))),
    }
    for t in range(3):
        tp, fp, fn = tier_pr[t]
        metrics[f"tier{t + 1}_precision"] = tp / (tp + fp) if tp + fp else 0.0
        metrics[f"tier{t + 1}_recall"] = tp / (tp + fn) if tp + fn else 0.0
    return metrics
