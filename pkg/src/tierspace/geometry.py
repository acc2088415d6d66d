"""Exterior-angle geometry and sentence-hierarchy objectives.

An exterior angle at point ``a`` measures the turn between the direction
root->a and the direction a->b. Chains of tiered embeddings are trained so
that deeper tiers continue outward along their parent's direction (small
angles) while same-tier negatives are pushed toward the opposing direction
from the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor, arccos, mul, neg, scale, sub, tsum, unit,
)

__all__ = [
    "DegenerateVectorError",
    "ReferenceFrame", "HierarchyChain", "ChainBatch",
    "exterior_angle", "normalize_relative", "resolve_reference",
    "radial_loss", "hier_alignment_loss", "hier_contrast_loss",
    "structure_loss", "chain_angle_stats",
    "batch_radial_loss", "batch_alignment_loss", "batch_contrast_loss",
]

DEGENERACY_TOL = 1e-12


class DegenerateVectorError(ValueError):
    """A difference vector required by an angle has (near-)zero norm."""


@dataclass
class ReferenceFrame:
    """Frozen root plus the per-tier reference policy.

    ``dynamic`` anchors tier t at the previous tier's positive embedding
    (the root for the first tier); ``global`` always uses the root. The
    root is plain data, never a trainable parameter.
    """

    root: np.ndarray
    mode: str = "dynamic"

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=np.float64)
        if self.mode not in ("dynamic", "global"):
            raise ValueError(f"unknown reference mode {self.mode!r}")


@dataclass
class HierarchyChain:
    """One training unit: per tier, a positive and a negative embedding."""

    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    epsilon: float = 1e-8

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise ValueError("chain needs exactly one positive and one negative per tier")
        self.positives = [_as_tensor(e) for e in self.positives]
        self.negatives = [_as_tensor(e) for e in self.negatives]
        dims = {e.shape for e in self.positives + self.negatives}
        if len(dims) > 1:
            raise ValueError(f"chain embeddings disagree on dimension: {dims}")

    @property
    def tier_count(self):
        return len(self.positives)


def _as_tensor(e):
    return e if isinstance(e, Tensor) else Tensor(e)


def _check_nondegenerate(name, data):
    norms = np.sqrt((data * data).sum(axis=-1))
    if np.any(norms <= DEGENERACY_TOL):
        raise DegenerateVectorError(f"{name}: difference vector norm <= {DEGENERACY_TOL}")


def exterior_angle(a, b, root):
    """Angle at ``a`` between the ray root->a and the segment a->b, in radians.

    Forward-only helper on plain arrays; cosines are clipped to the exact
    [-1, 1] interval so collinear configurations return 0 or pi exactly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    root = np.asarray(root, dtype=np.float64)
    a_dir = a - root
    b_dir = b - a
    na = np.linalg.norm(a_dir)
    nb = np.linalg.norm(b_dir)
    if na <= DEGENERACY_TOL:
        raise DegenerateVectorError("exterior_angle: a coincides with the root")
    if nb <= DEGENERACY_TOL:
        raise DegenerateVectorError("exterior_angle: b coincides with a")
    c = np.clip(np.dot(a_dir, b_dir) / (na * nb), -1.0, 1.0)
    return float(np.arccos(c))


def normalize_relative(e, root, eps=1e-8):
    """(e - root) / (||e - root|| + eps): reference-relative unit direction."""
    if eps <= 0:
        raise ValueError("normalize_relative: eps must be positive")
    if isinstance(e, Tensor) or isinstance(root, Tensor):
        return unit(sub(_as_tensor(e), _as_tensor(root)), eps=eps)
    e = np.asarray(e, dtype=np.float64)
    root = np.asarray(root, dtype=np.float64)
    d = e - root
    return d / (np.linalg.norm(d, axis=-1, keepdims=True) + eps)


def resolve_reference(chain, t, frame):
    """Reference point for the tier at 0-based position ``t``.

    The first tier anchors at the frozen root; deeper tiers anchor at the
    previous tier's positive embedding (unless the frame is global).
    """
    if t < 0 or t >= chain.tier_count:
        raise IndexError(f"tier index {t} out of range for {chain.tier_count}-tier chain")
    if frame.mode == "global" or t == 0:
        return Tensor(frame.root)
    return chain.positives[t - 1]


def _dot_last(a, b):
    return tsum(mul(a, b), axis=-1)


def _tier_angle(anchor, other, ref, eps, flipped, name):
    """Differentiable exterior angle for one tier term.

    Each offset is normalized against its reference before the angle;
    ``flipped`` builds b' = (r - b) - a' so that minimizing the angle drives
    ``other`` toward the direction opposite the reference.
    """
    a_off = sub(anchor, ref)
    b_off = sub(other, ref if flipped else anchor)
    _check_nondegenerate(f"{name}: anchor offset", a_off.data)
    _check_nondegenerate(f"{name}: other offset", b_off.data)
    a_dir = unit(a_off, eps=eps)
    b_dir = unit(b_off, eps=eps)
    if flipped:
        combined = sub(neg(b_dir), a_dir)
        _check_nondegenerate(f"{name}: flipped direction", combined.data)
        b_dir = unit(combined, eps=eps)
    cos = _dot_last(a_dir, b_dir)
    return arccos(cos)


def radial_loss(chain, root, neg_weight=1.0):
    """Fixed-root baseline: small positive-pair angles, large same-tier
    positive/negative angles, all measured against one frozen root.

    Sums over consecutive tier pairs; ``neg_weight`` scales the repulsion
    term (1.0 reproduces the plain objective).
    """
    root_t = Tensor(np.asarray(root, dtype=np.float64))
    total = Tensor(0.0)
    for i in range(chain.tier_count - 1):
        pos_angle = _tier_angle(chain.positives[i], chain.positives[i + 1],
                                root_t, chain.epsilon, False, "radial_loss")
        neg_angle = _tier_angle(chain.positives[i], chain.negatives[i],
                                root_t, chain.epsilon, False, "radial_loss")
        total = total + pos_angle - neg_weight * neg_angle
    return total


def hier_alignment_loss(chain, frame):
    """Cross-tier alignment: each tier's positive pulls both next-tier
    captions outward along its own direction from the per-tier reference.

    Next-tier negatives are included because they still entail the current
    tier. Terms that would reference a tier past the last one are dropped.
    """
    total = Tensor(0.0)
    for t in range(chain.tier_count - 1):
        ref = resolve_reference(chain, t, frame)
        anchor = chain.positives[t]
        for other in (chain.positives[t + 1], chain.negatives[t + 1]):
            total = total + _tier_angle(anchor, other, ref, chain.epsilon,
                                        False, "hier_alignment_loss")
    return total


def hier_contrast_loss(chain, frame):
    """Within-tier discrimination: same-tier negatives are driven toward
    the direction opposite the reference (flipped construction)."""
    total = Tensor(0.0)
    for t in range(chain.tier_count):
        ref = resolve_reference(chain, t, frame)
        total = total + _tier_angle(chain.positives[t], chain.negatives[t],
                                    ref, chain.epsilon, True, "hier_contrast_loss")
    return total


def structure_loss(disentangle_term, alignment_term, contrast_term):
    """Combined text-structure objective: plain sum of the three parts."""
    return _as_tensor(disentangle_term) + _as_tensor(alignment_term) + _as_tensor(contrast_term)


def chain_angle_stats(positives, negatives, frame):
    """Forward-only angles for analysis: positive cross-tier pairs and
    same-tier positive/negative pairs, referenced per the frame."""
    positives = [np.asarray(p, dtype=np.float64) for p in positives]
    negatives = [np.asarray(n, dtype=np.float64) for n in negatives]
    l = len(positives)
    pos_angles, neg_angles = [], []
    for t in range(l):
        ref = frame.root if (frame.mode == "global" or t == 0) else positives[t - 1]
        if t + 1 < l:
            pos_angles.append(exterior_angle(positives[t], positives[t + 1], ref))
        neg_angles.append(exterior_angle(positives[t], negatives[t], ref))
    return pos_angles, neg_angles


# ---------------------------------------------------------------------------
# batched variants used by the trainer (chains stacked along axis 0)
# ---------------------------------------------------------------------------

@dataclass
class ChainBatch:
    """Tier-aligned stacks: positives[t] and negatives[t] are (B, D)."""

    positives: list
    negatives: list
    epsilon: float = 1e-8

    @property
    def tier_count(self):
        return len(self.positives)

    @property
    def size(self):
        return self.positives[0].shape[0]


def _batch_ref(batch, t, frame):
    if frame.mode == "global" or t == 0:
        return Tensor(np.broadcast_to(frame.root, batch.positives[0].shape).copy())
    return batch.positives[t - 1]


def _batch_angle(anchor, other, ref, eps, flipped, name):
    a_off = sub(anchor, ref)
    b_off = sub(other, ref if flipped else anchor)
    _check_nondegenerate(name, a_off.data)
    _check_nondegenerate(name, b_off.data)
    a_dir = unit(a_off, eps=eps)
    b_dir = unit(b_off, eps=eps)
    if flipped:
        combined = sub(neg(b_dir), a_dir)
        _check_nondegenerate(name, combined.data)
        b_dir = unit(combined, eps=eps)
    return arccos(_dot_last(a_dir, b_dir))


def batch_radial_loss(batch, frame, neg_weight=1.0):
    """Mean-over-chains radial baseline (fixed root for every term)."""
    root = Tensor(np.broadcast_to(frame.root, batch.positives[0].shape).copy())
    total = Tensor(0.0)
    for i in range(batch.tier_count - 1):
        pos = _batch_angle(batch.positives[i], batch.positives[i + 1],
                           root, batch.epsilon, False, "batch_radial_loss")
        neg = _batch_angle(batch.positives[i], batch.negatives[i],
                           root, batch.epsilon, False, "batch_radial_loss")
        total = total + tsum(pos) - neg_weight * tsum(neg)
    return scale(total, 1.0 / batch.size)


def batch_alignment_loss(batch, frame, flipped=False):
    """Cross-tier terms; ``flipped=True`` inverts the construction (used by
    the reverse-objective ablation)."""
    total = Tensor(0.0)
    for t in range(batch.tier_count - 1):
        ref = _batch_ref(batch, t, frame)
        anchor = batch.positives[t]
        for other in (batch.positives[t + 1], batch.negatives[t + 1]):
            total = total + tsum(_batch_angle(anchor, other, ref, batch.epsilon,
                                              flipped, "batch_alignment_loss"))
    return scale(total, 1.0 / batch.size)


def batch_contrast_loss(batch, frame, flipped=True):
    """Same-tier terms; the natural construction is flipped (negatives are
    driven opposite the reference)."""
    total = Tensor(0.0)
    for t in range(batch.tier_count):
        ref = _batch_ref(batch, t, frame)
        total = total + tsum(_batch_angle(batch.positives[t], batch.negatives[t],
                                          ref, batch.epsilon, flipped, "batch_contrast_loss"))
    return scale(total, 1.0 / batch.size)
