"""Training objectives: cross-entropy, era-contrastive (EC), multimodal-contrastive (MMC).

Each loss returns ``(value, gradient(s))``; gradients are exact derivatives of the
returned value, so they can be fed straight into ``EraModel.backward``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.07
DEFAULT_K = 7


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if C < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError(f"label out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


def contrastive_sets(labels) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-anchor positive set P(i) (same label, excluding i) and negative set N(i)."""
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    same = labels[:, None] == labels[None, :]
    P = [idx[same[i] & (idx != i)] for i in idx]
    N = [idx[~same[i]] for i in idx]
    return P, N


@dataclass
class ContrastiveBatch:
    z: np.ndarray
    labels: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.labels = np.asarray(self.labels)

    @property
    def sets(self):
        return contrastive_sets(self.labels)


def ec_loss(z: np.ndarray, labels, tau: float = DEFAULT_TAU, supcon: bool = False) -> tuple[float, np.ndarray]:
    """Era-contrastive loss over a batch of unit-norm projections ``z`` ``[B, d_z]``.

    Default form, unnormalised with a negatives-only denominator:
    ``-sum_i sum_{j in P(i)} [s_ij - logsumexp_{k in N(i)} s_ik]`` with ``s = z z^T / tau``.
    With ``supcon=True`` the denominator ranges over every ``k != i`` and each anchor's
    sum is divided by ``|P(i)|``.
    Anchors with empty ``P(i)`` contribute nothing.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(z)
    labels = np.asarray(labels)
    B = len(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(B, dtype=bool)
    pos = same & ~eye
    neg = ~same
    if not neg.any():
        raise ValueError("batch has a single class; EC undefined")
    denom = ~eye if supcon else neg
    n_pos = pos.sum(axis=1)
    active = n_pos > 0
    s = (z @ z.T) / tau
    masked = np.where(denom, s, -np.inf)
    lse = logsumexp(masked[active], axis=1)
    weight = 1.0 / n_pos[active] if supcon else np.ones(active.sum())
    loss = -np.sum(weight * ((s[active] * pos[active]).sum(axis=1) - n_pos[active] * lse))

    # dL/ds: -w on positives, +w*|P(i)|*softmax over the denominator set
    g = np.zeros_like(s)
    prob = np.exp(masked[active] - lse[:, None])
    g[active] = (weight * n_pos[active])[:, None] * prob - weight[:, None] * pos[active]
    dz = (g + g.T) @ z / tau
    return float(loss), dz


@dataclass
class MMCBatch:
    """Anchors ``f_T(t_i)`` and views ``f_E(s_{i,k})``; column 0 of views is the matched pair."""

    anchors: np.ndarray  # [B, d]
    views: np.ndarray  # [B, 1+K, d]
    mask: np.ndarray  # [B, 1+K] bool, column 0 true for every anchor
    tau: float = DEFAULT_TAU


def text_shuffle(artists: Sequence, classes: Sequence[int], K: int = DEFAULT_K, rng_seed=None) -> np.ndarray:
    """Draw text-shuffle negatives: for each anchor, up to ``K`` rows of the same era
    class but a different artist, uniformly without replacement.

    Returns an int array ``[B, K]`` of row indices padded with ``-1``.
    """
    artists = np.asarray(artists)
    classes = np.asarray(classes)
    B = len(artists)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out = np.full((B, max(K, 1)), -1, dtype=np.int64)
    skipped = clamped = 0
    for i in range(B):
        cand = np.flatnonzero((classes == classes[i]) & (artists != artists[i]))
        if cand.size == 0:
            skipped += 1
            continue
        k = min(K, cand.size)
        clamped += k < K
        out[i, :k] = rng.choice(cand, size=k, replace=False)
    if skipped:
        log.warning("text_shuffle: %d of %d anchors have no same-class, different-artist partner", skipped, B)
    if clamped:
        log.debug("text_shuffle: K=%d clamped for %d anchors", K, clamped)
    return out


def mmc_loss(
    anchors: np.ndarray, views: np.ndarray, mask: np.ndarray | None = None, tau: float = DEFAULT_TAU
) -> tuple[float, np.ndarray, np.ndarray]:
    """InfoNCE over each anchor's matched view (column 0) and its shuffled negatives.

    Anchors without any negative are skipped. Returns ``(loss, d_anchors, d_views)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    anchors = np.asarray(anchors)
    views = np.asarray(views)
    if mask is None:
        mask = np.ones(views.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    usable = mask[:, 0] & mask[:, 1:].any(axis=1)
    d_anchors = np.zeros_like(anchors)
    d_views = np.zeros_like(views)
    if not usable.any():
        log.warning("mmc_loss: no usable anchors; contribution is 0")
        return 0.0, d_anchors, d_views
    a = anchors[usable]
    v = views[usable]
    m = mask[usable]
    s = np.einsum("bd,bkd->bk", a, v) / tau
    masked = np.where(m, s, -np.inf)
    lse = logsumexp(masked, axis=1)
    loss = float(np.sum(lse - s[:, 0]))
    g = np.exp(masked - lse[:, None])
    g[:, 0] -= 1.0
    g /= tau
    d_anchors[usable] = np.einsum("bk,bkd->bd", g, v)
    d_views[usable] = g[:, :, None] * a[:, None, :]
    return loss, d_anchors, d_views


def total_loss(mle: float, ec: float, mmc: float, alpha: float, beta: float) -> float:
    """``mle + alpha * mmc + beta * ec``."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    return mle + alpha * mmc + beta * ec
