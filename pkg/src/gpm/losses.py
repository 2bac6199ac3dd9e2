"""Pair and triplet losses in cosine-similarity space, with online hard mining.

Every loss takes a similarity matrix ``sim`` (B x B, rows of unit-norm
embeddings) plus integer labels, and returns the loss value, its gradient
with respect to ``sim`` and mining statistics.  :func:`similarity_backward`
maps the gradient back to the embeddings.

Aggregation is always a mean over *valid anchors*: rows with at least one
positive and one negative in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class InvalidBatchError(ValueError):
    """The batch has no usable positive or negative pairs."""


LOSS_KINDS = ("triplet", "contrastive", "multi_similarity")


@dataclass
class LossConfig:
    kind: str = "triplet"
    triplet_margin: float = 0.1
    contrastive_pos_margin: float = 0.0
    contrastive_neg_margin: float = 0.5
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 0.5
    ms_epsilon: float = 0.1
    ohm_enabled: bool = True

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.triplet_margin > 0:
            raise ValueError("triplet_margin must be positive")
        if self.contrastive_pos_margin < 0:
            raise ValueError("contrastive_pos_margin must be non-negative")
        if not self.contrastive_neg_margin > 0:
            raise ValueError("contrastive_neg_margin must be positive")
        if not (self.ms_alpha > 0 and self.ms_beta > 0):
            raise ValueError("ms_alpha and ms_beta must be positive")
        if not 0 < self.ms_lambda < 1:
            raise ValueError("ms_lambda must lie in (0, 1)")


@dataclass
class MiningStats:
    n_candidate: int = 0
    n_informative: int = 0
    unit: str = "pair"

    @property
    def fraction_informative(self) -> float:
        return self.n_informative / max(self.n_candidate, 1)


@dataclass
class LossOutput:
    value: float
    grad_sim: np.ndarray
    stats: MiningStats
    per_anchor: np.ndarray = field(repr=False, default=None)


def pairwise_similarity(emb: np.ndarray) -> np.ndarray:
    return emb @ emb.T


def similarity_backward(emb: np.ndarray, grad_sim: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``emb`` of a scalar whose gradient w.r.t. ``emb @ emb.T`` is ``grad_sim``."""
    return (grad_sim + grad_sim.T) @ emb


def _masks(labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    neg = ~same
    if not neg.any():
        raise InvalidBatchError("batch holds a single place: no negatives")
    if not pos.any():
        raise InvalidBatchError("no place has two images in the batch: no positives")
    valid = pos.any(axis=1) & neg.any(axis=1)
    return pos, neg, valid


def triplet_stats(sim: np.ndarray, labels, margin: float) -> MiningStats:
    """Count all (anchor, positive, negative) triplets and those violating ``margin``."""
    pos, neg, valid = _masks(labels)
    pos = pos & valid[:, None]
    # viol[a, p, n] = margin - s_ap + s_an > 0
    viol = (margin - sim[:, :, None] + sim[:, None, :]) > 0
    viol &= pos[:, :, None] & neg[:, None, :]
    n_cand = int(np.sum(pos.sum(axis=1) * neg.sum(axis=1)))
    return MiningStats(n_cand, int(viol.sum()), unit="triplet")


def triplet_loss(sim: np.ndarray, labels, cfg: LossConfig) -> LossOutput:
    pos, neg, valid = _masks(labels)
    B = sim.shape[0]
    m = cfg.triplet_margin
    grad = np.zeros_like(sim)
    pos_v = pos & valid[:, None]
    hinge = m - sim[:, :, None] + sim[:, None, :]
    tri = pos_v[:, :, None] & neg[:, None, :]
    active = (hinge > 0) & tri
    stats = MiningStats(int(tri.sum()), int(active.sum()), unit="triplet")
    anchors = np.flatnonzero(valid)
    per_anchor = np.zeros(B)

    if cfg.ohm_enabled:
        hp = np.argmin(np.where(pos, sim, np.inf), axis=1)
        hn = np.argmax(np.where(neg, sim, -np.inf), axis=1)
        a = anchors
        la = np.maximum(0.0, m - sim[a, hp[a]] + sim[a, hn[a]])
        per_anchor[a] = la
        value = float(la.mean())
        on = la > 0
        np.add.at(grad, (a[on], hp[a[on]]), -1.0 / len(a))
        np.add.at(grad, (a[on], hn[a[on]]), 1.0 / len(a))
    else:
        n_trip = stats.n_candidate
        losses = np.where(active, hinge, 0.0)
        value = float(losses.sum() / n_trip)
        per_anchor = losses.sum(axis=(1, 2)) / n_trip
        act = active.astype(np.float64)
        grad -= act.sum(axis=2) / n_trip
        grad += act.sum(axis=1) / n_trip
    return LossOutput(value, grad, stats, per_anchor)


def contrastive_loss(sim: np.ndarray, labels, cfg: LossConfig) -> LossOutput:
    """Squared-hinge contrastive loss.

    Positives are pulled above ``1 - contrastive_pos_margin``; negatives are
    pushed below ``contrastive_neg_margin``.  Per anchor the loss is the mean
    positive term plus the mean negative term over the retained pairs.
    """
    pos, neg, valid = _masks(labels)
    B = sim.shape[0]
    t_pos = 1.0 - cfg.contrastive_pos_margin
    t_neg = cfg.contrastive_neg_margin
    pos_gap = np.maximum(0.0, t_pos - sim)
    neg_gap = np.maximum(0.0, sim - t_neg)
    pos_v = pos & valid[:, None]
    neg_v = neg & valid[:, None]
    stats = MiningStats(
        int(pos_v.sum() + neg_v.sum()),
        int((pos_v & (pos_gap > 0)).sum() + (neg_v & (neg_gap > 0)).sum()),
    )

    if cfg.ohm_enabled:
        hp = np.argmin(np.where(pos, sim, np.inf), axis=1)
        keep_pos = np.zeros_like(pos)
        keep_pos[np.arange(B), hp] = True
        keep_pos &= pos_v
        keep_neg = neg_v & (neg_gap > 0)
    else:
        keep_pos, keep_neg = pos_v, neg_v

    n_pos = np.maximum(keep_pos.sum(axis=1), 1)[:, None]
    n_neg = np.maximum(keep_neg.sum(axis=1), 1)[:, None]
    n_anchor = int(valid.sum())
    pos_terms = np.where(keep_pos, pos_gap**2, 0.0) / n_pos
    neg_terms = np.where(keep_neg, neg_gap**2, 0.0) / n_neg
    per_anchor = pos_terms.sum(axis=1) + neg_terms.sum(axis=1)
    value = float(per_anchor.sum() / n_anchor)
    grad = (np.where(keep_pos, -2.0 * pos_gap, 0.0) / n_pos + np.where(keep_neg, 2.0 * neg_gap, 0.0) / n_neg) / n_anchor
    return LossOutput(value, grad, stats, per_anchor / n_anchor)


def _log1p_sum_exp(t: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``log(1 + sum_j exp(t_ij))`` over masked entries and its softmax weights."""
    tm = np.where(mask, t, -np.inf)
    top = np.maximum(np.max(tm, axis=1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(tm - top), 0.0)
    denom = np.exp(-top) + e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    return lse, e / denom


def ms_mining(sim: np.ndarray, pos: np.ndarray, neg: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Multi-similarity pair mining.

    Negatives survive if ``s_in + eps > min_p s_ip``, positives if
    ``s_ip - eps < max_n s_in``.  Anchors left with an empty side drop out.
    """
    min_pos = np.min(np.where(pos, sim, np.inf), axis=1, keepdims=True)
    max_neg = np.max(np.where(neg, sim, -np.inf), axis=1, keepdims=True)
    keep_neg = neg & (sim + eps > min_pos)
    keep_pos = pos & (sim - eps < max_neg)
    both = keep_neg.any(axis=1) & keep_pos.any(axis=1)
    return keep_pos & both[:, None], keep_neg & both[:, None]


def multi_similarity_loss(sim: np.ndarray, labels, cfg: LossConfig) -> LossOutput:
    pos, neg, valid = _masks(labels)
    a, b, lam = cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda
    pos_v = pos & valid[:, None]
    neg_v = neg & valid[:, None]
    mined_pos, mined_neg = ms_mining(sim, pos_v, neg_v, cfg.ms_epsilon)
    stats = MiningStats(int(pos_v.sum() + neg_v.sum()), int(mined_pos.sum() + mined_neg.sum()))
    keep_pos, keep_neg = (mined_pos, mined_neg) if cfg.ohm_enabled else (pos_v, neg_v)

    n_anchor = int(valid.sum())
    lse_p, w_p = _log1p_sum_exp(-a * (sim - lam), keep_pos)
    lse_n, w_n = _log1p_sum_exp(b * (sim - lam), keep_neg)
    per_anchor = lse_p / a + lse_n / b
    value = float(per_anchor.sum() / n_anchor)
    grad = (w_n - w_p) / n_anchor
    return LossOutput(value, grad, stats, per_anchor / n_anchor)


_LOSSES = {
    "triplet": triplet_loss,
    "contrastive": contrastive_loss,
    "multi_similarity": multi_similarity_loss,
}


def compute_loss(sim: np.ndarray, labels, cfg: LossConfig) -> LossOutput:
    return _LOSSES[cfg.kind](sim, labels, cfg)


def embedding_loss(emb: np.ndarray, labels, cfg: LossConfig) -> tuple[LossOutput, np.ndarray]:
    """Loss on an embedding batch; returns the output and the gradient w.r.t. ``emb``."""
    out = compute_loss(pairwise_similarity(emb), labels, cfg)
    return out, similarity_backward(emb, out.grad_sim)


def informative_fraction(window: Iterable) -> float:
    """Mean of per-batch informative fractions (accepts MiningStats or floats)."""
    vals = [w.fraction_informative if isinstance(w, MiningStats) else float(w) for w in window]
    if not vals:
        raise ValueError("no batches in window")
    return float(np.mean(vals))


class FractionLogger:
    """Accumulates per-batch statistics and emits a row every ``interval`` steps."""

    columns = ("step", "epoch", "loss_value", "fraction_informative_pairs", "fraction_informative_triplets")

    def __init__(self, interval: int):
        self.interval = max(int(interval), 1)
        self.rows: list[dict] = []
        self._loss: list[float] = []
        self._pairs: list[float] = []
        self._trip: list[float] = []

    def record(self, step: int, epoch: int, loss: float, pair_stats: MiningStats | None, trip_stats: MiningStats) -> None:
        self._loss.append(loss)
        if pair_stats is not None:
            self._pairs.append(pair_stats.fraction_informative)
        self._trip.append(trip_stats.fraction_informative)
        if len(self._loss) >= self.interval:
            self.flush(step, epoch)

    def flush(self, step: int, epoch: int) -> None:
        if not self._loss:
            return
        self.rows.append({
            "step": step,
            "epoch": epoch,
            "loss_value": float(np.mean(self._loss)),
            "fraction_informative_pairs": informative_fraction(self._pairs) if self._pairs else "",
            "fraction_informative_triplets": informative_fraction(self._trip),
        })
        self._loss, self._pairs, self._trip = [], [], []
