"""Recall@K retrieval evaluation and memory-bank cost accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from gpm.dataset import EvalSplit

DEFAULT_KS = (1, 5, 10)


@dataclass
class RecallReport:
    recall_at: dict[int, float]
    n_queries: int
    n_references: int

    def row(self) -> dict:
        return {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}


def _embed(model, feats: np.ndarray) -> np.ndarray:
    return model.embed(feats) if model is not None else feats


def true_match_ranks(q_emb: np.ndarray, q_places: np.ndarray, r_emb: np.ndarray, r_places: np.ndarray,
                     chunk: int = 1024) -> np.ndarray:
    """0-based rank of the best-ranked same-place reference for every query.

    References are ordered by decreasing similarity, ties by reference index.
    Queries whose place has no reference get rank ``len(r_places)``.
    """
    n_ref = len(r_places)
    ranks = np.full(len(q_places), n_ref, dtype=np.int64)
    ref_idx = np.arange(n_ref)
    for s in range(0, len(q_places), chunk):
        sims = q_emb[s:s + chunk] @ r_emb.T
        match = q_places[s:s + chunk, None] == r_places[None, :]
        has = match.any(axis=1)
        best = np.max(np.where(match, sims, -np.inf), axis=1)
        # first (smallest index) true reference attaining the best similarity
        first = np.argmax(match & (sims == best[:, None]), axis=1)
        ahead = (sims > best[:, None]) | ((sims == best[:, None]) & (ref_idx[None, :] < first[:, None]))
        r = ahead.sum(axis=1)
        ranks[s:s + chunk] = np.where(has, r, n_ref)
    return ranks


def recall_at_k(model, split: EvalSplit, ks=DEFAULT_KS) -> RecallReport:
    """Recall@K of main-branch embeddings (``model=None`` retrieves on raw features)."""
    if len(split.query_places) == 0:
        raise ValueError("evaluation split has no queries")
    q = _embed(model, split.query_features)
    r = _embed(model, split.ref_features)
    ranks = true_match_ranks(q, split.query_places, r, split.ref_places)
    recall = {int(k): float(np.mean(ranks < k)) for k in ks}
    return RecallReport(recall, len(split.query_places), len(split.ref_places))


@dataclass
class CostReport:
    proxy_dim: int
    n_places: int
    bytes_per_float: int
    bank_bytes: int
    plan_build_seconds: float = 0.0
    epoch_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def bank_gb(self) -> float:
        return self.bank_bytes / 1e9

    def row(self) -> dict:
        return {
            "proxy_dim": self.proxy_dim,
            "n_places": self.n_places,
            "bytes_per_float": self.bytes_per_float,
            "bank_bytes": self.bank_bytes,
            "bank_gb": self.bank_gb,
            "plan_build_seconds": self.plan_build_seconds,
            "epoch_seconds": self.epoch_seconds,
        }


def cost_report(n_places: int, proxy_dim: int, bytes_per_float: int = 4,
                plan_build_seconds: float = 0.0, epoch_seconds: float = 0.0) -> CostReport:
    return CostReport(proxy_dim, n_places, bytes_per_float, n_places * proxy_dim * bytes_per_float,
                      plan_build_seconds, epoch_seconds)


def bank_cost_report(bank, timings: dict | None = None, bytes_per_float: int = 4) -> CostReport:
    timings = timings or {}
    return cost_report(len(bank), bank.dim, bytes_per_float,
                       timings.get("plan_build_seconds", 0.0), timings.get("epoch_seconds", 0.0))


def cache_size_table(n_places: int = 65_000, dims=(32, 64, 128, 256, 512, 1024),
                     bytes_per_float: int = 4) -> dict[int, float]:
    """Bank size in decimal GB per proxy dimension."""
    return {d: cost_report(n_places, d, bytes_per_float).bank_gb for d in dims}


def write_csv(path, rows: list[dict], columns=None) -> None:
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow(r)
