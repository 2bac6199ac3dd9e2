"""Proxy memory bank, index-based batch planning and M x K batch assembly.

At the start of every epoch (after the first) the cached per-place proxies
are indexed with an exhaustive k-NN and greedily partitioned into tuples of
``M`` mutually similar places.  Each training iteration consumes one tuple
and draws ``K`` images from every place in it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gpm.numerics import NORM_FLOOR, DegenerateInputError

log = logging.getLogger(__name__)

BANK_DUMP_HEADER = "# gpm-bank v1"


class EpochEnd(Exception):
    """The batch plan is exhausted."""


@dataclass
class SamplerConfig:
    M: int = 16
    K: int = 4
    mode: str = "gpm"
    seed: int = 0

    def validate(self) -> None:
        if self.M < 2:
            raise ValueError("M must be >= 2 so every batch has negatives")
        if self.K < 2:
            raise ValueError("K must be >= 2 so every place has positives")
        if self.mode not in ("random", "gpm"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")


def compute_place_proxy(z_rows: np.ndarray) -> np.ndarray:
    """Average a place's in-batch proxy projections and re-normalize.

    Raises DegenerateInputError if the mean has (near) zero length.
    """
    z_rows = np.asarray(z_rows, dtype=np.float64)
    if z_rows.ndim != 2 or z_rows.shape[0] < 1:
        raise ValueError("need at least one proxy row")
    c = z_rows.mean(axis=0)
    n = float(np.linalg.norm(c))
    if not n >= NORM_FLOOR:
        raise DegenerateInputError(f"place proxy mean has norm {n:.3g}")
    return c / n


class MemoryBank:
    """Place id -> (detached unit-norm proxy, epoch of last update)."""

    def __init__(self, dim: int):
        self.dim = dim
        self._proxies: dict[int, np.ndarray] = {}
        self._epochs: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._proxies)

    def __contains__(self, place_id) -> bool:
        return int(place_id) in self._proxies

    def update(self, place_id, proxy: np.ndarray, epoch: int) -> None:
        proxy = np.array(proxy, dtype=np.float64, copy=True).reshape(-1)
        if proxy.shape[0] != self.dim:
            raise ValueError(f"proxy dim {proxy.shape[0]} != bank dim {self.dim}")
        if abs(np.linalg.norm(proxy) - 1.0) > 1e-9:
            raise ValueError("bank proxies must be unit-norm")
        proxy.setflags(write=False)
        self._proxies[int(place_id)] = proxy
        self._epochs[int(place_id)] = int(epoch)

    def get(self, place_id) -> np.ndarray:
        return self._proxies[int(place_id)]

    def last_update_epoch(self, place_id) -> int:
        return self._epochs[int(place_id)]

    def ids(self) -> np.ndarray:
        return np.array(sorted(self._proxies), dtype=np.int64)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted ids and the matching (N, d') proxy matrix."""
        ids = self.ids()
        if len(ids) == 0:
            return ids, np.zeros((0, self.dim))
        return ids, np.stack([self._proxies[i] for i in ids.tolist()])

    def coverage(self, place_ids) -> float:
        place_ids = list(place_ids)
        if not place_ids:
            return 0.0
        return sum(int(p) in self._proxies for p in place_ids) / len(place_ids)

    def nbytes(self, bytes_per_float: int = 8) -> int:
        return len(self) * self.dim * bytes_per_float

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{BANK_DUMP_HEADER} dim={self.dim}\n")
            fh.write("place_id,epoch," + ",".join(f"c{j}" for j in range(self.dim)) + "\n")
            for pid in self.ids().tolist():
                vals = ",".join(repr(float(v)) for v in self._proxies[pid])
                fh.write(f"{pid},{self._epochs[pid]},{vals}\n")

    @classmethod
    def load(cls, path) -> "MemoryBank":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith(BANK_DUMP_HEADER):
            raise ValueError(f"{path}: missing bank header")
        dim = int(lines[0].split("dim=")[1])
        bank = cls(dim)
        for lineno, line in enumerate(lines[2:], start=3):
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise ValueError(f"{path}:{lineno}: expected {dim + 2} fields, got {len(parts)}")
            bank.update(int(parts[0]), np.array([float(v) for v in parts[2:]]), int(parts[1]))
        return bank


def knn_search(ref_ids: np.ndarray, refs: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive inner-product k-NN; ties broken by smaller place id."""
    ref_ids = np.asarray(ref_ids)
    if k > len(ref_ids):
        raise ValueError(f"k={k} exceeds the {len(ref_ids)} references")
    if k <= 0:
        return ref_ids[:0]
    sims = refs @ query
    order = np.lexsort((ref_ids, -sims))
    return ref_ids[order[:k]]


@dataclass
class BatchPlan:
    tuples: list[list[int]]
    epoch_built_for: int = 0
    mode: str = "gpm"

    def __len__(self) -> int:
        return len(self.tuples)

    def place_ids(self) -> list[int]:
        return [p for t in self.tuples for p in t]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# epoch={self.epoch_built_for} mode={self.mode}\n")
            for t in self.tuples:
                fh.write(" ".join(str(p) for p in t) + "\n")

    @classmethod
    def load(cls, path) -> "BatchPlan":
        lines = Path(path).read_text().splitlines()
        head = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
        tuples = [[int(p) for p in line.split()] for line in lines[1:] if line.strip()]
        return cls(tuples, int(head["epoch"]), head["mode"])


def build_batch_plan(bank: MemoryBank, M: int, rng_seed, epoch: int = 0) -> BatchPlan:
    """Greedy partition of the bank into tuples of M mutually similar places.

    Repeatedly draws a random remaining place, takes its M nearest remaining
    places by proxy inner product (itself included) as one tuple and removes
    them.  The last tuple holds the remainder when fewer than M are left.
    """
    if len(bank) == 0:
        raise ValueError("cannot build a batch plan from an empty memory bank")
    rng = np.random.default_rng(rng_seed)
    ids, proxies = bank.as_arrays()
    n = len(ids)
    # dense similarity is fine at desk scale; fall back to per-query scans otherwise
    dense = n <= 4096
    sims = proxies @ proxies.T if dense else None
    alive = np.ones(n, dtype=bool)
    remaining = n
    tuples = []
    while remaining:
        live = np.flatnonzero(alive)
        q = live[rng.integers(remaining)]
        row = sims[q, live] if dense else proxies[live] @ proxies[q]
        k = min(M, remaining)
        order = np.lexsort((ids[live], -row))[:k]
        chosen = live[order]
        tuples.append(ids[chosen].tolist())
        alive[chosen] = False
        remaining -= k
    return BatchPlan(tuples, epoch, "gpm")


def random_plan(place_ids, M: int, rng: np.random.Generator, epoch: int = 0) -> BatchPlan:
    perm = rng.permutation(np.asarray(place_ids))
    tuples = [perm[i:i + M].tolist() for i in range(0, len(perm), M)]
    return BatchPlan(tuples, epoch, "random")


class Sampler:
    """Owns the per-epoch plan and turns tuples into (place_id, image indices) batches."""

    def __init__(self, cfg: SamplerConfig, images_per_place: dict[int, int]):
        cfg.validate()
        self.cfg = cfg
        self.images_per_place = dict(images_per_place)
        self.place_ids = sorted(self.images_per_place)
        self.rng = np.random.default_rng(cfg.seed)
        self.plan: BatchPlan | None = None
        self._cursor = 0
        self.plan_build_seconds = 0.0

    def epoch_boundary(self, bank: MemoryBank, epoch: int) -> BatchPlan:
        t0 = time.perf_counter()
        use_gpm = self.cfg.mode == "gpm" and epoch > 0 and bank.coverage(self.place_ids) >= 1.0
        if use_gpm:
            seed = int(self.rng.integers(2**63))
            self.plan = build_batch_plan(bank, self.cfg.M, seed, epoch)
        else:
            if self.cfg.mode == "gpm" and epoch > 0:
                log.warning("epoch %d: bank covers %.1f%% of places, falling back to random plan",
                            epoch, 100 * bank.coverage(self.place_ids))
            self.plan = random_plan(self.place_ids, self.cfg.M, self.rng, epoch)
        self.plan_build_seconds = time.perf_counter() - t0
        self._cursor = 0
        return self.plan

    def pick_images(self, place_id: int) -> list[int]:
        n = self.images_per_place[place_id]
        K = self.cfg.K
        if n >= K:
            return self.rng.choice(n, size=K, replace=False).tolist()
        # every image once, then fill the rest with replacement
        picks = self.rng.permutation(n).tolist()
        picks += self.rng.choice(n, size=K - n, replace=True).tolist()
        return picks

    def next_batch(self) -> list[tuple[int, list[int]]]:
        if self.plan is None or self._cursor >= len(self.plan):
            raise EpochEnd
        places = self.plan.tuples[self._cursor]
        self._cursor += 1
        return [(p, self.pick_images(p)) for p in places]

    def __iter__(self):
        while True:
            try:
                yield self.next_batch()
            except EpochEnd:
                return


def bank_bytes(n_places: int, proxy_dim: int, bytes_per_float: int = 4) -> int:
    return n_places * proxy_dim * bytes_per_float
