"""Synthetic place datasets with archetype-level visual aliasing.

Places are grouped under shared archetype centers on the unit sphere, so
places of one archetype are confusable while staying separable in
principle (``sigma_place < sigma_archetype``).

File format: a magic line, one JSON header line (generator metadata, feature
dim and the place table), then the row-major little-endian float64 payload.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"GPMDATA 1\n"


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


@dataclass
class GeneratorConfig:
    n_places: int = 2000
    images_min: int = 6
    images_max: int = 6
    feature_dim: int = 32
    n_archetypes: int = 50
    sigma_place: float = 0.09
    sigma_archetype: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_places < 2:
            raise ValueError("need at least two places")
        if not 2 <= self.images_min <= self.images_max:
            raise ValueError("images per place range must satisfy 2 <= min <= max")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not 1 <= self.n_archetypes <= self.n_places:
            raise ValueError("n_archetypes must lie in [1, n_places]")
        if not 0 <= self.sigma_place < self.sigma_archetype:
            raise ValueError("sigma_place must be smaller than sigma_archetype")


@dataclass
class PlaceDataset:
    """Places stored as one (n_images, D) matrix with per-place row ranges."""

    features: np.ndarray
    place_ids: np.ndarray
    labels: np.ndarray
    archetypes: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._row = {int(p): i for i, p in enumerate(self.place_ids)}

    def validate(self) -> None:
        if len(self._row) != len(self.place_ids):
            seen, dup = set(), None
            for p in self.place_ids.tolist():
                if p in seen:
                    dup = p
                    break
                seen.add(p)
            raise DatasetFormatError(f"duplicate place_id {dup}")
        if np.any(self.counts < 2):
            raise DatasetFormatError("every place needs at least two images")
        if int(self.counts.sum()) != self.features.shape[0]:
            raise DatasetFormatError("place table does not match the feature rows")
        if not np.all(np.isfinite(self.features)):
            raise DatasetFormatError("non-finite feature values")

    @property
    def n_places(self) -> int:
        return len(self.place_ids)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def images(self, place_id) -> np.ndarray:
        i = self._row[int(place_id)]
        return self.features[self.starts[i]:self.starts[i] + self.counts[i]]

    def image_counts(self) -> dict[int, int]:
        return {int(p): int(c) for p, c in zip(self.place_ids, self.counts)}

    def gather(self, batch: list[tuple[int, list[int]]]) -> tuple[np.ndarray, np.ndarray]:
        """Feature rows and labels for a sampled ``[(place_id, image_indices), ...]`` batch."""
        rows, labels = [], []
        for pid, idx in batch:
            i = self._row[int(pid)]
            rows.extend(int(self.starts[i]) + j for j in idx)
            labels.extend([int(self.labels[i])] * len(idx))
        return self.features[rows], np.asarray(labels)

    def place_centers(self) -> np.ndarray:
        return np.stack([self.images(p).mean(axis=0) for p in self.place_ids])

    def subset(self, image_index: dict[int, list[int]]) -> "PlaceDataset":
        """New dataset keeping only the listed images of every place."""
        feats, counts = [], []
        for p in self.place_ids.tolist():
            keep = image_index[p]
            feats.append(self.images(p)[keep])
            counts.append(len(keep))
        counts = np.asarray(counts, dtype=np.int64)
        ds = PlaceDataset(np.concatenate(feats), self.place_ids.copy(), self.labels.copy(),
                          self.archetypes.copy(), _starts(counts), counts, dict(self.meta))
        ds.validate()
        return ds

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlaceDataset):
            return NotImplemented
        return (self.meta == other.meta
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("features", "place_ids", "labels", "archetypes", "starts", "counts")))


def _starts(counts: np.ndarray) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)


def generate(cfg: GeneratorConfig) -> PlaceDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    D = cfg.feature_dim
    centers = rng.normal(size=(cfg.n_archetypes, D))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    archetype = rng.permutation(np.arange(cfg.n_places) % cfg.n_archetypes)
    place_centers = centers[archetype] + cfg.sigma_archetype * rng.normal(size=(cfg.n_places, D))
    counts = rng.integers(cfg.images_min, cfg.images_max + 1, size=cfg.n_places).astype(np.int64)
    owner = np.repeat(np.arange(cfg.n_places), counts)
    features = place_centers[owner] + cfg.sigma_place * rng.normal(size=(len(owner), D))
    ids = np.arange(cfg.n_places, dtype=np.int64)
    return PlaceDataset(features, ids, ids.copy(), archetype.astype(np.int64), _starts(counts), counts,
                        {"generator": asdict(cfg)})


def save(ds: PlaceDataset, path) -> None:
    header = {
        "meta": ds.meta,
        "dim": ds.feature_dim,
        "n_rows": int(ds.features.shape[0]),
        "places": [[int(p), int(l), int(a), int(c)]
                   for p, l, a, c in zip(ds.place_ids, ds.labels, ds.archetypes, ds.counts)],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())


def load(path) -> PlaceDataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DatasetFormatError(f"{path}:1: bad magic, not a dataset file")
    nl = raw.find(b"\n", len(MAGIC))
    if nl < 0:
        raise DatasetFormatError(f"{path}:2: header line is truncated")
    try:
        header = json.loads(raw[len(MAGIC):nl])
        dim = int(header["dim"])
        n_rows = int(header["n_rows"])
        table = np.asarray(header["places"], dtype=np.int64).reshape(-1, 4)
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}:2: malformed header ({exc})") from None
    payload = raw[nl + 1:]
    expected = n_rows * dim * 8
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{path}: payload at byte offset {nl + 1} holds {len(payload)} bytes, expected {expected}")
    features = np.frombuffer(payload, dtype="<f8").reshape(n_rows, dim).astype(np.float64)
    counts = table[:, 3].copy()
    ds = PlaceDataset(features, table[:, 0].copy(), table[:, 1].copy(), table[:, 2].copy(),
                      _starts(counts), counts, header.get("meta", {}))
    ds.validate()
    return ds


def export_csv(ds: PlaceDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["place_id", "label", "archetype", "image"] + [f"f{j}" for j in range(ds.feature_dim)])
        for i, p in enumerate(ds.place_ids.tolist()):
            for j, row in enumerate(ds.images(p)):
                w.writerow([p, int(ds.labels[i]), int(ds.archetypes[i]), j] + [repr(float(v)) for v in row])


@dataclass
class EvalSplit:
    query_features: np.ndarray
    query_places: np.ndarray
    ref_features: np.ndarray
    ref_places: np.ndarray
    reference_index: dict[int, list[int]]
    query_index: dict[int, list[int]]


def make_eval_split(ds: PlaceDataset, holdout_fraction: float, seed: int) -> EvalSplit:
    """Per place, ``round(holdout_fraction * n)`` random images become queries, the rest references.

    Places that would be left without a reference contribute no queries.
    """
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    qf, qp, rf, rp = [], [], [], []
    ref_index, query_index = {}, {}
    skipped = 0
    for p in ds.place_ids.tolist():
        imgs = ds.images(p)
        n = len(imgs)
        perm = rng.permutation(n)
        n_q = int(round(holdout_fraction * n))
        if n - n_q < 1:
            skipped += 1
            n_q = 0
        q, r = sorted(perm[:n_q].tolist()), sorted(perm[n_q:].tolist())
        query_index[p], ref_index[p] = q, r
        qf.append(imgs[q])
        qp.extend([p] * len(q))
        rf.append(imgs[r])
        rp.extend([p] * len(r))
    if skipped:
        log.warning("%d places too small to hold out queries; skipped", skipped)
    D = ds.feature_dim
    return EvalSplit(
        np.concatenate(qf) if qf else np.zeros((0, D)), np.asarray(qp, dtype=np.int64),
        np.concatenate(rf), np.asarray(rp, dtype=np.int64), ref_index, query_index,
    )
