"""Ablation grids: loss x OHM x sampling mode, and mini-batch size sweeps.

Every cell is an independent training run on the same dataset with a fixed
seed, so cells can run in separate processes and still aggregate
deterministically.
"""

from __future__ import annotations

import copy
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from gpm.dataset import PlaceDataset
from gpm.losses import LOSS_KINDS
from gpm.training import RunConfig, load_dataset, train

SUMMARY_COLUMNS = ("loss", "ohm", "gpm", "M", "seed", "recall@1", "recall@5", "recall@10",
                   "mean_fraction_informative", "epoch_fractions", "epoch_triplet_fractions")


@dataclass(frozen=True)
class Cell:
    loss: str
    ohm: bool
    gpm: bool
    M: int
    seed: int

    def config(self, base: RunConfig) -> RunConfig:
        cfg = copy.deepcopy(base)
        cfg.loss.kind = self.loss
        cfg.loss.ohm_enabled = self.ohm
        cfg.sampler.mode = "gpm" if self.gpm else "random"
        cfg.sampler.M = self.M
        cfg.seed = self.seed
        cfg.eval_every = 0
        cfg.out_dir = ""
        return cfg


def ablation_cells(base: RunConfig, losses=LOSS_KINDS, seeds=(0,)) -> list[Cell]:
    """Four scenarios per loss: neither, GPM only, OHM only, OHM + GPM."""
    return [Cell(loss, ohm, gpm, base.sampler.M, s)
            for loss in losses for ohm in (False, True) for gpm in (False, True) for s in seeds]


def m_sweep_cells(base: RunConfig, Ms=(8, 16, 32), seeds=(0,), loss="multi_similarity", ohm=True) -> list[Cell]:
    return [Cell(loss, ohm, gpm, M, s) for M in Ms for gpm in (False, True) for s in seeds]


def native_fractions(loss: str, epochs: list[dict]) -> list[float]:
    """Per-epoch informative fraction in the loss's own unit (triplets or pairs)."""
    key = "fraction_informative_triplets" if loss == "triplet" else "fraction_informative_pairs"
    return [float(e[key]) for e in epochs]


def run_cell(cell: Cell, base: RunConfig, dataset: PlaceDataset) -> dict:
    res = train(cell.config(base), dataset)
    fr = native_fractions(cell.loss, res.epochs)
    return {
        "loss": cell.loss, "ohm": int(cell.ohm), "gpm": int(cell.gpm), "M": cell.M, "seed": cell.seed,
        **{f"recall@{k}": v for k, v in res.final_recall.items()},
        "mean_fraction_informative": float(np.mean(fr)),
        "epoch_fractions": ";".join(repr(f) for f in fr),
        "epoch_triplet_fractions": ";".join(repr(float(e["fraction_informative_triplets"])) for e in res.epochs),
    }


def _run_star(args):
    return run_cell(*args)


def run_cells(cells: list[Cell], base: RunConfig, dataset: PlaceDataset | None = None,
              workers: int = 1) -> list[dict]:
    dataset = dataset if dataset is not None else load_dataset(base)
    jobs = [(c, base, dataset) for c in cells]
    if workers <= 1:
        return [run_cell(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_star, jobs))


def median_by(rows: list[dict], keys=("loss", "ohm", "gpm", "M"), value="recall@1") -> dict[tuple, float]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(float(r[value]))
    return {k: statistics.median(v) for k, v in groups.items()}


def epoch_fractions(row: dict, column: str = "epoch_fractions") -> list[float]:
    return [float(v) for v in row[column].split(";")]
