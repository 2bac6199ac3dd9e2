"""Training loop, run configuration and presets.

Per iteration: assemble an M x K batch, forward both branches, compute the
loss (with optional online hard mining), cache per-place proxies in the
memory bank, backpropagate and take an SGD step.  At every epoch start the
sampler rebuilds its plan from the bank.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gpm import dataset as dsmod
from gpm.dataset import GeneratorConfig, PlaceDataset, make_eval_split
from gpm.evaluation import bank_cost_report, recall_at_k, write_csv
from gpm.losses import FractionLogger, LossConfig, embedding_loss, triplet_stats
from gpm.model import EncoderConfig, Model
from gpm.numerics import DegenerateInputError, SgdConfig, sgd_step
from gpm.sampler import MemoryBank, SamplerConfig, Sampler, compute_place_proxy

log = logging.getLogger(__name__)

SECTIONS = ("encoder", "loss", "sampler", "sgd", "generator")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    dataset_path: str = ""
    epochs: int = 15
    log_interval: int = 25
    eval_every: int = 1
    holdout_fraction: float = 0.2
    proxy_loss_weight: float = 1.0
    seed: int = 0
    out_dir: str = ""

    def validate(self) -> None:
        self.encoder.validate()
        self.loss.validate()
        self.sampler.validate()
        self.sgd.validate()
        if not self.dataset_path:
            self.generator.validate()
            if self.generator.feature_dim != self.encoder.input_dim:
                raise ValueError("generator.feature_dim must equal encoder.input_dim")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.proxy_loss_weight < 0:
            raise ValueError("proxy_loss_weight must be non-negative")

    def seeded(self) -> "RunConfig":
        """Copy with the global seed pushed into the model and sampler seeds."""
        cfg = dataclasses.replace(self)
        cfg.encoder = dataclasses.replace(self.encoder, seed=self.seed)
        cfg.sampler = dataclasses.replace(self.sampler, seed=self.seed)
        cfg.loss = dataclasses.replace(self.loss)
        cfg.sgd = dataclasses.replace(self.sgd)
        cfg.generator = dataclasses.replace(self.generator)
        return cfg

    # flat dotted-key text form -------------------------------------------------

    def to_items(self) -> dict[str, object]:
        items = {}
        for name, value in asdict(self).items():
            if isinstance(value, dict):
                for k, v in value.items():
                    items[f"{name}.{k}"] = v
            else:
                items[name] = value
        return items

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_items().items())

    def set(self, key: str, raw: str) -> None:
        target, attr = self, key
        if "." in key:
            section, attr = key.split(".", 1)
            if section not in SECTIONS:
                raise KeyError(f"unknown config section {section!r}")
            target = getattr(self, section)
        if not hasattr(target, attr) or attr.startswith("_"):
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, attr, _coerce(getattr(target, attr), raw))

    def apply(self, assignments) -> "RunConfig":
        for a in assignments:
            if "=" not in a:
                raise ValueError(f"expected key=value, got {a!r}")
            k, v = a.split("=", 1)
            self.set(k.strip(), v.strip())
        return self

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = base or cls()
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        return cfg.apply([ln for ln in lines if ln])


def _coerce(current, raw: str):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def preset(name: str) -> RunConfig:
    """Named configurations: ``desk`` (laptop scale) and ``published`` (published defaults)."""
    if name == "desk":
        return RunConfig()
    if name == "published":
        return RunConfig(
            encoder=EncoderConfig(input_dim=64, hidden_dim=512, embed_dim=512, proxy_dim=128),
            sampler=SamplerConfig(M=60, K=4),
            sgd=SgdConfig(learning_rate=0.05, momentum=0.95, weight_decay=1e-4,
                          lr_decay_factor=0.3, lr_decay_every_epochs=5),
            generator=GeneratorConfig(n_places=65_000, images_min=4, images_max=12, feature_dim=64,
                                      n_archetypes=1000),
            epochs=30,
        )
    raise ValueError(f"unknown preset {name!r}")


@dataclass
class TrainResult:
    model: Model
    bank: MemoryBank
    epochs: list[dict]
    fractions: list[dict]
    final_recall: dict[int, float]
    cost: dict
    plans: list = field(default_factory=list, repr=False)


def load_dataset(cfg: RunConfig) -> PlaceDataset:
    if cfg.dataset_path:
        return dsmod.load(cfg.dataset_path)
    return dsmod.generate(cfg.generator)


def train(cfg: RunConfig, dataset: PlaceDataset | None = None, keep_plans: bool = False) -> TrainResult:
    cfg.validate()
    cfg = cfg.seeded()
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.feature_dim != cfg.encoder.input_dim:
        raise ValueError(f"dataset feature dim {ds.feature_dim} != encoder.input_dim {cfg.encoder.input_dim}")
    split = make_eval_split(ds, cfg.holdout_fraction, cfg.seed)
    train_ds = ds.subset(split.reference_index)

    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())

    model = Model(cfg.encoder)
    bank = MemoryBank(cfg.encoder.proxy_dim)
    sampler = Sampler(cfg.sampler, train_ds.image_counts())
    logger = FractionLogger(cfg.log_interval)
    K = cfg.sampler.K
    lam = cfg.proxy_loss_weight
    params = model.params()
    epoch_rows, plans = [], []
    step = 0
    last_recall = {}

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        plan = sampler.epoch_boundary(bank, epoch)
        if keep_plans:
            plans.append(plan)
        losses, pair_fr, trip_fr = [], [], []
        for batch in sampler:
            feats, labels = train_ds.gather(batch)
            eb = model.forward(feats, labels, K)
            trainable = len(batch) >= 2
            if trainable:
                out_x, gx = embedding_loss(eb.x, labels, cfg.loss)
                if lam > 0:
                    out_z, gz = embedding_loss(eb.z, labels, cfg.loss)
                    total = out_x.value + lam * out_z.value
                    gz = lam * gz
                else:
                    total, gz = out_x.value, np.zeros_like(eb.z)
                if not (np.isfinite(total) and np.all(np.isfinite(gx)) and np.all(np.isfinite(gz))):
                    _dump_nonfinite(out, model, step, epoch, batch)
                    raise NonFiniteLossError(f"non-finite loss at step {step} (epoch {epoch})")

            # proxies are cached from this forward pass, before the update
            rows = 0
            for pid, idx in batch:
                try:
                    bank.update(pid, compute_place_proxy(eb.z[rows:rows + len(idx)]), epoch)
                except DegenerateInputError as exc:
                    log.warning("place %d: %s; keeping previous proxy", pid, exc)
                rows += len(idx)

            if not trainable:
                log.info("step %d: single-place batch, no loss", step)
                continue
            model.backward(eb, gx, gz)
            sgd_step(params, cfg.sgd, epoch)

            if cfg.loss.kind == "triplet":
                ts, ps = out_x.stats, None
            else:
                ts, ps = triplet_stats(eb.x @ eb.x.T, labels, cfg.loss.triplet_margin), out_x.stats
            logger.record(step, epoch, total, ps, ts)
            losses.append(total)
            trip_fr.append(ts.fraction_informative)
            if ps is not None:
                pair_fr.append(ps.fraction_informative)
            step += 1
        logger.flush(step, epoch)
        epoch_seconds = time.perf_counter() - t0

        row = {
            "epoch": epoch,
            "lr": cfg.sgd.lr_at(epoch),
            "plan_mode": plan.mode,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "fraction_informative_pairs": float(np.mean(pair_fr)) if pair_fr else "",
            "fraction_informative_triplets": float(np.mean(trip_fr)) if trip_fr else float("nan"),
            "plan_build_seconds": sampler.plan_build_seconds,
            "epoch_seconds": epoch_seconds,
        }
        last_epoch = epoch == cfg.epochs - 1
        if len(split.query_places) and (last_epoch or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            last_recall = recall_at_k(model, split).recall_at
            row.update({f"recall@{k}": v for k, v in last_recall.items()})
        epoch_rows.append(row)
        log.info("epoch %d: %s", epoch, row)
        if out is not None:
            model.save(out / f"checkpoint_epoch{epoch:03d}.npz")

    cost = bank_cost_report(bank, {
        "plan_build_seconds": float(np.mean([r["plan_build_seconds"] for r in epoch_rows])),
        "epoch_seconds": float(np.mean([r["epoch_seconds"] for r in epoch_rows])),
    }, bytes_per_float=ds.features.itemsize).row()
    result = TrainResult(model, bank, epoch_rows, logger.rows, last_recall, cost, plans)
    if out is not None:
        _write_outputs(out, result, sampler)
    return result


def _write_outputs(out: Path, result: TrainResult, sampler: Sampler) -> None:
    result.model.save(out / "checkpoint.npz")
    cols = ["epoch", "lr", "plan_mode", "mean_loss", "fraction_informative_pairs",
            "fraction_informative_triplets", "recall@1", "recall@5", "recall@10",
            "plan_build_seconds", "epoch_seconds"]
    write_csv(out / "metrics.csv", [{c: r.get(c, "") for c in cols} for r in result.epochs], cols)
    write_csv(out / "fractions.csv", result.fractions, FractionLogger.columns)
    write_csv(out / "cost.csv", [result.cost])
    result.bank.dump(out / "bank.csv")
    if sampler.plan is not None:
        sampler.plan.dump(out / "plan.txt")


def _dump_nonfinite(out: Path | None, model: Model, step: int, epoch: int, batch) -> None:
    if out is None:
        return
    np.savez(out / "nonfinite_dump.npz", step=step, epoch=epoch,
             places=np.array([p for p, _ in batch]),
             **{p.name: p.value for p in model.params()})
