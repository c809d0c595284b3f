"""Training loop, checkpointing, evaluation, and the ablation driver.

Everything is deterministic for a fixed config and seed: parameter init
comes from one generator, the per-epoch sample order is derived from
(seed, epoch), and there is no other stochasticity, so two runs produce
byte-identical logs and metrics.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, GroundTruthSample, read_dataset
from .errors import ConfigError, FormatError, TrainingError
from .matching import LossWeights
from .metrics import MiouStats, PqStats, compute_mask_ap
from .model import (
    ModelConfig, SegmentationModel, binarize_instances, merge_panoptic, semantic_raster,
)
from .optim import AdamW, lr_at, milestone_iterations

CHECKPOINT_FORMAT = "knet-checkpoint-v1"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    weight_decay: float | None = None   # per-mode default, see resolved_weight_decay
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 12
    milestones: tuple[float, ...] = (2.0 / 3.0, 11.0 / 12.0)
    lr_decay_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    train_dir: str = "data/train"
    val_dir: str = "data/val"
    out_dir: str = "runs/default"
    loss: LossWeights = field(default_factory=LossWeights)

    def resolved_weight_decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.0005 if self.model.mode == "semantic" else 0.05

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "lr": self.lr,
            "weight_decay": self.weight_decay, "betas": list(self.betas),
            "epochs": self.epochs, "milestones": list(self.milestones),
            "lr_decay_factor": self.lr_decay_factor, "batch_size": self.batch_size,
            "seed": self.seed, "train_dir": self.train_dir, "val_dir": self.val_dir,
            "out_dir": self.out_dir,
            "loss": {
                "lam_cls": self.loss.lam_cls, "lam_ce": self.loss.lam_ce,
                "lam_dice": self.loss.lam_dice, "lam_seg": self.loss.lam_seg,
                "focal_alpha": self.loss.focal_alpha, "focal_gamma": self.loss.focal_gamma,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossWeights(**d.pop("loss", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(model=model, loss=loss, **d)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments to a nested config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return d


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, cfg: TrainConfig, model: SegmentationModel,
                    opt: AdamW | None, epoch: int, iteration: int) -> None:
    params = model.params()
    opt_arrays = opt.state_arrays() if opt is not None else {}
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "epoch": epoch,
        "iteration": iteration,
        "opt_t": opt.t if opt is not None else 0,
        "param_keys": list(params.keys()),
        "opt_keys": list(opt_arrays.keys()),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for key in header["param_keys"]:
            T.write_tensor(fp, params[key])
        for key in header["opt_keys"]:
            T.write_tensor(fp, opt_arrays[key])


def load_checkpoint(path, with_optimizer: bool = False):
    """Returns (cfg, model, opt | None, epoch, iteration)."""
    with open(path, "rb") as fp:
        line = fp.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError:
            raise FormatError(f"{path}: not a checkpoint") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: unknown checkpoint format")
        cfg = TrainConfig.from_dict(header["config"])
        model = SegmentationModel(cfg.model, seed=cfg.seed)
        params = model.params()
        if list(params.keys()) != header["param_keys"]:
            raise FormatError(f"{path}: parameter keys do not match the configured model")
        for key in header["param_keys"]:
            arr = T.read_tensor(fp)
            if arr.shape != params[key].data.shape:
                raise FormatError(f"{path}: shape mismatch for {key}")
            params[key].data = arr.astype(params[key].data.dtype)
        opt = None
        if with_optimizer:
            opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.resolved_weight_decay(),
                        betas=cfg.betas)
            arrays = {key: T.read_tensor(fp) for key in header["opt_keys"]}
            opt.load_state_arrays(arrays, header["opt_t"])
    return cfg, model, opt, header["epoch"], header["iteration"]


# ---------------------------------------------------------------------------
# evaluation

def _max_workers(requested: int) -> int:
    cap = os.environ.get("KNET_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def evaluate(model: SegmentationModel, dataset: Dataset, workers: int = 1) -> dict:
    """Per-stage metrics over a dataset; mode picked from the model config."""
    cfg = model.cfg
    n_stages = cfg.stages + 1

    def decode(sample: GroundTruthSample):
        with T.no_grad():
            stages = model.forward(sample.image[None])
        if cfg.mode == "panoptic":
            return [merge_panoptic(s, cfg) for s in stages]
        if cfg.mode == "instance":
            return [binarize_instances(s, cfg) for s in stages]
        return [semantic_raster(s, cfg) for s in stages]

    workers = _max_workers(workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decoded = list(pool.map(decode, dataset.samples))
    else:
        decoded = [decode(s) for s in dataset.samples]

    per_stage = []
    for si in range(n_stages):
        entry: dict = {"stage": si}
        if cfg.mode == "panoptic":
            stats = PqStats()
            for sample, dec in zip(dataset.samples, decoded):
                stats.update(dec[si], sample.panoptic)
            entry.update(stats.result().to_dict())
        elif cfg.mode == "instance":
            preds = [dec[si] for dec in decoded]
            gts = [[(c, m) for c, m in s.instances] for s in dataset.samples]
            entry.update(compute_mask_ap(preds, gts).to_dict())
        else:
            stats = MiouStats()
            for sample, dec in zip(dataset.samples, decoded):
                stats.update(dec[si], sample.semantic)
            entry["miou"] = stats.result()
        per_stage.append(entry)

    primary = {"panoptic": "pq", "instance": "ap", "semantic": "miou"}[cfg.mode]
    return {
        "mode": cfg.mode,
        "primary_metric": primary,
        "per_stage": per_stage,
        "final": per_stage[-1],
    }


def format_report(report: dict) -> str:
    """Fixed-width text table of the per-stage metrics."""
    keys = [k for k in report["per_stage"][0] if k != "stage"]
    lines = [" ".join(["stage"] + [f"{k:>10}" for k in keys])]
    for row in report["per_stage"]:
        cells = [f"{row['stage']:>5}"]
        for k in keys:
            v = row[k]
            cells.append(f"{v:>10.4f}" if isinstance(v, float) else f"{v:>10}")
        lines.append(" ".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# training

def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _resume_compatible(a: TrainConfig, b: TrainConfig) -> bool:
    da, db = a.to_dict(), b.to_dict()
    da.pop("out_dir")
    db.pop("out_dir")
    return da == db


def train(cfg: TrainConfig, resume: str | None = None,
          log_fn=None, max_epochs: int | None = None) -> dict:
    """Run the schedule; returns the metrics report dict.

    Writes ``log.jsonl`` (one loss record per iteration), ``metrics.json``
    (per-epoch validation history), and best/last checkpoints under
    ``cfg.out_dir``.  ``max_epochs`` caps how many epochs this invocation
    runs (time-sliced training); resume from ``last.ckpt`` to continue.
    """
    train_set = read_dataset(cfg.train_dir)
    val_set = read_dataset(cfg.val_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume:
        loaded_cfg, model, opt, start_epoch, iteration = load_checkpoint(resume, with_optimizer=True)
        if not _resume_compatible(loaded_cfg, cfg):
            raise ConfigError("checkpoint config does not match the requested config")
    else:
        model = SegmentationModel(cfg.model, seed=cfg.seed)
        opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.resolved_weight_decay(),
                    betas=cfg.betas)
        start_epoch, iteration = 0, 0

    iters_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_iters = cfg.epochs * iters_per_epoch
    milestones = milestone_iterations(total_iters, cfg.milestones)
    end_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, start_epoch + max_epochs)

    primary = {"panoptic": "pq", "instance": "ap", "semantic": "miou"}[cfg.model.mode]
    history: list[dict] = []
    best_value = -1.0
    log_mode = "a" if resume else "w"
    t0 = time.time()

    with open(out / "log.jsonl", log_mode) as log:
        for epoch in range(start_epoch, end_epoch):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            for batch_idx in _batches(order, cfg.batch_size):
                gts = [train_set.samples[i] for i in batch_idx]
                images = np.stack([g.image for g in gts])
                lr = lr_at(cfg.lr, iteration, milestones, cfg.lr_decay_factor)
                _, loss, breakdown = model.forward(images, gts, cfg.loss)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at iteration {iteration}: {breakdown.to_dict()}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                record = {"iter": iteration, "epoch": epoch, "lr": lr}
                record.update(breakdown.to_dict())
                log.write(json.dumps(record, sort_keys=True) + "\n")
                iteration += 1

            report = evaluate(model, val_set)
            entry = {"epoch": epoch, "iteration": iteration, **report["final"]}
            entry["per_stage"] = report["per_stage"]
            history.append(entry)
            if log_fn:
                log_fn(f"epoch {epoch}: {primary}={report['final'][primary]:.4f} "
                       f"loss={breakdown.total:.4f} ({time.time() - t0:.0f}s)")
            save_checkpoint(out / "last.ckpt", cfg, model, opt, epoch + 1, iteration)
            if report["final"][primary] > best_value:
                best_value = report["final"][primary]
                save_checkpoint(out / "best.ckpt", cfg, model, opt, epoch + 1, iteration)

    final_report = evaluate(model, val_set)
    metrics = {
        "config_hash": cfg.config_hash(),
        "mode": cfg.model.mode,
        "primary_metric": primary,
        "history": history,
        "best": best_value,
        "final": final_report,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1))
    (out / "report.txt").write_text(format_report(final_report) + "\n")
    return metrics


# ---------------------------------------------------------------------------
# ablations

def ablate(cfg: TrainConfig, parts: tuple[str, ...] = ("grid", "stages", "kernels"),
           log_fn=None) -> dict:
    """Head-component grid and capacity sweeps, each cell a full training."""
    results: dict[str, list[dict]] = {}

    def run_cell(name: str, cell_cfg: TrainConfig) -> dict:
        if log_fn:
            log_fn(f"[ablate] training cell {name}")
        metrics = train(cell_cfg, log_fn=None)
        final = metrics["final"]["final"]
        row = {"cell": name, **{k: v for k, v in final.items() if k != "stage"}}
        row["per_stage"] = metrics["final"]["per_stage"]
        if log_fn:
            log_fn(f"[ablate] {name}: {row}")
        return row

    base_out = Path(cfg.out_dir)
    if "grid" in parts:
        rows = []
        for aku in (True, False):
            for ki in (True, False):
                name = f"aku={int(aku)}_ki={int(ki)}"
                cell = replace(
                    cfg,
                    model=ModelConfig.from_dict({**cfg.model.to_dict(), "aku": aku, "ki": ki}),
                    out_dir=str(base_out / f"grid_{name}"),
                )
                rows.append(run_cell(name, cell))
        results["grid"] = rows
    if "stages" in parts:
        rows = []
        for s in range(1, 6):
            cell = replace(
                cfg,
                model=ModelConfig.from_dict({**cfg.model.to_dict(), "stages": s}),
                out_dir=str(base_out / f"stages_{s}"),
            )
            rows.append(run_cell(f"stages={s}", cell))
        results["stages"] = rows
    if "kernels" in parts:
        rows = []
        for n in (5, 10, 20):
            cell = replace(
                cfg,
                model=ModelConfig.from_dict(
                    {**cfg.model.to_dict(), "num_instance_kernels": n}),
                out_dir=str(base_out / f"kernels_{n}"),
            )
            rows.append(run_cell(f"kernels={n}", cell))
        results["kernels"] = rows

    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "ablation.json").write_text(json.dumps(results, sort_keys=True, indent=1))
    lines = []
    for part, rows in results.items():
        lines.append(f"== {part} ==")
        for row in rows:
            cells = " ".join(
                f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                for k, v in row.items() if k != "per_stage"
            )
            lines.append("  " + cells)
    table = "\n".join(lines)
    (base_out / "ablation.txt").write_text(table + "\n")
    if log_fn:
        log_fn(table)
    return results
