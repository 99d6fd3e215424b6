"""Training loop, optimiser schedule and dataset/model construction."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, restore_parameters, save_checkpoint
from .config import RunConfig
from .data import Dataset, augment, load_dataset, sample_batch, stack_images, synth_dataset
from .losses import total_loss
from .model import TopReID

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from ``base_lr / 10`` to ``base_lr``, then cosine decay
    reaching zero at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * (0.1 + 0.9 * step / warmup_steps)
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(
        self, named_params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4, grad_clip: float = 0.0
    ):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, grads: T.GradMap, lr: float | None = None) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        lr = self.lr if lr is None else lr
        raw = {name: grads.get(p.uid) for name, p in self.params.items()}
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in raw.values() if g is not None)))
        factor = self.grad_clip / norm if self.grad_clip and norm > self.grad_clip else 1.0
        for name, p in self.params.items():
            g = raw[name]
            if g is None:
                g = np.zeros_like(p.data)
            elif factor != 1.0:
                g = g * p.dtype.type(factor)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data -= p.dtype.type(lr) * buf
        return norm


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training set and evaluation set named by ``data.eval_split``."""
    d, m = cfg.data, cfg.model
    if d.source == "path":
        train = load_dataset(d.root)
        if d.eval_split == "heldout":
            if not d.eval_root:
                raise TrainingError("data.eval_root is required for eval_split = heldout")
            return train, load_dataset(d.eval_root, stats=train.stats)
        return train, train
    train = synth_dataset(d.num_ids, d.cams, d.samples_per_id_cam, m.image_height, m.image_width, d.data_seed, d.world_seed)
    if d.eval_split == "train":
        return train, train
    held = synth_dataset(
        d.heldout_ids,
        d.cams,
        d.samples_per_id_cam,
        m.image_height,
        m.image_width,
        d.heldout_seed,
        d.world_seed,
        identity_offset=d.num_ids,
        stats=train.stats,
    )
    return train, held


def build_model(cfg: RunConfig, num_classes: int) -> TopReID:
    with T.precision(cfg.run.precision):
        return TopReID(cfg.model_config(num_classes))


@dataclass
class TrainResult:
    model: TopReID
    history: list[dict] = field(default_factory=list)
    checkpoint: Checkpoint | None = None
    checkpoint_path: Path | None = None
    train_set: Dataset | None = None
    eval_set: Dataset | None = None
    seconds: float = 0.0


def train(
    cfg: RunConfig,
    out_dir=None,
    datasets: tuple[Dataset, Dataset] | None = None,
    log_file=None,
    quiet: bool = True,
) -> TrainResult:
    """Run ``optim.total_steps`` SGD steps on the summed objective.

    Writes ``metrics.jsonl`` and ``model.ckpt`` under ``out_dir`` when given.
    """
    cfg.validate()
    train_set, eval_set = datasets if datasets is not None else build_datasets(cfg)
    labels_of = train_set.label_map
    model = build_model(cfg, len(labels_of))
    opt = SGD(
        model.named_parameters(), cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, cfg.optim.grad_clip
    )
    sampler = cfg.sampler_config()
    aug = cfg.augment_config()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if log_file is None:
            log_file = out_dir / "metrics.jsonl"
    sink = open(log_file, "w") if log_file is not None else None
    history = []
    start = time.perf_counter()
    try:
        with T.precision(cfg.run.precision):
            model.train()
            for step in range(cfg.optim.total_steps):
                lr = lr_at(step, cfg.optim.lr, cfg.optim.warmup_steps, cfg.optim.total_steps)
                batch = sample_batch(train_set, sampler, step)
                rng = np.random.default_rng([cfg.run.seed, step, 1])
                batch = [augment(t, rng, aug) for t in batch]
                images = stack_images(batch)
                labels = np.array([labels_of[t.identity] for t in batch])
                loss, report = total_loss(model, images, labels)
                if not np.isfinite(report.total):
                    raise TrainingError(f"non-finite loss at step {step}")
                grad_norm = opt.step(T.backward(loss), lr)
                record = {"step": step, "lr": lr, **report.as_dict(), "grad_norm": grad_norm}
                history.append(record)
                if sink is not None:
                    sink.write(json.dumps(record) + "\n")
                if not quiet and step % 50 == 0:
                    log.info("step %d lr %.5f total %.4f", step, lr, report.total)
    finally:
        if sink is not None:
            sink.close()
    ckpt = Checkpoint(
        config_text=cfg.to_text(),
        step=cfg.optim.total_steps,
        params={name: p.data.copy() for name, p in model.named_parameters()},
        momentum={name: b.copy() for name, b in opt.buffers.items()},
    )
    path = None
    if out_dir is not None:
        path = out_dir / "model.ckpt"
        save_checkpoint(path, ckpt)
    return TrainResult(model, history, ckpt, path, train_set, eval_set, time.perf_counter() - start)


def model_from_checkpoint(cfg: RunConfig, ckpt: Checkpoint | os.PathLike | str, num_classes: int | None = None) -> TopReID:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if num_classes is None:
        head = next((a for n, a in ckpt.params.items() if n.endswith("vit_heads.cat.weight") or n.endswith("vit_heads.R.weight")), None)
        if head is None:
            raise TrainingError("cannot infer the number of classes from the checkpoint")
        num_classes = head.shape[1]
    model = build_model(cfg, num_classes)
    restore_parameters(model, ckpt.params)
    return model
