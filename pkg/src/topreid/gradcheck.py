"""Finite-difference check of the full training objective on a micro model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import synth_dataset, stack_images
from .losses import total_loss
from .model import TopReID

TOLERANCE = 1e-3


def micro_config(cfg: RunConfig | None = None) -> RunConfig:
    """``cfg`` shrunk to D=8, L=1, two heads and 8x8 images with 4x4 patches
    (M=4). Loss mode and module switches are kept."""
    cfg = cfg or RunConfig()
    return cfg.replace(
        model={
            "image_height": 8,
            "image_width": 8,
            "patch_size": 4,
            "embed_dim": 8,
            "depth": 1,
            "heads": 2,
            "tpm_attach_layer": 0,
            "dropout": 0.0,
        },
        sampler={"ids_per_batch": 2, "samples_per_id": 2},
        run={"precision": "float64"},
    )


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    coords_per_param: int = 32
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]

    def to_dict(self) -> dict:
        name, err = self.worst()
        return {
            "max_rel_error": self.max_rel_error,
            "worst_param": name,
            "worst_param_error": err,
            "num_params": len(self.per_param),
            "coords_per_param": self.coords_per_param,
            "seconds": self.seconds,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def run_gradcheck(cfg: RunConfig | None = None, coords_per_param: int = 32, seed: int = 0) -> GradCheckReport:
    """Two identities x two samples; every parameter tensor is probed."""
    cfg = micro_config(cfg)
    start = time.perf_counter()
    with T.precision("float64"):
        data = synth_dataset(num_ids=2, cams=2, samples_per_id_cam=1, height=8, width=8, seed=seed)
        model = TopReID(cfg.model_config(num_classes=2))
        images = {s: a.astype(np.float64) for s, a in stack_images(data.triples).items()}
        labels = np.array([data.label_map[t.identity] for t in data.triples])
        named = list(model.named_parameters())
        for name, p in named:
            p.name = name

        def objective():
            return total_loss(model, images, labels)[0]

        worst, per_param = T.grad_check(
            objective, [p for _, p in named], coords_per_param=coords_per_param, seed=seed, detail=True
        )
    return GradCheckReport(worst, per_param, coords_per_param, time.perf_counter() - start)
