"""Run configuration: sectioned ``key = value`` text with a typed schema.

Example::

    [model]
    embed_dim = 64
    depth = 4

    [loss]
    mode = AL

Unknown sections or keys, values of the wrong type and out-of-range values
are all rejected with a :class:`ConfigError` naming the offending entry.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .crm import LOSS_VARIANTS, REDUCTIONS
from .data import AugmentConfig, SamplerConfig
from .model import LOSS_MODES, ModelConfig
from .vit import ConfigError, EncoderConfig


def _rng(lo=None, hi=None, choices=None):
    return {"lo": lo, "hi": hi, "choices": choices}


@dataclass
class ModelSection:
    image_height: int = field(default=64, metadata=_rng(1))
    image_width: int = field(default=32, metadata=_rng(1))
    patch_size: int = field(default=16, metadata=_rng(1))
    embed_dim: int = field(default=64, metadata=_rng(1))
    depth: int = field(default=4, metadata=_rng(0, 64))
    heads: int = field(default=4, metadata=_rng(1))
    ffn_ratio: float = field(default=4.0, metadata=_rng(0.25, 16))
    tpm_attach_layer: int = field(default=0, metadata=_rng(0, 64))
    dropout: float = field(default=0.0, metadata=_rng(0.0, 0.9))


@dataclass
class TpmSection:
    enabled: bool = True
    num_stages: int = field(default=3, metadata=_rng(1, 3))
    share_across_streams: bool = False


@dataclass
class CrmSection:
    enabled: bool = True
    depth: int = field(default=1, metadata=_rng(1, 4))
    loss: str = field(default="mse", metadata=_rng(choices=LOSS_VARIANTS))
    reduction: str = field(default="mean", metadata=_rng(choices=REDUCTIONS))
    detach_targets: bool = False


@dataclass
class LossSection:
    mode: str = field(default="AL", metadata=_rng(choices=LOSS_MODES))
    margin: float = field(default=0.3, metadata=_rng(0.0, 10.0))
    label_smoothing: float = field(default=0.1, metadata=_rng(0.0, 0.99))


@dataclass
class OptimSection:
    lr: float = field(default=0.009, metadata=_rng(0.0, 10.0))
    momentum: float = field(default=0.9, metadata=_rng(0.0, 0.999))
    weight_decay: float = field(default=1e-4, metadata=_rng(0.0, 1.0))
    warmup_steps: int = field(default=100, metadata=_rng(0))
    total_steps: int = field(default=2000, metadata=_rng(1))
    grad_clip: float = field(default=0.0, metadata=_rng(0.0, 1e6))


@dataclass
class SamplerSection:
    ids_per_batch: int = field(default=4, metadata=_rng(2))
    samples_per_id: int = field(default=4, metadata=_rng(2))


@dataclass
class DataSection:
    source: str = field(default="synthetic", metadata=_rng(choices=("synthetic", "path")))
    root: str = ""
    eval_root: str = ""
    num_ids: int = field(default=16, metadata=_rng(2))
    cams: int = field(default=4, metadata=_rng(1))
    samples_per_id_cam: int = field(default=4, metadata=_rng(1))
    world_seed: int = field(default=0, metadata=_rng(0))
    data_seed: int = field(default=0, metadata=_rng(0))
    heldout_ids: int = field(default=16, metadata=_rng(2))
    heldout_seed: int = field(default=1000, metadata=_rng(0))
    eval_split: str = field(default="train", metadata=_rng(choices=("train", "heldout")))
    augment: bool = True
    flip_prob: float = field(default=0.5, metadata=_rng(0.0, 1.0))
    pad: int = field(default=2, metadata=_rng(0, 64))
    erase_prob: float = field(default=0.5, metadata=_rng(0.0, 1.0))


@dataclass
class RunSection:
    seed: int = field(default=0, metadata=_rng(0))
    precision: str = field(default="float32", metadata=_rng(choices=("float32", "float64")))
    output_dir: str = "runs/default"
    metric: str = field(default="cosine", metadata=_rng(choices=("cosine", "euclidean")))


SECTIONS = {
    "model": ModelSection,
    "tpm": TpmSection,
    "crm": CrmSection,
    "loss": LossSection,
    "optim": OptimSection,
    "sampler": SamplerSection,
    "data": DataSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    tpm: TpmSection = field(default_factory=TpmSection)
    crm: CrmSection = field(default_factory=CrmSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    # -- derived configs --------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(
            image_height=m.image_height,
            image_width=m.image_width,
            patch_size=m.patch_size,
            embed_dim=m.embed_dim,
            depth=m.depth,
            heads=m.heads,
            ffn_ratio=m.ffn_ratio,
            tpm_attach_layer=m.tpm_attach_layer,
            dropout=m.dropout,
        )

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder_config(),
            num_classes=num_classes,
            loss_mode=self.loss.mode,
            use_tpm=self.tpm.enabled,
            use_crm=self.crm.enabled,
            num_stages=self.tpm.num_stages,
            share_tpm_across_streams=self.tpm.share_across_streams,
            crm_depth=self.crm.depth,
            crm_loss=self.crm.loss,
            crm_reduction=self.crm.reduction,
            detach_targets=self.crm.detach_targets,
            margin=self.loss.margin,
            label_smoothing=self.loss.label_smoothing,
            seed=self.run.seed,
        )

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler.ids_per_batch, self.sampler.samples_per_id, self.run.seed)

    def augment_config(self) -> AugmentConfig:
        d = self.data
        return AugmentConfig(enabled=d.augment, flip_prob=d.flip_prob, pad=d.pad, erase_prob=d.erase_prob)

    def validate(self) -> "RunConfig":
        for name, cls in SECTIONS.items():
            section = getattr(self, name)
            for f in fields(cls):
                _check_value(name, f, getattr(section, f.name))
        self.encoder_config()
        if self.optim.warmup_steps >= self.optim.total_steps:
            raise ConfigError("optim.warmup_steps must be smaller than optim.total_steps")
        if self.data.source == "path" and not self.data.root:
            raise ConfigError("data.root is required when data.source = path")
        return self

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(tpm={"enabled": False})``."""
        new = dataclasses.replace(self)
        for name, overrides in sections.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            section = getattr(self, name)
            known = {f.name for f in fields(section)}
            bad = set(overrides) - known
            if bad:
                raise ConfigError(f"unknown key {name}.{sorted(bad)[0]}")
            setattr(new, name, dataclasses.replace(section, **overrides))
        return new.validate()

    # -- text round-trip --------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            section = getattr(self, name)
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                lines.append(f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            section_cls = SECTIONS[name]
            by_name = {f.name: f for f in fields(section_cls)}
            values = {}
            for key, raw in parser.items(name):
                if key not in by_name:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse_value(name, by_name[key], raw)
            setattr(cfg, name, section_cls(**values))
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_value(section: str, f, raw: str):
    raw = raw.strip()
    where = f"{section}.{f.name}"
    try:
        if f.type is bool:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if f.type is int:
            return int(raw)
        if f.type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: expected {f.type.__name__}, got {raw!r}") from None


def _check_value(section: str, f, value) -> None:
    where = f"{section}.{f.name}"
    if f.type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, f.type) or (f.type is int and isinstance(value, bool)):
        raise ConfigError(f"{where}: expected {f.type.__name__}, got {value!r}")
    meta = f.metadata
    if meta.get("choices") is not None and value not in meta["choices"]:
        raise ConfigError(f"{where}: {value!r} not in {list(meta['choices'])}")
    if meta.get("lo") is not None and value < meta["lo"]:
        raise ConfigError(f"{where}: {value!r} below minimum {meta['lo']}")
    if meta.get("hi") is not None and value > meta["hi"]:
        raise ConfigError(f"{where}: {value!r} above maximum {meta['hi']}")
