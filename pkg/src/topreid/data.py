"""Datasets of registered RGB/NIR/TIR image triples.

On disk a dataset root holds ``RGB/``, ``NIR/`` and ``TIR/`` directories whose
files are named ``<identity>_<camera>_<index>.<ext>``; files sharing a stem
across the three directories form one triple. ``<ext>`` is ``png`` (needs
Pillow) or ``rtd``, a raw tensor dump::

    bytes 0-3   magic b"RTD1"
    bytes 4-19  dtype code, H, W, C as little-endian uint32
                (dtype code 1 = uint8, 2 = float32, 3 = float64)
    rest        row-major H x W x C payload, little-endian
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .vit import SPECTRA, SPECTRUM_NAMES

RAW_MAGIC = b"RTD1"
_RAW_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_STEM = re.compile(r"^(\d+)_(\d+)_(\d+)$")
_EXTENSIONS = (".png", ".rtd")


class DatasetError(ValueError):
    pass


@dataclass
class SpectralTriple:
    images: dict[str, np.ndarray]
    identity: int
    camera: int
    present: frozenset[str] = frozenset(SPECTRA)
    name: str = ""

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise DatasetError(f"identity and camera must be nonnegative ({self.name or 'sample'})")
        shapes = {self.images[s].shape[:2] for s in self.present}
        if len(shapes) > 1:
            raise DatasetError(f"{self.name or 'sample'}: spectra have different sizes {shapes}")


@dataclass
class Dataset:
    triples: list[SpectralTriple]
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.triples)

    def __getitem__(self, i: int) -> SpectralTriple:
        return self.triples[i]

    @property
    def identities(self) -> list[int]:
        return sorted({t.identity for t in self.triples})

    @property
    def label_map(self) -> dict[int, int]:
        """Identity id -> contiguous class index."""
        return {ident: i for i, ident in enumerate(self.identities)}

    @property
    def image_shape(self) -> tuple[int, int, int]:
        t = self.triples[0]
        return t.images[next(iter(sorted(t.present)))].shape

    def complete_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.triples) if t.present == frozenset(SPECTRA)]

    def split_query_gallery(self) -> tuple[list[int], list[int]]:
        """First half (rounded down, at least one) of each identity's samples
        per camera go to the query set, the rest to the gallery."""
        groups: dict[tuple[int, int], list[int]] = {}
        for i, t in enumerate(self.triples):
            groups.setdefault((t.identity, t.camera), []).append(i)
        query, gallery = [], []
        for key in sorted(groups):
            idx = groups[key]
            if len(idx) == 1:
                gallery.extend(idx)
                continue
            half = max(1, len(idx) // 2)
            query.extend(idx[:half])
            gallery.extend(idx[half:])
        return sorted(query), sorted(gallery)


def stack_images(triples, spectra=SPECTRA) -> dict[str, np.ndarray]:
    """Batch the images of each spectrum; absent spectra become zeros."""
    h, w, c = next(t.images[s].shape for t in triples for s in sorted(t.present))
    out = {}
    for s in spectra:
        out[s] = np.stack([t.images[s] if s in t.present else np.zeros((h, w, c), np.float32) for t in triples])
    return out


# -- raw tensor dumps ------------------------------------------------------

def write_raw(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError("raw dumps hold H x W x C arrays")
    for code, dt in _RAW_DTYPES.items():
        if array.dtype.kind == dt.kind and array.dtype.itemsize == dt.itemsize:
            break
    else:
        raise ValueError(f"unsupported dtype {array.dtype} for raw dump")
    h, w, c = array.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<IIII", code, h, w, c))
        fh.write(np.ascontiguousarray(array, dtype=_RAW_DTYPES[code]).tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:4] != RAW_MAGIC:
            raise DatasetError(f"{os.path.basename(path)}: not a raw tensor dump")
        code, h, w, c = struct.unpack("<IIII", head[4:])
        if code not in _RAW_DTYPES:
            raise DatasetError(f"{os.path.basename(path)}: unknown dtype code {code}")
        dtype = _RAW_DTYPES[code]
        payload = fh.read()
    if len(payload) != h * w * c * dtype.itemsize:
        raise DatasetError(f"{os.path.basename(path)}: payload size does not match header {h}x{w}x{c}")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w, c).copy()


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".rtd":
        img = read_raw(path)
    else:
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - Pillow ships with the sandbox
            raise DatasetError(f"reading {path.name} needs Pillow; convert to .rtd instead") from exc
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"))
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return img.astype(np.float32)


def compute_stats(triples) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    stats = {}
    for s in SPECTRA:
        imgs = [t.images[s] for t in triples if s in t.present]
        if not imgs:
            stats[s] = (np.zeros(3, np.float32), np.ones(3, np.float32))
            continue
        arr = np.stack(imgs).reshape(-1, imgs[0].shape[-1])
        mu = arr.mean(axis=0)
        sd = arr.std(axis=0)
        stats[s] = (mu.astype(np.float32), np.where(sd > 1e-8, sd, 1.0).astype(np.float32))
    return stats


def normalize(triples, stats=None) -> Dataset:
    """Standardise every channel of every spectrum with dataset statistics."""
    stats = stats or compute_stats(triples)
    out = []
    for t in triples:
        imgs = {s: ((t.images[s] - stats[s][0]) / stats[s][1]).astype(np.float32) for s in t.present}
        out.append(replace(t, images=imgs))
    return Dataset(out, stats)


def load_dataset(root, stats=None) -> Dataset:
    root = Path(root)
    by_stem: dict[str, dict[str, np.ndarray]] = {}
    for s in SPECTRA:
        sub = root / SPECTRUM_NAMES[s]
        if not sub.is_dir():
            continue
        for path in sorted(sub.iterdir()):
            if path.suffix.lower() not in _EXTENSIONS:
                raise DatasetError(f"unsupported file {path.name!r} in {sub}")
            if not _STEM.match(path.stem):
                raise DatasetError(f"cannot parse identity/camera/index from {path.name!r}")
            by_stem.setdefault(path.stem, {})[s] = _read_image(path)
    if not by_stem:
        raise DatasetError(f"no images found under {root}")
    triples = []
    for stem in sorted(by_stem, key=lambda k: tuple(int(x) for x in k.split("_"))):
        ident, cam, _ = (int(x) for x in stem.split("_"))
        images = by_stem[stem]
        triples.append(SpectralTriple(images, ident, cam, frozenset(images), stem))
    return normalize(triples, stats)


def save_dataset(dataset: Dataset, root, fmt: str = "rtd") -> None:
    """Write triples in the on-disk layout (mostly for tests and fixtures)."""
    root = Path(root)
    for s in SPECTRA:
        (root / SPECTRUM_NAMES[s]).mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(dataset.triples):
        stem = t.name if t.name and _STEM.match(t.name) else f"{t.identity:04d}_{t.camera}_{i}"
        for s in t.present:
            path = root / SPECTRUM_NAMES[s] / f"{stem}.{fmt}"
            if fmt == "rtd":
                write_raw(path, t.images[s].astype(np.float32))
            else:
                from PIL import Image

                Image.fromarray(np.clip(t.images[s] * 255, 0, 255).astype(np.uint8)).save(path)


# -- synthetic generator -----------------------------------------------------

@dataclass(frozen=True)
class SynthWorld:
    """Fixed per-spectrum render maps shared by every identity."""

    bases: dict[str, np.ndarray]  # s -> (Z, H, W, 3)
    visibility: dict[str, np.ndarray]  # s -> (Z,)
    cam_shift: dict[str, np.ndarray]  # s -> (cams, 3)
    latent_dim: int


def _gratings(rng, n: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros((n, h, w))
    for j in range(n):
        for _ in range(2):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[j] += np.cos(2 * np.pi * (fy * yy + fx * xx * rng.choice([-1, 1])) + phase)
    # mirror-symmetric so horizontal flips preserve identity
    out = 0.5 * (out + out[:, :, ::-1])
    return out / (out.std(axis=(1, 2), keepdims=True) + 1e-12)


def make_world(
    h: int, w: int, cams: int, seed: int = 0, latent_dim: int = 12, spectral_mix: float = 0.15, hidden: float = 0.5
) -> SynthWorld:
    """Spectra are registered views of one scene: they share the spatial
    bases and perturb a common channel mixing by ``spectral_mix``. Each
    spectrum sees a different two-thirds of the latent factors clearly and
    the rest attenuated to ``hidden``."""
    rng = np.random.default_rng([seed, 7919])
    spatial = _gratings(rng, latent_dim, h, w)  # (Z, H, W)
    common = rng.normal(size=(latent_dim, 3))
    bases, vis, shift = {}, {}, {}
    third = latent_dim // 3
    for k, s in enumerate(SPECTRA):
        mixing = common + spectral_mix * rng.normal(size=(latent_dim, 3))
        mixing /= np.linalg.norm(mixing, axis=1, keepdims=True)
        bases[s] = spatial[..., None] * mixing[:, None, None, :]
        v = np.full(latent_dim, hidden)
        v[np.arange(latent_dim) // third != k] = 1.0
        vis[s] = v
        shift[s] = rng.normal(0, 0.3, size=(cams, 3))
    return SynthWorld(bases, vis, shift, latent_dim)


_RENDER = {
    "R": lambda x: np.tanh(x),
    "N": lambda x: np.tanh(1.5 * x),
    "T": lambda x: np.tanh(x) * np.abs(np.tanh(x)) * 0.7 + 0.3 * x,
}


def synth_dataset(
    num_ids: int = 16,
    cams: int = 4,
    samples_per_id_cam: int = 4,
    height: int = 64,
    width: int = 32,
    seed: int = 0,
    world_seed: int = 0,
    jitter: float = 0.35,
    noise: float = 0.15,
    identity_offset: int = 0,
    stats=None,
) -> Dataset:
    """Identities with latent appearance vectors rendered into three spectra.

    ``world_seed`` fixes the render maps; ``seed`` draws identities and
    per-sample variation, so datasets with different ``seed`` but equal
    ``world_seed`` are disjoint identity sets from the same distribution.
    ``stats`` reuses another dataset's normalisation.
    """
    if min(num_ids, cams, samples_per_id_cam, height, width) <= 0:
        raise ValueError("synthetic dataset sizes must be positive")
    world = make_world(height, width, cams, world_seed)
    rng = np.random.default_rng([seed, 104729])
    latents = rng.normal(size=(num_ids, world.latent_dim))
    triples = []
    for i in range(num_ids):
        for cam in range(cams):
            for n in range(samples_per_id_cam):
                z = latents[i] + jitter * rng.normal(size=world.latent_dim)
                images = {}
                for s in SPECTRA:
                    field_ = np.tensordot(z * world.visibility[s], world.bases[s], axes=1) / np.sqrt(world.latent_dim / 3)
                    img = _RENDER[s](field_) + world.cam_shift[s][cam]
                    img = img + noise * rng.normal(size=img.shape)
                    images[s] = img.astype(np.float32)
                ident = identity_offset + i
                triples.append(SpectralTriple(images, ident, cam, frozenset(SPECTRA), f"{ident:04d}_{cam}_{n}"))
    return normalize(triples, stats)


# -- sampling and augmentation ----------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    ids_per_batch: int = 4
    samples_per_id: int = 4
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.samples_per_id


def sample_batch(dataset: Dataset, cfg: SamplerConfig, step: int) -> list[SpectralTriple]:
    """``ids_per_batch`` identities without replacement, ``samples_per_id``
    complete triples each (with replacement only when an identity is short)."""
    pools: dict[int, list[int]] = {}
    for i in dataset.complete_indices():
        pools.setdefault(dataset.triples[i].identity, []).append(i)
    ids = sorted(pools)
    if len(ids) < cfg.ids_per_batch:
        raise ValueError(f"batch needs {cfg.ids_per_batch} identities, dataset has {len(ids)}")
    rng = np.random.default_rng([cfg.seed, step])
    chosen = rng.choice(len(ids), size=cfg.ids_per_batch, replace=False)
    batch = []
    for c in chosen:
        pool = pools[ids[c]]
        k = cfg.samples_per_id
        picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
        batch.extend(dataset.triples[pool[p]] for p in picks)
    return batch


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    pad: int = 2
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.3)
    erase_aspect: float = 0.3


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def augment(triple: SpectralTriple, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> SpectralTriple:
    if not cfg.enabled:
        return triple
    images = dict(triple.images)
    flip = rng.random() < cfg.flip_prob
    h, w, _ = images[next(iter(sorted(triple.present)))].shape
    dy, dx = (rng.integers(0, 2 * cfg.pad + 1, size=2) if cfg.pad > 0 else (0, 0))
    for s in sorted(triple.present):
        img = images[s]
        if flip:
            img = hflip(img)
        if cfg.pad > 0:
            padded = np.pad(img, ((cfg.pad, cfg.pad), (cfg.pad, cfg.pad), (0, 0)))
            img = padded[dy:dy + h, dx:dx + w]
        images[s] = np.ascontiguousarray(img)
    for s in sorted(triple.present):
        if rng.random() < cfg.erase_prob:
            images[s] = _erase(images[s], rng, cfg)
    return replace(triple, images=images)


def _erase(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    h, w, _ = img.shape
    for _ in range(10):
        area = rng.uniform(*cfg.erase_area) * h * w
        aspect = np.exp(rng.uniform(np.log(cfg.erase_aspect), -np.log(cfg.erase_aspect)))
        eh, ew = int(round(np.sqrt(area * aspect))), int(round(np.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y, x = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
            out = img.copy()
            out[y:y + eh, x:x + ew] = 0.0
            return out
    return img
