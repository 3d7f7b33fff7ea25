"""Datasets, the Market1501 directory loader, a synthetic toy ReID generator
and identity-balanced PK batch sampling."""

from __future__ import annotations

import json
import os
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

SPLITS = ("train", "query", "gallery")
MARKET_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")
JUNK_PIDS = (-1, 0)

_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    identity: int
    camera: int
    path: Optional[str] = None

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise DatasetError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise DatasetError(f"image too small: {px.shape[:2]} (minimum 8x8)")
        if px.dtype != np.uint8:
            raise DatasetError(f"expected uint8 pixels, got {px.dtype}")
        if self.camera < 0:
            raise DatasetError(f"negative camera id {self.camera}")


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of samples for one split.

    Train splits carry contiguous labels in ``[0, num_identities)``. Query and
    gallery splits keep whatever identity tokens they were built with (raw
    person ids for Market-style data, including junk ids in the gallery).
    """

    samples: tuple
    split: str = "train"
    num_identities: int = field(init=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.identity for s in self.samples]
        object.__setattr__(self, "num_identities", len(set(ids)))
        if self.split == "train":
            counts = defaultdict(int)
            for i in ids:
                counts[i] += 1
            for label, n in counts.items():
                if not 0 <= label < self.num_identities:
                    raise DatasetError(
                        f"train label {label} outside [0, {self.num_identities})")
                if n < 2:
                    raise DatasetError(
                        f"train identity {label} has {n} sample(s); at least 2 are needed for positives")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    def index_by_identity(self) -> dict:
        index = defaultdict(list)
        for i, s in enumerate(self.samples):
            index[s.identity].append(i)
        return dict(index)


@dataclass(frozen=True)
class Batch:
    samples: tuple
    P: int
    K: int

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# Market1501 convention


def parse_market_filename(name: str) -> tuple:
    """Return ``(pid, camera)`` from a Market-style filename.

    Cameras are returned 0-based (``c1`` -> 0).
    """
    m = _MARKET_NAME.match(os.path.basename(name))
    if m is None:
        raise DatasetError(f"cannot parse Market-style filename: {name}")
    cam = int(m.group(2))
    if cam < 1:
        raise DatasetError(f"camera index must be >= 1 in filename: {name}")
    return int(m.group(1)), cam - 1


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def _scan_dir(directory: Path) -> list:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [(p, *parse_market_filename(p.name)) for p in files]


def load_market_format(root) -> tuple:
    """Load ``(train, query, gallery)`` from a Market1501-layout directory.

    Train identities are relabeled to ``[0, M)`` in ascending pid order. Junk
    pids (-1 and 0) are dropped from train and query and kept in the gallery.
    """
    root = Path(root)
    for sub in MARKET_DIRS.values():
        if not (root / sub).is_dir():
            raise DatasetError(f"missing directory {root / sub}")

    entries = {split: _scan_dir(root / sub) for split, sub in MARKET_DIRS.items()}

    train_pids = sorted({pid for _, pid, _ in entries["train"] if pid not in JUNK_PIDS})
    relabel = {pid: i for i, pid in enumerate(train_pids)}
    train = [ImageSample(read_image(p), relabel[pid], cam, str(p))
             for p, pid, cam in entries["train"] if pid not in JUNK_PIDS]
    query = [ImageSample(read_image(p), pid, cam, str(p))
             for p, pid, cam in entries["query"] if pid not in JUNK_PIDS]
    gallery = [ImageSample(read_image(p), pid, cam, str(p))
               for p, pid, cam in entries["gallery"]]
    return (Dataset(train, "train"), Dataset(query, "query"), Dataset(gallery, "gallery"))


# ---------------------------------------------------------------------------
# Toy generator


@dataclass
class ToyConfig:
    num_identities: int = 40
    images_per_identity: int = 20
    height: int = 64
    width: int = 32
    num_cameras: int = 4
    occluder_prob: float = 0.3
    scale_prob: float = 0.3
    scale_range: tuple = (0.6, 1.15)
    position_jitter: int = 3
    tint_strength: float = 0.15
    noise_std: float = 6.0
    split_fractions: tuple = (0.6, 0.1, 0.3)

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.split_fractions = tuple(self.split_fractions)

    def split_counts(self) -> tuple:
        n = self.images_per_identity
        n_train = int(round(self.split_fractions[0] * n))
        n_query = max(1, int(round(self.split_fractions[1] * n)))
        return n_train, n_query, n - n_train - n_query

    def validate(self):
        if self.num_identities < 4:
            raise DatasetError("toy dataset needs num_identities >= 4")
        if self.images_per_identity < 4:
            raise DatasetError("toy dataset needs images_per_identity >= 4")
        if self.num_cameras < 2:
            raise DatasetError("toy dataset needs num_cameras >= 2")
        if self.height < 8 or self.width < 8:
            raise DatasetError("toy images must be at least 8x8")
        n_train, n_query, n_gallery = self.split_counts()
        if n_train < 2:
            raise DatasetError(
                f"only {n_train} train image(s) per identity; the triplet loss needs at least 2")
        if n_gallery < 1:
            raise DatasetError("split leaves no gallery images")
        for name in ("occluder_prob", "scale_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1]")


def _identity_look(seed: int, identity: int) -> dict:
    rng = np.random.default_rng([seed, 0, identity])
    return {
        "head": rng.integers(20, 235, 3),
        "torso": rng.integers(0, 256, 3),
        "torso2": rng.integers(0, 256, 3),
        "legs": rng.integers(0, 256, 3),
        "pattern": int(rng.integers(0, 3)),
        "split": float(rng.uniform(0.45, 0.6)),
        "width": float(rng.uniform(0.45, 0.7)),
        "bag": bool(rng.random() < 0.5),
        "bag_color": rng.integers(0, 256, 3),
        "bag_side": int(rng.integers(0, 2)),
        "camera_offset": int(rng.integers(0, 1 << 16)),
    }


def _camera_look(seed: int, camera: int, strength: float) -> dict:
    rng = np.random.default_rng([seed, 2, camera])
    return {
        "background": rng.integers(40, 216, 3),
        "ground": rng.integers(20, 120, 3),
        "tint": 1.0 + strength * rng.uniform(-1.0, 1.0, 3),
    }


def _fill(canvas, top, bottom, left, right, color):
    H, W = canvas.shape[:2]
    top, bottom = max(0, top), min(H, bottom)
    left, right = max(0, left), min(W, right)
    if top < bottom and left < right:
        canvas[top:bottom, left:right] = color


def _draw_figure(canvas, look, top, left, fh, fw):
    head_h = max(1, int(round(0.16 * fh)))
    split = top + int(round(look["split"] * fh))
    bottom = top + fh
    hw = max(1, int(round(0.45 * fw)))
    hl = left + (fw - hw) // 2
    _fill(canvas, top, top + head_h, hl, hl + hw, look["head"])

    _fill(canvas, top + head_h, split, left, left + fw, look["torso"])
    if look["pattern"] == 1:
        step = max(2, (split - top - head_h) // 4)
        for y in range(top + head_h, split, 2 * step):
            _fill(canvas, y, y + step, left, left + fw, look["torso2"])
    elif look["pattern"] == 2:
        _fill(canvas, top + head_h, split, left + fw // 2, left + fw, look["torso2"])

    leg_w = max(1, int(round(0.4 * fw)))
    _fill(canvas, split, bottom, left, left + leg_w, look["legs"])
    _fill(canvas, split, bottom, left + fw - leg_w, left + fw, look["legs"])

    if look["bag"]:
        bw = max(1, fw // 4)
        bl = left - bw // 2 if look["bag_side"] == 0 else left + fw - bw + bw // 2
        bt = top + head_h + (split - top - head_h) // 3
        _fill(canvas, bt, bt + max(2, fh // 5), bl, bl + bw, look["bag_color"])


def render_toy_instance(config: ToyConfig, seed: int, identity: int, instance: int,
                        camera: int) -> np.ndarray:
    H, W = config.height, config.width
    look = _identity_look(seed, identity)
    cam = _camera_look(seed, camera, config.tint_strength)
    rng = np.random.default_rng([seed, 1, identity, instance])

    canvas = np.empty((H, W, 3), dtype=np.float64)
    canvas[:] = cam["background"]
    canvas[int(0.8 * H):] = cam["ground"]

    scale = 1.0
    if rng.random() < config.scale_prob:
        scale = float(rng.uniform(*config.scale_range))
    fh = max(4, int(round(0.85 * H * scale)))
    fw = max(3, int(round(look["width"] * W * scale)))
    j = config.position_jitter
    dy, dx = (rng.integers(-j, j + 1, 2) if j > 0 else (0, 0))
    top = int(round(0.95 * H)) - fh + int(dy)
    left = (W - fw) // 2 + int(dx)
    _draw_figure(canvas, look, top, left, fh, fw)

    if rng.random() < config.occluder_prob:
        oh = int(round(rng.uniform(0.2, 0.45) * H))
        ow = int(round(rng.uniform(0.5, 1.0) * W))
        ot = int(rng.integers(0, H - oh + 1))
        ol = int(rng.integers(0, W - ow + 1))
        _fill(canvas, ot, ot + oh, ol, ol + ow, rng.integers(0, 256, 3))

    canvas *= cam["tint"]
    if config.noise_std > 0:
        canvas += rng.normal(0.0, config.noise_std, canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def generate_toy_dataset(config: ToyConfig, seed: int) -> tuple:
    """Generate ``(train, query, gallery)`` toy splits.

    Every identity is a deterministic block figure; instances vary by camera
    tint, position, optional occluder and optional scale change. Per identity
    the first 60% of instances go to train, the next 10% to query and the rest
    to the gallery. Cameras rotate over instances so every query has
    cross-camera gallery matches.
    """
    config.validate()
    n_train, n_query, _ = config.split_counts()
    splits = {s: [] for s in SPLITS}
    for identity in range(config.num_identities):
        offset = _identity_look(seed, identity)["camera_offset"]
        for j in range(config.images_per_identity):
            camera = (offset + j) % config.num_cameras
            pixels = render_toy_instance(config, seed, identity, j, camera)
            split = "train" if j < n_train else "query" if j < n_train + n_query else "gallery"
            name = f"{identity + 1:04d}_c{camera + 1}s1_{j:06d}_00.png"
            splits[split].append(ImageSample(pixels, identity, camera, name))
    return tuple(Dataset(splits[s], s) for s in SPLITS)


def save_toy_dataset(out_dir, config: ToyConfig, seed: int) -> Path:
    """Write a toy dataset in the Market1501 layout plus ``manifest.json``."""
    out_dir = Path(out_dir)
    datasets = generate_toy_dataset(config, seed)
    for split, ds in zip(SPLITS, datasets):
        d = out_dir / MARKET_DIRS[split]
        d.mkdir(parents=True, exist_ok=True)
        for s in ds.samples:
            Image.fromarray(s.pixels).save(d / s.path, format="PNG")
    manifest = {"generator": "toy", "seed": seed, "config": asdict(config),
                "counts": {s: len(ds) for s, ds in zip(SPLITS, datasets)}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out_dir


# ---------------------------------------------------------------------------
# PK sampling


def sample_pk_batch(dataset: Dataset, P: int, K: int, rng: np.random.Generator) -> Batch:
    """Draw P identities without replacement and K instances of each.

    Instances are drawn without replacement when an identity has at least K
    images and with replacement otherwise. Samples come out grouped by
    identity.
    """
    if P < 2 or K < 2:
        raise ValueError(f"PK sampling needs P >= 2 and K >= 2, got P={P}, K={K}")
    index = dataset.index_by_identity()
    pids = sorted(index)
    if P > len(pids):
        raise ValueError(f"P={P} exceeds the {len(pids)} identities available")
    chosen = rng.choice(len(pids), size=P, replace=False)
    samples = []
    for c in chosen:
        members = index[pids[c]]
        picks = rng.choice(len(members), size=K, replace=len(members) < K)
        samples.extend(dataset.samples[members[i]] for i in picks)
    return Batch(tuple(samples), P, K)


def iterations_per_epoch(dataset: Dataset, P: int, K: int) -> int:
    return max(1, len(dataset) // (P * K))
