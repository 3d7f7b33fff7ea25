"""Shared random augmentation followed by per-branch scene simulation.

A source image is augmented once (resize, flip, pad-and-crop) and then copied
into one image per branch. Each copy is left untouched, randomly erased
(occlusion scene) or randomly scaled onto a mean-filled baseboard (scale
variation scene).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BRANCH_OPS = ("identity", "erase", "scale")
ERASE_FILLS = ("noise", "mean", "zero")
MAX_ERASE_ATTEMPTS = 100


@dataclass
class AugmentConfig:
    target_size: tuple = (64, 32)
    flip_probability: float = 0.5
    crop_padding: int = 10
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 3.33)
    erase_fill: str = "noise"
    zoom_min: float = 0.8
    zoom_max: float = 1.1
    baseboard_fill: Optional[tuple] = None
    branch_plan: list = field(default_factory=lambda: ["identity", "erase", "scale"])
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        for name in ("target_size", "erase_area", "erase_aspect", "mean", "std"):
            setattr(self, name, tuple(getattr(self, name)))
        self.branch_plan = list(self.branch_plan)
        if self.baseboard_fill is None:
            self.baseboard_fill = tuple(float(m) * 255.0 for m in self.mean)
        self.baseboard_fill = tuple(self.baseboard_fill)
        self.validate()

    @property
    def num_branches(self) -> int:
        return len(self.branch_plan)

    def validate(self):
        h, w = self.target_size
        if h < 8 or w < 8:
            raise ValueError(f"target_size must be at least 8x8, got {self.target_size}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"erase_area must be a sub-range of (0, 1), got {self.erase_area}")
        if not 0.0 < self.erase_aspect[0] <= self.erase_aspect[1]:
            raise ValueError(f"invalid erase_aspect {self.erase_aspect}")
        if self.erase_fill not in ERASE_FILLS:
            raise ValueError(f"erase_fill must be one of {ERASE_FILLS}")
        if not 0.0 < self.zoom_min <= self.zoom_max:
            raise ValueError(f"need 0 < zoom_min <= zoom_max, got {self.zoom_min}, {self.zoom_max}")
        if len(self.baseboard_fill) != 3:
            raise ValueError("baseboard_fill needs three channel values")
        if not self.branch_plan:
            raise ValueError("branch_plan must name at least one branch")
        for op in self.branch_plan:
            if op not in BRANCH_OPS:
                raise ValueError(f"unknown branch transform {op!r}; expected one of {BRANCH_OPS}")


@dataclass
class BranchInputs:
    images: list
    source: Optional[np.ndarray]


def resize(image: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize to ``(height, width)``; same-size input is copied."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.copy()
    return np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))


def base_augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = config.target_size
    out = resize(image, (H, W))
    if rng.random() < config.flip_probability:
        out = out[:, ::-1]
    p = config.crop_padding
    if p > 0:
        padded = np.pad(out, ((p, p), (p, p), (0, 0)), mode="edge")
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        out = padded[top:top + H, left:left + W]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# random erasing


def sample_erase_box(shape: tuple, config: AugmentConfig, rng: np.random.Generator):
    """Pick ``(top, left, height, width)`` for one erasing rectangle.

    Returns None when no sampled rectangle fits within the attempt budget.
    Aspect ratio is height over width.
    """
    H, W = shape[:2]
    area = H * W
    for _ in range(MAX_ERASE_ATTEMPTS):
        target = rng.uniform(*config.erase_area) * area
        aspect = rng.uniform(*config.erase_aspect)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h <= H and 0 < w <= W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return None


def random_erase(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    out = image.copy()
    box = sample_erase_box(image.shape, config, rng)
    if box is None:
        return out
    top, left, h, w = box
    if config.erase_fill == "noise":
        fill = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    elif config.erase_fill == "mean":
        fill = np.array(config.baseboard_fill).round().astype(np.uint8)
    else:
        fill = 0
    out[top:top + h, left:left + w] = fill
    return out


# ---------------------------------------------------------------------------
# random scaling


class ScaleLayout(NamedTuple):
    """Geometry of one random-scaling draw.

    ``regime`` is "center" (z < 0.9), "anywhere" (0.9 <= z <= 1.0) or "crop"
    (z > 1.0). For "center" ``offset`` is the paste position on the
    baseboard, for "crop" it is the crop origin inside the scaled image, and
    for "anywhere" it is None because the position is drawn at random.
    """

    height: int
    width: int
    regime: str
    offset: Optional[tuple]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scale_layout(H: int, W: int, zoom: float) -> ScaleLayout:
    h = max(1, _round_half_up(zoom * H))
    w = max(1, _round_half_up(zoom * W))
    if zoom < 0.9:
        return ScaleLayout(h, w, "center", ((H - h) // 2, (W - w) // 2))
    if zoom <= 1.0:
        return ScaleLayout(h, w, "anywhere", None)
    return ScaleLayout(h, w, "crop", ((h - H) // 2, (w - W) // 2))


def baseboard(config: AugmentConfig, size: tuple) -> np.ndarray:
    board = np.empty((*size, 3), dtype=np.uint8)
    board[:] = np.round(np.asarray(config.baseboard_fill)).astype(np.uint8)
    return board


def random_scale(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
                 zoom: Optional[float] = None) -> np.ndarray:
    """Zoom by z ~ U[zoom_min, zoom_max] and place the result on a baseboard.

    Pass ``zoom`` to force a value; no zoom is drawn from ``rng`` then.
    """
    H, W = image.shape[:2]
    z = float(rng.uniform(config.zoom_min, config.zoom_max)) if zoom is None else float(zoom)
    layout = scale_layout(H, W, z)
    scaled = resize(image, (layout.height, layout.width))
    if layout.regime == "crop":
        top, left = layout.offset
        return np.ascontiguousarray(scaled[top:top + H, left:left + W])
    if layout.regime == "center":
        top, left = layout.offset
    else:
        top = int(rng.integers(0, H - layout.height + 1))
        left = int(rng.integers(0, W - layout.width + 1))
    out = baseboard(config, (H, W))
    out[top:top + layout.height, left:left + layout.width] = scaled
    return out


# ---------------------------------------------------------------------------
# branch expansion


def _apply_branch_op(op: str, image: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    if op == "identity":
        return image.copy()
    if op == "erase":
        return random_erase(image, config, rng)
    return random_scale(image, config, rng)


def homologous_expand(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator,
                      homologous: bool = True) -> BranchInputs:
    """Produce one input image per branch of ``config.branch_plan``.

    Homologous mode runs the shared augmentation once and derives every
    branch copy from that source. With ``homologous=False`` each branch gets
    its own independent base augmentation (the heterologous baseline).
    Branch-specific draws come from child streams of ``rng``, so they never
    perturb the base augmentation stream.
    """
    base_rng, *branch_rngs = rng.spawn(1 + config.num_branches)
    if homologous:
        source = base_augment(image, config, base_rng)
        images = [_apply_branch_op(op, source, config, r)
                  for op, r in zip(config.branch_plan, branch_rngs)]
        return BranchInputs(images, source)
    images = []
    for op, r in zip(config.branch_plan, branch_rngs):
        own_base, own_op = r.spawn(2)
        images.append(_apply_branch_op(op, base_augment(image, config, own_base), config, own_op))
    return BranchInputs(images, None)


def normalize_image(image: np.ndarray, config: Optional[AugmentConfig] = None) -> np.ndarray:
    mean = np.asarray(config.mean if config else IMAGENET_MEAN, dtype=np.float32)
    std = np.asarray(config.std if config else IMAGENET_STD, dtype=np.float32)
    return (image.astype(np.float32) / 255.0 - mean) / std


def eval_image(image: np.ndarray, config: AugmentConfig) -> np.ndarray:
    """Deterministic test-time preprocessing: resize only, no scene simulation."""
    return resize(image, config.target_size)
