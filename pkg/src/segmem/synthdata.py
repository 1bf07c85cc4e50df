"""Deterministic synthetic corpus: shape-segmentation tasks under domain shift.

Images are 32x32 with a single rasterized shape; the mask is the shape. A
DomainSpec only changes appearance (intensities, stripes, blur, noise), never
the mask, so the same seed under two domains yields identical labels. All
randomness flows through per-sample generator seeds, making every split and
shard reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, DegenerateShape

SIZE = 32
MIN_FOREGROUND = 8

ELLIPSE = "ellipse"
RECTANGLE = "rectangle"
RING = "ring"
CROSS = "cross"
SHAPE_FAMILIES = (ELLIPSE, RECTANGLE, RING, CROSS)


@dataclass(frozen=True)
class TaskSpec:
    shape_family: str
    size_range: tuple[float, float] = (0.25, 0.6)

    def __post_init__(self):
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigInvalid(f"unknown shape family {self.shape_family!r}")
        lo, hi = self.size_range
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigInvalid(f"size_range {self.size_range} outside (0, 1)")


@dataclass(frozen=True)
class Stripes:
    period: float = 8.0
    amplitude: float = 0.12


@dataclass(frozen=True)
class DomainSpec:
    fg_intensity: float = 0.9
    bg_intensity: float = 0.1
    noise_std: float = 0.02
    texture: Stripes | None = None
    contrast_inverted: bool = False
    blur_radius: int = 0

    def __post_init__(self):
        for v in (self.fg_intensity, self.bg_intensity):
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"intensity {v} outside [0, 1]")
        if self.blur_radius not in (0, 1):
            raise ConfigInvalid("blur_radius must be 0 or 1")

    def label(self) -> str:
        parts = [f"fg{self.fg_intensity:g}", f"bg{self.bg_intensity:g}", f"n{self.noise_std:g}"]
        if self.texture is not None:
            parts.append(f"stripes{self.texture.period:g}x{self.texture.amplitude:g}")
        if self.contrast_inverted:
            parts.append("inv")
        if self.blur_radius:
            parts.append(f"b{self.blur_radius}")
        return "-".join(parts)


@dataclass
class SampleRecord:
    sample_id: int
    image: np.ndarray
    mask: np.ndarray
    task_id: str
    domain_id: str


def rasterize(family: str, cy: float, cx: float, a: float, b: float, theta: float,
              inner_ratio: float = 0.55, bar_ratio: float = 0.35) -> np.ndarray:
    """Pixel-center rasterization of one shape, float 0/1 mask."""
    rr, cc = np.meshgrid(np.arange(SIZE, dtype=np.float64), np.arange(SIZE, dtype=np.float64), indexing="ij")
    dr = rr - cy
    dc = cc - cx
    u = dc * math.cos(theta) + dr * math.sin(theta)
    v = -dc * math.sin(theta) + dr * math.cos(theta)
    if family == ELLIPSE:
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    elif family == RECTANGLE:
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
    elif family == RING:
        r = np.sqrt(dr ** 2 + dc ** 2)
        inside = (r <= a) & (r >= inner_ratio * a)
    elif family == CROSS:
        t = bar_ratio * a
        inside = ((np.abs(u) <= a) & (np.abs(v) <= t)) | ((np.abs(u) <= t) & (np.abs(v) <= a))
    else:
        raise ConfigInvalid(f"unknown shape family {family!r}")
    return inside.astype(np.float64)


def _draw_mask(task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi = task.size_range
    for _ in range(100):
        cy = rng.uniform(SIZE * 0.3, SIZE * 0.7)
        cx = rng.uniform(SIZE * 0.3, SIZE * 0.7)
        a = rng.uniform(lo, hi) * SIZE / 2.0
        b = rng.uniform(lo, hi) * SIZE / 2.0
        theta = rng.uniform(0.0, math.pi)
        inner = rng.uniform(0.45, 0.7)
        mask = rasterize(task.shape_family, cy, cx, a, b, theta, inner_ratio=inner)
        if mask.sum() >= MIN_FOREGROUND:
            return mask
    raise DegenerateShape(f"no valid {task.shape_family} mask in 100 draws")


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    acc = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            acc += padded[dy:dy + SIZE, dx:dx + SIZE]
    return acc / 9.0


def render(mask: np.ndarray, domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Compose an image from a mask under one appearance domain."""
    fg, bg = domain.fg_intensity, domain.bg_intensity
    if domain.contrast_inverted:
        fg, bg = bg, fg
    img = bg + (fg - bg) * mask
    if domain.texture is not None:
        cols = np.arange(SIZE, dtype=np.float64)
        img = img + domain.texture.amplitude * np.sin(2.0 * math.pi * cols / domain.texture.period)[None, :]
    if domain.blur_radius == 1:
        img = _box_blur(img)
    img = img + domain.noise_std * rng.standard_normal((SIZE, SIZE))
    return np.clip(img, 0.0, 1.0)


def generate(task: TaskSpec, domain: DomainSpec, n: int, seed: int) -> list[SampleRecord]:
    """n deterministic samples. The shape stream and the noise stream are
    separate so that two domains under the same seed share masks exactly."""
    if n < 1:
        raise ConfigInvalid("n must be >= 1")
    records = []
    domain_id = domain.label()
    for index in range(n):
        shape_rng = np.random.default_rng([seed, index, 0])
        noise_rng = np.random.default_rng([seed, index, 1])
        mask = _draw_mask(task, shape_rng)
        image = render(mask, domain, noise_rng)
        records.append(
            SampleRecord(
                sample_id=(seed << 20) | index,
                image=image,
                mask=mask,
                task_id=task.shape_family,
                domain_id=domain_id,
            )
        )
    return records


def oracle_correct(record: SampleRecord) -> np.ndarray:
    """Ground-truth corrector: returns the record's own label, untouched."""
    return record.mask.copy()


# --- split construction ---

BASE_DOMAIN = DomainSpec()

# pretraining size range reaches majority-area shapes so that "segment the
# minority region" is not a workable rule on its own; the appearance
# curriculum pairs each intensity assignment with its swapped counterpart so
# the level-to-role mapping is only resolvable through the conditioning
# memory. The shift domain's exact combination (inverted polarity + stripes
# + heavy noise) is deliberately absent: its levels are covered, so memory
# encodings of shifted pairs remain readable, but query-side heuristics
# degrade there.
PRETRAIN_SIZE_RANGE = (0.3, 0.85)

PRETRAIN_DOMAINS = (
    DomainSpec(),
    DomainSpec(fg_intensity=0.1, bg_intensity=0.9, noise_std=0.02),
    DomainSpec(fg_intensity=0.6, bg_intensity=0.3, noise_std=0.04),
    DomainSpec(fg_intensity=0.3, bg_intensity=0.6, noise_std=0.04),
    DomainSpec(fg_intensity=0.55, bg_intensity=0.35, texture=Stripes(8.0, 0.12), noise_std=0.05),
    DomainSpec(fg_intensity=0.35, bg_intensity=0.55, texture=Stripes(8.0, 0.12), noise_std=0.05),
    DomainSpec(fg_intensity=0.5, bg_intensity=0.3, texture=Stripes(8.0, 0.1), noise_std=0.05),
    DomainSpec(fg_intensity=0.3, bg_intensity=0.5, texture=Stripes(8.0, 0.1), noise_std=0.05),
    DomainSpec(fg_intensity=0.6, bg_intensity=0.4, texture=Stripes(9.0, 0.12), noise_std=0.06),
    DomainSpec(fg_intensity=0.4, bg_intensity=0.6, texture=Stripes(9.0, 0.12), noise_std=0.06),
)

# faint contrast comparable to the stripe amplitude: finding the shape
# without knowing the exact levels degrades, while conditioning on encodings
# of corrected pairs from this appearance recovers it
SHIFT_DOMAIN = DomainSpec(
    fg_intensity=0.55,
    bg_intensity=0.35,
    noise_std=0.08,
    texture=Stripes(8.0, 0.12),
    contrast_inverted=True,
)

CLIENT_DOMAINS = (
    DomainSpec(),
    DomainSpec(fg_intensity=0.85, bg_intensity=0.12, noise_std=0.03),
    DomainSpec(fg_intensity=0.8, bg_intensity=0.15, noise_std=0.02),
    DomainSpec(fg_intensity=0.9, bg_intensity=0.08, noise_std=0.04),
)


@dataclass(frozen=True)
class SplitConfig:
    base_tasks: tuple[str, ...] = (ELLIPSE, RECTANGLE)
    adapt_task: str = RING
    pretrain_size_range: tuple[float, float] = PRETRAIN_SIZE_RANGE
    pretrain_domains: tuple[DomainSpec, ...] = PRETRAIN_DOMAINS
    base_domain: DomainSpec = BASE_DOMAIN
    shift_domain: DomainSpec = SHIFT_DOMAIN
    client_domains: tuple[DomainSpec, ...] = CLIENT_DOMAINS
    n_pretrain_per_cell: int = 18
    n_adapt: int = 500
    n_shifted: int = 200

    def __post_init__(self):
        if self.adapt_task in self.base_tasks:
            raise ConfigInvalid("adaptation task must be disjoint from base tasks")
        if self.n_adapt % 5:
            raise ConfigInvalid("n_adapt must divide 3:1:1 (multiple of 5)")


@dataclass
class Splits:
    pretrain_base: list[SampleRecord]
    adapt_train: list[SampleRecord]
    adapt_val: list[SampleRecord]
    adapt_test: list[SampleRecord]
    shifted_test: list[SampleRecord]
    federated_shards: list[list[SampleRecord]]


def make_splits(cfg: SplitConfig, seed: int) -> Splits:
    """Build all corpus splits with disjoint sample-id spaces.

    Federated shards partition adapt_train by sample id; each shard's images
    are re-rendered under its client domain (labels unchanged).
    """
    pretrain: list[SampleRecord] = []
    sub = 1
    for family in cfg.base_tasks:
        task = TaskSpec(family, size_range=cfg.pretrain_size_range)
        for domain in cfg.pretrain_domains:
            pretrain.extend(generate(task, domain, cfg.n_pretrain_per_cell, seed * 1000 + sub))
            sub += 1

    adapt_task = TaskSpec(cfg.adapt_task)
    adapt_seed = seed * 1000 + 500
    pool = generate(adapt_task, cfg.base_domain, cfg.n_adapt, adapt_seed)
    n_train = cfg.n_adapt * 3 // 5
    n_val = cfg.n_adapt // 5
    adapt_train = pool[:n_train]
    adapt_val = pool[n_train:n_train + n_val]
    adapt_test = pool[n_train + n_val:]

    shifted_test = generate(adapt_task, cfg.shift_domain, cfg.n_shifted, seed * 1000 + 600)

    n_clients = len(cfg.client_domains)
    shards: list[list[SampleRecord]] = []
    for c, domain in enumerate(cfg.client_domains):
        rendered = generate(adapt_task, domain, cfg.n_adapt, adapt_seed)[:n_train]
        shards.append([rendered[i] for i in range(c, n_train, n_clients)])

    return Splits(pretrain, adapt_train, adapt_val, adapt_test, shifted_test, shards)


def dump_jsonl(records: list[SampleRecord], path: str | Path) -> None:
    """One record per line: {sample_id, task_id, domain_id, image, mask}."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "sample_id": rec.sample_id,
                "task_id": rec.task_id,
                "domain_id": rec.domain_id,
                "image": rec.image.reshape(-1).tolist(),
                "mask": [int(v) for v in rec.mask.reshape(-1)],
            }))
            fh.write("\n")
