"""Synthetic planted-motif imagery: each class is a shape stamped at a
random position and scale onto a smooth low-frequency background, with pixel
noise on top. The tight box around the stamped mask is recorded as ground
truth, which makes region-retrieval evaluation self-annotating.

Generation is deterministic per (seed, image_id), so images can be produced
in any order or in parallel without changing a byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MOTIF_NAMES = ("disk", "ring", "cross", "bar", "blob", "wedge", "double_dot", "grid_patch")

MOTIF_DELTA = 0.45   # brightness lift of motif pixels over the background
BACKGROUND_LEVEL = 0.35
BACKGROUND_AMP = 0.08
MARGIN = 2           # min distance from motif box to the image edge


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    images_per_class: int = 200
    image_size: int = 64
    noise_sigma: float = 0.05
    min_scale: int = 14
    max_scale: int = 26

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(MOTIF_NAMES):
            raise ValueError(f"num_classes must be in [1,{len(MOTIF_NAMES)}]")
        if self.max_scale + 2 * MARGIN >= self.image_size:
            raise ValueError(f"max_scale {self.max_scale} too large for "
                             f"{self.image_size}px images")

    @property
    def total(self) -> int:
        return self.num_classes * self.images_per_class


@dataclass
class Entry:
    id: int
    path: str
    label: int
    box: list[int] | None  # [x1,y1,x2,y2] pixel-space, half-open

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "path": self.path, "label": self.label,
                           "box": self.box})


def save_manifest(entries: list[Entry], path) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(e.to_json() + "\n")


def load_manifest(path) -> list[Entry]:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(Entry(id=int(obj["id"]), path=obj["path"],
                                 label=int(obj["label"]), box=obj.get("box")))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in manifest")
    return entries


def _bilinear_upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    gh, gw = coarse.shape
    ys = np.linspace(0.0, gh - 1.0, size)
    xs = np.linspace(0.0, gw - 1.0, size)
    y0 = np.clip(ys.astype(int), 0, gh - 2)
    x0 = np.clip(xs.astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x0 + 1)]
    bl = coarse[np.ix_(y0 + 1, x0)]
    br = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


def _motif_mask(label: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean stamp for one motif class on an s x s canvas. Shapes are built
    dense inside their own tight box so the box-vs-background contrast
    criterion holds even after averaging over the box."""
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    dy, dx = yy - c, xx - c
    r = s / 2.0
    name = MOTIF_NAMES[label]
    if name == "disk":
        return dy * dy + dx * dx <= r * r
    if name == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "cross":
        w = 0.22 * s
        return (np.abs(dy) <= w) | (np.abs(dx) <= w)
    if name == "bar":
        w = 0.18 * s
        mask = np.abs(dy) <= w
        return mask if rng.integers(2) == 0 else mask.T
    if name == "blob":
        # offsets chosen so both lobes stay inside the s x s stamp
        d2a = dy * dy + dx * dx
        off = 0.22 * s
        d2b = (dy - off) ** 2 + (dx - off) ** 2
        return (d2a <= (0.42 * s) ** 2) | (d2b <= (0.26 * s) ** 2)
    if name == "wedge":
        mask = (xx + yy) <= s - 1
        k = int(rng.integers(4))
        return np.rot90(mask, k)
    if name == "double_dot":
        rr = 0.2 * s
        off = 0.28 * s
        a = (dy ** 2 + (dx - off) ** 2) <= rr * rr
        b = (dy ** 2 + (dx + off) ** 2) <= rr * rr
        mask = a | b
        return mask if rng.integers(2) == 0 else mask.T
    if name == "grid_patch":
        cell = max(2, s // 8)
        checker = ((yy // cell + xx // cell) % 2 == 0)
        inside = (np.abs(dy) <= 0.45 * s) & (np.abs(dx) <= 0.45 * s)
        return checker & inside
    raise ValueError(f"no motif for label {label}")


def _tight_box(mask: np.ndarray, oy: int, ox: int) -> list[int]:
    ys, xs = np.nonzero(mask)
    return [int(ox + xs.min()), int(oy + ys.min()),
            int(ox + xs.max() + 1), int(oy + ys.max() + 1)]


def render_image(spec: SyntheticSpec, seed: int, image_id: int,
                 label: int) -> tuple[np.ndarray, list[int]]:
    """One uint8 image plus its ground-truth motif box."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, image_id]))
    n = spec.image_size
    coarse = rng.normal(BACKGROUND_LEVEL, BACKGROUND_AMP, size=(5, 5))
    img = _bilinear_upsample(coarse, n)
    s = int(rng.integers(spec.min_scale, spec.max_scale + 1))
    mask = _motif_mask(label, s, rng)
    oy = int(rng.integers(MARGIN, n - s - MARGIN + 1))
    ox = int(rng.integers(MARGIN, n - s - MARGIN + 1))
    img[oy:oy + s, ox:ox + s] += MOTIF_DELTA * mask
    box = _tight_box(mask, oy, ox)
    img += rng.normal(0.0, spec.noise_sigma, size=(n, n))
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8), box


def generate(spec: SyntheticSpec, seed: int, out_dir) -> list[Entry]:
    """Write the image files and manifest; returns the manifest entries.
    Labels interleave (id % num_classes) so any id prefix stays balanced."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for image_id in range(spec.total):
        label = image_id % spec.num_classes
        pixels, box = render_image(spec, seed, image_id, label)
        rel = f"images/img_{image_id:05d}.png"
        Image.fromarray(pixels, mode="L").save(out / rel)
        entries.append(Entry(id=image_id, path=rel, label=label, box=box))
    save_manifest(entries, out / "manifest.jsonl")
    return entries


def split(entries: list[Entry], ratios: tuple[float, float, float] = (0.7, 0.2, 0.1),
          seed: int = 0) -> tuple[list[Entry], list[Entry], list[Entry]]:
    """Stratified split: per class, a seeded shuffle cut at the ratio points."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios {ratios} must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E717]))
    by_class: dict[int, list[Entry]] = {}
    for e in entries:
        by_class.setdefault(e.label, []).append(e)
    parts: tuple[list[Entry], ...] = ([], [], [])
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda e: e.id)
        order = rng.permutation(len(group))
        shuffled = [group[i] for i in order]
        n = len(group)
        c1 = int(round(ratios[0] * n))
        c2 = int(round((ratios[0] + ratios[1]) * n))
        parts[0].extend(shuffled[:c1])
        parts[1].extend(shuffled[c1:c2])
        parts[2].extend(shuffled[c2:])
    return tuple(sorted(p, key=lambda e: e.id) for p in parts)


def load_image(path) -> np.ndarray:
    """Grayscale file -> [1,H,W] float64 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr / 255.0)[None]


def load_batch(entries: list[Entry], root) -> np.ndarray:
    root = Path(root)
    return np.stack([load_image(root / e.path) for e in entries])
