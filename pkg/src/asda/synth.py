"""Procedural instance-retrieval dataset.

Each instance is a multi-part object with its own part colours and stripe
textures. A view pastes the object at a random position and scale over a
cluttered background of plain (untextured) distractor blobs. Every view is
a pure function of ``(seed, instance, view)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_IMAGE_SIZE = 24
AREA_RANGE = (0.10, 0.60)
SMALL_AREA = 0.25
SMALL_VIEW_PROB = 0.45
N_HUES = 6


@dataclass(frozen=True)
class Part:
    cx: float
    cy: float
    rx: float
    ry: float
    ellipse: bool
    color: tuple
    freq: float
    angle: float


@dataclass(frozen=True)
class Signature:
    instance: int
    parts: tuple

    def mask_and_colors(self, u: np.ndarray, v: np.ndarray):
        """Object mask and RGB for template coordinates ``u, v`` in [0, 1]."""
        mask = np.zeros(u.shape, dtype=bool)
        rgb = np.zeros(u.shape + (3,))
        for p in self.parts:
            du, dv = (u - p.cx) / p.rx, (v - p.cy) / p.ry
            inside = (du * du + dv * dv <= 1.0) if p.ellipse else ((np.abs(du) <= 1) & (np.abs(dv) <= 1))
            phase = 2 * math.pi * p.freq * (u * math.cos(p.angle) + v * math.sin(p.angle))
            stripe = 0.55 + 0.45 * np.sign(np.sin(phase))
            col = np.asarray(p.color)[None, None, :] * stripe[..., None]
            rgb = np.where(inside[..., None], col, rgb)
            mask |= inside
        return mask, rgb


def make_signature(seed: int, instance: int) -> Signature:
    rng = np.random.default_rng([seed, instance, 0xA5DA])
    n_parts = int(rng.integers(2, 4))
    parts = []
    for j in range(n_parts):
        rx, ry = rng.uniform(0.18, 0.32, size=2)
        cx = rng.uniform(rx, 1 - rx)
        cy = rng.uniform(ry, 1 - ry)
        hue = (int(rng.integers(0, N_HUES)) + rng.uniform(-0.1, 0.1)) / N_HUES
        parts.append(Part(cx, cy, rx, ry, bool(rng.integers(0, 2)), _hsv(hue % 1.0, rng.uniform(0.6, 1.0), 1.0),
                          float(rng.uniform(2.0, 6.0)), float(rng.uniform(0, math.pi))))
    return Signature(instance, tuple(parts))


def _hsv(h: float, s: float, v: float) -> tuple:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _template_fill(sig: Signature, n: int = 96) -> float:
    g = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(g, g)
    mask, _ = sig.mask_and_colors(u, v)
    return float(mask.mean())


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.2, 0.6, size=3)
    grad = rng.uniform(-0.2, 0.2, size=(2, 3))
    img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    for _ in range(int(rng.integers(5, 10))):
        cx, cy = rng.uniform(0, 1, size=2)
        rx, ry = rng.uniform(0.06, 0.25, size=2)
        blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        hue = (int(rng.integers(0, N_HUES)) + rng.uniform(-0.1, 0.1)) / N_HUES
        img[blob] = np.asarray(_hsv(hue % 1.0, rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)))
    img += rng.normal(0, 0.02, size=img.shape)
    return img


def render_view(sig: Signature, seed: int, view: int, size: int, fill: float | None = None):
    """Returns ``(image, object_mask)`` for one view of ``sig``."""
    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"image size {size} is below the minimum {MIN_IMAGE_SIZE} for object rendering")
    rng = np.random.default_rng([seed, sig.instance, view, 0x5EED])
    fill = _template_fill(sig) if fill is None else fill
    lo, hi = AREA_RANGE
    for _ in range(50):
        if rng.uniform() < SMALL_VIEW_PROB:
            target = rng.uniform(lo + 0.01, SMALL_AREA - 0.01)
        else:
            target = rng.uniform(SMALL_AREA, hi - 0.02)
        side = min(size, max(4, int(round(math.sqrt(target * size * size / fill)))))
        angle = rng.uniform(-0.35, 0.35)
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        # inverse-rotate pixel centres into template coordinates
        cx, cy = x0 + side / 2, y0 + side / 2
        dx, dy = xx - cx, yy - cy
        c, s = math.cos(angle), math.sin(angle)
        u = (c * dx + s * dy) / side + 0.5
        v = (-s * dx + c * dy) / side + 0.5
        inside_box = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        mask, rgb = sig.mask_and_colors(np.clip(u, 0, 1), np.clip(v, 0, 1))
        mask &= inside_box
        frac = float(mask.mean())
        if lo <= frac <= hi:
            break
    else:
        raise RuntimeError(f"could not place instance {sig.instance} view {view} within the area range")
    img = _background(rng, size)
    cast = rng.uniform(0.7, 1.2) * rng.uniform(0.8, 1.2, size=3)
    img = np.where(mask[..., None], rgb * cast, img)
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


@dataclass
class SynthDataset:
    images: np.ndarray
    labels: np.ndarray
    views: np.ndarray
    area_fractions: np.ndarray
    masks: np.ndarray
    seed: int
    image_size: int
    signatures: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def instances(self) -> np.ndarray:
        return np.unique(self.labels)


def generate_dataset(seed: int = 0, n_instances: int = 20, views_per_instance: int = 10,
                     image_size: int = 64) -> SynthDataset:
    if n_instances < 2:
        raise ValueError(f"need at least 2 instances, got {n_instances}")
    if views_per_instance < 2:
        raise ValueError(f"need at least 2 views per instance, got {views_per_instance}")
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image size {image_size} is below the minimum {MIN_IMAGE_SIZE} for object rendering")
    images, masks, labels, views, fracs, sigs = [], [], [], [], [], []
    for i in range(n_instances):
        sig = make_signature(seed, i)
        fill = _template_fill(sig)
        sigs.append(sig)
        for v in range(views_per_instance):
            img, mask = render_view(sig, seed, v, image_size, fill)
            images.append(img)
            masks.append(mask)
            labels.append(i)
            views.append(v)
            fracs.append(mask.mean())
    return SynthDataset(np.stack(images), np.asarray(labels), np.asarray(views), np.asarray(fracs),
                        np.stack(masks), seed, image_size, sigs)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    validation: np.ndarray
    queries: np.ndarray
    database: np.ndarray
    held_out_instances: np.ndarray


def split(dataset: SynthDataset, holdout_fraction: float = 0.2, seed: int = 0) -> Split:
    """Instance-disjoint split.

    Held-out instances feed both the validation tuples and the retrieval
    evaluation (one random view per instance is the query, the rest form
    the database).
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {holdout_fraction}")
    inst = dataset.instances
    n_hold = int(round(holdout_fraction * len(inst)))
    if n_hold < 2 or len(inst) - n_hold < 2:
        raise ValueError(f"holdout fraction {holdout_fraction} leaves {n_hold} held-out and "
                         f"{len(inst) - n_hold} training instances; both need >= 2")
    rng = np.random.default_rng([seed, 0x5A17])
    held = np.sort(rng.choice(inst, size=n_hold, replace=False))
    is_held = np.isin(dataset.labels, held)
    idx = np.arange(len(dataset))
    queries = []
    for i in held:
        members = idx[dataset.labels == i]
        queries.append(int(rng.choice(members)))
    queries = np.asarray(queries)
    db = idx[is_held & ~np.isin(idx, queries)]
    return Split(idx[~is_held], idx[is_held], queries, db, held)


def write_ppm(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary PPM (P6) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).astype(np.float64) / maxval


def write_manifest(dataset: SynthDataset, parts: Split | None, out_dir, images: bool = True) -> Path:
    """CSV manifest (``image,instance,split,area_fraction``), optionally with PPM files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    role = np.full(len(dataset), "all", dtype=object)
    if parts is not None:
        role[parts.train] = "train"
        role[parts.database] = "database"
        role[parts.queries] = "query"
    path = out / "manifest.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "instance", "split", "area_fraction"])
        for n in range(len(dataset)):
            name = f"img_{n:05d}.ppm"
            if images:
                write_ppm(out / name, dataset.images[n])
            else:
                name = str(n)
            writer.writerow([name, int(dataset.labels[n]), role[n], f"{dataset.area_fractions[n]:.6f}"])
    return path
