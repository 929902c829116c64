"""Multi-scale square sliding windows and soft region proposal cropping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import torch

log = logging.getLogger(__name__)

MAX_SCALES = 5
OVERLAP_FRACTION = 0.4


@dataclass(frozen=True, order=True)
class CandidateRegion:
    """Window on the feature-map grid; ``scale`` 0 is the full frame."""

    x0: int
    y0: int
    width: int
    height: int
    scale: int = 0

    @property
    def side(self) -> int:
        if self.width != self.height:
            raise ValueError(f"region {self} is not square")
        return self.width

    def fits(self, height: int, width: int) -> bool:
        return (self.x0 >= 0 and self.y0 >= 0 and self.width >= 1 and self.height >= 1
                and self.x0 + self.width <= width and self.y0 + self.height <= height)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)


class OverlapViolation(NamedTuple):
    scale: int
    axis: str
    start: int
    next_start: int
    overlap: int
    bound: float


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _positions(extent: int, side: int, count: int) -> list[int]:
    if count <= 1 or extent <= side:
        return [0]
    span = extent - side
    return [_round_half_up(i * span / (count - 1)) for i in range(count)]


def _max_neighbor_overlap(pos: list[int], side: int) -> int:
    if len(pos) < 2:
        return -side
    return max(side - (b - a) for a, b in zip(pos, pos[1:]))


def scale_side(height: int, width: int, scale: int) -> int:
    return max(1, (2 * min(height, width)) // (scale + 1))


def generate_candidate_regions(height: int, width: int, scales: int) -> list[CandidateRegion]:
    """Square windows for scales ``1..scales`` (or the full frame when 0).

    At scale ``l`` the side is ``floor(2 * min(H, W) / (l + 1))`` and ``l + 1``
    windows are spread evenly along the long axis. The short-axis count is
    proportional to that axis' free length, reduced where needed so that
    neighbouring windows overlap by at most ``0.4 * side + 1`` cells.
    """
    if height < 1 or width < 1:
        raise ValueError(f"map must be at least 1x1, got {height}x{width}")
    if scales < 0 or scales > MAX_SCALES:
        raise ValueError(f"scale count must be in 0..{MAX_SCALES}, got {scales}")
    if scales == 0:
        return [CandidateRegion(0, 0, width, height, 0)]

    wide = width >= height
    long_len, short_len = (width, height) if wide else (height, width)
    regions: list[CandidateRegion] = []
    seen = set()
    for l in range(1, scales + 1):
        s = min(scale_side(height, width, l), short_len)
        n = l + 1
        long_pos = _positions(long_len, s, n)
        if long_len > s:
            m = max(1, _round_half_up((short_len - s) / (long_len - s) * (n - 1)) + 1)
        else:
            m = 1
        short_pos = _positions(short_len, s, m)
        while m > 1 and _max_neighbor_overlap(short_pos, s) > OVERLAP_FRACTION * s + 1:
            m -= 1
            short_pos = _positions(short_len, s, m)
        xs, ys = (long_pos, short_pos) if wide else (short_pos, long_pos)
        for y in ys:
            for x in xs:
                key = (x, y, s)
                if key in seen:
                    continue
                seen.add(key)
                regions.append(CandidateRegion(x, y, s, s, l))
    bad = overlap_violations(regions)
    if bad:
        log.debug("sliding windows for %dx%d, L=%d exceed the overlap bound: %s", height, width, scales, bad)
    return regions


def overlap_violations(regions: Iterable[CandidateRegion]) -> list[OverlapViolation]:
    """Neighbouring same-scale windows whose overlap exceeds ``0.4 * side + 1``."""
    by_scale: dict[int, list[CandidateRegion]] = {}
    for r in regions:
        if r.scale > 0:
            by_scale.setdefault(r.scale, []).append(r)
    out = []
    for l, rs in sorted(by_scale.items()):
        side = rs[0].width
        bound = OVERLAP_FRACTION * side + 1
        for axis, pos in (("x", sorted({r.x0 for r in rs})), ("y", sorted({r.y0 for r in rs}))):
            for a, b in zip(pos, pos[1:]):
                ov = side - (b - a)
                if ov > bound:
                    out.append(OverlapViolation(l, axis, a, b, ov, bound))
    return out


def long_axis_counts(regions: Iterable[CandidateRegion], height: int, width: int) -> dict[int, int]:
    """Number of distinct window positions along the long axis, per scale."""
    counts: dict[int, set] = {}
    for r in regions:
        counts.setdefault(r.scale, set()).add(r.x0 if width >= height else r.y0)
    return {l: len(v) for l, v in sorted(counts.items())}


def crop_soft_region_proposal(m: torch.Tensor, region: CandidateRegion) -> torch.Tensor:
    """Exact crop of a semantic map ``(..., H, W)`` to ``region``."""
    h, w = m.shape[-2:]
    if not region.fits(h, w):
        raise ValueError(f"region {region} lies outside the {h}x{w} map")
    ys, xs = region.slices()
    return m[..., ys, xs]


def write_regions_csv(path, regions: Iterable[CandidateRegion]) -> None:
    """Debug export, one ``scale,x0,y0,side`` row per window.

    The full-frame region (scale 0) may be rectangular; its row carries the
    width in the ``side`` column.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scale", "x0", "y0", "side"])
        for r in regions:
            writer.writerow([r.scale, r.x0, r.y0, r.width])
