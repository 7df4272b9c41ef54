"""Procedural two-category outfit dataset where compatibility is texture style.

Each outfit belongs to one style family. A family fixes the pattern kind
(stripes, checker, dots, plaid) and its own frequency band; the outfit draws one
concrete frequency, orientation and stroke width inside that band and both
of its items are painted with it. Colours, phase, silhouette and the
background scene are drawn independently per item, so only the texture
links the two halves of an outfit.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .data import ItemRecord, write_manifest
from .pnm import write_pgm, write_ppm

PATTERN_KINDS = ("stripes", "checker", "dots", "plaid")
# cycles per image side, before splitting into per-family bands
FREQ_RANGE = (3.0, 12.0)
ORIENTATIONS = (0.0, 0.5 * math.pi, 0.25 * math.pi, 0.75 * math.pi)


def family_spec(family: int, n_families: int) -> tuple:
    """``(kind, lo, hi)``: pattern kind and frequency band in cycles per image side.

    Kinds cycle through :data:`PATTERN_KINDS`; the frequency range is cut
    into ``n_families`` disjoint bands so every family differs from every
    other in band, and from its neighbours in kind as well.
    """
    kind = PATTERN_KINDS[family % len(PATTERN_KINDS)]
    lo, hi = FREQ_RANGE
    width = (hi - lo) / n_families
    return kind, lo + family * width, lo + (family + 1) * width


def _pattern(kind, size, freq, theta, duty, phase):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    u = xx * math.cos(theta) + yy * math.sin(theta)
    v = -xx * math.sin(theta) + yy * math.cos(theta)
    pu = (u * freq + phase[0]) % 1.0
    pv = (v * freq + phase[1]) % 1.0
    if kind == "stripes":
        return (pu < duty).astype(np.float64)
    if kind == "checker":
        return ((np.floor(u * freq + phase[0]) + np.floor(v * freq + phase[1])) % 2).astype(np.float64)
    if kind == "dots":
        r = np.hypot(pu - 0.5, pv - 0.5)
        return (r < 0.5 * duty).astype(np.float64)
    if kind == "plaid":
        return np.maximum(pu < 0.5 * duty, pv < 0.5 * duty).astype(np.float64)
    raise ValueError(kind)


def _silhouette(category, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cx = 0.5 + rng.uniform(-0.08, 0.08)
    top = rng.uniform(0.08, 0.2)
    bottom = rng.uniform(0.8, 0.92)
    half = rng.uniform(0.25, 0.38)
    inside_rows = (yy >= top) & (yy <= bottom)
    t = (yy - top) / (bottom - top)
    if category == "typeA":
        # shirt-like: torso with sleeves near the top
        sleeves = (yy <= top + 0.3 * (bottom - top)) & (np.abs(xx - cx) <= half + 0.1)
        return inside_rows & ((np.abs(xx - cx) <= half) | sleeves)
    # skirt-like: trapezoid widening downwards
    flare = rng.uniform(0.05, 0.15)
    return inside_rows & (np.abs(xx - cx) <= (half - flare) + 2 * flare * t)


def _colours(rng):
    while True:
        fg, bg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        lum = np.array([0.299, 0.587, 0.114])
        if abs(float(lum @ (fg - bg))) >= 0.3:
            return fg, bg


def _scene(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0, 1, 3)
    tilt = rng.uniform(-0.3, 0.3, (2, 3))
    img = base + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
    img += rng.normal(0, 0.05, (size, size, 3))
    return np.clip(img, 0, 1)


def render_item(category, size, kind, freq, theta, duty, rng):
    """Return ``(rgb uint8 [S, S, 3], mask uint8 [S, S])`` for one item."""
    phase = rng.uniform(0, 1, 2)
    pattern = _pattern(kind, size, freq, theta, duty, phase)
    fg, bg = _colours(rng)
    garment = pattern[..., None] * fg + (1 - pattern[..., None]) * bg
    mask = _silhouette(category, size, rng)
    img = np.where(mask[..., None], garment, _scene(size, rng))
    rgb = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return rgb, mask.astype(np.uint8) * 255


def generate_synthetic(out_dir, n_outfits: int, image_size: int = 64, n_style_families: int = 4, seed: int = 0) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.jsonl`` under ``out_dir``.

    Outfit ids have the form ``f{family}-o{index}`` so the family of every
    outfit can be read back from the manifest.
    """
    if n_outfits < 1:
        raise ValueError("n_outfits must be positive")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if n_style_families < 2:
        raise ValueError("n_style_families must be >= 2")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = len(str(n_outfits - 1))
    records = []
    for idx in range(n_outfits):
        family = int(rng.integers(n_style_families))
        kind, lo, hi = family_spec(family, n_style_families)
        freq = float(rng.uniform(lo, hi))
        theta = ORIENTATIONS[int(rng.integers(len(ORIENTATIONS)))]
        duty = float(rng.uniform(0.35, 0.65))
        outfit = f"f{family}-o{idx:0{width}d}"
        for category, suffix in (("typeA", "A"), ("typeB", "B")):
            item = f"{outfit}-{suffix}"
            rgb, mask = render_item(category, image_size, kind, freq, theta, duty, rng)
            write_ppm(out / "images" / f"{item}.ppm", rgb)
            write_pgm(out / "masks" / f"{item}.pgm", mask)
            records.append(ItemRecord(item, outfit, category, f"images/{item}.ppm", f"masks/{item}.pgm"))
    return write_manifest(out / "manifest.jsonl", records)


def family_of(outfit_id: str) -> int:
    return int(outfit_id.split("-", 1)[0][1:])
