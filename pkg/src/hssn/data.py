"""Manifest handling, masked image loading, triplet formation and fold splits."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from .exceptions import DimensionError, InsufficientDataError, ManifestParseError, ValidationError
from .pnm import read_pnm

CATEGORIES = ("typeA", "typeB")
MANIFEST_FIELDS = ("item_id", "outfit_id", "category", "image_path", "mask_path")


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    outfit_id: str
    category: str
    image_path: str
    mask_path: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_outfits: tuple
    test_outfits: tuple


def complementary(category: str) -> str:
    return "typeB" if category == "typeA" else "typeA"


def validate_records(records: Iterable[ItemRecord]) -> list:
    """Reject duplicate ids and outfits holding two items of one category."""
    records = list(records)
    seen = set()
    per_outfit = defaultdict(set)
    for r in records:
        if r.category not in CATEGORIES:
            raise ValidationError(f"item {r.item_id}: category must be one of {CATEGORIES}, got {r.category!r}")
        if r.item_id in seen:
            raise ValidationError(f"duplicate item_id {r.item_id!r}")
        seen.add(r.item_id)
        if r.category in per_outfit[r.outfit_id]:
            raise ValidationError(f"outfit {r.outfit_id!r} has more than one {r.category} item")
        per_outfit[r.outfit_id].add(r.category)
    return records


def load_manifest(path) -> List[ItemRecord]:
    """Read a JSON-lines manifest, resolving relative paths against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(path, line_no, "expected a JSON object")
            if set(obj) != set(MANIFEST_FIELDS):
                raise ManifestParseError(path, line_no, f"fields must be exactly {list(MANIFEST_FIELDS)}, got {sorted(obj)}")
            if not all(isinstance(obj[k], str) for k in MANIFEST_FIELDS):
                raise ManifestParseError(path, line_no, "every field must be a string")
            for key in ("image_path", "mask_path"):
                p = Path(obj[key])
                if not p.is_absolute():
                    obj[key] = str(base / p)
            records.append(ItemRecord(**obj))
    return validate_records(records)


def write_manifest(path, records: Iterable[ItemRecord]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    return path


def complete_outfits(records: Iterable[ItemRecord]) -> dict:
    """outfit_id -> {category: ItemRecord} for outfits holding both categories."""
    by_outfit = defaultdict(dict)
    for r in records:
        by_outfit[r.outfit_id][r.category] = r
    return {o: items for o, items in sorted(by_outfit.items()) if len(items) == len(CATEGORIES)}


# images ------------------------------------------------------------------------


def resize_nearest(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of the first two axes using integer index maps."""
    h, w = arr.shape[:2]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return arr[rows][:, cols]


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiply a ``[3, H, W]`` image by a ``[1, H, W]`` mask broadcast over channels."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 3 or mask.ndim != 3 or mask.shape[0] != 1 or image.shape[1:] != mask.shape[1:]:
        raise DimensionError(f"apply_mask: image {image.shape} and mask {mask.shape} do not align")
    return (image * mask).astype(image.dtype, copy=False)


def load_item(record: ItemRecord, input_shape=(3, 64, 64)) -> np.ndarray:
    """Decode, resize and mask one item into a float32 ``[3, H, W]`` array in [0, 1]."""
    _, height, width = input_shape
    try:
        rgb = read_pnm(record.image_path)
        mask = read_pnm(record.mask_path)
    except OSError as exc:
        raise ValidationError(f"item {record.item_id}: cannot read {exc.filename}: {exc.strerror}") from exc
    if rgb.ndim != 3 or mask.ndim != 2:
        raise ValidationError(f"item {record.item_id}: expected a P6 image and a P5 mask")
    if rgb.shape[:2] != mask.shape:
        raise DimensionError(f"item {record.item_id}: image {rgb.shape[:2]} and mask {mask.shape} differ")
    rgb = resize_nearest(rgb, height, width)
    mask = resize_nearest(mask, height, width)
    image = rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255)
    binary = (mask.astype(np.float32) / np.float32(255) >= 0.5).astype(np.float32)[None]
    return apply_mask(image, binary)


class ImageCache:
    """Loads each item once; items are addressed by id."""

    def __init__(self, records: Iterable[ItemRecord], input_shape):
        self.records = {r.item_id: r for r in records}
        self.input_shape = tuple(input_shape)
        self._cache = {}

    def __getitem__(self, item_id: str) -> np.ndarray:
        img = self._cache.get(item_id)
        if img is None:
            img = self._cache[item_id] = load_item(self.records[item_id], self.input_shape)
        return img

    def stack(self, item_ids) -> np.ndarray:
        return np.stack([self[i] for i in item_ids])


# triplets and folds --------------------------------------------------------------


def build_triplets(records, outfit_pool, count: int, seed: int) -> List[Triplet]:
    """Draw ``count`` triplets from the complete outfits in ``outfit_pool``.

    Anchors alternate typeA (even index) / typeB (odd index) and walk through
    a seeded permutation of the pool, reshuffled after every pass. The
    positive is the anchor's outfit partner; the negative is the
    positive-category item of an outfit drawn uniformly from the others.
    """
    if count < 1:
        raise ValidationError(f"count must be positive, got {count}")
    pool = set(outfit_pool)
    outfits = {o: items for o, items in complete_outfits(records).items() if o in pool}
    ids = sorted(outfits)
    if len(ids) < 2:
        raise InsufficientDataError(f"need at least 2 complete outfits in the pool, got {len(ids)}")
    rng = np.random.default_rng(seed)
    n = len(ids)
    order = []
    triplets = []
    for idx in range(count):
        if not order:
            order = list(rng.permutation(n))
        a = order.pop()
        j = int(rng.integers(n - 1))
        neg = j + (j >= a)
        anchor_cat = CATEGORIES[idx % 2]
        other = complementary(anchor_cat)
        triplets.append(
            Triplet(
                anchor=outfits[ids[a]][anchor_cat].item_id,
                positive=outfits[ids[a]][other].item_id,
                negative=outfits[ids[neg]][other].item_id,
            )
        )
    return triplets


def kfold_split(outfit_ids, k: int, seed: int) -> List[FoldSplit]:
    """Seeded shuffle of the (sorted) outfit ids, then contiguous partition into k folds."""
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    ids = sorted(set(outfit_ids))
    if len(ids) < k:
        raise InsufficientDataError(f"{len(ids)} outfits cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    parts = np.array_split(np.arange(len(ids)), k)
    folds = []
    for f, part in enumerate(parts):
        test = set(shuffled[i] for i in part)
        folds.append(FoldSplit(f, tuple(o for o in ids if o not in test), tuple(sorted(test))))
    return folds


def fold_items(records, outfits) -> list:
    """Records whose outfit is in ``outfits``, in manifest order."""
    wanted = set(outfits)
    return [r for r in records if r.outfit_id in wanted]


def outfit_ids(records) -> list:
    return sorted({r.outfit_id for r in records})


def find_record(records, item_id: str) -> Optional[ItemRecord]:
    for r in records:
        if r.item_id == item_id:
            return r
    return None
