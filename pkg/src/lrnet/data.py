"""Dataset tiling, splitting, loading and a synthetic bi-temporal generator.

On-disk layout for both sources and tiled datasets is
``root/{A,B,label}/<id>.png`` (A = T1, B = T2).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from torch.utils.data import Dataset

from .core import read_image_png, read_mask_png, write_image_png, mask_to_png

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SUBDIRS = ("A", "B", "label")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class Record:
    id: str
    path_t1: str
    path_t2: str
    path_label: str
    split: Optional[str] = None


@dataclass
class DatasetManifest:
    records: List[Record]
    tile_size: int
    source: str = ""
    split_seed: Optional[int] = None
    root: str = "."
    errors: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> List[Record]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def save(self, path) -> None:
        data = asdict(self)
        Path(path).write_text(json.dumps(data, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        data["records"] = [Record(**r) for r in data["records"]]
        m = cls(**data)
        if not Path(m.root).is_absolute():
            m.root = str((path.parent / m.root).resolve())
        return m


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


def tile_grid(height: int, width: int, tile: int, pad: str = "ceil") -> Tuple[int, int]:
    """Number of tile rows and columns for an image.

    ``"ceil"`` zero-pads bottom/right to the next multiple of ``tile``;
    ``"floor"`` drops the remainder.
    """
    if tile <= 0:
        raise ValueError("tile size must be positive")
    if pad == "ceil":
        return math.ceil(height / tile), math.ceil(width / tile)
    if pad == "floor":
        return height // tile, width // tile
    raise ValueError(f"unknown pad policy {pad!r}")


def tile_array(arr: np.ndarray, tile: int, pad: str = "ceil"):
    """Yield ``(row, col, tile_array)`` over non-overlapping tiles."""
    rows, cols = tile_grid(arr.shape[0], arr.shape[1], tile, pad)
    if pad == "ceil":
        widths = [(0, rows * tile - arr.shape[0]), (0, cols * tile - arr.shape[1])]
        widths += [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, widths)
    for i in range(rows):
        for j in range(cols):
            yield i, j, arr[i * tile:(i + 1) * tile, j * tile:(j + 1) * tile]


def _read_raw(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path))


def tile_dataset(src_dir, out_dir, tile: int = 256, pad: str = "ceil") -> DatasetManifest:
    """Cut every aligned T1/T2/label triplet of ``src_dir`` into tiles under ``out_dir``.

    Bad triplets (missing member, mismatched sizes, unreadable file) are
    reported in ``manifest.errors`` and skipped.
    """
    src, out = Path(src_dir), Path(out_dir)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    records, errors = [], []
    for a_path in sorted((src / "A").glob("*.png")):
        name = a_path.stem
        paths = [src / sub / a_path.name for sub in SUBDIRS]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            errors.append(f"{name}: missing {', '.join(missing)}")
            continue
        try:
            arrays = [_read_raw(p) for p in paths]
        except OSError as exc:
            errors.append(f"{name}: {exc}")
            continue
        shapes = {a.shape[:2] for a in arrays}
        if len(shapes) != 1:
            errors.append(f"{name}: size mismatch {sorted(shapes)}")
            continue
        tiles = [list(tile_array(a, tile, pad)) for a in arrays]
        for (i, j, t1), (_, _, t2), (_, _, lab) in zip(*tiles):
            tid = f"{name}_r{i:03d}_c{j:03d}"
            rel = [f"{sub}/{tid}.png" for sub in SUBDIRS]
            for arr, r in zip((t1, t2, lab), rel):
                Image.fromarray(np.ascontiguousarray(arr)).save(out / r)
            records.append(Record(tid, *rel))
    for e in errors:
        log.error("tiling: %s", e)
    manifest = DatasetManifest(records, tile, source=str(src), root=str(out), errors=errors)
    return manifest


def untile(tiles: Dict[Tuple[int, int], np.ndarray], height: int, width: int) -> np.ndarray:
    """Reassemble ``{(row, col): tile}`` and crop the padding away."""
    rows = 1 + max(i for i, _ in tiles)
    cols = 1 + max(j for _, j in tiles)
    grid = [np.concatenate([tiles[i, j] for j in range(cols)], axis=1) for i in range(rows)]
    return np.concatenate(grid, axis=0)[:height, :width]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_sizes(n: int, counts: Optional[Sequence[int]] = None, ratios=None) -> Tuple[int, int, int]:
    if counts is not None:
        counts = tuple(int(c) for c in counts)
        if len(counts) != 3 or min(counts) < 0 or sum(counts) != n:
            raise ValueError(f"counts {counts} must be three nonnegative ints summing to {n}")
        return counts
    if ratios is None:
        raise ValueError("give either counts or ratios")
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or (r < 0).any() or r.sum() <= 0:
        raise ValueError(f"invalid ratios {ratios}")
    r = r / r.sum()
    train = int(math.floor(n * r[0] + 1e-9))
    val = int(math.floor(n * r[1] + 1e-9))
    return train, val, n - train - val


def split_dataset(manifest: DatasetManifest, counts=None, ratios=None, seed: int = 0) -> DatasetManifest:
    """Seeded shuffle, then contiguous train/val/test assignment.

    Explicit ``counts`` take precedence over ``ratios``; ratios are
    normalised, train and val are floored and test takes the remainder.
    """
    sizes = split_sizes(len(manifest), counts, ratios)
    order = np.random.default_rng(seed).permutation(len(manifest))
    labels = np.empty(len(manifest), dtype=object)
    bounds = np.cumsum((0,) + sizes)
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        labels[order[lo:hi]] = name
    records = [replace(r, split=s) for r, s in zip(manifest.records, labels)]
    return replace(manifest, records=records, split_seed=seed)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_sample(record: Record, root=".") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode one record: two [0, 1] float tiles and a {0, 1} label."""
    base = Path(root)

    def full(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    t1 = read_image_png(full(record.path_t1))
    t2 = read_image_png(full(record.path_t2))
    label = read_mask_png(full(record.path_label))
    if not (t1.shape == t2.shape and t1.shape[:2] == label.shape):
        raise ValueError(
            f"{record.id}: dimension mismatch {t1.shape}, {t2.shape}, {label.shape}"
        )
    return t1, t2, label


def normalize(tile: np.ndarray, mode: str = "unit", mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """``"unit"`` leaves [0, 1] input unchanged; ``"standardized"`` applies per-channel mean/std."""
    if mode == "unit":
        return tile
    if mode == "standardized":
        return (tile - np.asarray(mean, dtype=tile.dtype)) / np.asarray(std, dtype=tile.dtype)
    raise ValueError(f"unknown normalization mode {mode!r}")


class ChangeDataset(Dataset):
    """Torch dataset over one split of a manifest; yields ``(t1, t2, label)`` tensors."""

    def __init__(self, manifest: DatasetManifest, split: Optional[str] = None, norm: str = "unit"):
        self.manifest = manifest
        self.records = manifest.records if split is None else manifest.split(split)
        self.norm = norm

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx):
        t1, t2, label = load_sample(self.records[idx], self.manifest.root)
        t1 = torch.from_numpy(normalize(t1, self.norm)).permute(2, 0, 1).float()
        t2 = torch.from_numpy(normalize(t2, self.norm)).permute(2, 0, 1).float()
        return t1, t2, torch.from_numpy(label)[None].float()


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    tile_size: int = 64
    n_pairs: int = 8
    shapes_min: int = 1
    shapes_max: int = 3
    size_min: int = 8
    size_max: int = 20
    jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.tile_size % 16:
            raise ValueError("tile_size must be divisible by 16")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ValueError("invalid shapes range")
        if not 1 <= self.size_min <= self.size_max <= self.tile_size:
            raise ValueError("invalid shape size range")
        # changed pixels differ by >= 0.25 - jitter, which must exceed jitter
        if not 0 <= self.jitter < 0.125:
            raise ValueError("jitter must lie in [0, 0.125)")


@dataclass
class Shape:
    kind: str  # "rect" | "ellipse"
    top: int
    left: int
    height: int
    width: int
    added: bool = True  # present in T2 only; False = present in T1 only

    def footprint(self, size: int) -> np.ndarray:
        m = np.zeros((size, size), dtype=bool)
        if self.kind == "rect":
            m[self.top:self.top + self.height, self.left:self.left + self.width] = True
            return m
        yy, xx = np.mgrid[:size, :size]
        cy = self.top + (self.height - 1) / 2
        cx = self.left + (self.width - 1) / 2
        ry, rx = self.height / 2, self.width / 2
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random texture with values in [0.3, 0.7]."""
    noise = rng.random((size, size, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(3, 3, 0))
    lo, hi = smooth.min(), smooth.max()
    smooth = (smooth - lo) / (hi - lo + 1e-12)
    return 0.3 + 0.4 * smooth


def render_pair(background, shapes: Sequence[Shape], jitter: float, rng: np.random.Generator):
    """Paint shapes into a T1/T2 pair; returns ``(t1, t2, label)``.

    Added shapes are dark in T2, removed shapes are bright in T1, so every
    changed pixel differs by at least 0.25 before jitter. T2 then receives a
    per-channel offset in ``[-jitter, jitter]``.
    """
    size = background.shape[0]
    t1 = background.copy()
    t2 = background.copy()
    label = np.zeros((size, size), dtype=np.uint8)
    for s in shapes:
        fp = s.footprint(size)
        if s.added:
            t2[fp] = rng.uniform(0.0, 0.05, size=3)
        else:
            t1[fp] = rng.uniform(0.95, 1.0, size=3)
        label[fp] = 1
    offset = rng.uniform(-jitter, jitter, size=3) if jitter > 0 else np.zeros(3)
    t2 = np.clip(t2 + offset, 0.0, 1.0)
    return t1, t2, label


def random_shapes(rng: np.random.Generator, cfg: SynthConfig) -> List[Shape]:
    k = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    shapes = []
    for _ in range(k):
        h = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        w = int(rng.integers(cfg.size_min, cfg.size_max + 1))
        shapes.append(
            Shape(
                kind=("rect", "ellipse")[int(rng.integers(2))],
                top=int(rng.integers(0, cfg.tile_size - h + 1)),
                left=int(rng.integers(0, cfg.tile_size - w + 1)),
                height=h,
                width=w,
                added=bool(rng.integers(2)),
            )
        )
    return shapes


def synth_pairs(cfg: SynthConfig):
    """Yield ``(t1, t2, label)`` arrays, deterministic under ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.n_pairs):
        bg = textured_background(rng, cfg.tile_size)
        yield render_pair(bg, random_shapes(rng, cfg), cfg.jitter, rng)


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write a synthetic dataset under ``out_dir`` and return its manifest."""
    out = Path(out_dir)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for n, (t1, t2, label) in enumerate(synth_pairs(cfg)):
        tid = f"synth_{n:05d}"
        rel = [f"{sub}/{tid}.png" for sub in SUBDIRS]
        write_image_png(t1, out / rel[0])
        write_image_png(t2, out / rel[1])
        mask_to_png(label, out / rel[2])
        records.append(Record(tid, *rel))
    return DatasetManifest(records, cfg.tile_size, source=f"synthetic:seed={cfg.seed}", root=str(out))


def dataset_digest(root) -> str:
    """SHA-256 over every PNG under ``root`` (sorted by relative path)."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
