"""Tile a large scene, then split the tiles into train/val/test."""

import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from lrnet.data import split_dataset, split_sizes, tile_dataset, tile_grid

# counts first: a 1024 x 1024 scene gives 16 tiles of 256; a scene whose
# sides are not multiples of the tile size is zero-padded on the bottom/right
print("1024x1024:", tile_grid(1024, 1024, 256))
print("15354x32507, ceil:", tile_grid(15354, 32507, 256), "floor:", tile_grid(15354, 32507, 256, "floor"))

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
src = work / "scene"
rng = np.random.default_rng(0)
for sub in ("A", "B"):
    (src / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray(rng.integers(0, 256, (300, 700, 3), dtype=np.uint8)).save(src / sub / "scene.png")
(src / "label").mkdir(exist_ok=True)
Image.fromarray((rng.random((300, 700)) > 0.9).astype(np.uint8) * 255).save(src / "label" / "scene.png")

manifest = tile_dataset(src, work / "tiles", tile=256)
print(f"{len(manifest)} tiles:", [r.id for r in manifest.records])

# explicit counts win over ratios; ratios floor train/val and give the rest to test
print("8:1:1 of 7620 ->", split_sizes(7620, ratios=(8, 1, 1)))
manifest = split_dataset(manifest, ratios=(4, 1, 1), seed=0)
for name in ("train", "val", "test"):
    print(name, [r.id for r in manifest.split(name)])
manifest.save(work / "tiles" / "manifest.json")
print("manifest written to", work / "tiles" / "manifest.json")
