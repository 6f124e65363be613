"""Run the module-toggle grid (or the loss-mode grid) at desk scale.

usage: python demos/04_ablation_grid.py [modules|losses] [epochs] [outdir]
"""

import sys
import tempfile
from pathlib import Path

from lrnet.config import TrainConfig
from lrnet.data import SynthConfig, split_dataset, synth_generate
from lrnet.train import ablate

grid = sys.argv[1] if len(sys.argv) > 1 else "modules"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 10
work = Path(sys.argv[3]) if len(sys.argv) > 3 else Path(tempfile.mkdtemp())

manifest = synth_generate(SynthConfig(tile_size=64, n_pairs=12, seed=1), work / "data")
manifest = split_dataset(manifest, counts=(8, 2, 2), seed=0)
cfg = TrainConfig(width=0.125, lr=1e-3, epochs=epochs, batch_size=4, threads=1,
                  checkpoint_dir=str(work / "runs"))

rows = ablate(cfg, grid, manifest, out_dir=work / "ablation", eval_split="test")
print(f"{'variant':<12}{'params':>10}{'OA':>8}{'F1':>8}{'IOU':>8}{'F1_E':>8}{'IOU_E':>8}")
for r in rows:
    if "error" in r:
        print(f"{r['name']:<12} rejected: {r['error']}")
        continue
    print(f"{r['name']:<12}{r['params']:>10,}" + "".join(f"{r[k]:>8.2f}" for k in ("OA", "F1", "IOU", "F1_Edge", "IOU_Edge")))
print("csv:", work / "ablation" / "ablation.csv")
