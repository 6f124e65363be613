"""Overfit a narrow model on a handful of synthetic pairs, then inspect it.

Takes a few minutes on one CPU core. Pass an output directory as the first
argument to keep the results.
"""

import sys
import tempfile
from pathlib import Path

from lrnet.config import TrainConfig
from lrnet.data import ChangeDataset, SynthConfig, split_dataset, synth_generate
from lrnet.train import evaluate_model, load_model, predict, train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 100

# eight 64x64 pairs: added shapes turn dark in T2, removed ones are bright in T1
manifest = synth_generate(SynthConfig(tile_size=64, n_pairs=8, seed=0), work / "data")
manifest = split_dataset(manifest, counts=(8, 0, 0))

cfg = TrainConfig(width=0.25, lr=1e-4, epochs=epochs, batch_size=4, threads=1,
                  val_split="val", checkpoint_dir=str(work / "ckpt"))


def show(entry):
    if entry["epoch"] % 10 == 9:
        print(f"epoch {entry['epoch'] + 1:3d}  loss {entry['train_loss']:.4f}  "
              f"(output {entry['train_final']:.4f}, deep {entry['train_deep']:.4f})")


result = train(cfg, manifest, progress=show)
print(f"{result.params:,} parameters")

model, _, _ = load_model(result.last)
report = evaluate_model(model, ChangeDataset(manifest, "train"), batch_size=4)
print(f"training-set F1 {report.F1:.2f}%  IOU {report.IOU:.2f}%  edge F1 {report.F1_Edge:.2f}%")

# prediction for one pair with the confusion overlay and the attention maps
rec = manifest.records[0]
paths = predict(result.last, manifest.resolve(rec.path_t1), manifest.resolve(rec.path_t2), work / "pred",
                label_path=manifest.resolve(rec.path_label), debug=True)
for name, path in paths.items():
    print(f"{name:>14}: {path}")
