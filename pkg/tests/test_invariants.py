"""Slow training-level invariants at the default learning rate."""

import numpy as np

from lrnet.config import TrainConfig
from lrnet.data import SynthConfig, split_dataset, synth_generate
from lrnet.train import train


def test_overfit_loss_moving_average_non_increasing(tmp_path):
    m = split_dataset(synth_generate(SynthConfig(tile_size=64, n_pairs=8, seed=0), tmp_path / "data"),
                      counts=(8, 0, 0))
    cfg = TrainConfig(width=0.25, batch_size=4, epochs=200, threads=1, seed=0, val_split="val",
                      checkpoint_dir=str(tmp_path / "ckpt"))
    assert cfg.lr == 1e-4
    losses = np.array([h["train_loss"] for h in train(cfg, m).history])
    moving = np.convolve(losses, np.ones(20) / 20, mode="valid")
    rises = np.flatnonzero(np.diff(moving) > 0)
    assert rises.size == 0, f"moving average rose after epochs {(rises + 20).tolist()}"
    assert moving[-1] < 0.25 * moving[0]
