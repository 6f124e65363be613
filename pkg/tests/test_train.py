import csv
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from lrnet.config import TrainConfig
from lrnet.data import ChangeDataset, SynthConfig, split_dataset, synth_generate
from lrnet.model import LRNet, count_parameters
from lrnet.train import (
    CheckpointError,
    ablate,
    build_model,
    evaluate,
    evaluate_model,
    load_model,
    overlay,
    parse_grid,
    predict,
    read_checkpoint,
    save_checkpoint,
    train,
)


class DiffOracle(nn.Module):
    """Marks every pixel where T1 and T2 differ; exact on jitter-free synthetic data."""

    def forward(self, t1, t2):
        return SimpleNamespace(prob=((t1 - t2).abs().amax(1, keepdim=True) > 1e-4).float())


class AllZeros(nn.Module):
    def forward(self, t1, t2):
        return SimpleNamespace(prob=torch.zeros_like(t1[:, :1]))


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    m = synth_generate(SynthConfig(tile_size=32, n_pairs=6, size_min=4, size_max=12, jitter=0.0, seed=1), root)
    return split_dataset(m, counts=(4, 1, 1), seed=0)


def tiny_cfg(tmp_path, **kw):
    base = dict(width=0.125, epochs=2, batch_size=2, lr=1e-3, threads=1,
                checkpoint_dir=str(tmp_path / "ckpt"))
    return TrainConfig(**{**base, **kw})


class TestEvaluate:
    def test_oracle_model_is_perfect(self, synth):
        r = evaluate_model(DiffOracle(), ChangeDataset(synth), batch_size=4)
        assert r.F1 == r.IOU == r.OA == 100.0
        assert r.F1_Edge == 100.0
        assert r.aggregation == "pooled-counts"

    def test_all_zeros(self, synth):
        r = evaluate_model(AllZeros(), ChangeDataset(synth), batch_size=4)
        assert r.Rec == 0 and r.counts.tp == 0
        assert r.OA == pytest.approx(100 * r.counts.tn / r.counts.total)
        assert "Pre" in r.degenerate

    def test_pooled_not_averaged(self, synth):
        ds = ChangeDataset(synth)
        whole = evaluate_model(DiffOracle(), ds, batch_size=4)
        parts = [evaluate_model(DiffOracle(), torch.utils.data.Subset(ds, [i]), 1) for i in range(len(ds))]
        assert whole.counts.total == sum(p.counts.total for p in parts)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        model = build_model(cfg)
        opt = torch.optim.Adam(model.parameters())
        path = save_checkpoint(tmp_path / "c.pt", model, opt, cfg, 3, [{"epoch": 3}])
        back, cfg2, ckpt = load_model(path)
        assert cfg2 == cfg and ckpt["epoch"] == 3
        x = torch.rand(1, 3, 32, 32)
        model.eval()
        with torch.no_grad():
            assert torch.equal(model(x, x).prob, back(x, x).prob)

    def test_version_and_fields(self, tmp_path):
        torch.save({"version": 99, "config": {}, "model": {}, "optimizer": None,
                    "epoch": 0, "rng": {}, "history": []}, tmp_path / "v.pt")
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(tmp_path / "v.pt")
        torch.save({"version": 1}, tmp_path / "f.pt")
        with pytest.raises(CheckpointError, match="lacks"):
            read_checkpoint(tmp_path / "f.pt")


class TestTrain:
    def test_history_and_outputs(self, synth, tmp_path):
        seen = []
        res = train(tiny_cfg(tmp_path), synth, progress=seen.append)
        assert [h["epoch"] for h in res.history] == [0, 1] and seen == res.history
        assert {"train_loss", "train_final", "train_deep", "val_f1", "val_f1_edge"} <= set(res.history[0])
        assert res.last.exists() and res.best is not None

    def test_resume_matches_uninterrupted(self, synth, tmp_path):
        full = train(tiny_cfg(tmp_path / "a", epochs=3), synth)
        train(tiny_cfg(tmp_path / "b", epochs=2), synth)
        resumed = train(tiny_cfg(tmp_path / "b", epochs=3), synth, resume=tmp_path / "b" / "ckpt" / "last.pt")
        assert [h["train_loss"] for h in resumed.history] == [h["train_loss"] for h in full.history]

    def test_empty_split(self, synth, tmp_path):
        with pytest.raises(ValueError):
            train(tiny_cfg(tmp_path, train_split="nope"), synth)

    def test_evaluate_checkpoint_writes_reports(self, synth, tmp_path):
        res = train(tiny_cfg(tmp_path, epochs=1), synth)
        report = evaluate(res.last, "test", synth, out_dir=tmp_path / "rep")
        data = json.loads((tmp_path / "rep" / "metrics_test.json").read_text())
        assert data["F1"] == report.F1 and data["aggregation"] == "pooled-counts"
        with open(tmp_path / "rep" / "metrics_test.csv") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["IOU_Edge"]) == pytest.approx(report.IOU_Edge)


class TestPredict:
    def test_overlay_colors(self):
        img = overlay(np.array([[1, 1, 0, 0]]), np.array([[1, 0, 1, 0]]))
        assert img[0].tolist() == [[255, 255, 255], [0, 255, 0], [255, 0, 255], [0, 0, 0]]

    def test_outputs(self, synth, tmp_path):
        res = train(tiny_cfg(tmp_path, epochs=1), synth)
        rec = synth.records[0]
        paths = predict(res.last, synth.resolve(rec.path_t1), synth.resolve(rec.path_t2), tmp_path / "pred",
                        label_path=synth.resolve(rec.path_label), debug=True)
        for key in ("prob", "mask", "edge", "overlay", "c2am_L1", "c2am_L5", "e2a", "feature_norms"):
            assert paths[key].exists(), key
        mask = np.asarray(Image.open(paths["mask"]))
        assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}

    def test_non_multiple_of_16(self, synth, tmp_path):
        res = train(tiny_cfg(tmp_path, epochs=1), synth)
        rng = np.random.default_rng(0)
        for name in ("a", "b"):
            Image.fromarray(rng.integers(0, 256, (40, 24, 3), dtype=np.uint8)).save(tmp_path / f"{name}.png")
        paths = predict(res.last, tmp_path / "a.png", tmp_path / "b.png", tmp_path / "pred")
        assert np.asarray(Image.open(paths["mask"])).shape == (40, 24)


class TestAblation:
    def test_named_grids(self):
        assert len(parse_grid("modules")) == 9 and len(parse_grid("losses")) == 3
        names = [n for n, _ in parse_grid("modules")]
        assert names[0] == "Model base" and names[-1] == "LRNet"
        for _, overrides in parse_grid("modules"):
            TrainConfig(**overrides)  # every named row is a valid config

    def test_duplicate_rows_identical(self, synth, tmp_path):
        rows = ablate(tiny_cfg(tmp_path, epochs=1), [("a", {}), ("b", {})], synth, out_dir=tmp_path / "abl")
        assert {k: rows[0][k] for k in ("F1", "IOU", "F1_Edge")} == {k: rows[1][k] for k in ("F1", "IOU", "F1_Edge")}

    def test_rows_and_rejection(self, synth, tmp_path):
        grid = [
            ("base", dict(use_lop=False, use_c2a=False, use_hca=False, use_e2a=False)),
            ("bad", dict(use_c2a=False, use_hca=True)),
            ("full", {}),
        ]
        rows = ablate(tiny_cfg(tmp_path, epochs=1), grid, synth, out_dir=tmp_path / "abl")
        assert [r["name"] for r in rows] == ["base", "bad", "full"]
        assert "error" in rows[1] and "F1" not in rows[1]
        assert rows[0]["params"] < rows[2]["params"]
        with open(tmp_path / "abl" / "ablation.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 3


class TestToggles:
    def test_e2a_off_has_no_head(self):
        on = LRNet(width=0.125)
        off = LRNet(width=0.125, use_e2a=False)
        assert count_parameters(on) - count_parameters(off) == 64 + 1
        x = torch.rand(1, 3, 32, 32)
        assert off(x, x).deep_prob is None

    def test_c2a_off_has_no_attention(self):
        off = LRNet(width=0.125, use_c2a=False, use_hca=False)
        assert off.encoder.c2a is None

    def test_parameter_count_golden(self):
        assert count_parameters(LRNet()) == 53_282_156
        assert count_parameters(LRNet(use_lop=False, use_c2a=False, use_hca=False, use_e2a=False)) == 42_281_549
