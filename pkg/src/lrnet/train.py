"""Training, checkpointing, evaluation, inference and the ablation harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader

from .config import TrainConfig
from .core import (
    binarize,
    boundary_extract,
    mask_to_png,
    prob_to_png,
    read_image_png,
    read_mask_png,
)
from .data import ChangeDataset, DatasetManifest, normalize
from .encoder import load_backbone_weights
from .losses import combined_loss
from .metrics import MetricAccumulator, MetricReport
from .model import LRNet, count_parameters
from .refinement import e2a_supervise

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_CHECKPOINT_FIELDS = ("version", "config", "model", "optimizer", "epoch", "rng", "history")


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def build_model(cfg: TrainConfig) -> LRNet:
    model = LRNet(
        width=cfg.width,
        use_lop=cfg.use_lop,
        use_c2a=cfg.use_c2a,
        use_hca=cfg.use_hca,
        use_e2a=cfg.use_e2a,
        T=cfg.T,
    )
    if cfg.backbone:
        report = load_backbone_weights(model.encoder, cfg.backbone, include_diff=cfg.backbone_diff)
        log.info("backbone: loaded %d tensors from %s", len(report["loaded"]), cfg.backbone)
    return model


def compute_loss(model: LRNet, out, label: torch.Tensor, cfg: TrainConfig) -> dict:
    """Weighted sum of the final-output and (if enabled) E2A deep losses."""
    final = combined_loss(out.prob, label, cfg.loss_mode)
    loss = cfg.final_weight * final.total
    terms = {"final": final.total}
    if out.deep_prob is not None:
        deep = e2a_supervise(out.deep_prob, label, cfg.loss_mode)
        loss = loss + cfg.deep_weight * deep.total
        terms["deep"] = deep.total
    terms["loss"] = loss
    return terms


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _rng_state() -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def _set_rng_state(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(path, model, optimizer, cfg, epoch, history, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "rng": _rng_state(),
        "history": list(history),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> dict:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    missing = [k for k in _CHECKPOINT_FIELDS if k not in ckpt]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks fields {missing}")
    if ckpt["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt['version']}")
    return ckpt


def load_model(path_or_ckpt) -> tuple:
    """Return ``(model, config, checkpoint)`` with the model in eval mode."""
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, dict) else read_checkpoint(path_or_ckpt)
    cfg = TrainConfig(**{**ckpt["config"], "backbone": ""})
    model = build_model(cfg)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg, ckpt


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best: Optional[Path]
    last: Path
    history: List[dict] = field(default_factory=list)
    params: int = 0


def _loader(dataset, cfg: TrainConfig, shuffle: bool, generator=None):
    return DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=0,
    )


def train(
    cfg: TrainConfig,
    manifest: Optional[DatasetManifest] = None,
    resume=None,
    progress=None,
) -> TrainResult:
    """Train with Adam at a constant learning rate; no early stopping.

    The checkpoint with the best validation F1 is kept as ``best.pt`` next
    to ``last.pt``. With an empty validation split no best checkpoint is
    written.
    """
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    if manifest is None:
        if not cfg.manifest:
            raise ValueError("no manifest given")
        manifest = DatasetManifest.load(cfg.manifest)
    if cfg.augment:
        log.warning("augment=true has no registered transforms; training without augmentation")

    seed_everything(cfg.seed)
    model = build_model(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history: List[dict] = []
    start = 0
    best_f1 = -1.0
    if resume is not None:
        ckpt = read_checkpoint(resume)
        model.load_state_dict(ckpt["model"])
        optimizer.load_state_dict(ckpt["optimizer"])
        history = list(ckpt["history"])
        start = ckpt["epoch"] + 1
        best_f1 = ckpt["extra"].get("best_f1", -1.0)
        _set_rng_state(ckpt["rng"])

    train_set = ChangeDataset(manifest, cfg.train_split, cfg.norm)
    if len(train_set) == 0:
        raise ValueError(f"split {cfg.train_split!r} is empty")
    val_set = ChangeDataset(manifest, cfg.val_split, cfg.norm)
    gen = torch.Generator().manual_seed(cfg.seed)
    if resume is not None:
        gen.set_state(ckpt["extra"]["loader_rng"])

    out_dir = Path(cfg.checkpoint_dir)
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    log.info("training %d parameters; constant lr %g, no early stopping", count_parameters(model), cfg.lr)

    for epoch in range(start, cfg.epochs):
        model.train()
        sums = {"loss": 0.0, "final": 0.0, "deep": 0.0}
        batches = 0
        for t1, t2, label in _loader(train_set, cfg, True, gen):
            out = model(t1, t2)
            terms = compute_loss(model, out, label, cfg)
            loss = terms["loss"]
            if not torch.isfinite(loss):
                dump = save_checkpoint(out_dir / "diverged.pt", model, optimizer, cfg, epoch, history)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
                    + f"; state dumped to {dump}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for k, v in terms.items():
                sums[k] += float(v.detach())
            batches += 1

        entry = {"epoch": epoch, **{f"train_{k}": v / batches for k, v in sums.items()}}
        if len(val_set):
            report = evaluate_model(model, val_set, cfg.batch_size)
            entry["val_f1"] = report.F1
            entry["val_f1_edge"] = report.F1_Edge
            if report.F1 > best_f1:
                best_f1 = report.F1
                save_checkpoint(best_path, model, optimizer, cfg, epoch, history + [entry],
                                {"best_f1": best_f1, "loader_rng": gen.get_state()})
        history.append(entry)
        if progress is not None:
            progress(entry)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in entry.items() if k != "epoch"})
        if (epoch + 1) % cfg.save_every == 0 or epoch + 1 == cfg.epochs:
            save_checkpoint(last_path, model, optimizer, cfg, epoch, history,
                            {"best_f1": best_f1, "loader_rng": gen.get_state()})

    if start >= cfg.epochs:
        save_checkpoint(last_path, model, optimizer, cfg, cfg.epochs - 1, history,
                        {"best_f1": best_f1, "loader_rng": gen.get_state()})
    return TrainResult(
        best=best_path if best_path.exists() else None,
        last=last_path,
        history=history,
        params=count_parameters(model),
    )


# ---------------------------------------------------------------------------
# Evaluation and inference
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_probs(model: LRNet, t1: torch.Tensor, t2: torch.Tensor) -> torch.Tensor:
    """Probability maps for a batch, padding to a multiple of 16 and cropping back."""
    model.eval()
    h, w = t1.shape[-2:]
    ph, pw = (-h) % 16, (-w) % 16
    if ph or pw:
        t1 = F.pad(t1, (0, pw, 0, ph))
        t2 = F.pad(t2, (0, pw, 0, ph))
    return model(t1, t2).prob[..., :h, :w]


def evaluate_model(model: LRNet, dataset, batch_size: int = 16, threshold: float = 0.5) -> MetricReport:
    acc = MetricAccumulator()
    for t1, t2, label in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        pred = binarize(predict_probs(model, t1, t2), threshold)
        acc.update(pred[:, 0].numpy(), label[:, 0].numpy().astype(np.uint8))
    return acc.report()


def evaluate(ckpt, split: str = "test", manifest: Optional[DatasetManifest] = None,
             out_dir=None, batch_size: Optional[int] = None) -> MetricReport:
    """Pooled-count area and edge metrics of a checkpoint over one split."""
    model, cfg, _ = load_model(ckpt)
    if manifest is None:
        manifest = DatasetManifest.load(cfg.manifest)
    dataset = ChangeDataset(manifest, split, cfg.norm)
    if len(dataset) == 0:
        raise ValueError(f"split {split!r} is empty")
    report = evaluate_model(model, dataset, batch_size or cfg.batch_size)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / f"metrics_{split}.json")
        report.to_csv(out / f"metrics_{split}.csv")
    return report


OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (0, 255, 0),
    "fn": (255, 0, 255),
}


def overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB confusion overlay: TP white, TN black, FP green, FN purple."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    img = np.zeros(pred.shape + (3,), dtype=np.uint8)
    img[pred & gt] = OVERLAY_COLORS["tp"]
    img[pred & ~gt] = OVERLAY_COLORS["fp"]
    img[~pred & gt] = OVERLAY_COLORS["fn"]
    return img


def predict(ckpt, t1_path, t2_path, out_dir, label_path=None, threshold: float = 0.5,
            debug: bool = False) -> dict:
    """Write probability, mask, edge (and overlay) PNGs for one image pair."""
    model, cfg, _ = load_model(ckpt)
    a = read_image_png(t1_path)
    b = read_image_png(t2_path)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    to_t = lambda x: torch.from_numpy(normalize(x, cfg.norm)).permute(2, 0, 1)[None].float()
    t1, t2 = to_t(a), to_t(b)
    prob = predict_probs(model, t1, t2)[0, 0].numpy()
    mask = binarize(prob, threshold)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(t1_path).stem
    paths = {
        "prob": out / f"{stem}_prob.png",
        "mask": out / f"{stem}_mask.png",
        "edge": out / f"{stem}_edge.png",
    }
    prob_to_png(prob, paths["prob"])
    mask_to_png(mask, paths["mask"])
    mask_to_png(boundary_extract(mask), paths["edge"])
    if label_path is not None:
        gt = read_mask_png(label_path)
        paths["overlay"] = out / f"{stem}_overlay.png"
        Image.fromarray(overlay(mask, gt), mode="RGB").save(paths["overlay"])
    if debug:
        paths.update(dump_debug(model, t1, t2, out, stem))
    return paths


@torch.no_grad()
def dump_debug(model: LRNet, t1, t2, out_dir, stem="debug") -> dict:
    """Attention maps (value / 2 as 8-bit), E2A deep map and feature-norm summaries."""
    h, w = t1.shape[-2:]
    t1 = F.pad(t1, (0, (-w) % 16, 0, (-h) % 16))
    t2 = F.pad(t2, (0, (-w) % 16, 0, (-h) % 16))
    res = model(t1, t2)
    out = Path(out_dir)
    paths = {}
    for y, m in enumerate(res.encoder.finals, start=1):
        p = out / f"{stem}_c2am_L{y}.png"
        prob_to_png(m[0, 0].numpy(), p, scale=2.0)
        paths[f"c2am_L{y}"] = p
    if res.deep_prob is not None:
        p = out / f"{stem}_e2a.png"
        prob_to_png(res.deep_prob[0, 0].numpy(), p)
        paths["e2a"] = p
    norms = {
        "encoder": [float(f.norm()) for f in res.encoder.features],
        "decoder": [float(s.norm()) for s in res.decoder_states],
    }
    p = out / f"{stem}_feature_norms.json"
    p.write_text(json.dumps(norms, indent=2))
    paths["feature_norms"] = p
    return paths


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

MODULE_GRID = [
    ("Model base", dict(use_lop=False, use_c2a=False, use_hca=False, use_e2a=False)),
    ("model1", dict(use_lop=True, use_c2a=False, use_hca=False, use_e2a=False)),
    ("model2", dict(use_lop=False, use_c2a=True, use_hca=False, use_e2a=False)),
    ("model3", dict(use_lop=False, use_c2a=True, use_hca=True, use_e2a=False)),
    ("model4", dict(use_lop=False, use_c2a=False, use_hca=False, use_e2a=True)),
    ("model5", dict(use_lop=True, use_c2a=True, use_hca=True, use_e2a=False)),
    ("model6", dict(use_lop=True, use_c2a=False, use_hca=False, use_e2a=True)),
    ("model7", dict(use_lop=False, use_c2a=True, use_hca=True, use_e2a=True)),
    ("LRNet", dict(use_lop=True, use_c2a=True, use_hca=True, use_e2a=True)),
]
LOSS_GRID = [
    ("BCE", dict(loss_mode="bce")),
    ("IOU", dict(loss_mode="iou")),
    ("BCE+IOU", dict(loss_mode="bce+iou")),
]
GRIDS = {"modules": MODULE_GRID, "losses": LOSS_GRID}
ABLATION_COLUMNS = ("OA", "F1", "IOU", "F1_Edge", "IOU_Edge")


def parse_grid(spec: Union[str, Sequence]) -> list:
    """A named grid (``modules``/``losses``), a JSON file path, or a list of ``(name, overrides)``."""
    if isinstance(spec, str):
        if spec in GRIDS:
            return list(GRIDS[spec])
        rows = json.loads(Path(spec).read_text())
        return [(r["name"], {k: v for k, v in r.items() if k != "name"}) for r in rows]
    return list(spec)


def ablate(cfg_base: TrainConfig, grid, manifest: Optional[DatasetManifest] = None,
           out_dir=None, eval_split: Optional[str] = None) -> List[dict]:
    """Train and evaluate every grid row; returns one dict per row.

    Invalid rows (e.g. HCA without C2A) are kept in the output with an
    ``error`` entry instead of metrics.
    """
    rows = []
    out = Path(out_dir) if out_dir is not None else Path(cfg_base.checkpoint_dir) / "ablation"
    eval_split = eval_split or cfg_base.val_split
    if manifest is None:
        manifest = DatasetManifest.load(cfg_base.manifest)
    for name, overrides in parse_grid(grid):
        row = {"name": name, **overrides}
        try:
            cfg = cfg_base.replace(**overrides,
                                   checkpoint_dir=str(out / name.replace(" ", "_").replace("+", "p")))
        except ValueError as exc:
            row["error"] = str(exc)
            rows.append(row)
            log.warning("ablation row %s rejected: %s", name, exc)
            continue
        result = train(cfg, manifest)
        model, _, _ = load_model(result.last)
        report = evaluate_model(model, ChangeDataset(manifest, eval_split, cfg.norm), cfg.batch_size)
        row["params"] = result.params
        row.update({k: getattr(report, k) for k in ABLATION_COLUMNS})
        row["final_train_loss"] = result.history[-1]["train_final"]
        row["history"] = result.history
        rows.append(row)
    if out_dir is not None or cfg_base.checkpoint_dir:
        out.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(rows, out / "ablation.csv")
    return rows


def write_ablation_csv(rows: Iterable[dict], path) -> None:
    cols = ["name", "use_lop", "use_c2a", "use_hca", "use_e2a", "loss_mode", "params",
            *ABLATION_COLUMNS, "final_train_loss", "error"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
