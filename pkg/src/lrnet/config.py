"""Training configuration and its flat ``key = value`` file format.

Every field may be overridden from the environment with the ``LRNET_``
prefix, e.g. ``LRNET_EPOCHS=50``. Precedence: defaults < file < environment
< explicit overrides.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

from .losses import LOSS_MODES

ENV_PREFIX = "LRNET_"


@dataclass
class TrainConfig:
    # optimisation (full-scale defaults)
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    optimizer: str = "adam"
    loss_mode: str = "bce+iou"
    # module toggles
    use_lop: bool = True
    use_c2a: bool = True
    use_hca: bool = True
    use_e2a: bool = True
    # architecture
    width: float = 1.0
    T: float = 0.5
    deep_weight: float = 1.0
    final_weight: float = 1.0
    # data
    manifest: str = ""
    train_split: str = "train"
    val_split: str = "val"
    norm: str = "unit"
    augment: bool = False
    backbone: str = ""
    backbone_diff: bool = False
    # run
    seed: int = 0
    threads: int = 0
    checkpoint_dir: str = "checkpoints"
    save_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.width <= 0:
            raise ValueError("lr, epochs, batch_size and width must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.use_hca and not self.use_c2a:
            raise ValueError("use_hca requires use_c2a")
        if not 0 < self.T < 1:
            raise ValueError("T must lie in (0, 1)")
        if self.norm not in ("unit", "standardized"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, kind):
    if kind in (bool, "bool"):
        v = raw.strip().lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


def _field_types(cls=None):
    return {f.name: f.type for f in fields(cls or TrainConfig)}


def parse_config_text(text: str, cls=None) -> dict:
    """Parse flat ``key = value`` lines for the fields of ``cls`` (default TrainConfig)."""
    types = _field_types(cls)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return values


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, kind in _field_types().items():
        key = ENV_PREFIX + name.upper()
        if key in environ:
            out[name] = _coerce(name, environ[key], kind)
    return out


def load_config(path=None, environ=None, **overrides) -> TrainConfig:
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
