"""Pixelwise primitives shared by the encoder, the losses and the metrics.

Arrays follow two conventions: numpy images are ``H x W x C`` (or ``H x W``
for masks), torch tensors are ``N x C x H x W``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

# 4-neighbourhood cross used by the boundary erosion.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (2, 3) or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty H x W [x C] array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def difference_image(a, b):
    """Absolute per-pixel, per-channel difference of two co-registered tiles.

    Works for numpy arrays and torch tensors alike; the result has the type
    of the inputs.
    """
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        return torch.abs(a - b)
    a = _as_float_array(a, "a")
    b = _as_float_array(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.abs(a - b)


def binarize(prob, threshold=0.5):
    """Threshold a probability map; ``prob >= threshold`` is positive."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(prob, torch.Tensor):
        return (prob >= threshold).to(torch.uint8)
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def boundary_extract(mask):
    """One-pixel inner boundary of a binary mask (2-D numpy array).

    A changed pixel is on the boundary when at least one of its in-image
    4-neighbours is unchanged. Pixels beyond the image border do not count
    as unchanged, so a region clipped by the tile edge has no boundary
    along the cut.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary {0, 1}")
    m = m.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=_CROSS, border_value=1)
    return (m & ~eroded).astype(np.uint8)


def boundary_extract_torch(mask: torch.Tensor) -> torch.Tensor:
    """Batched :func:`boundary_extract` for ``N x 1 x H x W`` tensors.

    Same border convention as the numpy version. Not differentiable; the
    output has the dtype of ``mask``.
    """
    m = mask > 0.5
    # pad with ones so out-of-image neighbours never erode
    p = F.pad(m.to(torch.float32), (1, 1, 1, 1), value=1.0) > 0.5
    eroded = (
        m
        & p[..., :-2, 1:-1]
        & p[..., 2:, 1:-1]
        & p[..., 1:-1, :-2]
        & p[..., 1:-1, 2:]
    )
    return (m & ~eroded).to(mask.dtype)


# ---------------------------------------------------------------------------
# 8-bit PNG serialisation
# ---------------------------------------------------------------------------


def mask_to_png(mask, path):
    """Write a binary mask as an 8-bit PNG with values {0, 255}."""
    m = np.asarray(mask).astype(np.uint8)
    Image.fromarray((m > 0).astype(np.uint8) * 255, mode="L").save(Path(path))


def prob_to_png(prob, path, scale=1.0):
    """Write a probability map as 8-bit PNG, ``round(255 * p / scale)``.

    ``scale=2`` is used for attention maps whose values live in [0, 2].
    """
    p = np.clip(np.asarray(prob, dtype=np.float64) / scale, 0.0, 1.0)
    Image.fromarray(np.rint(255.0 * p).astype(np.uint8), mode="L").save(Path(path))


def read_mask_png(path, threshold=128):
    """Read an 8-bit label PNG and binarize it at ``threshold``."""
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= threshold).astype(np.uint8)


def read_image_png(path):
    """Read an RGB image scaled to [0, 1] as float32 ``H x W x 3``."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image_png(image, path):
    """Write a [0, 1] float image (``H x W x 3``) as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="RGB").save(Path(path))
