"""Walk through the small pieces the network is made of, on toy tensors."""

import numpy as np
import torch
import torch.nn.functional as F

from lrnet.alignment import alignment_coefficients, hca_propagate, pixel_cosine_similarity
from lrnet.core import boundary_extract, difference_image
from lrnet.encoder import LOP
from lrnet.losses import bce_loss, combined_loss, iou_loss
from lrnet.metrics import ConfusionCounts, area_metrics

torch.manual_seed(0)

# difference image: absolute per-pixel difference of the two dates
t1 = np.random.default_rng(0).random((4, 4, 3))
t2 = t1.copy()
t2[1:3, 1:3] = 0.0
print("difference image, channel 0:\n", difference_image(t1, t2)[..., 0].round(2))

# learnable pooling starts out as 2x2 average pooling
x = torch.randn(1, 4, 8, 8)
lop = LOP(4)
print("LOP == avg_pool2d at init:", torch.allclose(lop(x), F.avg_pool2d(x, 2), atol=1e-6))

# alignment weights: low similarity keeps T, agreement on change doubles sim,
# agreement on no change gives 1 - sim, disagreement keeps T
sim = torch.tensor([0.3, 0.8, 0.8, 0.9])
chg1 = torch.tensor([True, True, False, True])
chg2 = torch.tensor([True, True, False, False])
print("alpha:", [round(v, 3) for v in alignment_coefficients(sim, chg1, chg2).tolist()])

d1 = torch.randn(1, 8, 4, 4)
print("cosine of a map with itself:", pixel_cosine_similarity(d1, d1).min().item())

# hierarchical propagation: earlier attention maps pooled down to level 3
l1 = torch.rand(1, 1, 16, 16) * 2
l2 = torch.rand(1, 1, 8, 8) * 2
print("level-3 prior shape:", tuple(hca_propagate([l1, l2], 3).shape))

# boundaries are the mask minus its 4-neighbour erosion
square = np.zeros((5, 5), dtype=np.uint8)
square[1:4, 1:4] = 1
print("boundary of a 3x3 square:\n", boundary_extract(square))

# losses on a 2x2 example
gt = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
half = torch.full((2, 2), 0.5)
print(f"bce(0.5) = {bce_loss(half, gt):.4f}  iou(0.5) = {iou_loss(half, gt):.4f}")
terms = combined_loss(half[None, None], gt[None, None])
print(f"area {terms.area:.4f} + edge {terms.edge:.4f} = {terms.total:.4f}")

# metrics from pooled confusion counts
m = area_metrics(ConfusionCounts(tp=9219 * 900, tn=10**8, fp=702_900, fn=921_900))
print({k: round(v, 2) for k, v in m.items() if k != "degenerate"})
