"""Spatial cross-entropy training loop."""
from __future__ import annotations

import logging
import math

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from ..base import check_image, check_mask

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def to_tensor(images, imagenet=False, dtype=torch.float32):
    """Stack uint8 ``(H, W, 3)`` images into a ``(B, 3, H, W)`` tensor."""
    arr = np.stack([check_image(im) for im in images]).astype(np.float32) / 255.0
    x = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
    if imagenet:
        mean = torch.tensor(IMAGENET_MEAN, dtype=dtype).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=dtype).view(1, 3, 1, 1)
        x = (x - mean) / std
    return x


def spatial_cross_entropy(logits, target):
    """Mean per-pixel two-class cross-entropy."""
    return F.cross_entropy(logits, target)


def train_backbone(net, dataset, epochs=16, batch_size=6, lr=1.0, resize_range=(256, 512),
                   seed=0, imagenet=False, log_every=0):
    """Fit ``net`` on ``(image, mask)`` pairs with Adadelta.

    Every batch is resized to a square side drawn uniformly from
    ``resize_range`` (rounded down to the network stride). Returns the
    per-step loss trace and the per-step attention scales.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    stride = net.cfg.stride
    lo, hi = resize_range
    sizes = [s for s in range(stride * math.ceil(lo / stride), hi + 1, stride)
             if (s // stride) ** 2 >= net.cfg.T]
    if not sizes:
        raise ValueError(f"resize_range {resize_range} admits no valid input size")

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adadelta(net.parameters(), lr=lr)
    losses, lambdas = [], []
    net.train()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            size = int(rng.choice(sizes))
            batch = [_load_pair(dataset[i], size) for i in idx]
            x = to_tensor([b[0] for b in batch], imagenet=imagenet)
            y = torch.from_numpy(np.stack([b[1] for b in batch]).astype(np.int64))
            loss = spatial_cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                recent = ", ".join(f"{v:.4g}" for v in losses[-5:])
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step} (batch size {len(idx)}, "
                    f"input {size}x{size}, lr {lr}); recent losses: [{recent}]"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            lambdas.append(net.attention_scales())
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, losses[-1])
            step += 1
    net.eval()
    return losses, lambdas


def _load_pair(item, size):
    image, mask = item[0], item[1]
    image = check_image(image)
    mask = check_mask(mask, image.shape[:2]).astype(np.uint8)
    if image.shape[:2] != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
        mask = cv2.resize(mask, (size, size), interpolation=cv2.INTER_NEAREST)
    return image, mask
