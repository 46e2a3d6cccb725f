"""Self-correlation kernels of the self deep matching network.

Tensors follow the torch ``(batch, channels, height, width)`` layout. A
"descriptor" is the channel fiber at one spatial location.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def atrous_conv2d(x, w, rate=1, padding="same"):
    """Dilated 2-D correlation of a single-channel signal.

    ``out[i, j] = sum_{k1, k2} w[k1, k2] * x[i + rate*k1, j + rate*k2]`` with
    ``k1, k2`` running over ``[-K//2, K//2]``. ``padding="same"`` zero-pads so
    the output keeps the input size; ``"valid"`` keeps only positions whose
    taps all fall inside ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError("atrous_conv2d expects 2-D input and filter")
    if not isinstance(rate, (int, np.integer)) or rate < 1:
        raise ValueError(f"atrous rate must be a positive integer, got {rate!r}")
    kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"filter size must be odd, got {w.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    rh, rw = rate * (kh // 2), rate * (kw // 2)
    if padding == "same":
        xp = np.pad(x, ((rh, rh), (rw, rw)))
    elif padding == "valid":
        xp = x
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out_h = xp.shape[0] - 2 * rh
    out_w = xp.shape[1] - 2 * rw
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"dilated filter extent {(2 * rh + 1, 2 * rw + 1)} exceeds padded input {xp.shape}"
        )
    out = np.zeros((out_h, out_w))
    for a in range(kh):
        for b in range(kw):
            oy, ox = a * rate, b * rate
            out += w[a, b] * xp[oy:oy + out_h, ox:ox + out_w]
    return out


def l2_normalize_descriptors(feats, eps=0.0):
    """Scale every descriptor to unit L2 norm; all-zero descriptors stay zero."""
    norm = torch.linalg.vector_norm(feats, dim=1, keepdim=True)
    nonzero = norm > eps
    safe = torch.where(nonzero, norm, torch.ones_like(norm))
    return torch.where(nonzero, feats / safe, torch.zeros_like(feats))


class SpatialAttention(nn.Module):
    """Softmax attention over all positions, added back through a scale
    ``lam`` that starts at zero (so the block begins as the identity)."""

    def __init__(self, channels):
        super().__init__()
        if channels % 8 != 0:
            raise ValueError(f"attention channels must be divisible by 8, got {channels}")
        self.channels = channels
        self.query = nn.Conv2d(channels, channels // 8, kernel_size=1)
        self.key = nn.Conv2d(channels, channels // 8, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.lam = nn.Parameter(torch.zeros(1))

    def attention_weights(self, x):
        """Row-stochastic ``(B, N, N)`` matrix; row ``m`` attends over ``n``."""
        b, c, h, w = x.shape
        q = self.query(x).reshape(b, -1, h * w)
        k = self.key(x).reshape(b, -1, h * w)
        logits = torch.bmm(q.transpose(1, 2), k)
        return torch.softmax(logits, dim=-1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"expected (B, {self.channels}, H, W) input, got {tuple(x.shape)}"
            )
        b, c, h, w = x.shape
        beta = self.attention_weights(x)
        v = self.value(x).reshape(b, c, h * w)
        out = torch.bmm(v, beta.transpose(1, 2)).reshape(b, c, h, w)
        return self.lam * out + x


def self_correlation(feats):
    """Scalar products between every pair of descriptors.

    Returns ``(B, H*W, H, W)``: channel ``n`` at location ``m`` holds
    ``<feats[m], feats[n]>`` with locations flattened row-major.
    """
    b, c, h, w = feats.shape
    flat = feats.reshape(b, c, h * w)
    gram = torch.bmm(flat.transpose(1, 2), flat)
    return gram.reshape(b, h, w, h * w).permute(0, 3, 1, 2)


def top_t_pool(corr, T):
    """Keep the ``T`` largest correlation channels per location, descending."""
    n = corr.shape[1]
    if T < 1 or T > n:
        raise ValueError(f"T={T} must lie in [1, {n}] (number of comparison locations)")
    # partial selection on the contiguous channels-last view; a full sort is O(N log N) per location
    top, _ = torch.topk(corr.permute(0, 2, 3, 1), T, dim=-1, largest=True, sorted=True)
    return top.permute(0, 3, 1, 2)


def zero_out_normalize(corr):
    return l2_normalize_descriptors(F.relu(corr))


def skip_match_concat(*levels):
    shapes = {tuple(t.shape) for t in levels}
    if len(shapes) != 1:
        raise ValueError(f"correlation tensors must share a shape, got {sorted(shapes)}")
    return torch.cat(levels, dim=1)


class CorrelationBlock(nn.Module):
    """normalize -> attention -> self-correlation -> top-T -> zero-out/normalize."""

    def __init__(self, channels, T, attention=True):
        super().__init__()
        self.T = T
        self.attention = SpatialAttention(channels) if attention else None

    def forward(self, feats):
        x = l2_normalize_descriptors(feats)
        if self.attention is not None:
            x = self.attention(x)
        corr = self_correlation(x)
        return zero_out_normalize(top_t_pool(corr, self.T))
