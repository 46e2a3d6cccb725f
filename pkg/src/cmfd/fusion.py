"""Integrated score map: superpixel-projected match scores fused with the
backbone scores inside matched proposals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import check_image, check_same_shape, check_score_map
from .proposals import as_box


@dataclass
class FusionParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = -0.5
    phi: float = 4.0

    def __post_init__(self):
        if self.phi <= 0:
            raise ValueError(f"phi must be positive, got {self.phi}")


def superpixel_segment(image, target_regions=512, method="slic", compactness=10.0):
    """Partition ``image`` into roughly ``target_regions`` superpixels.

    Labels are consecutive integers starting at 0. ``method="seeds"``
    requires OpenCV's contrib ``ximgproc`` module; ``"slic"`` (iterative
    colour clustering from a seed grid) is always available.
    """
    img = check_image(image)
    h, w = img.shape[:2]
    if target_regions < 1:
        raise ValueError("target_regions must be at least 1")
    if target_regions > h * w:
        raise ValueError(f"target_regions={target_regions} exceeds the {h * w} pixels")
    if target_regions == 1:
        return np.zeros((h, w), np.int64)
    if method == "seeds":
        import cv2

        if not hasattr(cv2, "ximgproc"):
            raise RuntimeError("SEEDS needs opencv-contrib (cv2.ximgproc)")
        seeds = cv2.ximgproc.createSuperpixelSEEDS(w, h, 3, target_regions, 4)
        seeds.iterate(cv2.cvtColor(img, cv2.COLOR_RGB2HSV), 10)
        labels = seeds.getLabels()
    elif method in ("slic", "slico"):
        from skimage.segmentation import slic

        labels = slic(img, n_segments=target_regions, compactness=compactness, start_label=0,
                      channel_axis=-1, slic_zero=method == "slico")
    else:
        raise ValueError(f"unknown superpixel method {method!r}")
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(h, w).astype(np.int64)


def project_matches(labels, matches):
    """Spread each matched point's score over its superpixel.

    Superpixels hit by several matched points keep the largest score;
    untouched pixels are 0.
    """
    labels = np.asarray(labels)
    out = np.zeros(labels.shape)
    if len(matches) == 0:
        return out
    xy = np.asarray(matches.xy)
    h, w = labels.shape
    if np.any(xy[:, 0] < 0) or np.any(xy[:, 0] >= w) or np.any(xy[:, 1] < 0) or np.any(xy[:, 1] >= h):
        raise ValueError("matched points fall outside the label map")
    per_label = np.zeros(int(labels.max()) + 1)
    np.maximum.at(per_label, labels[xy[:, 1], xy[:, 0]], np.asarray(matches.scores, dtype=np.float64))
    return per_label[labels]


def proposal_score_mask(scores, boxes):
    """Backbone scores inside the union of ``boxes``, zero elsewhere."""
    s = check_score_map(scores)
    keep = np.zeros(s.shape, bool)
    for b in boxes:
        b = as_box(b)
        if not b.is_valid(s.shape[1], s.shape[0]):
            raise ValueError(f"box {tuple(b)} is outside the {s.shape[1]}x{s.shape[0]} score map")
        keep[b.y1:b.y2, b.x1:b.x2] = True
    return np.where(keep, s, 0.0)


def integrate(s_sp, s_p, params=None):
    """Logistic fusion ``sigmoid(phi * (alpha*s_sp + beta*s_p + gamma))``."""
    params = params if params is not None else FusionParams()
    s_sp = np.asarray(s_sp, dtype=np.float64)
    s_p = np.asarray(s_p, dtype=np.float64)
    check_same_shape(s_sp, s_p, names=("superpixel scores", "proposal scores"))
    z = params.phi * (params.alpha * s_sp + params.beta * s_p + params.gamma)
    return 1.0 / (1.0 + np.exp(-z))
