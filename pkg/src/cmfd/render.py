"""Overlay rendering of a detection: score heat map, boxes, match lines, mask contour."""
from __future__ import annotations

import cv2
import numpy as np

from .base import check_image, check_mask, check_score_map


def render_overlay(image, scores=None, boxes=(), pairs=(), mask=None, heat_alpha=0.45):
    """Return an RGB uint8 image the same size as ``image``.

    ``pairs`` holds ``[a, b, [x1, y1], [x2, y2], score]`` rows as stored in a
    match set. Output depends only on the inputs.
    """
    img = check_image(image).copy()
    h, w = img.shape[:2]
    if scores is not None:
        s = check_score_map(scores, (h, w))
        heat = cv2.applyColorMap(np.rint(s * 255).astype(np.uint8), cv2.COLORMAP_JET)
        heat = cv2.cvtColor(heat, cv2.COLOR_BGR2RGB)
        img = cv2.addWeighted(img, 1.0 - heat_alpha, heat, heat_alpha, 0.0)
    for b in boxes:
        x1, y1, x2, y2 = (int(v) for v in b)
        cv2.rectangle(img, (x1, y1), (x2 - 1, y2 - 1), (255, 255, 0), 1)
    for row in pairs:
        p, q = row[2], row[3]
        cv2.line(img, (int(p[0]), int(p[1])), (int(q[0]), int(q[1])), (0, 255, 0), 1)
        cv2.circle(img, (int(p[0]), int(p[1])), 2, (0, 255, 0), -1)
        cv2.circle(img, (int(q[0]), int(q[1])), 2, (0, 255, 0), -1)
    if mask is not None:
        m = check_mask(mask, (h, w)).astype(np.uint8)
        contours, _ = cv2.findContours(m, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        cv2.drawContours(img, contours, -1, (255, 0, 0), 1)
    return img
