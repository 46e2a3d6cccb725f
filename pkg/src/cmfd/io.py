"""PNG and JSON serialisation of images, score maps, masks and boxes."""
from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .base import check_score_map


def read_image(path):
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, image):
    if not cv2.imwrite(str(path), cv2.cvtColor(np.asarray(image, np.uint8), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write {path}")


def write_score_map(path, scores, metadata=None):
    """16-bit grayscale PNG (``round(score * 65535)``) plus a JSON sidecar."""
    s = check_score_map(scores)
    path = Path(path)
    if not cv2.imwrite(str(path), np.rint(s * 65535.0).astype(np.uint16)):
        raise OSError(f"cannot write {path}")
    meta = {"shape": list(s.shape), "encoding": "uint16 = round(score * 65535)",
            "min": float(s.min()), "max": float(s.max()), **(metadata or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_score_map(path):
    """Read a score map PNG. 16-bit files divide by 65535, 8-bit by 255."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot read score map {path}")
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale


def write_mask(path, mask):
    if not cv2.imwrite(str(path), np.asarray(mask, bool).astype(np.uint8) * 255):
        raise OSError(f"cannot write {path}")


def read_mask(path):
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise OSError(f"cannot read mask {path}")
    return raw > 127


def write_boxes(path, boxes):
    Path(path).write_text(json.dumps([[int(v) for v in b] for b in boxes]))


def read_boxes(path):
    from .proposals import Box

    return [Box(*b) for b in json.loads(Path(path).read_text())]
