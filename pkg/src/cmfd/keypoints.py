"""Keypoint extraction and matching over selected proposals.

The classical stack (Harris corners, gradient-histogram descriptors and a
symmetric mutual-nearest-neighbour matcher) runs without any downloaded
weights. Pretrained SuperPoint/SuperGlue models can be plugged in by name.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import cv2
import numpy as np

from .base import PluginUnavailable, check_image
from .proposals import Box, as_box


@dataclass
class KeypointSet:
    """Keypoints in full-image coordinates with unit-norm descriptors."""

    xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 256)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.xy)

    @property
    def dim(self):
        return self.descriptors.shape[1]

    def to_dict(self):
        return {"xy": self.xy.tolist(), "descriptors": self.descriptors.tolist(),
                "scores": self.scores.tolist()}

    @classmethod
    def from_dict(cls, d):
        desc = np.asarray(d["descriptors"], dtype=np.float64)
        return cls(np.asarray(d["xy"], dtype=np.int64).reshape(-1, 2),
                   desc.reshape(len(d["xy"]), -1) if len(d["xy"]) else np.zeros((0, 256)),
                   np.asarray(d["scores"], dtype=np.float64))


@dataclass
class Correspondences:
    """Index pairs into two keypoint sets, with confidences in ``[0, 1]``."""

    idx1: np.ndarray
    idx2: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.idx1)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))


@dataclass
class MatchSet:
    """Matched points from all proposals: both endpoints of every
    correspondence appear as an entry ``(x, y, score)``."""

    xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.xy)

    def to_json(self):
        return json.dumps({"xy": self.xy.tolist(), "scores": self.scores.tolist(),
                           "pairs": self.pairs})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.asarray(d["xy"], dtype=np.int64).reshape(-1, 2),
                   np.asarray(d["scores"], dtype=np.float64), d.get("pairs", []))


# -- classical extractor -----------------------------------------------------

class HarrisExtractor:
    """Harris corners with 256-d gradient-orientation histogram descriptors.

    The descriptor splits a ``patch`` x ``patch`` window into 4x4 cells and
    bins gradient magnitude into 16 orientations per cell. Keypoints whose
    descriptor vanishes (flat neighbourhood) are dropped.
    """

    def __init__(self, max_keypoints=256, quality=0.01, min_response=1e-6, block_size=3,
                 ksize=3, k=0.04, patch=16, nms_radius=2, pad=8, min_size=8):
        self.max_keypoints = max_keypoints
        self.quality = quality
        self.min_response = min_response
        self.block_size = block_size
        self.ksize = ksize
        self.k = k
        self.patch = patch
        self.nms_radius = nms_radius
        self.pad = pad
        self.min_size = min_size

    dim = 256

    def __call__(self, image, box):
        img = check_image(image)
        H, W = img.shape[:2]
        b = as_box(box)
        if not b.is_valid(W, H):
            raise ValueError(f"box {tuple(b)} is not valid inside a {W}x{H} image")
        if min(b.x2 - b.x1, b.y2 - b.y1) < self.min_size:
            return KeypointSet()
        cx1, cy1 = max(0, b.x1 - self.pad), max(0, b.y1 - self.pad)
        cx2, cy2 = min(W, b.x2 + self.pad), min(H, b.y2 + self.pad)
        gray = cv2.cvtColor(img[cy1:cy2, cx1:cx2], cv2.COLOR_RGB2GRAY).astype(np.float32) / 255.0
        resp = cv2.cornerHarris(gray, self.block_size, self.ksize, self.k)
        size = 2 * self.nms_radius + 1
        peaks = resp == cv2.dilate(resp, np.ones((size, size), np.uint8))
        thresh = max(self.min_response, self.quality * float(resp.max(initial=0.0)))
        peaks &= resp > thresh
        ys, xs = np.nonzero(peaks)
        gx_full, gy_full = xs + cx1, ys + cy1
        inside = (gx_full >= b.x1) & (gx_full < b.x2) & (gy_full >= b.y1) & (gy_full < b.y2)
        ys, xs = ys[inside], xs[inside]
        r = resp[ys, xs]
        order = np.lexsort((xs, ys, -r))[: self.max_keypoints]
        ys, xs, r = ys[order], xs[order], r[order]
        desc, ok = self._describe(gray, xs, ys)
        xy = np.stack([xs[ok] + cx1, ys[ok] + cy1], axis=1).astype(np.int64) if ok.any() \
            else np.zeros((0, 2), np.int64)
        return KeypointSet(xy, desc[ok], r[ok].astype(np.float64))

    def _describe(self, gray, xs, ys):
        n = len(xs)
        half = self.patch // 2
        padded = cv2.copyMakeBorder(gray, half + 1, half + 1, half + 1, half + 1, cv2.BORDER_REFLECT)
        gx = cv2.Sobel(padded, cv2.CV_64F, 1, 0, ksize=3)
        gy = cv2.Sobel(padded, cv2.CV_64F, 0, 1, ksize=3)
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        nbins = 16
        bins = np.minimum((ang / (2 * np.pi) * nbins).astype(np.int64), nbins - 1)
        yy, xx = np.mgrid[-half:half, -half:half] + 0.5
        weight = np.exp(-(xx ** 2 + yy ** 2) / (2 * (0.5 * self.patch) ** 2))
        cell = (((yy + half) // (self.patch // 4)) * 4 + (xx + half) // (self.patch // 4)).astype(np.int64)
        desc = np.zeros((n, 16 * nbins))
        for i in range(n):
            y0 = ys[i] + 1
            x0 = xs[i] + 1
            m = mag[y0:y0 + self.patch, x0:x0 + self.patch] * weight
            bb = bins[y0:y0 + self.patch, x0:x0 + self.patch]
            np.add.at(desc[i], (cell * nbins + bb).ravel(), m.ravel())
        norms = np.linalg.norm(desc, axis=1)
        ok = norms > 1e-8
        desc[ok] /= norms[ok, None]
        return desc, ok


# -- classical matcher -------------------------------------------------------

class MutualNNMatcher:
    """Symmetric mutual nearest neighbours with Lowe's ratio test.

    A pair is accepted when each point is the other's nearest neighbour, the
    worse of the two nearest/second-nearest distance ratios is below
    ``ratio`` and the descriptor distance is below ``max_distance``. The
    confidence is ``1 - ratio``. With a single candidate the second distance
    is taken as 2, the largest distance between unit vectors.
    """

    def __init__(self, ratio=0.75, max_distance=1.0):
        self.ratio = ratio
        self.max_distance = max_distance

    def __call__(self, k1, k2, min_separation=None):
        if len(k1) == 0 or len(k2) == 0:
            return Correspondences.empty()
        if k1.dim != k2.dim:
            raise ValueError(f"descriptor dimensions differ: {k1.dim} vs {k2.dim}")
        d = np.sqrt(np.maximum(2.0 - 2.0 * k1.descriptors @ k2.descriptors.T, 0.0))
        if min_separation is not None:
            sep = np.linalg.norm(k1.xy[:, None, :].astype(float) - k2.xy[None, :, :], axis=2)
            d = np.where(sep < min_separation, np.inf, d)
        nn12 = np.argmin(d, axis=1)
        nn21 = np.argmin(d, axis=0)
        r12 = _ratios(d)
        r21 = _ratios(d.T)
        idx1, idx2, conf = [], [], []
        for i, j in enumerate(nn12):
            if nn21[j] != i or not np.isfinite(d[i, j]) or d[i, j] >= self.max_distance:
                continue
            r = max(r12[i], r21[j])
            if r < self.ratio:
                idx1.append(i)
                idx2.append(int(j))
                conf.append(min(1.0, max(0.0, 1.0 - r)))
        return Correspondences(np.array(idx1, np.int64), np.array(idx2, np.int64), np.array(conf))


def _ratios(d):
    """Nearest / second-nearest distance ratio per row."""
    if d.shape[1] >= 2:
        part = np.partition(d, 1, axis=1)
        first, second = part[:, 0], part[:, 1]
    else:
        first, second = d[:, 0], np.full(d.shape[0], 2.0)
    second = np.where(np.isfinite(second), second, 2.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(second > 0, first / second, 1.0)
    return np.where(np.isfinite(first), r, np.inf)


# -- plug-in registry --------------------------------------------------------

EXTRACTORS = {"classical": HarrisExtractor}
MATCHERS = {"classical": MutualNNMatcher}


def register_extractor(name, factory):
    EXTRACTORS[name] = factory


def register_matcher(name, factory):
    MATCHERS[name] = factory


def get_extractor(name="classical", **kwargs):
    if name not in EXTRACTORS:
        raise ValueError(f"unknown keypoint extractor {name!r}; known: {sorted(EXTRACTORS)}")
    return EXTRACTORS[name](**kwargs)


def get_matcher(name="classical", **kwargs):
    if name not in MATCHERS:
        raise ValueError(f"unknown matcher {name!r}; known: {sorted(MATCHERS)}")
    return MATCHERS[name](**kwargs)


def _import_pretrained(module, cls_name):
    try:
        mod = __import__(module, fromlist=[cls_name])
        return getattr(mod, cls_name)
    except (ImportError, AttributeError) as exc:
        raise PluginUnavailable(
            f"{cls_name} is not importable ({exc}); put the pretrained reference "
            f"implementation on PYTHONPATH or use the 'classical' plug-in"
        ) from exc


class SuperPointExtractor:
    """Adapter for a pretrained SuperPoint network exposing ``models.superpoint``."""

    dim = 256

    def __init__(self, config=None, device="cpu"):
        import torch

        net_cls = _import_pretrained("models.superpoint", "SuperPoint")
        self.torch = torch
        self.device = device
        self.net = net_cls(config or {}).eval().to(device)

    def __call__(self, image, box):
        b = as_box(box)
        img = check_image(image)
        gray = cv2.cvtColor(img[b.y1:b.y2, b.x1:b.x2], cv2.COLOR_RGB2GRAY).astype(np.float32) / 255.0
        with self.torch.no_grad():
            out = self.net({"image": self.torch.from_numpy(gray)[None, None].to(self.device)})
        kp = out["keypoints"][0].cpu().numpy()
        if len(kp) == 0:
            return KeypointSet()
        xy = np.rint(kp).astype(np.int64) + [b.x1, b.y1]
        desc = out["descriptors"][0].cpu().numpy().T.astype(np.float64)
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        return KeypointSet(xy, desc, out["scores"][0].cpu().numpy().astype(np.float64))


class SuperGlueMatcher:
    """Adapter for a pretrained SuperGlue network exposing ``models.superglue``."""

    def __init__(self, config=None, device="cpu"):
        import torch

        net_cls = _import_pretrained("models.superglue", "SuperGlue")
        self.torch = torch
        self.device = device
        self.net = net_cls(config or {"weights": "indoor"}).eval().to(device)

    def __call__(self, k1, k2, min_separation=None):
        if len(k1) == 0 or len(k2) == 0:
            return Correspondences.empty()
        t = self.torch
        shape = (1, 1, int(max(k1.xy[:, 1].max(), k2.xy[:, 1].max())) + 1,
                 int(max(k1.xy[:, 0].max(), k2.xy[:, 0].max())) + 1)
        data = {
            "keypoints0": t.from_numpy(k1.xy.astype(np.float32))[None],
            "keypoints1": t.from_numpy(k2.xy.astype(np.float32))[None],
            "descriptors0": t.from_numpy(k1.descriptors.T.astype(np.float32))[None],
            "descriptors1": t.from_numpy(k2.descriptors.T.astype(np.float32))[None],
            "scores0": t.from_numpy(k1.scores.astype(np.float32))[None],
            "scores1": t.from_numpy(k2.scores.astype(np.float32))[None],
            "image0": t.zeros(shape), "image1": t.zeros(shape),
        }
        with t.no_grad():
            out = self.net({k: v.to(self.device) for k, v in data.items()})
        m = out["matches0"][0].cpu().numpy()
        s = out["matching_scores0"][0].cpu().numpy()
        i = np.nonzero(m > -1)[0]
        j = m[i]
        if min_separation is not None:
            far = np.linalg.norm(k1.xy[i] - k2.xy[j], axis=1) >= min_separation
            i, j = i[far], j[far]
        return Correspondences(i.astype(np.int64), j.astype(np.int64), np.clip(s[i], 0, 1).astype(np.float64))


register_extractor("superpoint", SuperPointExtractor)
register_matcher("superglue", SuperGlueMatcher)


# -- proposal matching -------------------------------------------------------

def extract_keypoints(image, box, extractor=None):
    extractor = extractor if extractor is not None else HarrisExtractor()
    return extractor(image, box)


def match_pair(k1, k2, matcher=None):
    matcher = matcher if matcher is not None else MutualNNMatcher()
    return matcher(k1, k2)


@dataclass
class ProposalMatches:
    matches: MatchSet
    matched: list
    keypoints: list


def match_all_pairs(image, proposals, extractor=None, matcher=None, self_match=True,
                    min_separation_fraction=0.1):
    """Match keypoints across every unordered pair of proposals.

    With ``self_match`` each proposal is also matched against itself,
    ignoring correspondences closer than ``min_separation_fraction`` of the
    proposal diagonal, since one merged proposal can hold both the source
    and the pasted copy. Returns the aggregated :class:`MatchSet`, the
    proposals containing at least one matched point, and the keypoints.
    """
    extractor = extractor if extractor is not None else HarrisExtractor()
    matcher = matcher if matcher is not None else MutualNNMatcher()
    boxes = [as_box(p) for p in proposals]
    kps = [extractor(image, b) for b in boxes]
    xy, sc, pairs = [], [], []
    hit = [False] * len(boxes)

    def collect(a, b, corr):
        for i, j, s in zip(corr.idx1, corr.idx2, corr.scores):
            xy.append(kps[a].xy[i])
            xy.append(kps[b].xy[j])
            sc.extend([float(s), float(s)])
            pairs.append([a, b, kps[a].xy[i].tolist(), kps[b].xy[j].tolist(), float(s)])
        if len(corr):
            hit[a] = hit[b] = True

    for a, b in combinations(range(len(boxes)), 2):
        collect(a, b, matcher(kps[a], kps[b]))
    if self_match:
        for a, box in enumerate(boxes):
            floor = min_separation_fraction * float(np.hypot(box.x2 - box.x1, box.y2 - box.y1))
            corr = matcher(kps[a], kps[a], min_separation=floor)
            keep = corr.idx1 < corr.idx2
            corr = Correspondences(corr.idx1[keep], corr.idx2[keep], corr.scores[keep])
            collect(a, a, corr)
    ms = MatchSet(np.array(xy, np.int64).reshape(-1, 2), np.array(sc, np.float64), pairs)
    return ProposalMatches(ms, [b for b, h in zip(boxes, hit) if h], kps)
