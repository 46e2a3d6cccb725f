"""Synthetic copy-move forgeries with ground-truth masks."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .base import SampleSkipped, check_image, check_mask

logger = logging.getLogger(__name__)

TRANSFORM_ORDER = "deform-width, scale, rotate, luminance"


@dataclass
class TransformRanges:
    """Uniform sampling intervals for the pasted-region transforms.

    ``luminance`` is an additive shift in 8-bit units and ``deform_width``
    multiplies the region's width before scaling and rotation.
    """

    rotation_deg: tuple = (-60.0, 60.0)
    scale: tuple = (0.5, 4.0)
    luminance: tuple = (-32.0, 32.0)
    deform_width: tuple = (0.5, 2.0)

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "luminance", "deform_width"):
            lo, hi = (float(v) for v in getattr(self, name))
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
            setattr(self, name, (lo, hi))
        if self.scale[0] <= 0 or self.deform_width[0] <= 0:
            raise ValueError("scale and deform_width intervals must be positive")

    @classmethod
    def identity(cls):
        return cls((0, 0), (1, 1), (0, 0), (1, 1))

    @classmethod
    def easy(cls):
        """Pure translation with a small luminance change."""
        return cls((0, 0), (1, 1), (-8, 8), (1, 1))

    @classmethod
    def mild(cls):
        return cls((-15, 15), (0.8, 1.25), (-16, 16), (0.9, 1.1))

    def sample(self, rng):
        return {
            "rotation_deg": float(rng.uniform(*self.rotation_deg)),
            "scale": float(rng.uniform(*self.scale)),
            "luminance": float(rng.uniform(*self.luminance)),
            "deform_width": float(rng.uniform(*self.deform_width)),
        }


@dataclass
class ForgerySample:
    image: np.ndarray
    mask: np.ndarray
    source_mask: np.ndarray
    paste_mask: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class CorpusItem:
    name: str
    image: np.ndarray
    regions: list


def _affine(params):
    t = math.radians(params["rotation_deg"])
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return rot @ np.diag([params["scale"] * params["deform_width"], params["scale"]])


def warp_region(patch, patch_mask, params, interpolation="bilinear"):
    """Apply deform -> scale -> rotate to a cropped region.

    Returns the warped pixels and footprint, cropped to the footprint's
    bounding box. Pixel centres sit at integer coordinates and the map is
    anchored at the patch centre, so the identity transform is exact.
    """
    h, w = patch_mask.shape
    a = _affine(params)
    corners = np.array([[-0.5, -0.5], [w - 0.5, -0.5], [-0.5, h - 0.5], [w - 0.5, h - 0.5]])
    src_c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    mapped = (corners - src_c) @ a.T
    extent = mapped.max(axis=0) - mapped.min(axis=0)
    ow, oh = (max(1, int(math.ceil(e - 1e-9))) for e in extent)
    dst_c = np.array([(ow - 1) / 2.0, (oh - 1) / 2.0])
    m = np.hstack([a, (dst_c - a @ src_c)[:, None]])
    flag = cv2.INTER_NEAREST if interpolation == "nearest" else cv2.INTER_LINEAR
    warped = cv2.warpAffine(patch, m, (ow, oh), flags=flag, borderMode=cv2.BORDER_REPLICATE)
    # the footprint is always resampled by nearest neighbour, then binarised
    wmask = cv2.warpAffine(patch_mask.astype(np.float32), m, (ow, oh), flags=cv2.INTER_NEAREST,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0) >= 0.5
    if warped.ndim == 2:
        warped = warped[:, :, None]
    ys, xs = np.nonzero(wmask)
    if ys.size == 0:
        return warped[:0, :0], wmask[:0, :0]
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return warped[y0:y1, x0:x1], wmask[y0:y1, x0:x1]


def _prepare(image, region_mask, size):
    image = check_image(image)
    region = check_mask(region_mask, image.shape[:2])
    if image.shape[:2] != (size, size):
        image = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
        region = cv2.resize(region.astype(np.uint8), (size, size), interpolation=cv2.INTER_NEAREST) > 0
    return image, region


def _region_polygon(region):
    contours, _ = cv2.findContours(region.astype(np.uint8), cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    if not contours:
        return []
    biggest = max(contours, key=cv2.contourArea)
    return biggest.reshape(-1, 2).tolist()


def synthesize_forgery(image, region_mask, ranges=None, seed=0, size=512, max_retries=20,
                       interpolation="bilinear"):
    """Copy one annotated region, transform it and paste it elsewhere.

    The image and region are first resized to ``size`` x ``size``. The
    ground-truth mask marks both the source region and the pasted footprint.
    Raises :class:`SampleSkipped` when no sampled scale fits after
    ``max_retries`` draws.
    """
    ranges = ranges if ranges is not None else TransformRanges()
    rng = np.random.default_rng(seed)
    img, region = _prepare(image, region_mask, size)
    if not region.any():
        raise ValueError("region mask is empty")
    ys, xs = np.nonzero(region)
    y0, y1, x0, x1 = int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1
    patch, pmask = img[y0:y1, x0:x1], region[y0:y1, x0:x1]

    for attempt in range(max_retries):
        params = ranges.sample(rng)
        warped, wmask = warp_region(patch, pmask, params, interpolation)
        oh, ow = wmask.shape
        if oh == 0 or oh > size or ow > size:
            continue
        oy = int(rng.integers(0, size - oh + 1))
        ox = int(rng.integers(0, size - ow + 1))
        pasted = np.clip(np.rint(warped.astype(np.float64) + params["luminance"]), 0, 255).astype(np.uint8)
        out = img.copy()
        window = out[oy:oy + oh, ox:ox + ow]
        window[wmask] = pasted[wmask]
        paste_full = np.zeros_like(region)
        paste_full[oy:oy + oh, ox:ox + ow] = wmask
        provenance = {
            "seed": int(seed) if np.isscalar(seed) else str(seed),
            "size": size,
            "source_bbox": [x0, y0, x1, y1],
            "source_polygon": _region_polygon(region),
            "transform": params,
            "transform_order": TRANSFORM_ORDER,
            "interpolation": interpolation,
            "paste_offset": [ox, oy],
            "paste_bbox": [ox, oy, ox + ow, oy + oh],
            "attempts": attempt + 1,
        }
        return ForgerySample(out, region | paste_full, region, paste_full, provenance)
    raise SampleSkipped(f"region of size {pmask.shape} could not be placed in {max_retries} draws")


def paste_footprint(region_mask, provenance):
    """Recompute the pasted footprint of a sample from its provenance."""
    size = provenance["size"]
    region = check_mask(region_mask)
    if region.shape != (size, size):
        region = cv2.resize(region.astype(np.uint8), (size, size), interpolation=cv2.INTER_NEAREST) > 0
    x0, y0, x1, y1 = provenance["source_bbox"]
    pmask = region[y0:y1, x0:x1]
    dummy = np.zeros(pmask.shape + (1,), np.uint8)
    _, wmask = warp_region(dummy, pmask, provenance["transform"], provenance["interpolation"])
    ox, oy = provenance["paste_offset"]
    full = np.zeros((size, size), bool)
    full[oy:oy + wmask.shape[0], ox:ox + wmask.shape[1]] = wmask
    return full


# -- procedural corpus -------------------------------------------------------

def _smooth_noise(rng, shape, sigma, channels=3):
    noise = rng.standard_normal(shape + (channels,)).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigma)
    if noise.ndim == 2:
        noise = noise[:, :, None]
    noise /= noise.std() + 1e-6
    return noise


def procedural_image(rng, size=256, n_shapes=(3, 6), min_area=0.01):
    """Random textured scene with annotated shape regions.

    Each shape gets its own colour and texture so that copies are
    distinguishable from the rest of the scene.
    """
    base = rng.uniform(40, 215, 3).astype(np.float32)
    img = base + 30.0 * _smooth_noise(rng, (size, size), size / 16.0) \
        + 12.0 * _smooth_noise(rng, (size, size), rng.uniform(0.8, 2.0))
    owner = np.full((size, size), -1, np.int32)
    k = int(rng.integers(n_shapes[0], n_shapes[1] + 1))
    for i in range(k):
        canvas = np.zeros((size, size), np.uint8)
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        r = rng.uniform(0.07, 0.16) * size
        if rng.random() < 0.5:
            axes = (int(r), int(r * rng.uniform(0.6, 1.0)))
            cv2.ellipse(canvas, (int(cx), int(cy)), axes, float(rng.uniform(0, 180)), 0, 360, 1, -1)
        else:
            n = int(rng.integers(3, 8))
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            rad = r * rng.uniform(0.6, 1.2, n)
            pts = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], 1).astype(np.int32)
            cv2.fillPoly(canvas, [pts], 1)
        sel = canvas > 0
        color = rng.uniform(20, 235, 3).astype(np.float32)
        tex = 28.0 * _smooth_noise(rng, (size, size), rng.uniform(0.7, 2.5))
        if rng.random() < 0.5:
            yy, xx = np.mgrid[:size, :size]
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(4, 12)
            stripes = 25.0 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)
            tex = tex + stripes[:, :, None].astype(np.float32)
        img[sel] = color + tex[sel]
        owner[sel] = i
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    regions = [owner == i for i in range(k) if (owner == i).mean() >= min_area]
    return img, regions


def procedural_corpus(n, size=256, seed=0):
    """``n`` procedural scenes, each with at least one annotated region."""
    items = []
    i = 0
    while len(items) < n:
        rng = np.random.default_rng([seed, i])
        img, regions = procedural_image(rng, size)
        if regions:
            items.append(CorpusItem(f"proc_{seed}_{i:06d}", img, regions))
        i += 1
    return items


def load_corpus(path):
    """Load ``<name>.png`` images with ``<name>_regions.png`` label maps.

    Every nonzero label in the label map is one annotated region. Images
    without a label map are skipped.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    items = []
    for p in sorted(root.iterdir()):
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg") or p.stem.endswith("_regions"):
            continue
        lab_path = p.with_name(p.stem + "_regions.png")
        if not lab_path.exists():
            logger.warning("skipping %s: no region label map", p.name)
            continue
        img = cv2.imread(str(p), cv2.IMREAD_COLOR)
        labels = cv2.imread(str(lab_path), cv2.IMREAD_UNCHANGED)
        if img is None or labels is None:
            logger.warning("skipping unreadable %s", p.name)
            continue
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        if labels.ndim == 3:
            labels = labels[:, :, 0]
        regions = [labels == v for v in np.unique(labels) if v != 0]
        if regions:
            items.append(CorpusItem(p.stem, img, regions))
    return items


def save_corpus(items, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for it in items:
        labels = np.zeros(it.image.shape[:2], np.uint8)
        for k, reg in enumerate(it.regions, start=1):
            labels[reg] = k
        cv2.imwrite(str(root / f"{it.name}.png"), cv2.cvtColor(it.image, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(root / f"{it.name}_regions.png"), labels)


def split_corpus(items, test_fraction=0.1, seed=0):
    """Split source images into disjoint train and test lists."""
    order = np.random.default_rng(seed).permutation(len(items))
    n_test = int(round(test_fraction * len(items)))
    test = [items[i] for i in sorted(order[:n_test])]
    train = [items[i] for i in sorted(order[n_test:])]
    return train, test


# -- datasets ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    path: Path
    entries: list
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def pairs(self):
        """Lazily readable ``(image, mask)`` pairs for training."""
        return ManifestDataset(self.entries, self.path.parent)


class ManifestDataset:
    def __init__(self, entries, root):
        self.entries = entries
        self.root = Path(root)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        e = self.entries[i]
        img = cv2.cvtColor(cv2.imread(str(self.root / e["image"]), cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)
        mask = cv2.imread(str(self.root / e["mask"]), cv2.IMREAD_GRAYSCALE) > 127
        return img, mask


def read_manifest(path):
    path = Path(path)
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return DatasetManifest(path, entries)


def build_dataset(corpus, n, out_dir, seed=0, ranges=None, size=512, max_retries=20,
                  region_retries=10, resume=True, interpolation="bilinear"):
    """Write ``n`` forgeries as PNG pairs plus a JSON-lines manifest.

    Sample ``i`` draws from its own generator seeded by ``(seed, i)``, so an
    interrupted run resumes to the same files. Samples whose regions cannot
    be placed after ``region_retries`` source draws are skipped and counted.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > 0 and not corpus:
        raise ValueError("corpus is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.jsonl"
    done = {}
    if resume and manifest_path.exists():
        for e in read_manifest(manifest_path).entries:
            if (out / e["image"]).exists() and (out / e["mask"]).exists():
                done[e["index"]] = e
    skipped = 0
    entries = []
    journal = open(manifest_path, "a" if resume else "w")
    for i in range(n):
        if i in done:
            entries.append(done[i])
            continue
        rng = np.random.default_rng([seed, i])
        entry = None
        for _ in range(region_retries):
            item = corpus[int(rng.integers(len(corpus)))]
            if not item.regions:
                continue
            r = int(rng.integers(len(item.regions)))
            sample_seed = int(rng.integers(2**31))
            try:
                s = synthesize_forgery(item.image, item.regions[r], ranges, sample_seed, size,
                                       max_retries, interpolation)
            except SampleSkipped:
                continue
            img_name, mask_name = f"img_{i:06d}.png", f"mask_{i:06d}.png"
            cv2.imwrite(str(out / img_name), cv2.cvtColor(s.image, cv2.COLOR_RGB2BGR))
            cv2.imwrite(str(out / mask_name), s.mask.astype(np.uint8) * 255)
            entry = {"index": i, "image": img_name, "mask": mask_name, "seed": sample_seed,
                     "source": item.name, "region": r, "provenance": s.provenance}
            break
        if entry is None:
            skipped += 1
            continue
        entries.append(entry)
        journal.write(json.dumps(entry, sort_keys=True) + "\n")
        journal.flush()
    journal.close()
    tmp = manifest_path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    if skipped:
        logger.warning("%d of %d samples skipped (regions could not be placed)", skipped, n)
    return DatasetManifest(manifest_path, entries, skipped)
