import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from cmfd.base import SampleSkipped
from cmfd.synth import (
    CorpusItem,
    TransformRanges,
    build_dataset,
    load_corpus,
    paste_footprint,
    procedural_corpus,
    read_manifest,
    save_corpus,
    split_corpus,
    synthesize_forgery,
    warp_region,
)


def textured(size=64, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


def square_region(size=64, y=5, x=5, side=10):
    m = np.zeros((size, size), bool)
    m[y:y + side, x:x + side] = True
    return m


def test_identity_paste_is_bit_exact():
    img, region = textured(), square_region()
    s = synthesize_forgery(img, region, TransformRanges.identity(), seed=3, size=64)
    ox, oy = s.provenance["paste_offset"]
    np.testing.assert_array_equal(s.image[oy:oy + 10, ox:ox + 10], img[5:15, 5:15])
    assert s.paste_mask.sum() == 100


def test_same_seed_is_bit_identical():
    img, region = textured(), square_region()
    a = synthesize_forgery(img, region, None, seed=11, size=64)
    b = synthesize_forgery(img, region, None, seed=11, size=64)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert a.provenance == b.provenance


def test_scale_two_footprint_area():
    ranges = TransformRanges((0, 0), (2, 2), (0, 0), (1, 1))
    s = synthesize_forgery(textured(), square_region(), ranges, seed=0, size=64)
    assert abs(int(s.paste_mask.sum()) - 400) <= 40


def test_ninety_degree_nearest_paste_preserves_histogram():
    img = textured(seed=4)
    region = square_region(side=12)
    ranges = TransformRanges((90, 90), (1, 1), (0, 0), (1, 1))
    s = synthesize_forgery(img, region, ranges, seed=2, size=64, interpolation="nearest")
    src = np.sort(img[region].reshape(-1, 3), axis=0)
    pasted = np.sort(s.image[s.paste_mask].reshape(-1, 3), axis=0)
    np.testing.assert_array_equal(src, pasted)


def test_luminance_clamps_instead_of_wrapping():
    img = np.full((32, 32, 3), 250, np.uint8)
    img[:4, :4] = 5
    ranges = TransformRanges((0, 0), (1, 1), (32, 32), (1, 1))
    s = synthesize_forgery(img, square_region(32, 8, 8, 8), ranges, seed=0, size=32)
    assert np.all(s.image[s.paste_mask] == 255)
    dark = TransformRanges((0, 0), (1, 1), (-32, -32), (1, 1))
    s = synthesize_forgery(img, square_region(32, 0, 0, 4), dark, seed=0, size=32)
    assert np.all(s.image[s.paste_mask] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mask_is_union_of_recomputable_footprints(seed):
    img, region = textured(), square_region(side=9)
    s = synthesize_forgery(img, region, None, seed=seed, size=64, max_retries=50)
    np.testing.assert_array_equal(s.mask, s.source_mask | s.paste_mask)
    np.testing.assert_array_equal(paste_footprint(region, s.provenance), s.paste_mask)
    x1, y1, x2, y2 = s.provenance["paste_bbox"]
    assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
    if not (s.source_mask & s.paste_mask).any():
        n = ndimage.label(s.mask)[1]
        touching = ndimage.binary_dilation(s.source_mask) & s.paste_mask
        assert n >= 2 or touching.any()


def test_resizes_to_requested_size():
    s = synthesize_forgery(textured(48), square_region(48), TransformRanges.easy(), seed=0, size=64)
    assert s.image.shape == (64, 64, 3) and s.mask.shape == (64, 64)


def test_unplaceable_region_is_skipped():
    region = np.ones((32, 32), bool)
    with pytest.raises(SampleSkipped):
        synthesize_forgery(textured(32), region, TransformRanges((0, 0), (2, 2), (0, 0), (1, 1)),
                           seed=0, size=32, max_retries=3)


def test_empty_region_rejected():
    with pytest.raises(ValueError):
        synthesize_forgery(textured(), np.zeros((64, 64), bool), seed=0, size=64)


def test_transform_ranges_validation():
    with pytest.raises(ValueError):
        TransformRanges(scale=(0, 1))
    with pytest.raises(ValueError):
        TransformRanges(rotation_deg=(10, -10))
    p = TransformRanges().sample(np.random.default_rng(0))
    assert -60 <= p["rotation_deg"] <= 60 and 0.5 <= p["scale"] <= 4


def test_warp_identity_is_exact():
    patch = textured(9)
    mask = np.ones((9, 9), bool)
    params = {"rotation_deg": 0.0, "scale": 1.0, "luminance": 0.0, "deform_width": 1.0}
    w, m = warp_region(patch, mask, params)
    np.testing.assert_array_equal(w, patch)
    assert m.all()


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(Path(folder).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_deterministic(tmp_path):
    corpus = procedural_corpus(3, size=64, seed=0)
    build_dataset(corpus, 10, tmp_path / "a", seed=7, size=64)
    build_dataset(corpus, 10, tmp_path / "b", seed=7, size=64)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    man = read_manifest(tmp_path / "a" / "manifest.jsonl")
    assert len(man) == 10
    e = man.entries[0]
    assert {"image", "mask", "seed", "provenance"} <= set(e)
    img, mask = man.pairs()[0]
    assert img.shape == (64, 64, 3) and mask.dtype == bool and mask.any()


def test_build_dataset_zero_samples(tmp_path):
    man = build_dataset(procedural_corpus(1, size=64), 0, tmp_path / "z", size=64)
    assert len(man) == 0
    assert (tmp_path / "z" / "manifest.jsonl").read_text() == ""


def test_build_dataset_resumes(tmp_path):
    corpus = procedural_corpus(2, size=64, seed=1)
    build_dataset(corpus, 4, tmp_path / "r", seed=2, size=64)
    first = _digest(tmp_path / "r")
    (tmp_path / "r" / "img_000003.png").unlink()
    man = build_dataset(corpus, 4, tmp_path / "r", seed=2, size=64)
    assert len(man) == 4 and _digest(tmp_path / "r") == first


def test_build_dataset_counts_skips(tmp_path):
    full = CorpusItem("big", textured(32), [np.ones((32, 32), bool)])
    ranges = TransformRanges((0, 0), (2, 2), (0, 0), (1, 1))
    man = build_dataset([full], 3, tmp_path / "s", size=32, ranges=ranges, max_retries=2, region_retries=2)
    assert len(man) == 0 and man.skipped == 3


def test_build_dataset_rejects_empty_corpus(tmp_path):
    with pytest.raises(ValueError):
        build_dataset([], 2, tmp_path / "e")


def test_corpus_round_trip_and_split(tmp_path):
    corpus = procedural_corpus(5, size=48, seed=9)
    save_corpus(corpus, tmp_path / "c")
    loaded = load_corpus(tmp_path / "c")
    assert [c.name for c in loaded] == sorted(c.name for c in corpus)
    by_name = {c.name: c for c in corpus}
    for c in loaded:
        np.testing.assert_array_equal(c.image, by_name[c.name].image)
        assert len(c.regions) == len(by_name[c.name].regions)
    train, test = split_corpus(loaded, 0.4, seed=0)
    assert len(test) == 2 and not {c.name for c in train} & {c.name for c in test}


def test_missing_corpus_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope")
