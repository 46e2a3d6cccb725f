"""On-disk detection records and replay of downstream stages from them."""
from __future__ import annotations

import json
from pathlib import Path

from .io import read_boxes, read_image, read_mask, read_score_map, write_boxes, write_mask, write_score_map
from .keypoints import MatchSet
from .pipeline import STAGES

RECORD_NAME = "record.json"
REPLAY_STAGES = ("proposals", "fusion", "crf")


def write_record(out_dir, image_id, image_path, result, config=None):
    """Serialize a :class:`~cmfd.pipeline.DetectionResult` under ``out_dir``.

    Returns the record dictionary that was written to ``record.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {
        "id": image_id,
        "image": str(Path(image_path).resolve()),
        "scores": "scores.png",
        "timings": {k: result.timings.get(k) for k in STAGES},
        "config": config or {},
    }
    write_score_map(out / "scores.png", result.scores, {"stage": "backbone"})
    st = result.stage2
    if st is None:
        rec.update(boxes=None, matched_boxes=None, matches=None, s_sp=None, s_p=None, s_in=None, mask=None)
    else:
        write_boxes(out / "boxes.json", st.boxes)
        write_boxes(out / "matched_boxes.json", st.matched_boxes)
        (out / "matches.json").write_text(st.matches.to_json())
        write_score_map(out / "s_sp.png", st.s_sp, {"stage": "superpixel match scores"})
        write_score_map(out / "s_p.png", st.s_p, {"stage": "proposal scores"})
        write_score_map(out / "s_in.png", st.s_in, {"stage": "integrated scores"})
        write_mask(out / "mask.png", st.mask)
        rec.update(boxes="boxes.json", matched_boxes="matched_boxes.json", matches="matches.json",
                   s_sp="s_sp.png", s_p="s_p.png", s_in="s_in.png", mask="mask.png",
                   n_proposals=len(st.proposals))
    (out / RECORD_NAME).write_text(json.dumps(rec, indent=2, sort_keys=True))
    return rec


def read_record(path):
    """Load a record; relative artifact names resolve against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / RECORD_NAME
    rec = json.loads(path.read_text())
    root = path.parent
    for key in ("scores", "boxes", "matched_boxes", "matches", "s_sp", "s_p", "s_in", "mask"):
        if rec.get(key):
            p = root / rec[key]
            if not p.exists():
                raise FileNotFoundError(f"record artifact missing: {p}")
            rec[key] = p
    return rec


def load_matches(path):
    return MatchSet.from_json(Path(path).read_text())


def replay(record_path, refiner, start="fusion"):
    """Recompute the final mask from serialized intermediates.

    ``start`` picks the first stage that is recomputed: ``"proposals"``
    reruns all of stage 2 from the score map, ``"fusion"`` starts from the
    stored S_sp/S_p maps and ``"crf"`` from the stored S_in map.
    """
    if start not in REPLAY_STAGES:
        raise ValueError(f"start must be one of {REPLAY_STAGES}, got {start!r}")
    rec = read_record(record_path)
    image = read_image(rec["image"])
    if start == "proposals":
        return refiner.refine(image, read_score_map(rec["scores"])).mask
    if rec.get("s_in") is None:
        raise ValueError("record holds no stage-2 intermediates (stage-1-only run)")
    if start == "fusion":
        s_in = refiner.fuse(read_score_map(rec["s_sp"]), read_score_map(rec["s_p"]))
    else:
        s_in = read_score_map(rec["s_in"])
    return refiner.finalize(image, s_in)[0]


def load_record_artifacts(record_path):
    """Image, score map, boxes, match pairs and mask (None when absent)."""
    rec = read_record(record_path)
    image = read_image(rec["image"])
    scores = read_score_map(rec["scores"])
    boxes = read_boxes(rec["boxes"]) if rec.get("boxes") else []
    pairs = load_matches(rec["matches"]).pairs if rec.get("matches") else []
    mask = read_mask(rec["mask"]) if rec.get("mask") else None
    return image, scores, boxes, pairs, mask
