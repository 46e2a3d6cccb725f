"""Stage-2 refinement and the two-stage detector."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .backbone import SelfDeepMatcher
from .base import check_image, check_score_map, quantize_scores
from .crf import CrfParams, map_labels, meanfield_infer, unary_from_scores
from .fusion import FusionParams, integrate, project_matches, proposal_score_mask, superpixel_segment
from .keypoints import get_extractor, get_matcher, match_all_pairs
from .proposals import SelectionParams, get_generator, select_proposals

STAGES = ("backbone", "proposals", "matching", "fusion", "crf")


@dataclass
class Stage2Result:
    proposals: list
    boxes: list
    matched_boxes: list
    matches: object
    labels: np.ndarray
    s_sp: np.ndarray
    s_p: np.ndarray
    s_in: np.ndarray
    mask: np.ndarray
    marginals: np.ndarray | None = None
    timings: dict = field(default_factory=dict)


class ProposalSuperGlue(BaseEstimator):
    """Proposal selection, keypoint matching, score fusion and CRF refinement.

    Consumes an image plus its backbone score map and returns a refined
    binary mask. Nothing is learned: ``fit`` only resolves the plug-ins.
    ``n_superpixels=None`` scales the count to about 512 pixels per region.
    ``S_sp`` and ``S_in`` are snapped to the 16-bit PNG grid so that rerunning
    fusion or the CRF from exported maps reproduces the mask exactly.
    """

    def __init__(self, generator="hybrid", score_threshold=0.4, iou_threshold=0.5,
                 inter_threshold=0.8, max_area_fraction=0.5, extractor="classical",
                 matcher="classical", self_match=True, min_separation_fraction=0.1,
                 n_superpixels=512, superpixel_method="slico", alpha=1.0, beta=1.0,
                 gamma=-0.5, phi=4.0, use_crf=True, w_appearance=3.0, w_smoothness=1.0,
                 theta_alpha=13.0, theta_beta=13.0, theta_gamma=3.0, crf_window=11, crf_iters=5):
        self.generator = generator
        self.score_threshold = score_threshold
        self.iou_threshold = iou_threshold
        self.inter_threshold = inter_threshold
        self.max_area_fraction = max_area_fraction
        self.extractor = extractor
        self.matcher = matcher
        self.self_match = self_match
        self.min_separation_fraction = min_separation_fraction
        self.n_superpixels = n_superpixels
        self.superpixel_method = superpixel_method
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.phi = phi
        self.use_crf = use_crf
        self.w_appearance = w_appearance
        self.w_smoothness = w_smoothness
        self.theta_alpha = theta_alpha
        self.theta_beta = theta_beta
        self.theta_gamma = theta_gamma
        self.crf_window = crf_window
        self.crf_iters = crf_iters

    def fit(self, X=None, y=None):
        self.generator_ = get_generator(self.generator) if isinstance(self.generator, str) else self.generator
        self.extractor_ = get_extractor(self.extractor) if isinstance(self.extractor, str) else self.extractor
        self.matcher_ = get_matcher(self.matcher) if isinstance(self.matcher, str) else self.matcher
        self.selection_ = SelectionParams(self.score_threshold, self.iou_threshold,
                                          self.inter_threshold, self.max_area_fraction)
        self.fusion_ = FusionParams(self.alpha, self.beta, self.gamma, self.phi)
        self.crf_ = CrfParams(self.w_appearance, self.w_smoothness, self.theta_alpha, self.theta_beta,
                              self.theta_gamma, self.crf_window, self.crf_iters)
        return self

    def _ensure_fitted(self):
        if not hasattr(self, "generator_"):
            self.fit()

    def refine(self, image, scores, proposals=None):
        """Run stage 2 on one image; ``proposals`` overrides the generator."""
        self._ensure_fitted()
        img = check_image(image)
        s = check_score_map(scores, img.shape[:2])
        timings = {}

        t0 = time.perf_counter()
        candidates = list(self.generator_(img)) if proposals is None else list(proposals)
        boxes = select_proposals(s, candidates, self.selection_)
        timings["proposals"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        pm = match_all_pairs(img, boxes, self.extractor_, self.matcher_, self.self_match,
                             self.min_separation_fraction)
        timings["matching"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        h, w = s.shape
        target = self.n_superpixels or max(1, int(round(h * w / 512)))
        labels = superpixel_segment(img, min(target, h * w), self.superpixel_method)
        s_sp = quantize_scores(project_matches(labels, pm.matches))
        s_p = proposal_score_mask(s, pm.matched)
        s_in = self.fuse(s_sp, s_p)
        timings["fusion"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        mask, q = self.finalize(img, s_in)
        timings["crf"] = time.perf_counter() - t0
        return Stage2Result(candidates, boxes, pm.matched, pm.matches, labels, s_sp, s_p, s_in,
                            mask, q, timings)

    def fuse(self, s_sp, s_p):
        """Integrated score map, rounded to the 16-bit export grid."""
        self._ensure_fitted()
        return quantize_scores(integrate(s_sp, s_p, self.fusion_))

    def finalize(self, image, s_in):
        """Binary mask from ``s_in``: CRF MAP labels, or a 0.5 threshold."""
        self._ensure_fitted()
        if not self.use_crf:
            return s_in > 0.5, None
        q = meanfield_infer(unary_from_scores(s_in), check_image(image), self.crf_)
        return map_labels(q), q

    def predict(self, X, score_maps):
        return [self.refine(img, s).mask for img, s in zip(X, score_maps)]


@dataclass
class DetectionResult:
    scores: np.ndarray
    stage2: Stage2Result | None
    timings: dict

    @property
    def mask(self):
        return self.stage2.mask if self.stage2 is not None else None


class TwoStageDetector(BaseEstimator):
    """Backbone score maps refined by :class:`ProposalSuperGlue`.

    Backbone scores are rounded to the 16-bit grid before stage 2 so that a
    run replayed from the exported score map reproduces the same mask.
    """

    def __init__(self, backbone=None, refiner=None, stage1_only=False):
        self.backbone = backbone
        self.refiner = refiner
        self.stage1_only = stage1_only

    def _parts(self):
        backbone = self.backbone if self.backbone is not None else SelfDeepMatcher()
        refiner = self.refiner if self.refiner is not None else ProposalSuperGlue()
        return backbone, refiner

    def fit(self, X, y):
        backbone, refiner = self._parts()
        self.backbone_ = clone(backbone).fit(X, y)
        self.refiner_ = clone(refiner).fit()
        return self

    @classmethod
    def from_parts(cls, backbone, refiner=None, stage1_only=False):
        """Wrap an already trained backbone."""
        det = cls(backbone, refiner, stage1_only)
        det.backbone_ = backbone
        det.refiner_ = (refiner if refiner is not None else ProposalSuperGlue()).fit()
        return det

    def detect(self, image, scores=None):
        """Full pipeline on one image. ``scores`` bypasses the backbone."""
        check_is_fitted(self, "refiner_")
        img = check_image(image)
        timings = {}
        t0 = time.perf_counter()
        if scores is None:
            check_is_fitted(self, "backbone_")
            scores = self.backbone_.predict_proba([img])[0]
        s = quantize_scores(check_score_map(scores, img.shape[:2]))
        timings["backbone"] = time.perf_counter() - t0
        if self.stage1_only:
            return DetectionResult(s, None, timings)
        stage2 = self.refiner_.refine(img, s)
        timings.update(stage2.timings)
        return DetectionResult(s, stage2, timings)

    def predict_proba(self, X):
        check_is_fitted(self, "backbone_")
        return self.backbone_.predict_proba(X)

    def predict(self, X):
        out = []
        for img in X:
            r = self.detect(img)
            out.append(r.mask if r.mask is not None else r.scores > 0.5)
        return out
