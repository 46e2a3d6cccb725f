"""scikit-learn style wrapper around :class:`SelfDeepMatchingNet`."""
from __future__ import annotations

import json
import os

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..base import check_image, check_mask
from .network import BackboneConfig, SelfDeepMatchingNet
from .training import to_tensor, train_backbone

CHECKPOINT_FORMAT = "cmfd-backbone/1"


class SelfDeepMatcher(BaseEstimator):
    """Stage-1 detector: predicts a per-pixel copy-move score map.

    Parameters
    ----------
    T : int
        Number of correlation values kept per location.
    attention : bool
        Reinforce descriptors with spatial attention before correlation.
    extractor : {"vgg16", "tiny"}
    decoder_norm : bool
        Batch-normalise the ASPP branches and decoder convolutions (not the pooled branch).
    tiny_channels, tiny_stride : width and output stride (4 or 8) of the tiny extractor.
    epochs, batch_size, lr : training schedule (Adadelta).
    resize_range : (int, int)
        Training images are resized to a random square side in this range.
    random_state : int
        Seeds parameter initialisation and batch order.
    warm_start : bool
        Keep existing weights when ``fit`` is called again.
    """

    def __init__(self, T=48, attention=True, extractor="vgg16", aspp_rates=(6, 12, 18),
                 aspp_channels=48, decoder_channels=48, decoder_norm=True,
                 tiny_channels=(16, 32, 64), tiny_stride=8, pretrained=False, epochs=16,
                 batch_size=6, lr=1.0, resize_range=(256, 512), random_state=0, warm_start=False,
                 threshold=0.5):
        self.T = T
        self.attention = attention
        self.extractor = extractor
        self.aspp_rates = aspp_rates
        self.aspp_channels = aspp_channels
        self.decoder_channels = decoder_channels
        self.decoder_norm = decoder_norm
        self.tiny_channels = tiny_channels
        self.tiny_stride = tiny_stride
        self.pretrained = pretrained
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.resize_range = resize_range
        self.random_state = random_state
        self.warm_start = warm_start
        self.threshold = threshold

    def _config(self):
        return BackboneConfig(T=self.T, attention=self.attention, extractor=self.extractor,
                              aspp_rates=self.aspp_rates, aspp_channels=self.aspp_channels,
                              decoder_channels=self.decoder_channels, decoder_norm=self.decoder_norm,
                              pretrained=self.pretrained,
                              tiny_channels=self.tiny_channels, tiny_stride=self.tiny_stride)

    def initialize(self):
        """Build the network with fresh parameters without training."""
        torch.manual_seed(0 if self.random_state is None else self.random_state)
        self.config_ = self._config()
        self.net_ = SelfDeepMatchingNet(self.config_).eval()
        self.loss_trace_ = []
        self.lambda_trace_ = []
        return self

    def fit(self, X, y):
        """Train on images ``X`` and ground-truth masks ``y``."""
        X, y = list(X), list(y)
        if len(X) != len(y):
            raise ValueError(f"got {len(X)} images but {len(y)} masks")
        if not len(X):
            raise ValueError("cannot fit on an empty dataset")
        if not (self.warm_start and hasattr(self, "net_")):
            self.initialize()
        seed = 0 if self.random_state is None else self.random_state
        losses, lambdas = train_backbone(
            self.net_, list(zip(X, y)), epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, resize_range=self.resize_range, seed=seed, imagenet=self.pretrained,
        )
        self.loss_trace_ = self.loss_trace_ + losses
        self.lambda_trace_ = self.lambda_trace_ + lambdas
        return self

    def predict_proba(self, X):
        """Score maps in ``[0, 1]``, one per image, at the image's resolution."""
        check_is_fitted(self, "net_")
        out = []
        with torch.no_grad():
            for image in X:
                image = check_image(image)
                x = to_tensor([image], imagenet=self.pretrained)
                out.append(self.net_.scores(x)[0].numpy().astype(np.float64))
        return out

    def predict(self, X):
        return [p > self.threshold for p in self.predict_proba(X)]

    def score(self, X, y):
        """Mean pixel F1 of thresholded predictions."""
        from ..metrics import pixel_metrics

        return float(np.mean([pixel_metrics(p, check_mask(t)).f1 for p, t in zip(self.predict(X), y)]))

    def save(self, path):
        check_is_fitted(self, "net_")
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "config": self.config_.to_json(),
            "params": json.dumps(_jsonable(self.get_params())),
            "state_dict": self.net_.state_dict(),
            "loss_trace": list(self.loss_trace_),
        }, os.fspath(path))

    @classmethod
    def load(cls, path):
        blob = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
        params = json.loads(blob["params"])
        params["pretrained"] = False  # weights come from the checkpoint
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in params.items()})
        est.config_ = BackboneConfig.from_dict({**json.loads(blob["config"]), "pretrained": False})
        est.net_ = SelfDeepMatchingNet(est.config_)
        est.net_.load_state_dict(blob["state_dict"])
        est.net_.eval()
        est.loss_trace_ = list(blob.get("loss_trace", []))
        est.lambda_trace_ = []
        est.pretrained = bool(json.loads(blob["params"]).get("pretrained", False))
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
