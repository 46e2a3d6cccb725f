"""Network graph: feature extractor, correlation levels and ASPP decoder."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ops import CorrelationBlock, skip_match_concat

SUPPORTED_T = (16, 32, 48, 64)
UNIMPLEMENTED_EXTRACTORS = ("resnet50", "resnet101", "mobilenetv2", "mobilenetv3", "shufflenetv2")


@dataclass
class BackboneConfig:
    T: int = 48
    attention: bool = True
    extractor: str = "vgg16"
    aspp_rates: tuple = (6, 12, 18)
    aspp_channels: int = 48
    decoder_channels: int = 48
    pretrained: bool = False
    tiny_channels: tuple = (16, 32, 64)
    tiny_stride: int = 8
    decoder_norm: bool = True

    def __post_init__(self):
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.tiny_channels = tuple(int(c) for c in self.tiny_channels)
        if self.T not in SUPPORTED_T:
            raise ValueError(f"T must be one of {SUPPORTED_T}, got {self.T}")
        if len(self.aspp_rates) != 3 or min(self.aspp_rates) < 1:
            raise ValueError(f"aspp_rates must be three positive integers, got {self.aspp_rates}")
        if self.tiny_stride not in (4, 8):
            raise ValueError(f"tiny_stride must be 4 or 8, got {self.tiny_stride}")

    @property
    def stride(self):
        return self.tiny_stride if self.extractor.lower() == "tiny" else 8

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _conv_relu(cin, cout, dilation=1, norm=False, kernel=3):
    pad = dilation * (kernel // 2)
    conv = nn.Conv2d(cin, cout, kernel, padding=pad, dilation=dilation, bias=not norm)
    return [conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True)] if norm else [conv, nn.ReLU(inplace=True)]


class VGGExtractor(nn.Module):
    """VGG16 with pooling removed after blocks 4 and 5; block 5 dilated by 2.

    Emits the block-3 (after its pool), block-4 and block-5 feature maps, all
    at stride 8.
    """

    def __init__(self, pretrained=False):
        super().__init__()
        cfg = [(3, 64), (64, 64), "P", (64, 128), (128, 128), "P",
               (128, 256), (256, 256), (256, 256), "P"]
        layers = []
        for item in cfg:
            if item == "P":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += _conv_relu(*item)
        self.block123 = nn.Sequential(*layers)
        self.block4 = nn.Sequential(*_conv_relu(256, 512), *_conv_relu(512, 512), *_conv_relu(512, 512))
        self.block5 = nn.Sequential(*_conv_relu(512, 512, 2), *_conv_relu(512, 512, 2),
                                    *_conv_relu(512, 512, 2))
        self.channels = (256, 512, 512)
        if pretrained:
            self.load_imagenet()

    def load_imagenet(self):
        """Copy ImageNet weights from torchvision's VGG16 (downloads if not cached)."""
        from torchvision.models import VGG16_Weights, vgg16

        src = [m for m in vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features if isinstance(m, nn.Conv2d)]
        dst = [m for m in self.modules() if isinstance(m, nn.Conv2d)]
        with torch.no_grad():
            for s, d in zip(src, dst):
                d.weight.copy_(s.weight)
                d.bias.copy_(s.bias)

    def forward(self, x):
        f3 = self.block123(x)
        f4 = self.block4(f3)
        f5 = self.block5(f4)
        return f3, f4, f5


class TinyExtractor(nn.Module):
    """Small from-scratch extractor with the VGG layout at a fraction of the width.

    Three conv stages, each followed by 2x pooling (the last pool is dropped
    for ``stride=4``), then two further stages at that resolution (the last
    dilated by 2). Each emitted level is the batch-
    normalised convolution output before its ReLU, so descriptors are signed
    and randomly initialised features do not all correlate near 1.
    """

    def __init__(self, channels=(16, 32, 64), stride=8):
        super().__init__()
        c1, c2, c3 = channels
        if c3 % 8:
            raise ValueError("tiny extractor level channels must be divisible by 8")

        def cbr(cin, cout):
            return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]

        self.stem = nn.Sequential(*cbr(3, c1), nn.MaxPool2d(2), *cbr(c1, c2), nn.MaxPool2d(2),
                                  *cbr(c2, c3), *([nn.MaxPool2d(2)] if stride == 8 else []))
        self.block3 = nn.Sequential(nn.Conv2d(c3, c3, 3, padding=1), nn.BatchNorm2d(c3))
        self.block4 = nn.Sequential(nn.ReLU(), nn.Conv2d(c3, c3, 3, padding=1), nn.BatchNorm2d(c3))
        self.block5 = nn.Sequential(nn.ReLU(), nn.Conv2d(c3, c3, 3, padding=2, dilation=2), nn.BatchNorm2d(c3))
        self.channels = (c3, c3, c3)

    def forward(self, x):
        f3 = self.block3(self.stem(x))
        f4 = self.block4(f3)
        f5 = self.block5(f4)
        return f3, f4, f5


def build_extractor(cfg):
    name = cfg.extractor.lower()
    if name == "vgg16":
        return VGGExtractor(pretrained=cfg.pretrained)
    if name == "tiny":
        return TinyExtractor(cfg.tiny_channels, cfg.tiny_stride)
    if name in UNIMPLEMENTED_EXTRACTORS:
        raise NotImplementedError(f"extractor {cfg.extractor!r} is a reserved identifier only")
    raise ValueError(f"unknown extractor {cfg.extractor!r}")


class ASPPDecoder(nn.Module):
    """Five parallel branches (three dilated 3x3, one 1x1, pooled 1x1),
    concatenated and decoded to two-class logits at input resolution."""

    def __init__(self, in_channels, rates=(6, 12, 18), channels=48, decoder_channels=48, norm=True):
        super().__init__()
        self.branches = nn.ModuleList([nn.Sequential(*_conv_relu(in_channels, channels, r, norm)) for r in rates])
        self.point = nn.Sequential(*_conv_relu(in_channels, channels, norm=norm, kernel=1))
        self.pooled = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_channels, channels, 1),
                                    nn.ReLU(inplace=True))
        d = decoder_channels
        self.head1 = nn.Sequential(*_conv_relu(5 * channels, d, norm=norm), *_conv_relu(d, d, norm=norm))
        self.head2 = nn.Sequential(*_conv_relu(d, d, norm=norm))
        self.classifier = nn.Conv2d(d, 2, 1)

    def forward(self, x, out_size=None):
        h, w = x.shape[-2:]
        pooled = self.pooled(x).expand(-1, -1, h, w)
        x = torch.cat([b(x) for b in self.branches] + [self.point(x), pooled], dim=1)
        x = self.head1(x)
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        x = self.head2(x)
        size = out_size if out_size is not None else (x.shape[-2] * 2, x.shape[-1] * 2)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.classifier(x)


class SelfDeepMatchingNet(nn.Module):
    """Image -> two-class logits ``(B, 2, H, W)``; ``scores`` gives the
    forged-class probability."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg if cfg is not None else BackboneConfig()
        self.extractor = build_extractor(self.cfg)
        self.levels = nn.ModuleList(
            [CorrelationBlock(c, self.cfg.T, self.cfg.attention) for c in self.extractor.channels]
        )
        self.decoder = ASPPDecoder(3 * self.cfg.T, self.cfg.aspp_rates, self.cfg.aspp_channels,
                                   self.cfg.decoder_channels, self.cfg.decoder_norm)

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        s = self.cfg.stride
        if h % s or w % s:
            raise ValueError(f"image size {h}x{w} is not divisible by the extractor stride {s}")
        if (h // s) * (w // s) < self.cfg.T:
            raise ValueError(f"feature map {(h // s)}x{(w // s)} has fewer than T={self.cfg.T} locations")

    def features(self, x):
        self.check_input(x)
        return self.extractor(x)

    def correlations(self, x):
        feats = self.features(x)
        return skip_match_concat(*[level(f) for level, f in zip(self.levels, feats)])

    def forward(self, x):
        return self.decoder(self.correlations(x), out_size=x.shape[-2:])

    def scores(self, x):
        return torch.softmax(self(x), dim=1)[:, 1]

    def attention_scales(self):
        return [float(lv.attention.lam.detach()) if lv.attention is not None else 0.0 for lv in self.levels]
