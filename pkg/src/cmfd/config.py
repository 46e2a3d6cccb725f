"""Pipeline configuration: one JSON document plus ``section.key=value`` overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import SelfDeepMatcher
from .pipeline import ProposalSuperGlue

SECTIONS = ("backbone", "refiner")


@dataclass
class PipelineConfig:
    backbone: dict = field(default_factory=dict)
    refiner: dict = field(default_factory=dict)
    seed: int = 0
    output: str | None = None
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        self._check(self.backbone, SelfDeepMatcher, "backbone")
        self._check(self.refiner, ProposalSuperGlue, "refiner")

    @staticmethod
    def _check(section, cls, name):
        known = set(cls().get_params())
        unknown = sorted(set(section) - known)
        if unknown:
            raise ValueError(f"unknown {name} option(s) {unknown}; known: {sorted(known)}")

    def make_backbone(self):
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in self.backbone.items()}
        params.setdefault("random_state", self.seed)
        return SelfDeepMatcher(**params)

    def make_refiner(self):
        # fit() resolves plug-in names and fails on unregistered ones
        return ProposalSuperGlue(**self.refiner).fit()

    def to_dict(self):
        return {"backbone": self.backbone, "refiner": self.refiner, "seed": self.seed,
                "output": self.output, "data": self.data}

    def with_overrides(self, overrides):
        d = copy.deepcopy(self.to_dict())
        for item in overrides or ():
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.split(".")
            target = d
            for p in parts[:-1]:
                target = target.setdefault(p, {})
                if not isinstance(target, dict):
                    raise ValueError(f"cannot set {key!r}: {p!r} is not a section")
            target[parts[-1]] = value
        return PipelineConfig(**d)


def load_config(path=None, overrides=None):
    """Read a JSON config (or defaults when ``path`` is None) and apply overrides."""
    if path is None:
        cfg = PipelineConfig()
    else:
        raw = json.loads(Path(path).read_text())
        unknown = sorted(set(raw) - {"backbone", "refiner", "seed", "output", "data"})
        if unknown:
            raise ValueError(f"{path}: unknown top-level key(s) {unknown}")
        cfg = PipelineConfig(**raw)
    return cfg.with_overrides(overrides)
