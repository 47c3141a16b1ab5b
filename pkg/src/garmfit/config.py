"""Run configuration with the published defaults."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field


@dataclass
class LossWeights:
    """Scales of the objective terms.

    ``penetration_margin`` of None means "derive from the target avatar":
    0.002 times its bounding box diagonal.
    """

    contact_scale: float = 10.0        # whole contact block
    tightness_scale: float = 10.0      # inside the contact block
    connect_scale: float = 100.0       # inside the contact block, layered runs
    laplacian_scale: float = 0.5
    weight_reg_scale: float = 0.01
    penetration_margin: float | None = None
    weight_clamp: float = 0.1          # residual weights live in (-clamp, clamp)


@dataclass
class RefitConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 8000             # single-resolution runs
    coarse_iterations: int = 6000
    fine_iterations: int = 4000
    learning_rate: float = 5e-3
    fine_learning_rate: float = 1e-3
    pair_update_every: int = 2000
    contact_knn: int = 8
    margin_scale: float = 0.002        # margin = scale * target bbox diagonal
    coarse_target: int | None = None   # None -> max(1500, fine_count // 4)
    mode: str = "coarse-to-fine"       # or "single"
    log_every: int = 100
    deterministic: bool = True
    threads: int = field(default_factory=lambda: int(os.environ.get("GARMFIT_THREADS", "1")))
    prune_tol: float = 1e-4
    connect_factor: float = 1.5        # times mean source edge length

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RefitConfig":
        d = dict(d)
        w = d.pop("weights", {})
        cfg = RefitConfig(**{k: v for k, v in d.items()
                             if k in {f.name for f in dataclasses.fields(RefitConfig)}})
        known = {f.name for f in dataclasses.fields(LossWeights)}
        cfg.weights = LossWeights(**{k: v for k, v in w.items() if k in known})
        return cfg

    @staticmethod
    def load(path: str) -> "RefitConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return RefitConfig.from_dict(json.load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def coarse_size(self, fine_count: int) -> int:
        if self.coarse_target is not None:
            return self.coarse_target
        return max(1500, fine_count // 4)
