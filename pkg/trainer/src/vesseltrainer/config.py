"""Trainer hyperparameters.

Adam runs with lr 2e-4, beta1 0.5, beta2 0.999 and batch size 2. Full-scale
training uses 200 epochs with 96^3 stage-1 and 64^3 stage-2 patches; the desk
defaults below shrink that to 20 epochs at 32^3 / 16^3 so the whole two-stage
run fits in minutes on a CPU.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 2
    epochs: int = 20          # full scale: 200
    stage1_patch: int = 32    # full scale: 96
    stage2_patch: int = 16    # full scale: 64
    cycle_lambda: float = 10.0
    steps_per_epoch: int = 16
    base_channels: int = 8
    seed: int = 0

    def validate(self, case_dims=None) -> None:
        if not (self.lr > 0):
            raise ValueError("lr must be > 0")
        if not (0.0 <= self.beta1 < self.beta2 < 1.0):
            raise ValueError(f"need 0 <= beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        for name in ("batch_size", "epochs", "steps_per_epoch", "base_channels"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be >= 1")
        for name in ("stage1_patch", "stage2_patch"):
            p = getattr(self, name)
            if p < 8 or p % 4 != 0:
                raise ValueError(f"{name} must be >= 8 and divisible by 4, got {p}")
        if case_dims is not None:
            if any(self.stage1_patch > d for d in case_dims):
                raise ValueError(
                    f"stage1_patch {self.stage1_patch} does not fit volume dims {case_dims}"
                )

    def patch_for_stage(self, stage: int) -> int:
        return self.stage1_patch if stage == 1 else self.stage2_patch

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()
