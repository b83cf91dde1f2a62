"""Two-stage CycleGAN training on phantom cohorts.

Each stage trains a forward generator (non-contrast to contrast) and a
backward generator with least-squares adversarial losses plus an L1
cycle-consistency term; stage 2 repeats the recipe with small-vessel-centered
sampling and the smaller patch size, initialized from scratch. Losses are
logged per epoch as line-delimited JSON; any non-finite loss aborts the run.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import TrainerConfig
from .networks import Discriminator, Generator, hu_to_norm
from .sampling import load_cases, sample_training_patches

CHECKPOINT_FORMAT = "vesseltrainer-checkpoint/1"


def _batched(pairs, batch_size):
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        x = np.stack([p[0] for p in chunk])[:, None]
        y = np.stack([p[1] for p in chunk])[:, None]
        yield (hu_to_norm(torch.from_numpy(x.astype(np.float32))),
               hu_to_norm(torch.from_numpy(y.astype(np.float32))))


def _guard_finite(value: float, what: str, stage: int, epoch: int) -> None:
    if not np.isfinite(value):
        raise RuntimeError(f"divergence guard: non-finite {what} at stage {stage} epoch {epoch}")


def train_stage(cases, stage: int, cfg: TrainerConfig):
    """Returns (forward_gen, backward_gen, per-epoch history list)."""
    torch.manual_seed(cfg.seed * 1000 + stage)
    gen_fwd = Generator(cfg.base_channels)
    gen_bwd = Generator(cfg.base_channels)
    disc_y = Discriminator(cfg.base_channels)
    disc_x = Discriminator(cfg.base_channels)
    betas = (cfg.beta1, cfg.beta2)
    opt_gen = torch.optim.Adam(
        list(gen_fwd.parameters()) + list(gen_bwd.parameters()), lr=cfg.lr, betas=betas
    )
    opt_disc = torch.optim.Adam(
        list(disc_y.parameters()) + list(disc_x.parameters()), lr=cfg.lr, betas=betas
    )
    l1 = nn.L1Loss()
    patch = cfg.patch_for_stage(stage)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        pairs = sample_training_patches(
            cases, stage, patch, cfg.steps_per_epoch * cfg.batch_size,
            seed=cfg.seed + 7919 * (stage * 1000 + epoch),
        )
        sums = {"gen_total": 0.0, "gen_adv": 0.0, "cycle": 0.0, "disc": 0.0}
        steps = 0
        for x, y in _batched(pairs, cfg.batch_size):
            # discriminators on real vs detached fakes
            with torch.no_grad():
                fake_y_d = gen_fwd(x)
                fake_x_d = gen_bwd(y)
            loss_disc = 0.5 * (
                ((disc_y(y) - 1.0) ** 2).mean() + (disc_y(fake_y_d) ** 2).mean()
                + ((disc_x(x) - 1.0) ** 2).mean() + (disc_x(fake_x_d) ** 2).mean()
            )
            opt_disc.zero_grad(set_to_none=True)
            loss_disc.backward()
            opt_disc.step()

            # generators: adversarial + cycle consistency
            fake_y = gen_fwd(x)
            fake_x = gen_bwd(y)
            adv = ((disc_y(fake_y) - 1.0) ** 2).mean() + ((disc_x(fake_x) - 1.0) ** 2).mean()
            cycle = cfg.cycle_lambda * (l1(gen_bwd(fake_y), x) + l1(gen_fwd(fake_x), y))
            loss_gen = adv + cycle
            opt_gen.zero_grad(set_to_none=True)
            loss_gen.backward()
            opt_gen.step()

            sums["gen_total"] += float(loss_gen.detach())
            sums["gen_adv"] += float(adv.detach())
            sums["cycle"] += float(cycle.detach())
            sums["disc"] += float(loss_disc.detach())
            steps += 1
        record = {"stage": stage, "epoch": epoch}
        record.update({k: v / steps for k, v in sums.items()})
        for key in ("gen_total", "gen_adv", "cycle", "disc"):
            _guard_finite(record[key], key, stage, epoch)
        history.append(record)
    return gen_fwd, gen_bwd, history


def save_checkpoint(path, stage: int, gen_fwd, gen_bwd, cfg: TrainerConfig) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "base_channels": cfg.base_channels,
        "gen_forward": gen_fwd.state_dict(),
        "gen_backward": gen_bwd.state_dict(),
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
    }, path)


def load_generator(path) -> tuple[Generator, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a trainer checkpoint: {path}")
    gen = Generator(int(blob["base_channels"]))
    gen.load_state_dict(blob["gen_forward"])
    gen.eval()
    return gen, blob


def train_two_stage(manifest_path, cfg: TrainerConfig, out_dir) -> dict:
    """Trains both stages and writes checkpoints plus a JSONL loss log.

    Returns {"stage1": ckpt path, "stage2": ckpt path, "log": log path,
    "history": [...]}.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = load_cases(manifest_path)
    cfg.validate(case_dims=cases[0].ncct.shape)
    t0 = time.monotonic()
    history = []
    paths = {}
    for stage in (1, 2):
        gen_fwd, gen_bwd, stage_hist = train_stage(cases, stage, cfg)
        ckpt = out / f"stage{stage}.pt"
        save_checkpoint(ckpt, stage, gen_fwd, gen_bwd, cfg)
        paths[f"stage{stage}"] = str(ckpt)
        history.extend(stage_hist)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as f:
        for record in history:
            f.write(json.dumps(record) + "\n")
    paths["log"] = str(log_path)
    paths["history"] = history
    paths["elapsed_s"] = time.monotonic() - t0
    return paths
