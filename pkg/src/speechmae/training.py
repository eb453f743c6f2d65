"""Two-phase training loop and model bundle persistence.

Phase one (the bulk of the steps) trains with coupled masks whose ratio is
drawn uniformly per example, teaching the model the whole continuum between
"mel visible" and "attributes visible".  Phase two switches to all-or-nothing
masks, alternating the hidden stream per step, which matches exactly how the
model is driven at inference time.

A checkpoint is a self-contained bundle: the autoencoder weights and config,
the mel tokenizer it was trained against, and the tokenizer manifest with its
digest.  Loading verifies the digest so a bundle whose manifest was edited or
mixed up with another tokenizer is refused.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import TrainingExample, layout_for_examples
from .mae import MaeConfig, MaskedTokenModel, masked_accuracy
from .masking import MEL, TokenLayout, all_or_nothing_mask, sample_coupled_mask
from .quantizers import TokenizerManifest
from .vqvae import MelFrameVqvae, VqvaeConfig

_BUNDLE_FORMAT = "speech-mae-bundle"
_BUNDLE_VERSION = 1


@dataclass(frozen=True)
class TrainSchedule:
    """Knobs for one training run."""

    steps: int = 2000
    batch_size: int = 12
    lr: float = 1e-3                # peak rate
    warmup_steps: int = 100         # linear ramp from 0 to the peak
    lr_floor: float = 0.1           # final rate as a fraction of the peak
    weight_decay: float = 0.01
    phase_split: float = 0.8        # fraction of steps using coupled masks
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0.0 <= self.phase_split <= 1.0:
            raise ValueError("phase_split must lie in [0, 1]")
        if self.warmup_steps < 0 or not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError("warmup_steps must be >= 0 and lr_floor in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Linear warmup to the peak, then cosine decay down to the floor."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(self.steps - self.warmup_steps, 1)
        t = (step - self.warmup_steps) / span
        floor = self.lr * self.lr_floor
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainResult:
    model: MaskedTokenModel
    layout: TokenLayout
    curve: list[dict]            # sparse log rows (every log_every steps)
    step_losses: list[float]     # every step's loss, for curve diagnostics
    events: list[dict]


def collate_examples(examples: list[TrainingExample],
                     layout: TokenLayout) -> dict[str, torch.Tensor]:
    """Stack examples into per-family LongTensors, validating the layout."""
    if not examples:
        raise ValueError("no training examples")
    out = {}
    for fam in layout.families:
        grids = []
        for ex in examples:
            grid = ex.tokens.get(fam.name)
            if grid is None:
                raise ValueError(f"{ex.utt_id}: missing family {fam.name!r}")
            if grid.shape != (fam.n_tokens, fam.entries_per_token):
                raise ValueError(
                    f"{ex.utt_id}/{fam.name}: shape {grid.shape} != "
                    f"({fam.n_tokens}, {fam.entries_per_token})")
            grids.append(np.asarray(grid, dtype=np.int64))
        out[fam.name] = torch.from_numpy(np.stack(grids))
    return out


def train_mae(examples: list[TrainingExample], manifest: TokenizerManifest,
              vqvae: MelFrameVqvae, config: MaeConfig,
              schedule: TrainSchedule, out_dir=None) -> TrainResult:
    """Train the masked autoencoder on tokenized examples.

    When `out_dir` is given, periodic checkpoints, a metrics CSV, and an
    event log are written there.  A non-finite loss aborts with an error
    naming the last good checkpoint.
    """
    layout = layout_for_examples(manifest, vqvae)
    data = collate_examples(examples, layout)
    n = len(examples)

    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    model = MaskedTokenModel(config, layout, seed=schedule.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr,
                            weight_decay=schedule.weight_decay)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    last_checkpoint = None
    split = int(round(schedule.phase_split * schedule.steps))
    curve: list[dict] = []
    step_losses: list[float] = []
    events: list[dict] = [{"event": "phase", "step": 0, "phase": "coupled"}]

    for step in range(schedule.steps):
        idx = rng.choice(n, size=schedule.batch_size,
                         replace=n < schedule.batch_size)
        batch = {k: v[idx] for k, v in data.items()}
        b = len(idx)
        if step < split:
            phase = "coupled"
            flags = np.stack([sample_coupled_mask(layout, rng).flags
                              for _ in range(b)])
        else:
            phase = "all-or-nothing"
            if step == split:
                events.append({"event": "phase", "step": step, "phase": phase})
            hide = MEL if (step - split) % 2 == 0 else "attributes"
            flags = np.tile(all_or_nothing_mask(layout, hide).flags, (b, 1))
        mask = torch.from_numpy(flags)

        logits = model(batch, mask)
        loss, per_family = model.loss_on_masked(logits, batch, mask)
        if not torch.isfinite(loss):
            hint = (f"; last good checkpoint: {last_checkpoint}"
                    if last_checkpoint else "")
            raise RuntimeError(f"non-finite loss at step {step}{hint}")
        lr_now = schedule.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr_now
        opt.zero_grad()
        loss.backward()
        opt.step()
        step_losses.append(float(loss.detach()))

        if step % schedule.log_every == 0 or step == schedule.steps - 1:
            row = {"step": step, "phase": phase, "lr": lr_now,
                   "loss": float(loss.detach())}
            row.update({f"loss_{k}": v for k, v in per_family.items()})
            curve.append(row)
        if (out_path is not None and schedule.checkpoint_every > 0
                and (step + 1) % schedule.checkpoint_every == 0):
            last_checkpoint = out_path / f"checkpoint_{step + 1:06d}.pt"
            save_checkpoint(last_checkpoint, model, vqvae, manifest)
            events.append({"event": "checkpoint", "step": step + 1,
                           "path": str(last_checkpoint)})

    model.eval()
    if out_path is not None:
        _write_curve(out_path / "metrics.csv", curve)
        with open(out_path / "events.jsonl", "w") as f:
            for ev in events:
                f.write(json.dumps(ev) + "\n")
    return TrainResult(model=model, layout=layout, curve=curve,
                       step_losses=step_losses, events=events)


def _write_curve(path, curve: list[dict]) -> None:
    if not curve:
        return
    fields = sorted({k for row in curve for k in row},
                    key=lambda k: (k != "step", k != "phase", k))
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(curve)


def evaluate_directions(model: MaskedTokenModel, examples: list[TrainingExample],
                        layout: TokenLayout, batch_size: int = 8
                        ) -> dict[str, dict[str, float]]:
    """Masked accuracy with each whole stream hidden, over all examples."""
    data = collate_examples(examples, layout)
    n = len(examples)
    report = {}
    for hide in (MEL, "attributes"):
        flags = all_or_nothing_mask(layout, hide).flags
        hits: dict[str, float] = {}
        counts: dict[str, float] = {}
        for s in range(0, n, batch_size):
            sl = slice(s, min(s + batch_size, n))
            b = sl.stop - sl.start
            batch = {k: v[sl] for k, v in data.items()}
            mask = torch.from_numpy(np.tile(flags, (b, 1)))
            acc = masked_accuracy(model, batch, mask)
            weight = b
            for name, value in acc.items():
                hits[name] = hits.get(name, 0.0) + value * weight
                counts[name] = counts.get(name, 0.0) + weight
        report[hide] = {name: hits[name] / counts[name] for name in hits}
    return report


# ---------------------------------------------------------------------------
# model bundles
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Everything needed to run analysis and generation."""

    mae: MaskedTokenModel
    vqvae: MelFrameVqvae
    manifest: TokenizerManifest
    layout: TokenLayout


def save_checkpoint(path, mae: MaskedTokenModel, vqvae: MelFrameVqvae,
                    manifest: TokenizerManifest) -> None:
    manifest_json = manifest.to_json()
    torch.save({
        "format": _BUNDLE_FORMAT,
        "version": _BUNDLE_VERSION,
        "mae_config": asdict(mae.config),
        "mae_state": mae.state_dict(),
        "vqvae_config": asdict(vqvae.config),
        "vqvae_state": vqvae.state_dict(),
        "manifest_json": manifest_json,
        "manifest_digest": hashlib.sha256(manifest_json.encode()).hexdigest(),
    }, path)


def load_checkpoint(path) -> ModelBundle:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != _BUNDLE_FORMAT:
        raise ValueError(f"{path}: not a model bundle")
    if blob.get("version") != _BUNDLE_VERSION:
        raise ValueError(f"{path}: unsupported bundle version")
    manifest_json = blob["manifest_json"]
    digest = hashlib.sha256(manifest_json.encode()).hexdigest()
    if digest != blob["manifest_digest"]:
        raise ValueError(f"{path}: manifest digest mismatch; bundle corrupt "
                         "or tampered with")
    manifest = TokenizerManifest.from_json(manifest_json)
    vqvae = MelFrameVqvae(VqvaeConfig(**blob["vqvae_config"]))
    vqvae.load_state_dict(blob["vqvae_state"])
    vqvae.eval()
    layout = layout_for_examples(manifest, vqvae)
    mae = MaskedTokenModel(MaeConfig(**blob["mae_config"]), layout)
    mae.load_state_dict(blob["mae_state"])
    mae.eval()
    return ModelBundle(mae=mae, vqvae=vqvae, manifest=manifest, layout=layout)


_TOKENIZER_FORMAT = "speech-mae-tokenizers"


def save_tokenizers(path, vqvae: MelFrameVqvae,
                    manifest: TokenizerManifest) -> None:
    """Persist the tokenizer stage alone: the mel VQ-VAE plus the manifest."""
    manifest_json = manifest.to_json()
    torch.save({
        "format": _TOKENIZER_FORMAT,
        "version": _BUNDLE_VERSION,
        "vqvae_config": asdict(vqvae.config),
        "vqvae_state": vqvae.state_dict(),
        "manifest_json": manifest_json,
        "manifest_digest": hashlib.sha256(manifest_json.encode()).hexdigest(),
    }, path)


def load_tokenizers(path) -> tuple[MelFrameVqvae, TokenizerManifest]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != _TOKENIZER_FORMAT:
        raise ValueError(f"{path}: not a tokenizer checkpoint")
    if blob.get("version") != _BUNDLE_VERSION:
        raise ValueError(f"{path}: unsupported tokenizer version")
    manifest_json = blob["manifest_json"]
    digest = hashlib.sha256(manifest_json.encode()).hexdigest()
    if digest != blob["manifest_digest"]:
        raise ValueError(f"{path}: manifest digest mismatch; checkpoint "
                         "corrupt or tampered with")
    manifest = TokenizerManifest.from_json(manifest_json)
    vqvae = MelFrameVqvae(VqvaeConfig(**blob["vqvae_config"]))
    vqvae.load_state_dict(blob["vqvae_state"])
    vqvae.eval()
    return vqvae, manifest
