"""Frame-wise vector-quantized autoencoder for mel spectrogram frames.

Each 128-band log-mel frame is encoded independently (convolutions run along
the band axis only, never across time), compressed to a short grid of latent
vectors, and each latent position is quantized against its own codebook.
A frame therefore becomes a fixed tuple of code indices, and any frame
permutation commutes with tokenization -- a property the tests pin down.

Codebooks are learned with exponential-moving-average updates plus dead-code
reinitialization; the encoder/decoder train with a straight-through gradient
and a commitment penalty.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import dsp
from .dsp import MelSpectrogram

_CKPT_FORMAT = "mel-vqvae"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class VqvaeConfig:
    """Hyperparameters for the frame tokenizer."""

    codes_per_frame: int = 8       # latent grid positions per frame
    codebook_size: int = 128       # indices per position (1-based outside)
    latent_dim: int = 32
    channels: int = 32             # first conv width; doubles per stage
    commitment_beta: float = 0.25
    ema_decay: float = 0.99
    dead_code_steps: int = 200     # reinit codes unused for this many steps
    norm_center: float = -4.0      # log-mel values are roughly centred here
    norm_scale: float = 8.0

    def __post_init__(self):
        n_bands = dsp.N_MELS
        if n_bands % self.codes_per_frame != 0:
            raise ValueError("codes_per_frame must divide the band count")
        stages = int(np.log2(n_bands // self.codes_per_frame))
        if 2 ** stages * self.codes_per_frame != n_bands:
            raise ValueError("band count / codes_per_frame must be a power of 2")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    @property
    def n_stages(self) -> int:
        return int(np.log2(dsp.N_MELS // self.codes_per_frame))


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(int(np.gcd(8, channels)), channels)


class _ResidualBlock(nn.Module):
    """Pre-activation residual pair of band-axis convolutions."""

    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            _norm(channels), nn.GELU(),
            nn.Conv1d(channels, channels, kernel_size=3, padding=1),
            _norm(channels), nn.GELU(),
            nn.Conv1d(channels, channels, kernel_size=3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class MelFrameVqvae(nn.Module):
    """Encoder, per-position EMA codebooks, and decoder."""

    def __init__(self, config: VqvaeConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        enc = []
        c_in = 1
        for i in range(config.n_stages):
            c_out = min(ch * 2 ** i, 128)
            enc += [nn.Conv1d(c_in, c_out, kernel_size=5, stride=2, padding=2),
                    _ResidualBlock(c_out)]
            c_in = c_out
        enc += [_norm(c_in), nn.GELU(),
                nn.Conv1d(c_in, config.latent_dim, kernel_size=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv1d(config.latent_dim, c_in, kernel_size=1)]
        for i in reversed(range(config.n_stages)):
            c_out = 1 if i == 0 else min(ch * 2 ** (i - 1), 128)
            dec += [_ResidualBlock(c_in), _norm(c_in), nn.GELU(),
                    nn.ConvTranspose1d(c_in, c_out, kernel_size=4,
                                       stride=2, padding=1)]
            c_in = c_out
        self.decoder = nn.Sequential(*dec)

        F_, C, d = config.codes_per_frame, config.codebook_size, config.latent_dim
        self.register_buffer("codebooks", torch.randn(F_, C, d) * 0.1)
        self.register_buffer("ema_counts", torch.ones(F_, C))
        self.register_buffer("ema_sums", self.codebooks.clone())
        self.register_buffer("stale_steps", torch.zeros(F_, C, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros(1, dtype=torch.bool))

    # -- normalization ------------------------------------------------------

    def normalize(self, frames: torch.Tensor) -> torch.Tensor:
        return (frames - self.config.norm_center) / self.config.norm_scale

    def denormalize(self, frames: torch.Tensor) -> torch.Tensor:
        return frames * self.config.norm_scale + self.config.norm_center

    # -- core ---------------------------------------------------------------

    def encode_latent(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, bands) normalized frames -> (B, positions, latent)."""
        z = self.encoder(frames.unsqueeze(1))
        return z.transpose(1, 2)

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Nearest code per position: returns (z_q, indices (B, positions))."""
        # ||z - c||^2 = ||z||^2 - 2 z.c + ||c||^2; ||z||^2 is constant per row
        cross = torch.einsum("bfd,fcd->bfc", z, self.codebooks)
        c_norm = (self.codebooks ** 2).sum(dim=-1)          # (F, C)
        idx = (c_norm.unsqueeze(0) - 2.0 * cross).argmin(dim=-1)
        flat = self.codebooks.reshape(-1, z.shape[-1])
        offsets = torch.arange(idx.shape[1]) * self.config.codebook_size
        z_q = flat[idx + offsets.unsqueeze(0)]
        return z_q, idx

    def decode_latent(self, z_q: torch.Tensor) -> torch.Tensor:
        """(B, positions, latent) -> (B, bands) normalized frames."""
        return self.decoder(z_q.transpose(1, 2)).squeeze(1)

    def forward(self, frames: torch.Tensor) -> dict:
        """Normalized frames in; reconstruction, losses, and indices out."""
        z = self.encode_latent(frames)
        z_q, idx = self.quantize(z)
        z_st = z + (z_q - z).detach()                       # straight-through
        recon = self.decode_latent(z_st)
        recon_loss = F.mse_loss(recon, frames)
        commit_loss = F.mse_loss(z, z_q.detach())
        return {"recon": recon, "indices": idx, "z": z,
                "recon_loss": recon_loss, "commit_loss": commit_loss,
                "loss": recon_loss + self.config.commitment_beta * commit_loss}

    # -- codebook maintenance -----------------------------------------------

    @torch.no_grad()
    def init_codebooks_from(self, z: torch.Tensor, rng: np.random.Generator) -> None:
        """Seed every codebook with encoder outputs (plus slight jitter)."""
        C = self.config.codebook_size
        for f in range(self.config.codes_per_frame):
            picks = rng.integers(0, z.shape[0], size=C)
            seed = z[picks, f] + 0.01 * torch.randn(C, z.shape[-1])
            self.codebooks[f] = seed
            self.ema_sums[f] = seed
            self.ema_counts[f] = 1.0
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, idx: torch.Tensor,
                   rng: np.random.Generator) -> None:
        """EMA codebook update plus dead-code reinitialization."""
        decay = self.config.ema_decay
        C = self.config.codebook_size
        for f in range(self.config.codes_per_frame):
            onehot = F.one_hot(idx[:, f], C).to(z.dtype)    # (B, C)
            counts = onehot.sum(dim=0)
            sums = onehot.T @ z[:, f]
            self.ema_counts[f] = decay * self.ema_counts[f] + (1 - decay) * counts
            self.ema_sums[f] = decay * self.ema_sums[f] + (1 - decay) * sums
            n = self.ema_counts[f].sum()
            smoothed = (self.ema_counts[f] + 1e-5) / (n + C * 1e-5) * n
            self.codebooks[f] = self.ema_sums[f] / smoothed.unsqueeze(-1)

            self.stale_steps[f] = torch.where(counts > 0,
                                              torch.zeros_like(self.stale_steps[f]),
                                              self.stale_steps[f] + 1)
            dead = torch.nonzero(self.stale_steps[f] > self.config.dead_code_steps)
            for (k,) in dead.tolist():
                pick = int(rng.integers(0, z.shape[0]))
                fresh = z[pick, f] + 0.01 * torch.randn(z.shape[-1])
                self.codebooks[f, k] = fresh
                self.ema_sums[f, k] = fresh
                self.ema_counts[f, k] = 1.0
                self.stale_steps[f, k] = 0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_vqvae(frames: np.ndarray, config: VqvaeConfig, steps: int = 4000,
                batch_size: int = 256, lr: float = 2e-3,
                seed: int = 0) -> tuple[MelFrameVqvae, list[dict]]:
    """Train a frame tokenizer on pooled log-mel frames.

    The learning rate warms up linearly, then follows a cosine decay to a
    small floor.  Returns the trained model and a per-step metric curve.
    Raises on a non-finite loss rather than continuing silently.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != dsp.N_MELS:
        raise ValueError(f"frames must be (n, {dsp.N_MELS})")
    if frames.shape[0] < batch_size:
        batch_size = frames.shape[0]

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = MelFrameVqvae(config)
    data = model.normalize(torch.from_numpy(frames).float())
    opt = torch.optim.Adam(list(model.encoder.parameters())
                           + list(model.decoder.parameters()), lr=lr)
    warmup = min(100, max(steps // 10, 1))
    curve = []
    for step in range(steps):
        if step < warmup:
            scale = (step + 1) / warmup
        else:
            frac = (step - warmup) / max(steps - warmup - 1, 1)
            scale = 0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr * scale
        picks = rng.integers(0, data.shape[0], size=batch_size)
        batch = data[picks]
        if not bool(model.initialized):
            with torch.no_grad():
                model.init_codebooks_from(model.encode_latent(batch), rng)
        out = model(batch)
        if not torch.isfinite(out["loss"]):
            raise RuntimeError(f"non-finite loss at step {step}; aborting")
        opt.zero_grad()
        out["loss"].backward()
        opt.step()
        model.ema_update(out["z"].detach(), out["indices"], rng)
        if step % 25 == 0 or step == steps - 1:
            usage = float((model.ema_counts > 0.01).float().mean())
            curve.append({"step": step,
                          "recon_mse": float(out["recon_loss"].detach()),
                          "commit": float(out["commit_loss"].detach()),
                          "codebook_usage": usage})
    model.eval()
    return model, curve


# ---------------------------------------------------------------------------
# the numpy-facing codec
# ---------------------------------------------------------------------------

def encode_frames(model: MelFrameVqvae, mel: MelSpectrogram) -> np.ndarray:
    """Tokenize a mel spectrogram: (frames, codes_per_frame) 1-based ints."""
    if not bool(model.initialized):
        raise RuntimeError("codebooks were never initialized; train the "
                           "model before encoding")
    model.eval()
    with torch.no_grad():
        x = model.normalize(torch.from_numpy(mel.values).float())
        _, idx = model.quantize(model.encode_latent(x))
    return idx.numpy().astype(np.int64) + 1


def decode_tokens(model: MelFrameVqvae, tokens: np.ndarray) -> MelSpectrogram:
    """Reconstruct a log-mel spectrogram from frame tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != model.config.codes_per_frame:
        raise ValueError(f"tokens must be (frames, {model.config.codes_per_frame})")
    if tokens.min() < 1 or tokens.max() > model.config.codebook_size:
        raise ValueError("token index outside the codebook range")
    if not bool(model.initialized):
        raise RuntimeError("codebooks were never initialized; train the "
                           "model before decoding")
    model.eval()
    with torch.no_grad():
        idx = torch.from_numpy(tokens - 1)
        z_q = torch.stack([model.codebooks[f][idx[:, f]]
                           for f in range(idx.shape[1])], dim=1)
        frames = model.denormalize(model.decode_latent(z_q))
    return MelSpectrogram(frames.numpy().astype(np.float64))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_vqvae(path, model: MelFrameVqvae) -> None:
    torch.save({"format": _CKPT_FORMAT, "version": _CKPT_VERSION,
                "config": asdict(model.config),
                "state": model.state_dict()}, path)


def load_vqvae(path) -> MelFrameVqvae:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != _CKPT_FORMAT:
        raise ValueError(f"{path}: not a mel tokenizer checkpoint")
    if blob.get("version") != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    model = MelFrameVqvae(VqvaeConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    model.eval()
    return model
