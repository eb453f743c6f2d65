"""Bidirectional masked autoencoder over mel and attribute tokens.

The combined token sequence (mel tokens first, then the six attribute
families) is embedded family-by-family: each token is a tuple of D discrete
entries, each entry indexes its own embedding table, and the concatenated
entry embeddings form the token vector.  Learned positional and family-type
embeddings are added on top.

The encoder is a stack of pre-layer-norm self-attention blocks applied to
the *visible* tokens only.  The decoder receives the full-length sequence --
encoder outputs scattered back to their positions and a shared learned mask
token everywhere else, plus decoder-side positional and type embeddings --
and a zero-initialized linear head per family predicts the D-entry
distribution of every token.  Cross-entropy is computed on masked entries
only, so the model learns to fill in whichever stream is hidden.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .masking import MEL, TokenLayout

SMOOTH_FAMILIES = ("f0", "loudness", "snr", "c50")


@dataclass(frozen=True)
class MaeConfig:
    """Transformer hyperparameters."""

    width: int = 256
    encoder_blocks: int = 12
    decoder_blocks: int = 12
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by the head count")
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("need at least one block on each side")

    @classmethod
    def tiny(cls) -> "MaeConfig":
        """Desk-scale configuration for fast overfitting experiments."""
        return cls(width=32, encoder_blocks=2, decoder_blocks=2, heads=4)


def sinusoidal_positions(n: int, width: int) -> torch.Tensor:
    """Classic fixed sin/cos position table, used as the learnable init."""
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float64)
                    * (-math.log(10000.0) / width))
    table = torch.zeros(n, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div[:table[:, 1::2].shape[1]])
    return table.float()


def smooth_table_init(vocab: int, width: int, generator: torch.Generator,
                      n_terms: int = 4, scale: float = 0.02) -> torch.Tensor:
    """Random low-order cosine series over the bin index.

    Gives neighbouring bins of an ordered vocabulary (pitch, loudness, dB
    scales) neighbouring embeddings at initialization, so edits that land on
    rarely-trained bins still decode gracefully.  Fully learnable afterwards.
    """
    k = torch.arange(vocab, dtype=torch.float32).unsqueeze(1)
    m = torch.arange(n_terms, dtype=torch.float32).unsqueeze(0)
    basis = torch.cos(math.pi * m * (k + 0.5) / vocab)          # (vocab, terms)
    coeff = torch.randn(n_terms, width, generator=generator) * scale
    # normalize so per-coordinate std matches `scale`
    norm = math.sqrt(float((basis ** 2).mean(dim=0).sum()))
    return basis @ coeff / norm


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, x: torch.Tensor,
                key_padding: torch.Tensor | None = None) -> torch.Tensor:
        b, t, _ = x.shape
        shape = (b, t, self.heads, self.head_dim)
        q = self.query(x).view(shape).transpose(1, 2)
        k = self.key(x).view(shape).transpose(1, 2)
        v = self.value(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding is not None:
            scores = scores.masked_fill(
                key_padding[:, None, None, :], torch.finfo(scores.dtype).min)
        attn = scores.softmax(dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        return self.out(ctx)


class TransformerBlock(nn.Module):
    """Pre-layer-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, width: int, heads: int, mlp_ratio: float, dropout: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width)
        self.attn = MultiHeadSelfAttention(width, heads)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(),
                                 nn.Dropout(dropout), nn.Linear(hidden, width))

    def forward(self, x: torch.Tensor,
                key_padding: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_padding)
        return x + self.mlp(self.norm2(x))


class MaskedTokenModel(nn.Module):
    """The masked autoencoder, bound to a fixed token layout."""

    def __init__(self, config: MaeConfig, layout: TokenLayout,
                 smooth_families: tuple[str, ...] = SMOOTH_FAMILIES,
                 seed: int = 0):
        super().__init__()
        self.config = config
        self.layout = layout
        gen = torch.Generator().manual_seed(seed)

        self.entry_embeds = nn.ModuleDict()
        for fam in layout.families:
            if config.width % fam.entries_per_token != 0:
                raise ValueError(
                    f"width {config.width} not divisible by {fam.name}'s "
                    f"{fam.entries_per_token} entries per token")
            slot_width = config.width // fam.entries_per_token
            tables = nn.ModuleList()
            for _ in range(fam.entries_per_token):
                emb = nn.Embedding(fam.vocab_size, slot_width)
                if fam.name in smooth_families:
                    emb.weight.data = smooth_table_init(
                        fam.vocab_size, slot_width, gen)
                else:
                    nn.init.normal_(emb.weight, std=0.02, generator=gen)
                tables.append(emb)
            self.entry_embeds[fam.name] = tables

        total = layout.total_tokens
        self.enc_pos = nn.Parameter(sinusoidal_positions(total, config.width))
        self.dec_pos = nn.Parameter(sinusoidal_positions(total, config.width))
        self.type_embed = nn.Parameter(
            torch.randn(len(layout.families), config.width, generator=gen) * 0.02)
        self.mask_token = nn.Parameter(
            torch.randn(config.width, generator=gen) * 0.02)
        family_id = torch.cat([
            torch.full((fam.n_tokens,), i, dtype=torch.long)
            for i, fam in enumerate(layout.families)])
        self.register_buffer("family_id", family_id)

        self.encoder = nn.ModuleList(
            TransformerBlock(config.width, config.heads, config.mlp_ratio,
                             config.dropout)
            for _ in range(config.encoder_blocks))
        self.enc_norm = nn.LayerNorm(config.width)
        self.decoder = nn.ModuleList(
            TransformerBlock(config.width, config.heads, config.mlp_ratio,
                             config.dropout)
            for _ in range(config.decoder_blocks))
        self.dec_norm = nn.LayerNorm(config.width)

        # zero-initialized heads make the step-0 loss exactly the uniform
        # baseline sum_f w_f * ln(K_f), a property the trainer tests pin
        self.heads = nn.ModuleDict()
        for fam in layout.families:
            head = nn.Linear(config.width,
                             fam.entries_per_token * fam.vocab_size)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.heads[fam.name] = head

    # -- embedding ----------------------------------------------------------

    def embed_tokens(self, tokens: dict[str, torch.Tensor]) -> torch.Tensor:
        """Token dict -> (B, L, width) with positions/types *not* yet added."""
        parts = []
        batch = None
        for fam in self.layout.families:
            grid = tokens[fam.name]
            if grid.ndim != 3 or grid.shape[1] != fam.n_tokens \
                    or grid.shape[2] != fam.entries_per_token:
                raise ValueError(
                    f"{fam.name}: expected (B, {fam.n_tokens}, "
                    f"{fam.entries_per_token}), got {tuple(grid.shape)}")
            if batch is None:
                batch = grid.shape[0]
            elif grid.shape[0] != batch:
                raise ValueError("inconsistent batch size across families")
            if int(grid.min()) < 1 or int(grid.max()) > fam.vocab_size:
                raise ValueError(f"{fam.name}: token index outside "
                                 f"[1, {fam.vocab_size}]")
            tables = self.entry_embeds[fam.name]
            slots = [tables[d](grid[:, :, d] - 1)
                     for d in range(fam.entries_per_token)]
            parts.append(torch.cat(slots, dim=-1))
        return torch.cat(parts, dim=1)

    # -- the masked autoencoding pass ----------------------------------------

    def forward(self, tokens: dict[str, torch.Tensor], mask: torch.Tensor,
                visible_order: torch.Tensor | None = None
                ) -> dict[str, torch.Tensor]:
        """Predict every token's entry distributions given the visible set.

        `mask` is (B, L) boolean, True = hidden.  `visible_order`, when
        given, is a (B, V) index tensor listing each example's visible
        positions in the order they should be packed for the encoder (any
        permutation gives identical logits; the default is ascending).
        """
        x = self.embed_tokens(tokens)
        b, total, width = x.shape
        if mask.shape != (b, total):
            raise ValueError(f"mask must be (B, {total}), got {tuple(mask.shape)}")
        mask = mask.bool()
        n_visible = (~mask).sum(dim=1)
        if int(n_visible.min()) == 0:
            raise ValueError("every example needs at least one visible token")

        type_full = self.type_embed[self.family_id]          # (L, W)
        x = x + self.enc_pos.unsqueeze(0) + type_full.unsqueeze(0)

        # pack visible tokens, padding ragged rows
        v_max = int(n_visible.max())
        pad = torch.zeros(b, v_max, dtype=torch.bool)
        gather_idx = torch.zeros(b, v_max, dtype=torch.long)
        for i in range(b):
            if visible_order is None:
                vis = torch.nonzero(~mask[i]).squeeze(1)
            else:
                vis = visible_order[i].long()
                if vis.shape[0] != int(n_visible[i]) or bool(mask[i, vis].any()):
                    raise ValueError("visible_order inconsistent with the mask")
            v = vis.shape[0]
            gather_idx[i, :v] = vis
            pad[i, v:] = True
        enc_in = torch.gather(x, 1, gather_idx.unsqueeze(-1).expand(-1, -1, width))
        enc_in = enc_in * (~pad).unsqueeze(-1)
        h = enc_in
        for block in self.encoder:
            h = block(h, key_padding=pad)
        h = self.enc_norm(h)

        # scatter encoder outputs back; masked slots keep the mask token and
        # padded rows are routed to a discard slot at the end
        buf = self.mask_token.repeat(b, total + 1, 1)
        scatter_idx = gather_idx.masked_fill(pad, total)
        buf = buf.scatter(1, scatter_idx.unsqueeze(-1).expand(-1, -1, width), h)
        dec_in = buf[:, :total]
        dec_in = dec_in + self.dec_pos.unsqueeze(0) + type_full.unsqueeze(0)
        g = dec_in
        for block in self.decoder:
            g = block(g)
        g = self.dec_norm(g)

        logits = {}
        for fam in self.layout.families:
            sl = self.layout.family_slice(fam.name)
            raw = self.heads[fam.name](g[:, sl])
            logits[fam.name] = raw.view(b, fam.n_tokens, fam.entries_per_token,
                                        fam.vocab_size)
        return logits

    # -- losses and decoding --------------------------------------------------

    def loss_on_masked(self, logits: dict[str, torch.Tensor],
                       tokens: dict[str, torch.Tensor], mask: torch.Tensor
                       ) -> tuple[torch.Tensor, dict[str, float]]:
        """Mean cross-entropy over masked entries, plus a per-family report."""
        mask = mask.bool()
        if not bool(mask.any()):
            raise ValueError("mask hides nothing; no loss support")
        total_sum = None
        total_count = 0
        per_family = {}
        for fam in self.layout.families:
            sl = self.layout.family_slice(fam.name)
            fam_mask = mask[:, sl]                          # (B, M)
            if not bool(fam_mask.any()):
                continue
            fl = logits[fam.name][fam_mask]                 # (n, D, K)
            tg = tokens[fam.name][fam_mask] - 1             # (n, D)
            ce = F.cross_entropy(fl.reshape(-1, fam.vocab_size),
                                 tg.reshape(-1), reduction="sum")
            count = tg.numel()
            per_family[fam.name] = float(ce.detach()) / count
            total_sum = ce if total_sum is None else total_sum + ce
            total_count += count
        return total_sum / total_count, per_family

    @staticmethod
    def predict_tokens(logits: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
        """Greedy 1-based decode of every family (ties go to the lower index)."""
        return {name: (fl.detach().numpy().argmax(axis=-1) + 1).astype(np.int64)
                for name, fl in logits.items()}


def masked_accuracy(model: MaskedTokenModel, tokens: dict[str, torch.Tensor],
                    mask: torch.Tensor) -> dict[str, float]:
    """Exact-match rate of masked entries, per family and overall."""
    model.eval()
    with torch.no_grad():
        logits = model(tokens, mask)
    pred = model.predict_tokens(logits)
    mask = mask.bool()
    hits, counts = {}, {}
    for fam in model.layout.families:
        sl = model.layout.family_slice(fam.name)
        fam_mask = mask[:, sl].numpy()
        if not fam_mask.any():
            continue
        want = tokens[fam.name].numpy()[fam_mask]
        got = pred[fam.name][fam_mask]
        hits[fam.name] = int((want == got).sum())
        counts[fam.name] = want.size
    out = {name: hits[name] / counts[name] for name in hits}
    out["overall"] = sum(hits.values()) / max(sum(counts.values()), 1)
    return out
