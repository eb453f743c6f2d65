"""Token sequence layout and mask sampling.

One training example is a single token sequence: the vector-quantized mel
tokens first, then the six attribute families.  Masks are boolean flags over
that sequence (True = hidden from the encoder, predicted by the decoder).

Two sampling regimes drive training:

* coupled masking -- a ratio p ~ Uniform(0, 1) hides round(p * N) mel tokens
  and round((1 - p) * M_i) tokens of every attribute family, so examples
  smoothly interpolate between "mel visible, attributes hidden" and the
  reverse;
* all-or-nothing masking -- one whole stream (mel or attributes) is hidden,
  which is exactly how the model is used at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantizers import ATTR_FAMILIES, CONTENT, TokenizerManifest

MEL = "mel"


def round_half_up(x: float) -> int:
    """round(x) with ties going up, so masked counts are deterministic."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class FamilyGeometry:
    """Shape of one family's token grid within the combined sequence."""

    name: str
    n_tokens: int
    entries_per_token: int
    vocab_size: int

    def __post_init__(self):
        if self.n_tokens < 1 or self.entries_per_token < 1 or self.vocab_size < 2:
            raise ValueError(f"{self.name}: degenerate family geometry")


@dataclass(frozen=True)
class TokenLayout:
    """Deterministic ordering of families inside the combined sequence."""

    families: tuple[FamilyGeometry, ...]

    def __post_init__(self):
        names = [f.name for f in self.families]
        if len(set(names)) != len(names):
            raise ValueError("duplicate family names in layout")
        if names[0] != MEL:
            raise ValueError("mel tokens must come first in the layout")

    @classmethod
    def for_segment(cls, manifest: TokenizerManifest, n_mel_frames: int,
                    mel_entries: int, mel_vocab: int) -> "TokenLayout":
        """Layout for a segment of `n_mel_frames` mel frames.

        Attribute token counts follow from each family's frame rate relative
        to the 100 Hz mel grid and its grouping factor.
        """
        if n_mel_frames < 1:
            raise ValueError("n_mel_frames must be positive")
        fams = [FamilyGeometry(MEL, n_mel_frames, mel_entries, mel_vocab)]
        for name in ATTR_FAMILIES:
            spec = manifest.specs[name]
            entries = round_half_up(n_mel_frames * spec.frame_rate / 100.0)
            n_tokens = -(-entries // spec.entries_per_token)
            fams.append(FamilyGeometry(name, n_tokens, spec.entries_per_token,
                                       spec.vocab_size))
        return cls(tuple(fams))

    @property
    def total_tokens(self) -> int:
        return sum(f.n_tokens for f in self.families)

    @property
    def n_mel_tokens(self) -> int:
        return self.families[0].n_tokens

    @property
    def n_attr_tokens(self) -> int:
        return self.total_tokens - self.n_mel_tokens

    def family(self, name: str) -> FamilyGeometry:
        for f in self.families:
            if f.name == name:
                return f
        raise KeyError(name)

    def family_slice(self, name: str) -> slice:
        start = 0
        for f in self.families:
            if f.name == name:
                return slice(start, start + f.n_tokens)
            start += f.n_tokens
        raise KeyError(name)


@dataclass
class MaskPattern:
    """Boolean mask over the combined token sequence; True = hidden."""

    flags: np.ndarray
    ratio: float                 # the p that generated this pattern

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.ndim != 1:
            raise ValueError("mask flags must be 1-D")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("mask ratio must lie in [0, 1]")

    @property
    def n_masked(self) -> int:
        return int(np.sum(self.flags))


def coupled_mask_counts(layout: TokenLayout, ratio: float) -> dict[str, int]:
    """Deterministic per-family masked counts for a coupling ratio."""
    counts = {MEL: round_half_up(ratio * layout.n_mel_tokens)}
    for name in ATTR_FAMILIES:
        counts[name] = round_half_up((1.0 - ratio) * layout.family(name).n_tokens)
    return counts


def sample_coupled_mask(layout: TokenLayout, rng: np.random.Generator,
                        ratio: float | None = None) -> MaskPattern:
    """Draw a coupled mask; `ratio` overrides the uniform draw when given."""
    p = float(rng.uniform()) if ratio is None else float(ratio)
    if not 0.0 <= p <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    counts = coupled_mask_counts(layout, p)
    flags = np.zeros(layout.total_tokens, dtype=bool)
    for fam in layout.families:
        k = counts[fam.name]
        if k == 0:
            continue
        sl = layout.family_slice(fam.name)
        picks = rng.choice(fam.n_tokens, size=k, replace=False)
        flags[sl.start + picks] = True
    return MaskPattern(flags, p)


def all_or_nothing_mask(layout: TokenLayout, hide: str) -> MaskPattern:
    """Hide one whole stream: `hide` is "mel" or "attributes"."""
    flags = np.zeros(layout.total_tokens, dtype=bool)
    if hide == MEL:
        flags[layout.family_slice(MEL)] = True
        ratio = 1.0
    elif hide == "attributes":
        flags[layout.family_slice(MEL).stop:] = True
        ratio = 0.0
    else:
        raise ValueError(f"hide must be 'mel' or 'attributes', got {hide!r}")
    return MaskPattern(flags, ratio)
