"""Discretization of attribute tracks into token sequences.

Each attribute family has a token spec: D entries per token drawn from a
vocabulary of K indices (1-based).  Scalar tracks are binned linearly over a
fixed range; phonetic content is vector-quantized against a k-means codebook
fitted on MFCC features; the speaker is a single label repeated across the
sequence.  A `TokenizerManifest` freezes every choice (bin edges, codebook
vectors, speaker inventory) so token sequences are reproducible, and hashes
canonically so caches and checkpoints can detect mismatches.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from . import dsp
from .attributes import CONTENT_FRAME_RATE, N_MFCC, TRACK_FRAME_RATE, AttributeSet

MANIFEST_VERSION = 1

# family identifiers, in sequence order after the mel tokens
CONTENT, F0, LOUDNESS, SPEAKER, SNR, C50 = (
    "content", "f0", "loudness", "speaker", "snr", "c50")
ATTR_FAMILIES = (CONTENT, F0, LOUDNESS, SPEAKER, SNR, C50)


@dataclass(frozen=True)
class AttrTokenSpec:
    """Geometry and codec parameters for one attribute family."""

    name: str
    entries_per_token: int       # D: scalar bins grouped into one token
    vocab_size: int              # K: 1-based index range
    frame_rate: float            # entries per second before grouping
    kind: str                    # "linear" | "kmeans" | "categorical"
    lo: float = 0.0              # linear range, inclusive lower edge
    hi: float = 1.0              # linear range, upper edge
    unvoiced_bin: bool = False   # bin 1 decodes to 0.0 (silence convention)

    def __post_init__(self):
        if self.entries_per_token < 1 or self.vocab_size < 2:
            raise ValueError(f"{self.name}: degenerate token spec")
        if self.kind not in ("linear", "kmeans", "categorical"):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "linear" and not self.hi > self.lo:
            raise ValueError(f"{self.name}: empty value range")

    @property
    def bin_width(self) -> float:
        return (self.hi - self.lo) / self.vocab_size


def default_attr_specs(n_speakers: int) -> dict[str, AttrTokenSpec]:
    """Token specs for the six attribute families."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers for a categorical vocabulary")
    return {
        CONTENT: AttrTokenSpec(CONTENT, 2, 100, CONTENT_FRAME_RATE, "kmeans"),
        F0: AttrTokenSpec(F0, 4, 400, TRACK_FRAME_RATE, "linear",
                          lo=dsp.F0_MIN, hi=dsp.F0_MAX, unvoiced_bin=True),
        LOUDNESS: AttrTokenSpec(LOUDNESS, 4, 100, TRACK_FRAME_RATE, "linear",
                                lo=0.0, hi=1.0),
        SPEAKER: AttrTokenSpec(SPEAKER, 4, n_speakers, TRACK_FRAME_RATE,
                               "categorical"),
        SNR: AttrTokenSpec(SNR, 4, 128, TRACK_FRAME_RATE, "linear",
                           lo=-dsp.DB_CLAMP, hi=dsp.DB_CLAMP),
        C50: AttrTokenSpec(C50, 4, 128, TRACK_FRAME_RATE, "linear",
                           lo=-dsp.DB_CLAMP, hi=dsp.DB_CLAMP),
    }


@dataclass
class DiscreteTokenSequence:
    """A (tokens, entries-per-token) grid of 1-based indices for one family."""

    family: str
    tokens: np.ndarray           # (n_tokens, entries_per_token) int64
    orig_len: int | None = None  # pre-padding entry count, for exact inverse

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.size == 0:
            raise ValueError("token grid must be non-empty and 2-D")
        if np.min(self.tokens) < 1:
            raise ValueError("token indices are 1-based; found index < 1")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> np.ndarray:
        """Entries in time order, truncated to the original length."""
        out = self.tokens.reshape(-1)
        return out if self.orig_len is None else out[:self.orig_len]


def validate_sequence(seq: DiscreteTokenSequence, spec: AttrTokenSpec) -> None:
    """Check a sequence against its family spec; raises on any violation."""
    if seq.family != spec.name:
        raise ValueError(f"family mismatch: {seq.family!r} vs {spec.name!r}")
    if seq.tokens.shape[1] != spec.entries_per_token:
        raise ValueError(f"{spec.name}: expected {spec.entries_per_token} "
                         f"entries per token, got {seq.tokens.shape[1]}")
    if np.max(seq.tokens) > spec.vocab_size:
        raise ValueError(f"{spec.name}: index exceeds vocabulary "
                         f"size {spec.vocab_size}")


# ---------------------------------------------------------------------------
# linear scalar quantization
# ---------------------------------------------------------------------------

def quantize_linear(values: np.ndarray, spec: AttrTokenSpec) -> np.ndarray:
    """Map scalar values to 1-based bin indices; out-of-range values clamp."""
    values = np.asarray(values, dtype=np.float64)
    bins = np.floor((values - spec.lo) / spec.bin_width).astype(np.int64) + 1
    return np.clip(bins, 1, spec.vocab_size)


def dequantize_linear(bins: np.ndarray, spec: AttrTokenSpec) -> np.ndarray:
    """Map 1-based bin indices back to bin-center values.

    With `unvoiced_bin`, bin 1 is the silence code and decodes to 0.0.
    """
    bins = np.asarray(bins, dtype=np.int64)
    if np.min(bins) < 1 or np.max(bins) > spec.vocab_size:
        raise ValueError(f"{spec.name}: bin index outside [1, {spec.vocab_size}]")
    values = spec.lo + (bins - 0.5) * spec.bin_width
    if spec.unvoiced_bin:
        values = np.where(bins == 1, 0.0, values)
    return values


def _group_entries(entries: np.ndarray, d: int) -> tuple[np.ndarray, int]:
    """Reshape a flat entry sequence into (tokens, d), padding by repetition."""
    n = entries.shape[0]
    m = -(-n // d)  # ceil
    padded = np.concatenate([entries, np.repeat(entries[-1], m * d - n)])
    return padded.reshape(m, d), n


def _resample_track(track: np.ndarray, src_rate: float, dst_rate: float) -> np.ndarray:
    if abs(src_rate - dst_rate) < 1e-9:
        return track
    n_dst = max(int(round(track.shape[0] * dst_rate / src_rate)), 1)
    if track.shape[0] == 1:
        return np.repeat(track, n_dst)
    src_pos = np.linspace(0.0, 1.0, track.shape[0])
    dst_pos = np.linspace(0.0, 1.0, n_dst)
    return np.interp(dst_pos, src_pos, track)


def quantize_scalar_track(track: np.ndarray, spec: AttrTokenSpec,
                          src_rate: float | None = None) -> DiscreteTokenSequence:
    """Bin a scalar track and group it into tokens.

    If `src_rate` differs from the spec's frame rate the track is first
    linearly resampled (endpoints preserved).  The trailing token is padded
    by repeating the final entry; the original length is recorded so
    dequantization is exact.
    """
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 1 or track.size == 0:
        raise ValueError(f"{spec.name}: track must be non-empty and 1-D")
    if src_rate is not None:
        track = _resample_track(track, src_rate, spec.frame_rate)
    bins = quantize_linear(track, spec)
    tokens, orig_len = _group_entries(bins, spec.entries_per_token)
    return DiscreteTokenSequence(spec.name, tokens, orig_len)


def dequantize_scalar_track(seq: DiscreteTokenSequence,
                            spec: AttrTokenSpec) -> np.ndarray:
    """Invert `quantize_scalar_track` up to bin-center rounding."""
    validate_sequence(seq, spec)
    return dequantize_linear(seq.flat(), spec)


# ---------------------------------------------------------------------------
# content codebook (k-means over MFCC vectors)
# ---------------------------------------------------------------------------

@dataclass
class KMeansCodebook:
    """Fitted cluster centroids for content quantization."""

    centroids: np.ndarray        # (K, dim) float64
    fitted_on: str               # digest of the training features

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("codebook needs at least 2 centroids")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


def fit_content_codebook(features: np.ndarray, k: int = 100,
                         seed: int = 0) -> KMeansCodebook:
    """Fit a k-means codebook on pooled MFCC frames."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be (frames, coefficients)")
    distinct = np.unique(features, axis=0).shape[0]
    if distinct < k:
        raise ValueError(f"need at least {k} distinct feature vectors to fit "
                         f"{k} clusters, got {distinct}")
    km = KMeans(n_clusters=k, n_init=4, max_iter=300, random_state=seed)
    km.fit(features)
    digest = hashlib.sha256(np.ascontiguousarray(features).tobytes()).hexdigest()[:16]
    return KMeansCodebook(km.cluster_centers_.astype(np.float64), digest)


def nearest_centroid(features: np.ndarray, codebook: KMeansCodebook) -> np.ndarray:
    """1-based index of the closest centroid for each feature row."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; ||x||^2 is constant per row
    cross = features @ codebook.centroids.T
    c_norm = np.sum(codebook.centroids ** 2, axis=1)
    return np.argmin(c_norm[None, :] - 2.0 * cross, axis=1).astype(np.int64) + 1


def tokenize_content(features: np.ndarray, codebook: KMeansCodebook,
                     spec: AttrTokenSpec) -> DiscreteTokenSequence:
    """Vector-quantize MFCC frames and group them into content tokens."""
    if codebook.size != spec.vocab_size:
        raise ValueError(f"codebook size {codebook.size} != vocab {spec.vocab_size}")
    ids = nearest_centroid(features, codebook)
    tokens, orig_len = _group_entries(ids, spec.entries_per_token)
    return DiscreteTokenSequence(spec.name, tokens, orig_len)


def decode_content(seq: DiscreteTokenSequence, codebook: KMeansCodebook,
                   spec: AttrTokenSpec) -> np.ndarray:
    """Centroid feature vectors for a content token sequence."""
    validate_sequence(seq, spec)
    return codebook.centroids[seq.flat() - 1]


# ---------------------------------------------------------------------------
# speaker tokens
# ---------------------------------------------------------------------------

def tokenize_speaker(label: int, n_frames: int,
                     spec: AttrTokenSpec) -> DiscreteTokenSequence:
    """Repeat the utterance's speaker label across the token grid."""
    if not 1 <= label <= spec.vocab_size:
        raise ValueError(f"speaker label {label} outside [1, {spec.vocab_size}]")
    if n_frames < 1:
        raise ValueError("n_frames must be positive")
    m = -(-n_frames // spec.entries_per_token)
    tokens = np.full((m, spec.entries_per_token), label, dtype=np.int64)
    return DiscreteTokenSequence(spec.name, tokens, n_frames)


def decode_speaker(seq: DiscreteTokenSequence, spec: AttrTokenSpec) -> int:
    """Majority vote over all entries (robust to scattered prediction errors)."""
    validate_sequence(seq, spec)
    counts = np.bincount(seq.flat(), minlength=spec.vocab_size + 1)
    return int(np.argmax(counts))


# ---------------------------------------------------------------------------
# the tokenizer manifest
# ---------------------------------------------------------------------------

@dataclass
class TokenizerManifest:
    """Everything needed to reproduce a tokenization, hashable for caches."""

    specs: dict[str, AttrTokenSpec]
    codebook: KMeansCodebook
    speaker_names: dict[int, str]        # label -> display name
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        missing = [f for f in ATTR_FAMILIES if f not in self.specs]
        if missing:
            raise ValueError(f"manifest is missing attribute specs: {missing}")
        if self.specs[CONTENT].vocab_size != self.codebook.size:
            raise ValueError("content vocab size disagrees with the codebook")
        if self.specs[SPEAKER].vocab_size != len(self.speaker_names):
            raise ValueError("speaker vocab size disagrees with the inventory")

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_names)

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "specs": {
                name: {
                    "entries_per_token": s.entries_per_token,
                    "vocab_size": s.vocab_size,
                    "frame_rate": s.frame_rate,
                    "kind": s.kind,
                    "lo": s.lo,
                    "hi": s.hi,
                    "unvoiced_bin": s.unvoiced_bin,
                }
                for name, s in sorted(self.specs.items())
            },
            "codebook": {
                "centroids": self.codebook.centroids.tolist(),
                "fitted_on": self.codebook.fitted_on,
            },
            "speaker_names": {str(k): v for k, v in sorted(self.speaker_names.items())},
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "TokenizerManifest":
        payload = json.loads(text)
        if payload.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {payload.get('version')}")
        specs = {
            name: AttrTokenSpec(name=name, **{
                k: v for k, v in raw.items()
            })
            for name, raw in payload["specs"].items()
        }
        codebook = KMeansCodebook(np.array(payload["codebook"]["centroids"]),
                                  payload["codebook"]["fitted_on"])
        names = {int(k): v for k, v in payload["speaker_names"].items()}
        return cls(specs=specs, codebook=codebook, speaker_names=names)

    def digest(self) -> str:
        """sha256 of the canonical JSON form."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def tokenize_attributes(attrs: AttributeSet,
                        manifest: TokenizerManifest) -> dict[str, DiscreteTokenSequence]:
    """Tokenize a full attribute set into the six family sequences."""
    specs = manifest.specs
    n = attrs.n_frames
    return {
        CONTENT: tokenize_content(attrs.content, manifest.codebook, specs[CONTENT]),
        F0: quantize_scalar_track(attrs.f0, specs[F0]),
        LOUDNESS: quantize_scalar_track(attrs.loudness, specs[LOUDNESS]),
        SPEAKER: tokenize_speaker(attrs.speaker, n, specs[SPEAKER]),
        SNR: quantize_scalar_track(attrs.snr_db, specs[SNR]),
        C50: quantize_scalar_track(attrs.c50_db, specs[C50]),
    }
