"""Speech attribute extraction.

Six attributes describe an utterance alongside its mel spectrogram:

1. phonetic content -- MFCC vectors on a 50 Hz grid (later vector-quantized)
2. fundamental frequency in Hz, 0 for unvoiced, on the mel frame grid
3. loudness -- per-frame RMS level on the mel frame grid
4. speaker -- a single integer label for the whole utterance
5. signal-to-noise ratio in dB, a constant track describing the degradation
6. clarity (C50) in dB, a constant track describing the room response

Content, pitch, and loudness are computed from the clean signal when one is
available; SNR and clarity come from degradation metadata or measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from . import dsp
from .dsp import Waveform

N_MFCC = 13
CONTENT_HOP = 320           # 20 ms -> 50 Hz content grid
CONTENT_FRAME_RATE = dsp.SAMPLE_RATE / CONTENT_HOP
TRACK_FRAME_RATE = dsp.SAMPLE_RATE / dsp.HOP_SIZE


@dataclass
class AttributeSet:
    """Continuous attribute tracks for one utterance or segment."""

    content: np.ndarray          # (frames_50hz, N_MFCC) float
    f0: np.ndarray               # (frames_100hz,) Hz, 0 = unvoiced
    loudness: np.ndarray         # (frames_100hz,) linear RMS
    speaker: int                 # 1-based label
    snr_db: np.ndarray           # (frames_100hz,) dB
    c50_db: np.ndarray           # (frames_100hz,) dB

    def __post_init__(self):
        self.content = np.atleast_2d(np.asarray(self.content, dtype=np.float64))
        for name in ("f0", "loudness", "snr_db", "c50_db"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.content.shape[1] != N_MFCC:
            raise ValueError(f"content must have {N_MFCC} coefficients per frame")
        n = self.f0.shape[0]
        for name in ("loudness", "snr_db", "c50_db"):
            track = getattr(self, name)
            if track.ndim != 1 or track.shape[0] != n:
                raise ValueError(f"{name} track length {track.shape} != f0 length {n}")
        if not (np.all(self.f0 >= 0.0) and np.all(np.isfinite(self.f0))):
            raise ValueError("f0 track must be finite and non-negative")
        if not np.all(self.loudness >= 0.0):
            raise ValueError("loudness track must be non-negative")
        if int(self.speaker) < 1:
            raise ValueError("speaker label must be a positive integer")
        self.speaker = int(self.speaker)

    @property
    def n_frames(self) -> int:
        return self.f0.shape[0]

    def copy(self) -> "AttributeSet":
        return AttributeSet(self.content.copy(), self.f0.copy(),
                            self.loudness.copy(), self.speaker,
                            self.snr_db.copy(), self.c50_db.copy())


def mfcc_features(wav: Waveform, n_mfcc: int = N_MFCC,
                  hop: int = CONTENT_HOP) -> np.ndarray:
    """MFCC matrix on the content grid, shape (frames, n_mfcc).

    Log-mel magnitudes (the shared 128-band analysis, but at the content hop)
    followed by an orthonormal DCT-II across bands, keeping the first
    `n_mfcc` coefficients.
    """
    mag = dsp.stft_magnitude(wav.samples, dsp.WINDOW_SIZE, hop)
    mel = mag @ dsp.mel_filterbank().T
    log_mel = np.log(np.maximum(mel, dsp.LOG_FLOOR))
    return dct(log_mel, type=2, norm="ortho", axis=1)[:, :n_mfcc]


def measure_snr(clean: Waveform, degraded: Waveform) -> float:
    """SNR of `degraded` against `clean` in dB, clamped to +-60.

    The residual is degraded - clean, so this matches the mixing gain used
    by `dsp.mix_at_snr` exactly.
    """
    x = clean.samples
    y = degraded.samples
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    p_clean = float(np.mean(x * x))
    if p_clean <= 0.0:
        raise ValueError("clean signal has zero power")
    resid = y - x
    p_resid = float(np.mean(resid * resid))
    if p_resid <= 1e-12 * p_clean:
        return dsp.DB_CLAMP
    return float(np.clip(10.0 * np.log10(p_clean / p_resid),
                         -dsp.DB_CLAMP, dsp.DB_CLAMP))


def extract_attributes(wav: Waveform, speaker: int,
                       clean: Waveform | None = None,
                       snr_db: float | None = None,
                       c50_db: float | None = None) -> AttributeSet:
    """Compute the six-attribute description of a (possibly degraded) signal.

    Content, pitch, and loudness are measured on `clean` when given (the
    degradation should not contaminate them), otherwise on `wav` itself.
    `snr_db` / `c50_db` default to the +60 dB clamp, i.e. "no degradation";
    pass the known or measured values for degraded material.
    """
    source = clean if clean is not None else wav
    if clean is not None and len(clean) != len(wav):
        raise ValueError("clean and degraded signals must have equal length")
    content = mfcc_features(source)
    f0 = dsp.estimate_f0_acf(source)
    loudness = dsp.rms_loudness(source)
    n = f0.shape[0]
    snr = dsp.DB_CLAMP if snr_db is None else float(np.clip(snr_db, -dsp.DB_CLAMP, dsp.DB_CLAMP))
    c50 = dsp.DB_CLAMP if c50_db is None else float(np.clip(c50_db, -dsp.DB_CLAMP, dsp.DB_CLAMP))
    return AttributeSet(content=content, f0=f0, loudness=loudness,
                        speaker=speaker,
                        snr_db=np.full(n, snr), c50_db=np.full(n, c50))


def save_attributes(path, attrs: AttributeSet) -> None:
    """Persist an attribute set as an .npz archive."""
    np.savez(path, content=attrs.content, f0=attrs.f0,
             loudness=attrs.loudness, speaker=np.int64(attrs.speaker),
             snr_db=attrs.snr_db, c50_db=attrs.c50_db)


def load_attributes(path) -> AttributeSet:
    """Load an attribute set written by `save_attributes`."""
    with np.load(path) as z:
        return AttributeSet(content=z["content"], f0=z["f0"],
                            loudness=z["loudness"], speaker=int(z["speaker"]),
                            snr_db=z["snr_db"], c50_db=z["c50_db"])
