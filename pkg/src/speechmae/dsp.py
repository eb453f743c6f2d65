"""Core signal processing: spectrograms, pitch, degradations, and metrics.

Everything operates at a fixed 16 kHz sample rate with a shared framing
convention: reflect-padding of (window - hop) / 2 samples on each side, so a
signal of n samples (n a multiple of the hop) yields exactly n / hop frames
and frame t is centred at (t + 0.5) * hop.  The mel analysis, loudness,
and pitch tracks therefore all live on the same time grid.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
WINDOW_SIZE = 1024          # 64 ms at 16 kHz
HOP_SIZE = 160              # 10 ms at 16 kHz
N_MELS = 128
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-5            # floor applied before the natural log
DB_CLAMP = 60.0             # clamp for SNR-like ratio metrics, in dB
C50_EARLY_SECONDS = 0.050   # early-energy window for clarity measurement

F0_MIN = 50.0
F0_MAX = 550.0
VOICING_THRESHOLD = 0.5     # normalized autocorrelation peak height

_EPS = 1e-12


# ---------------------------------------------------------------------------
# container types
# ---------------------------------------------------------------------------

@dataclass
class Waveform:
    """Mono PCM audio in float64, nominally within [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class MelSpectrogram:
    """Natural-log mel magnitudes, shape (frames, bands)."""

    values: np.ndarray
    hop_size: int = HOP_SIZE
    window_size: int = WINDOW_SIZE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mel spectrogram must be 2-D (frames, bands)")
        if self.values.shape[1] != N_MELS:
            raise ValueError(f"expected {N_MELS} mel bands, got {self.values.shape[1]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def frame_rate(self) -> float:
        return SAMPLE_RATE / self.hop_size


@dataclass
class ImpulseResponse:
    """A room impulse response at the working sample rate."""

    taps: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or self.taps.size == 0:
            raise ValueError("impulse response must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("impulse response contains non-finite taps")
        if not np.any(self.taps != 0.0):
            raise ValueError("impulse response is all zeros")


# ---------------------------------------------------------------------------
# framing and spectral analysis
# ---------------------------------------------------------------------------

def frame_signal(samples: np.ndarray, window: int = WINDOW_SIZE,
                 hop: int = HOP_SIZE) -> np.ndarray:
    """Slice a signal into overlapping frames, shape (n_frames, window).

    The signal is reflect-padded by (window - hop) / 2 on each side so the
    frame count is (n - hop) // hop + 1 == n // hop when hop divides n.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < window:
        raise ValueError(
            f"signal too short to frame: {samples.size} samples < window {window}")
    pad = (window - hop) // 2
    padded = np.pad(samples, pad, mode="reflect")
    n_frames = (padded.size - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def _hann(window: int) -> np.ndarray:
    # periodic Hann, the usual STFT analysis window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)


def stft_magnitude(samples: np.ndarray, window: int = WINDOW_SIZE,
                   hop: int = HOP_SIZE) -> np.ndarray:
    """Magnitude STFT with a Hann window, shape (frames, window // 2 + 1)."""
    frames = frame_signal(samples, window, hop)
    return np.abs(np.fft.rfft(frames * _hann(window), axis=1))


def _stft_complex(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    frames = frame_signal(samples, window, hop)
    return np.fft.rfft(frames * _hann(window), axis=1)


def _istft(spec: np.ndarray, window: int, hop: int, length: int) -> np.ndarray:
    """Overlap-add inverse of `_stft_complex`, cropped back to `length`."""
    win = _hann(window)
    frames = np.fft.irfft(spec, n=window, axis=1) * win
    pad = (window - hop) // 2
    total = hop * (spec.shape[0] - 1) + window
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = win * win
    for t in range(spec.shape[0]):
        start = t * hop
        out[start:start + window] += frames[t]
        norm[start:start + window] += win_sq
    out = out / np.maximum(norm, 1e-10)
    return out[pad:pad + length]


def mel_filterbank(n_mels: int = N_MELS, window: int = WINDOW_SIZE,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Triangular mel filterbank with unit-peak filters, shape (n_mels, bins)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = window // 2 + 1
    bin_freqs = np.arange(n_bins) * SAMPLE_RATE / window
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (bin_freqs - lo) / max(mid - lo, _EPS)
        fall = (hi - bin_freqs) / max(hi - mid, _EPS)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


_MEL_FB_CACHE: dict[tuple, np.ndarray] = {}


def _cached_filterbank(window: int) -> np.ndarray:
    key = (N_MELS, window, MEL_FMIN, MEL_FMAX)
    if key not in _MEL_FB_CACHE:
        _MEL_FB_CACHE[key] = mel_filterbank(N_MELS, window, MEL_FMIN, MEL_FMAX)
    return _MEL_FB_CACHE[key]


def mel_spectrogram(wav: Waveform, window: int = WINDOW_SIZE,
                    hop: int = HOP_SIZE) -> MelSpectrogram:
    """Natural-log mel magnitude spectrogram on the shared frame grid."""
    mag = stft_magnitude(wav.samples, window, hop)
    mel = mag @ _cached_filterbank(window).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), hop, window)


def griffin_lim_invert(mel: MelSpectrogram, n_iters: int = 60, seed: int = 0,
                       init_phase: np.ndarray | None = None) -> Waveform:
    """Invert a log-mel spectrogram to a waveform.

    The mel magnitudes are lifted back to the linear-frequency grid with the
    filterbank pseudo-inverse, then Griffin-Lim refines the phase.  When
    `init_phase` (complex or angle array matching the linear STFT shape) is
    given it seeds the iteration -- passing the phase of the signal being
    edited keeps the output time-aligned with it.
    """
    if n_iters < 0:
        raise ValueError("n_iters must be >= 0")
    window, hop = mel.window_size, mel.hop_size
    fb = _cached_filterbank(window)
    mel_mag = np.exp(mel.values)
    lin_mag = np.clip(mel_mag @ np.linalg.pinv(fb).T, 0.0, None)

    length = mel.n_frames * hop
    if init_phase is not None:
        init_phase = np.asarray(init_phase)
        if init_phase.shape != lin_mag.shape:
            raise ValueError(
                f"init_phase shape {init_phase.shape} != STFT shape {lin_mag.shape}")
        phase = np.angle(init_phase) if np.iscomplexobj(init_phase) else init_phase.astype(np.float64)
    else:
        rng = np.random.default_rng(seed)
        phase = rng.uniform(-np.pi, np.pi, size=lin_mag.shape)

    spec = lin_mag * np.exp(1j * phase)
    for _ in range(n_iters):
        x = _istft(spec, window, hop, length)
        rebuilt = _stft_complex(x, window, hop)
        spec = lin_mag * np.exp(1j * np.angle(rebuilt))
    out = _istft(spec, window, hop, length)
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out / peak
    return Waveform(out)


# ---------------------------------------------------------------------------
# frame-level attribute oracles
# ---------------------------------------------------------------------------

def rms_loudness(wav: Waveform, window: int = WINDOW_SIZE,
                 hop: int = HOP_SIZE) -> np.ndarray:
    """Per-frame RMS level on the shared frame grid, shape (frames,)."""
    frames = frame_signal(wav.samples, window, hop)
    return np.sqrt(np.mean(frames * frames, axis=1))


def estimate_f0_acf(wav: Waveform, fmin: float = F0_MIN, fmax: float = F0_MAX,
                    window: int = WINDOW_SIZE, hop: int = HOP_SIZE,
                    voicing_threshold: float = VOICING_THRESHOLD) -> np.ndarray:
    """Fundamental-frequency track from normalized autocorrelation.

    Per frame: the cross-correlation at each candidate lag is normalized by
    the energies of the two segments it compares, so a perfectly periodic
    frame peaks at ~1.0 regardless of lag.  Frames whose best peak falls
    below `voicing_threshold` (or that are near-silent) are reported as 0 Hz.
    Peak positions are refined by parabolic interpolation, and an octave
    guard prefers the shortest lag whose peak is close to the global best.
    """
    frames = frame_signal(wav.samples, window, hop)
    n_frames = frames.shape[0]
    lag_min = int(np.floor(SAMPLE_RATE / fmax))
    lag_max = int(np.ceil(SAMPLE_RATE / fmin))
    # scan a slightly wider range so peaks at the range edges are still
    # interior local maxima; candidates outside [lag_min, lag_max] are dropped
    scan_lo = max(lag_min - 2, 2)
    scan_hi = lag_max + 2
    if scan_hi + 1 >= window:
        raise ValueError("fmin too low for the analysis window")

    # full autocorrelation of every frame via FFT
    nfft = int(2 ** np.ceil(np.log2(2 * window)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :window]

    # energies of the leading / trailing sub-segments for every lag
    sq = frames * frames
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(sq, axis=1)], axis=1)
    total = csum[:, -1]

    f0 = np.zeros(n_frames)
    silent = np.sqrt(total / window) < 1e-5
    lags = np.arange(scan_lo, scan_hi + 1)
    in_range = (lags >= lag_min) & (lags <= lag_max)
    for t in range(n_frames):
        if silent[t]:
            continue
        e_head = csum[t, window - lags]                 # sum x[0 .. window-lag)
        e_tail = total[t] - csum[t, lags]               # sum x[lag .. window)
        nccf = acf[t, lags] / np.sqrt(e_head * e_tail + _EPS)
        best = float(np.max(nccf[in_range]))
        if best < voicing_threshold:
            continue
        # local maxima close enough to the global best; take the shortest lag
        interior = (nccf[1:-1] >= nccf[:-2]) & (nccf[1:-1] >= nccf[2:])
        strong = interior & (nccf[1:-1] >= 0.9 * best) & in_range[1:-1]
        if not np.any(strong):
            continue
        k = int(np.argmax(strong)) + 1                   # first strong peak
        lag = lags[k]
        # parabolic refinement around the integer lag
        a, b, c = nccf[k - 1], nccf[k], nccf[k + 1]
        denom = a - 2.0 * b + c
        delta = 0.0 if abs(denom) < _EPS else 0.5 * (a - c) / denom
        delta = float(np.clip(delta, -0.5, 0.5))
        f0[t] = float(np.clip(SAMPLE_RATE / (lag + delta), fmin, fmax))
    return f0


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Scale `noise` so the mixture has the requested SNR, then add it.

    The noise is looped or cropped to the clean length first.  Raises on
    silent inputs, where the SNR is undefined.
    """
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    x = clean.samples
    n = noise.samples
    if n.size < x.size:
        reps = int(np.ceil(x.size / n.size))
        n = np.tile(n, reps)
    n = n[:x.size]
    p_clean = float(np.mean(x * x))
    p_noise = float(np.mean(n * n))
    if p_clean <= 0.0 or p_noise <= 0.0:
        raise ValueError("degenerate SNR: clean or noise signal has zero power")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(x + gain * n)


def apply_reverb(wav: Waveform, rir: ImpulseResponse) -> Waveform:
    """Convolve with a room impulse response, cropped to the input length."""
    out = np.convolve(wav.samples, rir.taps)[:wav.samples.size]
    return Waveform(out)


def synth_rir(c50_db: float, duration: float = 0.4, seed: int = 0) -> ImpulseResponse:
    """Synthesize an exponentially decaying noise IR with an exact C50.

    The decay constant is solved from the target early/late energy ratio of
    the continuous envelope, then the late taps are rescaled so the sampled
    impulse response meets the target to machine precision.
    """
    if not -DB_CLAMP <= c50_db <= DB_CLAMP:
        raise ValueError(f"c50_db must lie in [-{DB_CLAMP}, {DB_CLAMP}]")
    n = int(round(duration * SAMPLE_RATE))
    n_early = int(round(C50_EARLY_SECONDS * SAMPLE_RATE))
    if n <= n_early:
        raise ValueError("duration too short: the IR has no late part to shape")
    ratio = 10.0 ** (c50_db / 10.0)
    # amplitude envelope e^(-t/tau) has energy envelope e^(-2t/tau); solving
    # early/late = ratio for the continuous envelope gives this tau
    tau = 2.0 * C50_EARLY_SECONDS / np.log1p(ratio)
    t = np.arange(n) / SAMPLE_RATE
    rng = np.random.default_rng(seed)
    taps = rng.standard_normal(n) * np.exp(-t / tau)
    taps[0] = 1.0                                  # direct sound pins the onset
    early = float(np.sum(taps[:n_early] ** 2))
    late = float(np.sum(taps[n_early:] ** 2))
    taps[n_early:] *= np.sqrt(early / (late * ratio))
    return ImpulseResponse(taps / np.max(np.abs(taps)))


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def measure_c50(rir: ImpulseResponse) -> float:
    """Clarity index: early(50 ms)-to-late energy ratio in dB, clamped +-60.

    The first nonzero tap defines the direct-sound onset.
    """
    taps = rir.taps
    nonzero = np.flatnonzero(np.abs(taps) > 1e-8 * np.max(np.abs(taps)))
    onset = int(nonzero[0])
    n_early = int(round(C50_EARLY_SECONDS * rir.sample_rate))
    early = float(np.sum(taps[onset:onset + n_early] ** 2))
    late = float(np.sum(taps[onset + n_early:] ** 2))
    if late <= 0.0:
        return DB_CLAMP
    if early <= 0.0:
        return -DB_CLAMP
    return float(np.clip(10.0 * np.log10(early / late), -DB_CLAMP, DB_CLAMP))


def si_sdr(estimate: Waveform | np.ndarray, reference: Waveform | np.ndarray) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, clamped to +-60."""
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=np.float64)
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= 0.0:
        raise ValueError("reference signal has zero energy")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    residual = est - target
    p_target = float(np.dot(target, target))
    p_residual = float(np.dot(residual, residual))
    if p_residual <= _EPS * p_target:
        return DB_CLAMP
    if p_target <= 0.0:
        return -DB_CLAMP
    return float(np.clip(10.0 * np.log10(p_target / p_residual), -DB_CLAMP, DB_CLAMP))


_LN_TO_DB = 20.0 / np.log(10.0)  # natural-log magnitude difference -> dB


def log_spectral_distance(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """RMS difference between two log-mel spectrograms of equal shape, in dB."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    diff = (a.values - b.values) * _LN_TO_DB
    return float(np.sqrt(np.mean(diff * diff)))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a mono 16-bit 16 kHz PCM WAV file."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        if f.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz")
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples)


def write_wav(path, wav: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM, clipping to [-1, 1]."""
    pcm = np.clip(wav.samples, -1.0, 1.0)
    ints = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wav.sample_rate)
        f.writeframes(ints.tobytes())


_MEL_MAGIC = b"MELS"
_MEL_VERSION = 1


def save_mel(path, mel: MelSpectrogram) -> None:
    """Write a mel spectrogram in a small self-describing binary format."""
    header = _MEL_MAGIC + struct.pack(
        "<IIII", _MEL_VERSION, mel.n_frames, mel.values.shape[1], mel.hop_size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<I", mel.window_size))
        f.write(mel.values.astype("<f4").tobytes())


def load_mel(path) -> MelSpectrogram:
    """Read a mel spectrogram written by `save_mel`."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MEL_MAGIC:
            raise ValueError(f"{path}: not a mel spectrogram file")
        version, n_frames, n_bands, hop = struct.unpack("<IIII", f.read(16))
        if version != _MEL_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (window,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(4 * n_frames * n_bands), dtype="<f4")
    if data.size != n_frames * n_bands:
        raise ValueError(f"{path}: truncated mel data")
    values = data.astype(np.float64).reshape(n_frames, n_bands)
    return MelSpectrogram(values, hop, window)
