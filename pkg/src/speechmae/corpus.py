"""Synthetic speech corpus generation and the token data pipeline.

Utterances are built from vowel-like harmonic segments: each 0.25 s slot is
a short silence followed by a voiced glide with a per-slot vowel, pitch
trajectory, and level.  The generator returns the *programmed* pitch contour
on the analysis frame grid, giving evaluations an exact reference that does
not depend on any pitch tracker.

Records pair a clean rendering with an optional degraded mixture (additive
noise at an exact SNR, optional synthetic reverberation) plus the metadata
needed to tokenize them.  `build_training_examples` turns records into the
combined token grids the masked autoencoder trains on, with an optional
on-disk cache keyed by the tokenizer manifest digest.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .attributes import extract_attributes, mfcc_features
from .dsp import Waveform
from .masking import TokenLayout
from .quantizers import (
    TokenizerManifest,
    default_attr_specs,
    fit_content_codebook,
    tokenize_attributes,
)
from .vqvae import MelFrameVqvae, encode_frames

CACHE_ENV_VAR = "SPEECHMAE_CACHE_DIR"
SEGMENT_SECONDS = 2.0
SLOT_SECONDS = 0.25
SLOT_SILENCE_SECONDS = 0.03
FADE_SECONDS = 0.01

VOWEL_FORMANTS = {
    "a": (730.0, 1090.0, 2440.0),
    "e": (530.0, 1840.0, 2480.0),
    "i": (390.0, 1990.0, 2550.0),
    "o": (570.0, 840.0, 2410.0),
    "u": (440.0, 1020.0, 2240.0),
}


@dataclass(frozen=True)
class SpeakerVoice:
    """A synthetic speaker: a label and a vocal-tract scale factor."""

    label: int
    name: str
    formant_scale: float

    def formants(self, vowel: str) -> tuple[float, ...]:
        return tuple(f * self.formant_scale for f in VOWEL_FORMANTS[vowel])


@dataclass(frozen=True)
class SlotPlan:
    """One 0.25 s synthesis slot: silence, then a voiced vowel glide."""

    vowel: str
    f0_start: float
    f0_end: float
    level: float            # target RMS of the voiced part


@dataclass(frozen=True)
class UtterancePlan:
    utt_id: str
    speaker: SpeakerVoice
    slots: tuple[SlotPlan, ...]
    role: str = "coverage"  # "coverage" or "probe"; see build_overfit_plans


@dataclass
class DegradationMeta:
    """What was done to the clean rendering, with exact measured values."""

    snr_db: float = dsp.DB_CLAMP
    c50_db: float = dsp.DB_CLAMP
    noise_seed: int | None = None
    rir_seed: int | None = None


@dataclass
class UtteranceRecord:
    """One training row: a clean/mixture pair plus metadata."""

    utt_id: str
    variant: str                  # "clean", "snr0", ...
    speaker_label: int
    speaker_name: str
    role: str
    clean_path: str
    mixture_path: str
    f0_truth_path: str
    degradation: DegradationMeta

    def to_json(self) -> str:
        blob = asdict(self)
        return json.dumps(blob, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UtteranceRecord":
        blob = json.loads(text)
        blob["degradation"] = DegradationMeta(**blob["degradation"])
        return cls(**blob)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def _render_slot(slot: SlotPlan, speaker: SpeakerVoice,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one slot; returns (samples, instantaneous f0 per sample)."""
    sr = dsp.SAMPLE_RATE
    n_total = int(SLOT_SECONDS * sr)
    n_sil = int(SLOT_SILENCE_SECONDS * sr)
    n_voiced = n_total - n_sil

    inst = np.linspace(slot.f0_start, slot.f0_end, n_voiced)
    phase = 2.0 * np.pi * np.cumsum(inst) / sr
    formants = speaker.formants(slot.vowel)
    bandwidth = 200.0
    f0_mid = 0.5 * (slot.f0_start + slot.f0_end)
    sig = np.zeros(n_voiced)
    for h in range(1, max(int(6000.0 / f0_mid), 2)):
        freq = h * f0_mid
        gain = sum(bandwidth ** 2 / ((freq - fc) ** 2 + bandwidth ** 2)
                   for fc in formants)
        gain *= h ** -0.3                       # gentle spectral tilt
        sig += gain * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))

    rms = np.sqrt(np.mean(sig * sig))
    sig *= slot.level / max(rms, 1e-12)
    n_fade = int(FADE_SECONDS * sr)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
    sig[:n_fade] *= ramp
    sig[-n_fade:] *= ramp[::-1]

    samples = np.concatenate([np.zeros(n_sil), sig])
    f0_track = np.concatenate([np.zeros(n_sil), inst])
    return samples, f0_track


def render_utterance(plan: UtterancePlan,
                     seed: int = 0) -> tuple[Waveform, np.ndarray]:
    """Render a plan; returns the waveform and the programmed f0 contour.

    The contour lives on the mel frame grid (frame t reads the instantaneous
    f0 at the frame centre; silent samples read 0).
    """
    rng = np.random.default_rng(seed)
    parts, tracks = [], []
    for slot in plan.slots:
        samples, track = _render_slot(slot, plan.speaker, rng)
        parts.append(samples)
        tracks.append(track)
    samples = np.concatenate(parts)
    per_sample_f0 = np.concatenate(tracks)
    n_frames = samples.size // dsp.HOP_SIZE
    centers = ((np.arange(n_frames) + 0.5) * dsp.HOP_SIZE).astype(int)
    contour = per_sample_f0[centers]
    return Waveform(samples), contour


# ---------------------------------------------------------------------------
# corpus plans
# ---------------------------------------------------------------------------

def default_speakers(n_speakers: int) -> list[SpeakerVoice]:
    if not 2 <= n_speakers <= 8:
        raise ValueError("n_speakers must lie in [2, 8]")
    scales = np.linspace(0.88, 1.16, n_speakers)
    return [SpeakerVoice(i + 1, f"s{i + 1:02d}", float(scales[i]))
            for i in range(n_speakers)]


def random_plans(speakers: list[SpeakerVoice], per_speaker: int,
                 seed: int = 0, f0_range: tuple[float, float] = (80.0, 300.0),
                 duration: float = SEGMENT_SECONDS) -> list[UtterancePlan]:
    """Independent random utterance plans, `per_speaker` for each voice."""
    rng = np.random.default_rng(seed)
    n_slots = int(round(duration / SLOT_SECONDS))
    vowels = sorted(VOWEL_FORMANTS)
    plans = []
    for spk in speakers:
        for u in range(per_speaker):
            slots = []
            for _ in range(n_slots):
                f0a = rng.uniform(*f0_range)
                f0b = np.clip(f0a + rng.uniform(-30.0, 30.0), *f0_range)
                slots.append(SlotPlan(vowels[rng.integers(len(vowels))],
                                      float(f0a), float(f0b),
                                      float(rng.uniform(0.05, 0.3))))
            plans.append(UtterancePlan(f"{spk.name}_u{u:02d}", spk,
                                       tuple(slots), role="coverage"))
    return plans


def build_overfit_plans(seed: int = 0) -> list[UtterancePlan]:
    """The fixed 8-utterance suite used for memorization experiments.

    Per speaker: three "coverage" utterances whose 24 slots tile the
    [80, 300] Hz range with overlapping glides, so every pitch bin in that
    range appears in training; and one "probe" utterance confined to
    [160, 200] Hz, so pitch shifts of +-50 % stay inside the tiled range.
    """
    rng = np.random.default_rng(seed)
    vowels = sorted(VOWEL_FORMANTS)
    lo, hi = 80.0, 300.0
    plans = []
    for spk in default_speakers(2):
        n_cover_slots = 24
        edges = np.linspace(lo, hi, n_cover_slots + 1)
        order = rng.permutation(n_cover_slots)
        for u in range(3):
            slots = []
            for j in range(8):
                band = order[u * 8 + j]
                a = max(lo, edges[band] - 4.0)
                b = min(hi, edges[band + 1] + 4.0)
                if rng.uniform() < 0.5:
                    a, b = b, a
                slots.append(SlotPlan(vowels[rng.integers(len(vowels))],
                                      float(a), float(b),
                                      float(rng.uniform(0.08, 0.25))))
            plans.append(UtterancePlan(f"{spk.name}_cover{u}", spk,
                                       tuple(slots), role="coverage"))
        slots = []
        for _ in range(8):
            f0a = rng.uniform(160.0, 200.0)
            f0b = np.clip(f0a + rng.uniform(-20.0, 20.0), 160.0, 200.0)
            slots.append(SlotPlan(vowels[rng.integers(len(vowels))],
                                  float(f0a), float(f0b),
                                  float(rng.uniform(0.08, 0.25))))
        plans.append(UtterancePlan(f"{spk.name}_probe", spk, tuple(slots),
                                   role="probe"))
    return plans


def pitch_cover_plans(plans: list[UtterancePlan], per_utterance: int = 3,
                      seed: int = 0,
                      f0_range: tuple[float, float] = (60.0, 440.0)
                      ) -> list[UtterancePlan]:
    """Re-pitched copies of each plan: same vowels and levels, fresh contours.

    A model trained only on the canonical suite can read pitch off the
    content and speaker tokens because each utterance was rendered exactly
    once.  These covers break that shortcut -- every slot sequence appears
    with several unrelated contours -- and the wide log-uniform pitch range
    keeps large resynthesis shifts inside the training distribution.
    """
    rng = np.random.default_rng(seed + 777)
    lo, hi = f0_range
    covers = []
    for plan in plans:
        for k in range(per_utterance):
            slots = []
            for slot in plan.slots:
                f0a = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
                f0b = float(np.clip(f0a * rng.uniform(0.85, 1.18), lo, hi))
                slots.append(SlotPlan(slot.vowel, f0a, f0b, slot.level))
            covers.append(UtterancePlan(f"{plan.utt_id}_pv{k}", plan.speaker,
                                        tuple(slots), role="pitch_cover"))
    return covers


# ---------------------------------------------------------------------------
# rendering + degradation to disk
# ---------------------------------------------------------------------------

def _degrade(clean: Waveform, variant: str, snr_db: float | None,
             c50_db: float | None, noise_seed: int,
             rir_seed: int) -> tuple[Waveform, DegradationMeta]:
    meta = DegradationMeta()
    wav = clean
    if c50_db is not None:
        rir = dsp.synth_rir(c50_db, seed=rir_seed)
        wav = dsp.apply_reverb(wav, rir)
        meta.c50_db = dsp.measure_c50(rir)
        meta.rir_seed = rir_seed
    if snr_db is not None:
        rng = np.random.default_rng(noise_seed)
        noise = Waveform(rng.standard_normal(len(wav)))
        wav = dsp.mix_at_snr(wav, noise, snr_db)
        meta.snr_db = float(snr_db)
        meta.noise_seed = noise_seed
    return wav, meta


def _render_plan(plan: UtterancePlan, index: int, out_dir: Path,
                 variants: list[tuple[str, float | None, float | None]],
                 seed: int) -> list[UtteranceRecord]:
    """Render one plan to disk with its degradation variants."""
    clean, contour = render_utterance(plan, seed=seed + 1000 * index)
    clean_path = out_dir / f"{plan.utt_id}.wav"
    truth_path = out_dir / f"{plan.utt_id}_f0.npy"
    dsp.write_wav(clean_path, clean)
    np.save(truth_path, contour)
    records = []
    for v, (vname, snr, c50) in enumerate(variants):
        if snr is None and c50 is None:
            mix_path = clean_path
            meta = DegradationMeta()
        else:
            mixture, meta = _degrade(clean, vname, snr, c50,
                                     noise_seed=seed + 1000 * index + v,
                                     rir_seed=seed + 7000 + 1000 * index + v)
            mix_path = out_dir / f"{plan.utt_id}_{vname}.wav"
            dsp.write_wav(mix_path, mixture)
        records.append(UtteranceRecord(
            utt_id=plan.utt_id, variant=vname,
            speaker_label=plan.speaker.label,
            speaker_name=plan.speaker.name, role=plan.role,
            clean_path=str(clean_path), mixture_path=str(mix_path),
            f0_truth_path=str(truth_path), degradation=meta))
    return records


def write_corpus(plans: list[UtterancePlan], out_dir,
                 variants: list[tuple[str, float | None, float | None]] | None = None,
                 seed: int = 0) -> list[UtteranceRecord]:
    """Render plans, apply degradation variants, and write everything.

    `variants` is a list of (name, snr_db, c50_db); None leaves that
    degradation out.  The default is the clean rendering only.  Returns the
    records, which are also written to `manifest.jsonl` in `out_dir`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if variants is None:
        variants = [("clean", None, None)]
    records = []
    for i, plan in enumerate(plans):
        records.extend(_render_plan(plan, i, out_dir, variants, seed))
    save_records(out_dir / "manifest.jsonl", records)
    return records


def save_records(path, records: list[UtteranceRecord]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def load_records(path) -> list[UtteranceRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                records.append(UtteranceRecord.from_json(line))
    if not records:
        raise ValueError(f"{path}: no records")
    return records


OVERFIT_VARIANTS = [("clean", None, None), ("snr0", 0.0, None),
                    ("snr40", 40.0, None)]


def write_overfit_corpus(out_dir, seed: int = 0, pitch_covers: int = 3,
                         mid_snr_range: tuple[float, float] | None = (5.0, 30.0)
                         ) -> list[UtteranceRecord]:
    """Render the fixed memorization suite plus its training support set.

    The eight canonical utterances (roles "coverage" and "probe") each get
    the clean/snr0/snr40 variants plus one mixture at a per-utterance random
    SNR drawn from `mid_snr_range`, so noise levels between the extremes are
    not off-distribution.  Each canonical utterance also gets `pitch_covers`
    clean re-renders with fresh pitch contours (role "pitch_cover").
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = build_overfit_plans(seed)
    covers = pitch_cover_plans(plans, per_utterance=pitch_covers, seed=seed)
    rng = np.random.default_rng(seed + 313)
    records = []
    for i, plan in enumerate(plans):
        variants = list(OVERFIT_VARIANTS)
        if mid_snr_range is not None:
            snr = float(rng.uniform(*mid_snr_range))
            variants.append((f"snr{snr:.0f}", snr, None))
        records.extend(_render_plan(plan, i, out_dir, variants, seed))
    for j, plan in enumerate(covers):
        records.extend(_render_plan(plan, len(plans) + j, out_dir,
                                    [("clean", None, None)], seed))
    save_records(out_dir / "manifest.jsonl", records)
    return records


# ---------------------------------------------------------------------------
# tokenizer fitting and the example pipeline
# ---------------------------------------------------------------------------

def fit_manifest(records: list[UtteranceRecord], seed: int = 0,
                 content_vocab: int = 100) -> TokenizerManifest:
    """Fit the content codebook on the corpus and freeze all token specs."""
    unique_cleans = sorted({r.clean_path for r in records})
    feats = np.concatenate([mfcc_features(dsp.read_wav(p))
                            for p in unique_cleans])
    codebook = fit_content_codebook(feats, k=content_vocab, seed=seed)
    speakers = {r.speaker_label: r.speaker_name for r in records}
    specs = default_attr_specs(len(speakers))
    return TokenizerManifest(specs=specs, codebook=codebook,
                             speaker_names=speakers)


@dataclass
class TrainingExample:
    """Token grids for one 2 s segment, keyed by family name."""

    utt_id: str
    variant: str
    segment: int
    role: str
    tokens: dict[str, np.ndarray]      # family -> (n_tokens, entries) int64


def segment_bounds(n_samples: int,
                   seconds: float = SEGMENT_SECONDS) -> list[tuple[int, int]]:
    """Fixed-length segment boundaries covering the signal."""
    seg = int(seconds * dsp.SAMPLE_RATE)
    if n_samples < 1:
        raise ValueError("empty signal")
    bounds = []
    start = 0
    while start < n_samples:
        bounds.append((start, min(start + seg, n_samples)))
        start += seg
    return bounds


def _pad_segment(samples: np.ndarray, seg_len: int) -> np.ndarray:
    if samples.size >= seg_len:
        return samples[:seg_len]
    return np.concatenate([samples, np.zeros(seg_len - samples.size)])


def tokenize_segment(mixture: Waveform, clean: Waveform, speaker: int,
                     snr_db: float, c50_db: float,
                     manifest: TokenizerManifest,
                     vqvae: MelFrameVqvae) -> dict[str, np.ndarray]:
    """All seven token grids (mel + six attributes) for one segment."""
    mel = dsp.mel_spectrogram(mixture)
    grids = {"mel": encode_frames(vqvae, mel)}
    attrs = extract_attributes(mixture, speaker=speaker, clean=clean,
                               snr_db=snr_db, c50_db=c50_db)
    for name, seq in tokenize_attributes(attrs, manifest).items():
        grids[name] = seq.tokens
    return grids


def build_training_examples(records: list[UtteranceRecord],
                            manifest: TokenizerManifest,
                            vqvae: MelFrameVqvae,
                            cache_dir=None) -> list[TrainingExample]:
    """Tokenize every record into fixed-length segment examples.

    `cache_dir` (or the SPEECHMAE_CACHE_DIR environment variable) enables an
    on-disk cache; entries are invalidated when the manifest digest changes.
    """
    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_ENV_VAR)
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    digest = manifest.digest()
    seg_len = int(SEGMENT_SECONDS * dsp.SAMPLE_RATE)

    examples = []
    for rec in records:
        clean = dsp.read_wav(rec.clean_path)
        mixture = (clean if rec.mixture_path == rec.clean_path
                   else dsp.read_wav(rec.mixture_path))
        if len(mixture) != len(clean):
            raise ValueError(f"{rec.utt_id}: clean/mixture length mismatch")
        for seg_idx, (a, b) in enumerate(segment_bounds(len(clean))):
            key = f"{rec.utt_id}_{rec.variant}_{seg_idx:02d}"
            if cache:
                hit = _cache_load(cache / f"{key}.npz", digest)
                if hit is not None:
                    examples.append(TrainingExample(rec.utt_id, rec.variant,
                                                    seg_idx, rec.role, hit))
                    continue
            mix_seg = Waveform(_pad_segment(mixture.samples[a:b], seg_len))
            cln_seg = Waveform(_pad_segment(clean.samples[a:b], seg_len))
            grids = tokenize_segment(mix_seg, cln_seg, rec.speaker_label,
                                     rec.degradation.snr_db,
                                     rec.degradation.c50_db,
                                     manifest, vqvae)
            if cache:
                _cache_store(cache / f"{key}.npz", digest, grids)
            examples.append(TrainingExample(rec.utt_id, rec.variant, seg_idx,
                                            rec.role, grids))
    return examples


def _cache_store(path: Path, digest: str, grids: dict[str, np.ndarray]) -> None:
    payload = {f"tokens_{k}": v for k, v in grids.items()}
    payload["manifest_digest"] = np.bytes_(digest.encode())
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cache_load(path: Path, digest: str) -> dict[str, np.ndarray] | None:
    if not path.exists():
        return None
    try:
        with np.load(path) as z:
            if z["manifest_digest"].tobytes().decode() != digest:
                return None
            return {k[len("tokens_"):]: z[k].astype(np.int64)
                    for k in z.files if k.startswith("tokens_")}
    except (OSError, ValueError, KeyError):
        return None


def layout_for_examples(manifest: TokenizerManifest,
                        vqvae: MelFrameVqvae,
                        n_mel_frames: int | None = None) -> TokenLayout:
    """The token layout shared by all fixed-length segment examples."""
    if n_mel_frames is None:
        n_mel_frames = int(SEGMENT_SECONDS * dsp.SAMPLE_RATE) // dsp.HOP_SIZE
    return TokenLayout.for_segment(manifest, n_mel_frames,
                                   vqvae.config.codes_per_frame,
                                   vqvae.config.codebook_size)
