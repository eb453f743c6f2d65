"""Analysis, controlled generation, and attribute editing.

Driving the masked autoencoder in its two all-or-nothing modes gives the two
halves of the pipeline:

* analysis -- tokenize the input mel spectrogram, hide the attribute stream,
  and decode the model's attribute predictions back to continuous tracks;
* generation -- tokenize an attribute set, hide the mel stream, and decode
  the predicted mel tokens through the frame tokenizer into a spectrogram,
  then invert it to a waveform.

Editing is a pure transformation of the continuous attribute set between
those two steps: shift the pitch track, overwrite the SNR or clarity tracks,
scale loudness, or swap the speaker label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import dsp
from .attributes import AttributeSet
from .dsp import MelSpectrogram, Waveform
from .masking import MEL, all_or_nothing_mask
from .quantizers import (
    C50,
    CONTENT,
    F0,
    LOUDNESS,
    SNR,
    SPEAKER,
    DiscreteTokenSequence,
    decode_content,
    decode_speaker,
    dequantize_linear,
    tokenize_attributes,
)
from .training import ModelBundle
from .vqvae import decode_tokens, encode_frames

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# edits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PitchShift:
    """Scale voiced pitch by a percentage (e.g. +10 or -50)."""

    percent: float


@dataclass(frozen=True)
class SetSnr:
    db: float


@dataclass(frozen=True)
class SetC50:
    db: float


@dataclass(frozen=True)
class ScaleLoudness:
    factor: float


@dataclass(frozen=True)
class SetSpeaker:
    label: int


ControlEdit = PitchShift | SetSnr | SetC50 | ScaleLoudness | SetSpeaker


def apply_edits(attrs: AttributeSet, edits: list[ControlEdit],
                bundle: ModelBundle) -> AttributeSet:
    """Apply edits to a copy of the attribute set; the input is untouched."""
    out = attrs.copy()
    f0_spec = bundle.manifest.specs[F0]
    voiced_floor = f0_spec.lo + f0_spec.bin_width   # below this, bins devoice
    for edit in edits:
        if isinstance(edit, PitchShift):
            factor = 1.0 + edit.percent / 100.0
            if factor <= 0.0:
                raise ValueError(f"pitch shift of {edit.percent}% silences "
                                 "the signal")
            voiced = out.f0 > 0.0
            shifted = out.f0[voiced] * factor
            clipped = np.clip(shifted, voiced_floor, f0_spec.hi)
            n_clip = int(np.sum(clipped != shifted))
            if n_clip:
                log.warning("pitch shift clamped %d of %d voiced frames into "
                            "[%.2f, %.2f] Hz", n_clip, int(voiced.sum()),
                            voiced_floor, f0_spec.hi)
            out.f0[voiced] = clipped
        elif isinstance(edit, SetSnr):
            out.snr_db[:] = float(np.clip(edit.db, -dsp.DB_CLAMP, dsp.DB_CLAMP))
        elif isinstance(edit, SetC50):
            out.c50_db[:] = float(np.clip(edit.db, -dsp.DB_CLAMP, dsp.DB_CLAMP))
        elif isinstance(edit, ScaleLoudness):
            if edit.factor < 0.0:
                raise ValueError("loudness factor must be non-negative")
            out.loudness = np.clip(out.loudness * edit.factor, 0.0, 1.0)
        elif isinstance(edit, SetSpeaker):
            if edit.label not in bundle.manifest.speaker_names:
                raise ValueError(
                    f"unknown speaker label {edit.label}; have "
                    f"{sorted(bundle.manifest.speaker_names)}")
            out.speaker = edit.label
        else:
            raise TypeError(f"unknown edit {edit!r}")
    return out


def describe_edits(edits: list[ControlEdit]) -> list[str]:
    out = []
    for e in edits:
        if isinstance(e, PitchShift):
            out.append(f"pitch-shift {e.percent:+g}%")
        elif isinstance(e, SetSnr):
            out.append(f"set-snr {e.db:g} dB")
        elif isinstance(e, SetC50):
            out.append(f"set-c50 {e.db:g} dB")
        elif isinstance(e, ScaleLoudness):
            out.append(f"scale-loudness x{e.factor:g}")
        elif isinstance(e, SetSpeaker):
            out.append(f"set-speaker {e.label}")
    return out


# ---------------------------------------------------------------------------
# segmentation helpers
# ---------------------------------------------------------------------------

def _segment_frames(layout) -> int:
    return layout.n_mel_tokens


def _pad_to_segments(wav: Waveform, seg_samples: int) -> Waveform:
    n = len(wav)
    total = -(-n // seg_samples) * seg_samples
    if total == n:
        return wav
    return Waveform(np.concatenate([wav.samples, np.zeros(total - n)]))


def _placeholder(shape) -> torch.Tensor:
    return torch.ones(*shape, dtype=torch.long)


# ---------------------------------------------------------------------------
# analysis: mel in, attributes out
# ---------------------------------------------------------------------------

def analyze(wav: Waveform, bundle: ModelBundle) -> AttributeSet:
    """Predict the six attributes of a waveform from its mel tokens alone."""
    layout = bundle.layout
    seg_frames = _segment_frames(layout)
    seg_samples = seg_frames * dsp.HOP_SIZE
    padded = _pad_to_segments(wav, seg_samples)
    n_segments = len(padded) // seg_samples

    mask = torch.from_numpy(
        np.tile(all_or_nothing_mask(layout, "attributes").flags,
                (n_segments, 1)))
    tokens = {fam.name: _placeholder((n_segments, fam.n_tokens,
                                      fam.entries_per_token))
              for fam in layout.families}
    mel_grids = []
    for s in range(n_segments):
        seg = Waveform(padded.samples[s * seg_samples:(s + 1) * seg_samples])
        mel_grids.append(encode_frames(bundle.vqvae, dsp.mel_spectrogram(seg)))
    tokens[MEL] = torch.from_numpy(np.stack(mel_grids))

    bundle.mae.eval()
    with torch.no_grad():
        logits = bundle.mae(tokens, mask)
    pred = bundle.mae.predict_tokens(logits)

    specs = bundle.manifest.specs
    tracks: dict[str, list[np.ndarray]] = {F0: [], LOUDNESS: [], SNR: [], C50: []}
    content_parts = []
    speaker_votes = np.zeros(specs[SPEAKER].vocab_size + 1)
    for s in range(n_segments):
        for name in (F0, LOUDNESS, SNR, C50):
            seq = DiscreteTokenSequence(name, pred[name][s],
                                        orig_len=seg_frames)
            tracks[name].append(dequantize_linear(seq.flat(), specs[name]))
        content_entries = seg_frames // 2
        cseq = DiscreteTokenSequence(CONTENT, pred[CONTENT][s],
                                     orig_len=content_entries)
        content_parts.append(decode_content(cseq, bundle.manifest.codebook,
                                            specs[CONTENT]))
        sseq = DiscreteTokenSequence(SPEAKER, pred[SPEAKER][s])
        speaker_votes[decode_speaker(sseq, specs[SPEAKER])] += 1

    n_true = len(wav) // dsp.HOP_SIZE
    return AttributeSet(
        content=np.concatenate(content_parts)[:max(n_true // 2, 1)],
        f0=np.concatenate(tracks[F0])[:n_true],
        loudness=np.concatenate(tracks[LOUDNESS])[:n_true],
        speaker=int(np.argmax(speaker_votes)),
        snr_db=np.concatenate(tracks[SNR])[:n_true],
        c50_db=np.concatenate(tracks[C50])[:n_true])


# ---------------------------------------------------------------------------
# generation: attributes in, mel (and waveform) out
# ---------------------------------------------------------------------------

def _segment_attrs(attrs: AttributeSet, seg_frames: int) -> list[AttributeSet]:
    """Split an attribute set into fixed-length segment-sized sets."""
    n = attrs.n_frames
    n_segments = -(-n // seg_frames)
    total = n_segments * seg_frames
    content_per_seg = seg_frames // 2

    def pad_track(track, fill_last):
        extra = total - n
        if extra == 0:
            return track
        fill = track[-1] if fill_last else 0.0
        return np.concatenate([track, np.full(extra, fill)])

    content_total = n_segments * content_per_seg
    content = attrs.content
    if content.shape[0] < content_total:
        reps = np.repeat(content[-1:], content_total - content.shape[0], axis=0)
        content = np.concatenate([content, reps])
    f0 = pad_track(attrs.f0, fill_last=False)
    loud = pad_track(attrs.loudness, fill_last=False)
    snr = pad_track(attrs.snr_db, fill_last=True)
    c50 = pad_track(attrs.c50_db, fill_last=True)

    out = []
    for s in range(n_segments):
        fr = slice(s * seg_frames, (s + 1) * seg_frames)
        cf = slice(s * content_per_seg, (s + 1) * content_per_seg)
        out.append(AttributeSet(content=content[cf], f0=f0[fr],
                                loudness=loud[fr], speaker=attrs.speaker,
                                snr_db=snr[fr], c50_db=c50[fr]))
    return out


def generate(attrs: AttributeSet, bundle: ModelBundle) -> MelSpectrogram:
    """Predict a mel spectrogram from attributes (the mel stream is hidden)."""
    layout = bundle.layout
    seg_frames = _segment_frames(layout)
    segments = _segment_attrs(attrs, seg_frames)
    n_segments = len(segments)

    tokens = {fam.name: _placeholder((n_segments, fam.n_tokens,
                                      fam.entries_per_token))
              for fam in layout.families}
    for s, seg_attrs in enumerate(segments):
        seqs = tokenize_attributes(seg_attrs, bundle.manifest)
        for name, seq in seqs.items():
            fam = layout.family(name)
            if seq.tokens.shape != (fam.n_tokens, fam.entries_per_token):
                raise ValueError(
                    f"{name}: segment tokens {seq.tokens.shape} do not fit "
                    f"the layout ({fam.n_tokens}, {fam.entries_per_token})")
            tokens[name][s] = torch.from_numpy(seq.tokens)

    mask = torch.from_numpy(
        np.tile(all_or_nothing_mask(layout, MEL).flags, (n_segments, 1)))
    bundle.mae.eval()
    with torch.no_grad():
        logits = bundle.mae(tokens, mask)
    mel_tokens = bundle.mae.predict_tokens(logits)[MEL]

    mel_parts = [decode_tokens(bundle.vqvae, mel_tokens[s]).values
                 for s in range(n_segments)]
    full = np.concatenate(mel_parts)[:attrs.n_frames]
    return MelSpectrogram(full)


def synthesize_waveform(mel: MelSpectrogram, gl_iters: int = 60,
                        reference: Waveform | None = None) -> Waveform:
    """Invert a mel spectrogram; a reference waveform seeds the phase."""
    init_phase = None
    if reference is not None:
        need = mel.n_frames * mel.hop_size
        ref = _pad_to_segments(reference, need) if len(reference) < need else reference
        spec = dsp._stft_complex(ref.samples[:need], mel.window_size,
                                 mel.hop_size)
        init_phase = spec
    return dsp.griffin_lim_invert(mel, n_iters=gl_iters, init_phase=init_phase)


# ---------------------------------------------------------------------------
# the full edit pipeline
# ---------------------------------------------------------------------------

def resynthesize(wav: Waveform, edits: list[ControlEdit], bundle: ModelBundle,
                 gl_iters: int = 60) -> tuple[Waveform, dict]:
    """Analyze, edit, regenerate, and invert; returns (waveform, report)."""
    attrs = analyze(wav, bundle)
    edited = apply_edits(attrs, edits, bundle)
    mel = generate(edited, bundle)
    out = synthesize_waveform(mel, gl_iters=gl_iters, reference=wav)
    out = Waveform(out.samples[:len(wav)])

    f0_target = edited.f0
    f0_out = dsp.estimate_f0_acf(out)[:f0_target.shape[0]]
    both = (f0_target > 0) & (f0_out > 0)
    aae = float(np.mean(np.abs(f0_out[both] - f0_target[both]))) if both.any() else None
    report = {
        "edits": describe_edits(edits),
        "speaker_analyzed": attrs.speaker,
        "speaker_generated": edited.speaker,
        "mean_f0_analyzed": _voiced_mean(attrs.f0),
        "mean_f0_target": _voiced_mean(edited.f0),
        "mean_f0_output": _voiced_mean(f0_out),
        "f0_aae_vs_target": aae,
        "snr_db_analyzed": float(np.mean(attrs.snr_db)),
        "snr_db_target": float(np.mean(edited.snr_db)),
        "c50_db_analyzed": float(np.mean(attrs.c50_db)),
        "gl_iters": gl_iters,
    }
    return out, report


def _voiced_mean(f0: np.ndarray) -> float | None:
    voiced = f0[f0 > 0]
    return float(voiced.mean()) if voiced.size else None
