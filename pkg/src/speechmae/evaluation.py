"""Experiment runners: pitch robustness, pitch-shift control, and denoising.

Each runner walks a record list with a trained model bundle, computes
per-utterance metrics against exact references (the corpus generator's
programmed pitch contours, the clean renderings), and aggregates them into
rows of plain dictionaries.  Given an output directory it also writes a CSV
and a plot per experiment, so results can be inspected without re-running.

The only pitch baseline is the in-repo autocorrelation tracker; it doubles
as the measurement instrument for resynthesized audio.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import dsp
from .control import PitchShift, SetSnr, analyze, resynthesize
from .corpus import UtteranceRecord
from .dsp import Waveform
from .training import ModelBundle

DEFAULT_SNR_GRID = (None, 10.0, 5.0, 0.0)       # None = clean
DEFAULT_SHIFTS = (50.0, 10.0, 0.0, -10.0, -50.0)
REVERB_C50_DB = 10.0


def aae(est: np.ndarray, ref: np.ndarray) -> float:
    """Average absolute error in Hz over frames voiced in both tracks."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    both = (est > 0.0) & (ref > 0.0)
    if not both.any():
        raise ValueError("no mutually voiced frames")
    return float(np.mean(np.abs(est[both] - ref[both])))


def _clean_records(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    out = [r for r in records if r.variant == "clean"]
    if not out:
        raise ValueError("no clean-variant records to evaluate")
    return out


def _truth_contour(rec: UtteranceRecord) -> np.ndarray:
    return np.load(rec.f0_truth_path)


def _mean_aae(pairs: list[tuple[np.ndarray, np.ndarray]]
              ) -> tuple[float | None, float | None, int]:
    """Mean and max AAE over (est, ref) pairs, skipping pairs with no
    mutually voiced frames; returns (mean, max, n_valid)."""
    vals = []
    for est, ref in pairs:
        try:
            vals.append(aae(est, ref))
        except ValueError:
            continue
    if not vals:
        return None, None, 0
    return float(np.mean(vals)), float(np.max(vals)), len(vals)


# ---------------------------------------------------------------------------
# pitch robustness across degradations
# ---------------------------------------------------------------------------

def run_f0_robustness(bundle: ModelBundle, records: list[UtteranceRecord],
                      snr_grid=DEFAULT_SNR_GRID, reverb=(False, True),
                      seed: int = 0, out_dir=None) -> list[dict]:
    """Pitch AAE of model analysis and the tracker across degradations.

    Returns one row per (snr, reverb) condition with the mean AAE over
    utterances against the programmed contours.  Utterances where a track
    never voices a mutually voiced frame are skipped; the `n_model`/
    `n_oracle` columns say how many utterances actually contributed.
    """
    cleans = _clean_records(records)
    rows = []
    for use_reverb in reverb:
        for snr_db in snr_grid:
            model_pairs, oracle_pairs = [], []
            for i, rec in enumerate(cleans):
                wav = dsp.read_wav(rec.clean_path)
                truth = _truth_contour(rec)
                if use_reverb:
                    rir = dsp.synth_rir(REVERB_C50_DB, seed=seed + 31 * i)
                    wav = dsp.apply_reverb(wav, rir)
                if snr_db is not None:
                    rng = np.random.default_rng(seed + 1000 + 31 * i)
                    noise = Waveform(rng.standard_normal(len(wav)))
                    wav = dsp.mix_at_snr(wav, noise, snr_db)
                n = truth.shape[0]
                model_pairs.append((analyze(wav, bundle).f0[:n], truth))
                oracle_pairs.append((dsp.estimate_f0_acf(wav)[:n], truth))
            aae_model, _, n_model = _mean_aae(model_pairs)
            aae_oracle, _, n_oracle = _mean_aae(oracle_pairs)
            rows.append({
                "condition": ("clean" if snr_db is None else f"snr{snr_db:g}")
                             + ("_reverb" if use_reverb else ""),
                "snr_db": None if snr_db is None else snr_db,
                "reverb": int(use_reverb),
                "aae_model_hz": aae_model,
                "aae_oracle_hz": aae_oracle,
                "n_model": n_model,
                "n_oracle": n_oracle,
            })
    if out_dir is not None:
        _write_csv(Path(out_dir) / "f0_robustness.csv", rows)
        _plot_f0_robustness(Path(out_dir) / "f0_robustness.png", rows)
    return rows


# ---------------------------------------------------------------------------
# pitch-shift control accuracy
# ---------------------------------------------------------------------------

def run_pitch_shift_eval(bundle: ModelBundle, records: list[UtteranceRecord],
                         shifts=DEFAULT_SHIFTS, gl_iters: int = 60,
                         out_dir=None) -> list[dict]:
    """AAE between shifted programmed contours and resynthesized pitch.

    The target for each shift applies the same voiced-only scaling and
    range clamping as the edit itself; the resynthesized audio is measured
    with the autocorrelation tracker.
    """
    cleans = _clean_records(records)
    f0_spec = bundle.manifest.specs["f0"]
    lo = f0_spec.lo + f0_spec.bin_width
    rows = []
    for shift in shifts:
        pairs = []
        for rec in cleans:
            wav = dsp.read_wav(rec.clean_path)
            truth = _truth_contour(rec)
            target = truth.copy()
            voiced = target > 0.0
            target[voiced] = np.clip(target[voiced] * (1.0 + shift / 100.0),
                                     lo, f0_spec.hi)
            out, _ = resynthesize(wav, [PitchShift(shift)], bundle,
                                  gl_iters=gl_iters)
            n = truth.shape[0]
            pairs.append((dsp.estimate_f0_acf(out)[:n], target))
        mean_err, max_err, n_valid = _mean_aae(pairs)
        rows.append({"shift_percent": shift,
                     "aae_hz": mean_err,
                     "aae_max_hz": max_err,
                     "n_valid": n_valid,
                     "n_utterances": len(cleans)})
    if out_dir is not None:
        _write_csv(Path(out_dir) / "pitch_shift.csv", rows)
        _plot_pitch_shift(Path(out_dir) / "pitch_shift.png", rows)
    return rows


# ---------------------------------------------------------------------------
# denoising by SNR edit
# ---------------------------------------------------------------------------

def run_denoise_eval(bundle: ModelBundle, records: list[UtteranceRecord],
                     target_snr_db: float = 40.0, gl_iters: int = 60,
                     include_passthrough: bool = False,
                     out_dir=None) -> list[dict]:
    """Denoise mixtures by setting the SNR attribute; report metric deltas.

    `records` should be noisy-variant records with clean references.  Each
    row compares the mixture and the denoised output against the clean
    signal: log-spectral distance on mel, SI-SDR on waveforms.  With
    `include_passthrough`, a control resynthesis at the input's true SNR is
    measured too.
    """
    noisy = [r for r in records if r.mixture_path != r.clean_path]
    if not noisy:
        raise ValueError("no degraded records to denoise")
    rows = []
    for rec in noisy:
        clean = dsp.read_wav(rec.clean_path)
        mixture = dsp.read_wav(rec.mixture_path)
        mel_clean = dsp.mel_spectrogram(clean)
        mel_mix = dsp.mel_spectrogram(mixture)
        out, _ = resynthesize(mixture, [SetSnr(target_snr_db)], bundle,
                              gl_iters=gl_iters)
        mel_out = dsp.mel_spectrogram(out)
        row = {
            "utt_id": rec.utt_id,
            "variant": rec.variant,
            "snr_in_db": rec.degradation.snr_db,
            "lsd_in": dsp.log_spectral_distance(mel_mix, mel_clean),
            "lsd_out": dsp.log_spectral_distance(mel_out, mel_clean),
            "si_sdr_in_db": dsp.si_sdr(mixture, clean),
            "si_sdr_out_db": dsp.si_sdr(out, clean),
        }
        row["lsd_delta"] = row["lsd_out"] - row["lsd_in"]
        row["si_sdr_delta_db"] = row["si_sdr_out_db"] - row["si_sdr_in_db"]
        if include_passthrough:
            passthrough, _ = resynthesize(
                mixture, [SetSnr(rec.degradation.snr_db)], bundle,
                gl_iters=gl_iters)
            row["lsd_passthrough"] = dsp.log_spectral_distance(
                dsp.mel_spectrogram(passthrough), mel_clean)
        rows.append(row)
    if out_dir is not None:
        _write_csv(Path(out_dir) / "denoise.csv", rows)
        _plot_denoise(Path(out_dir) / "denoise.png", rows)
    return rows


def summarize_denoise(rows: list[dict]) -> dict:
    """Aggregate denoising rows: mean deltas and preservation fractions."""
    lsd_in = float(np.mean([r["lsd_in"] for r in rows]))
    lsd_out = float(np.mean([r["lsd_out"] for r in rows]))
    kept = [r["si_sdr_out_db"] >= r["si_sdr_in_db"] for r in rows]
    return {
        "n": len(rows),
        "mean_lsd_in": lsd_in,
        "mean_lsd_out": lsd_out,
        "mean_lsd_delta": lsd_out - lsd_in,
        "mean_si_sdr_in_db": float(np.mean([r["si_sdr_in_db"] for r in rows])),
        "mean_si_sdr_out_db": float(np.mean([r["si_sdr_out_db"] for r in rows])),
        "si_sdr_preserved_fraction": float(np.mean(kept)),
    }


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_f0_robustness(path: Path, rows: list[dict]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for use_reverb in (0, 1):
        sub = [r for r in rows if r["reverb"] == use_reverb]
        if not sub:
            continue
        labels = [r["condition"] for r in sub]
        x = np.arange(len(sub))
        ax.plot(x, [r["aae_model_hz"] for r in sub], "o-",
                label=f"analysis{' +reverb' if use_reverb else ''}")
        ax.plot(x, [r["aae_oracle_hz"] for r in sub], "s--",
                label=f"tracker{' +reverb' if use_reverb else ''}")
        ax.set_xticks(x, labels)
    ax.set_ylabel("pitch AAE (Hz)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_pitch_shift(path: Path, rows: list[dict]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    shifts = [r["shift_percent"] for r in rows]
    ax.plot(shifts, [r["aae_hz"] for r in rows], "o-")
    ax.set_xlabel("pitch shift (%)")
    ax.set_ylabel("AAE vs shifted target (Hz)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_denoise(path: Path, rows: list[dict]) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    x = np.arange(len(rows))
    axes[0].bar(x - 0.2, [r["lsd_in"] for r in rows], width=0.4,
                label="input")
    axes[0].bar(x + 0.2, [r["lsd_out"] for r in rows], width=0.4,
                label="denoised")
    axes[0].set_ylabel("LSD to clean mel (dB)")
    axes[0].legend()
    axes[1].bar(x - 0.2, [r["si_sdr_in_db"] for r in rows], width=0.4,
                label="input")
    axes[1].bar(x + 0.2, [r["si_sdr_out_db"] for r in rows], width=0.4,
                label="denoised")
    axes[1].set_ylabel("SI-SDR to clean (dB)")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
