"""Command-line interface: corpus generation, training, control, evaluation.

Layout::

    speechmae corpus gen --out DIR [--preset overfit|random] [--seed N]
    speechmae train vqvae --corpus DIR --out tokenizers.pt [...]
    speechmae train mae --corpus DIR --tokenizers PT --out bundle.pt [...]
    speechmae analyze IN.wav --bundle PT --out attrs.json
    speechmae resynth IN.wav --bundle PT [edit flags] --out OUT.wav \
        [--report report.json]
    speechmae eval {f0,pitch-shift,denoise} --bundle PT --corpus DIR --out DIR

Every subcommand takes --seed and prints the configuration it resolved
before doing any work.  Training subcommands also accept --config, a JSON
file whose keys fill in defaults (explicit flags still win).  Exit codes:
0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

import numpy as np
import torch

REPORT_SCHEMA_VERSION = 1


def _percent(text: str) -> float:
    """Parse '+10%', '-50', '12.5%' into a float percentage."""
    try:
        return float(text.strip().rstrip("%"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a percentage: {text!r}")


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        blob = json.load(f)
    if not isinstance(blob, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return blob


def _resolve(defaults: dict, config: dict, args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    out = dict(defaults)
    for key, value in config.items():
        if key not in out:
            raise ValueError(f"unknown config key {key!r}; "
                             f"known: {sorted(out)}")
        out[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    return out


def _announce(command: str, resolved: dict) -> None:
    print(f"{command} config: "
          + json.dumps(resolved, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_corpus_gen(args) -> int:
    from .corpus import (default_speakers, random_plans, write_corpus,
                         write_overfit_corpus)

    resolved = {"preset": args.preset, "out": args.out, "seed": args.seed,
                "speakers": args.speakers, "per_speaker": args.per_speaker}
    _announce("corpus gen", resolved)
    if args.preset == "overfit":
        records = write_overfit_corpus(args.out, seed=args.seed)
    else:
        plans = random_plans(default_speakers(args.speakers),
                             args.per_speaker, seed=args.seed)
        records = write_corpus(plans, args.out, seed=args.seed)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _corpus_mel_frames(records):
    from . import dsp

    frames = []
    for rec in records:
        path = rec.clean_path if rec.variant == "clean" else rec.mixture_path
        frames.append(dsp.mel_spectrogram(dsp.read_wav(path)).values)
    return np.concatenate(frames)


def _cmd_train_vqvae(args) -> int:
    from .corpus import fit_manifest, load_records
    from .training import save_tokenizers
    from .vqvae import VqvaeConfig, train_vqvae

    config = _load_config(args.config)
    run_defaults = {"steps": 4000, "batch_size": 256, "lr": 2e-3,
                    "seed": 0, "content_vocab": 100}
    model_keys = asdict(VqvaeConfig())
    resolved = _resolve({**model_keys, **run_defaults}, config, args)
    _announce("train vqvae", resolved)

    records = load_records(args.corpus + "/manifest.jsonl")
    manifest = fit_manifest(records, seed=resolved["seed"],
                            content_vocab=resolved["content_vocab"])
    frames = _corpus_mel_frames(records)
    vq_config = VqvaeConfig(**{k: resolved[k] for k in model_keys})
    model, curve = train_vqvae(frames, vq_config, steps=resolved["steps"],
                               batch_size=resolved["batch_size"],
                               lr=resolved["lr"], seed=resolved["seed"])
    save_tokenizers(args.out, model, manifest)
    last = curve[-1]
    print(f"trained on {frames.shape[0]} frames; recon_mse "
          f"{last['recon_mse']:.5f}, codebook_usage "
          f"{last['codebook_usage']:.3f}; saved to {args.out}")
    return 0


def _cmd_train_mae(args) -> int:
    from .corpus import build_training_examples, load_records
    from .mae import MaeConfig
    from .training import (TrainSchedule, evaluate_directions,
                           load_tokenizers, save_checkpoint, train_mae)

    config = _load_config(args.config)
    defaults = {**asdict(TrainSchedule()), "model": "tiny",
                "clean_only": False}
    resolved = _resolve(defaults, config, args)
    _announce("train mae", resolved)

    records = load_records(args.corpus + "/manifest.jsonl")
    if resolved["clean_only"]:
        records = [r for r in records if r.variant == "clean"]
    vqvae, manifest = load_tokenizers(args.tokenizers)
    examples = build_training_examples(records, manifest, vqvae,
                                       cache_dir=args.cache_dir)
    schedule = TrainSchedule(**{k: resolved[k]
                                for k in asdict(TrainSchedule())})
    mae_config = (MaeConfig.tiny() if resolved["model"] == "tiny"
                  else MaeConfig())
    result = train_mae(examples, manifest, vqvae, mae_config, schedule,
                       out_dir=args.log_dir)
    save_checkpoint(args.out, result.model, vqvae, manifest)
    report = evaluate_directions(result.model, examples, result.layout)
    print(f"trained {schedule.steps} steps on {len(examples)} examples; "
          f"final loss {result.step_losses[-1]:.4f}; saved to {args.out}")
    for hide, accs in sorted(report.items()):
        print(f"masked accuracy with {hide} hidden: {accs['overall']:.4f}")
    return 0


def _tracks_blob(attrs) -> dict:
    return {
        "content": np.asarray(attrs.content).tolist(),
        "f0_hz": np.asarray(attrs.f0).tolist(),
        "loudness": np.asarray(attrs.loudness).tolist(),
        "speaker": {"label": int(attrs.speaker)},
        "snr_db": np.asarray(attrs.snr_db).tolist(),
        "c50_db": np.asarray(attrs.c50_db).tolist(),
    }


def _cmd_analyze(args) -> int:
    from . import dsp
    from .control import analyze
    from .training import load_checkpoint

    resolved = {"wav": args.wav, "bundle": args.bundle, "out": args.out,
                "seed": args.seed}
    _announce("analyze", resolved)
    torch.manual_seed(args.seed)
    bundle = load_checkpoint(args.bundle)
    wav = dsp.read_wav(args.wav)
    attrs = analyze(wav, bundle)
    blob = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "sample_rate": dsp.SAMPLE_RATE,
        "hop_size": dsp.HOP_SIZE,
        "n_frames": int(attrs.n_frames),
        "tracks": _tracks_blob(attrs),
    }
    blob["tracks"]["speaker"]["name"] = \
        bundle.manifest.speaker_names[attrs.speaker]
    with open(args.out, "w") as f:
        json.dump(blob, f)
    voiced = attrs.f0[attrs.f0 > 0]
    mean_f0 = float(voiced.mean()) if voiced.size else 0.0
    print(f"analyzed {attrs.n_frames} frames; speaker "
          f"{blob['tracks']['speaker']['name']}, mean voiced f0 "
          f"{mean_f0:.1f} Hz, mean snr {float(np.mean(attrs.snr_db)):.1f} dB;"
          f" wrote {args.out}")
    return 0


def _collect_edits(args) -> list:
    from .control import (PitchShift, ScaleLoudness, SetC50, SetSnr,
                          SetSpeaker)

    edits = []
    if args.pitch_shift is not None:
        edits.append(PitchShift(args.pitch_shift))
    if args.set_snr is not None:
        edits.append(SetSnr(args.set_snr))
    if args.set_c50 is not None:
        edits.append(SetC50(args.set_c50))
    if args.scale_loudness is not None:
        edits.append(ScaleLoudness(args.scale_loudness))
    if args.set_speaker is not None:
        edits.append(SetSpeaker(args.set_speaker))
    return edits


def _cmd_resynth(args) -> int:
    from . import dsp
    from .control import resynthesize
    from .training import load_checkpoint

    resolved = {"wav": args.wav, "bundle": args.bundle, "out": args.out,
                "report": args.report, "gl_iters": args.gl_iters,
                "seed": args.seed, "pitch_shift": args.pitch_shift,
                "set_snr": args.set_snr, "set_c50": args.set_c50,
                "scale_loudness": args.scale_loudness,
                "set_speaker": args.set_speaker}
    _announce("resynth", resolved)
    torch.manual_seed(args.seed)
    bundle = load_checkpoint(args.bundle)
    wav = dsp.read_wav(args.wav)
    out, report = resynthesize(wav, _collect_edits(args), bundle,
                               gl_iters=args.gl_iters)
    dsp.write_wav(args.out, out)
    report = {"schema_version": REPORT_SCHEMA_VERSION, **report}
    if args.report is not None:
        with open(args.report, "w") as f:
            json.dump(report, f)
    aae = report["f0_aae_vs_target"]
    print(f"wrote {args.out}; edits {report['edits'] or ['none']}; "
          f"f0 AAE vs target "
          + (f"{aae:.2f} Hz" if aae is not None else "n/a (no voiced frames)"))
    return 0


def _eval_common(args):
    from .corpus import load_records
    from .training import load_checkpoint

    bundle = load_checkpoint(args.bundle)
    records = load_records(args.corpus + "/manifest.jsonl")
    return bundle, records


def _cmd_eval_f0(args) -> int:
    from .evaluation import run_f0_robustness

    resolved = {"bundle": args.bundle, "corpus": args.corpus,
                "out": args.out, "seed": args.seed}
    _announce("eval f0", resolved)
    bundle, records = _eval_common(args)
    rows = run_f0_robustness(bundle, records, seed=args.seed,
                             out_dir=args.out)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    print(f"wrote f0_robustness.csv and f0_robustness.png to {args.out}")
    return 0


def _cmd_eval_pitch_shift(args) -> int:
    from .evaluation import run_pitch_shift_eval

    resolved = {"bundle": args.bundle, "corpus": args.corpus,
                "out": args.out, "gl_iters": args.gl_iters,
                "seed": args.seed}
    _announce("eval pitch-shift", resolved)
    bundle, records = _eval_common(args)
    rows = run_pitch_shift_eval(bundle, records, gl_iters=args.gl_iters,
                                out_dir=args.out)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    print(f"wrote pitch_shift.csv and pitch_shift.png to {args.out}")
    return 0


def _cmd_eval_denoise(args) -> int:
    from .evaluation import run_denoise_eval, summarize_denoise

    resolved = {"bundle": args.bundle, "corpus": args.corpus,
                "out": args.out, "variant": args.variant,
                "target_snr": args.target_snr, "gl_iters": args.gl_iters,
                "passthrough": args.passthrough, "seed": args.seed}
    _announce("eval denoise", resolved)
    bundle, records = _eval_common(args)
    subset = [r for r in records if r.variant == args.variant]
    if not subset:
        raise ValueError(f"no records with variant {args.variant!r}")
    rows = run_denoise_eval(bundle, subset, target_snr_db=args.target_snr,
                            gl_iters=args.gl_iters,
                            include_passthrough=args.passthrough,
                            out_dir=args.out)
    print(json.dumps(summarize_denoise(rows), sort_keys=True))
    print(f"wrote denoise.csv and denoise.png to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_seed(parser, default: int | None = 0) -> None:
    parser.add_argument("--seed", type=int, default=default,
                        help="random seed (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechmae",
        description="Speech attribute analysis, editing, and resynthesis "
                    "with a masked token autoencoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="synthetic corpus tools")
    corpus_sub = corpus.add_subparsers(dest="subcommand", required=True)
    gen = corpus_sub.add_parser("gen", help="render a synthetic corpus")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--preset", choices=("overfit", "random"),
                     default="overfit")
    gen.add_argument("--speakers", type=int, default=2,
                     help="voices for the random preset")
    gen.add_argument("--per-speaker", type=int, default=4,
                     help="utterances per voice for the random preset")
    _add_seed(gen)
    gen.set_defaults(handler=_cmd_corpus_gen)

    train = sub.add_parser("train", help="training stages")
    train_sub = train.add_subparsers(dest="subcommand", required=True)

    tvq = train_sub.add_parser("vqvae", help="train the mel tokenizer")
    tvq.add_argument("--corpus", required=True, help="corpus directory")
    tvq.add_argument("--out", required=True, help="tokenizer checkpoint path")
    tvq.add_argument("--config", help="JSON file of defaults")
    tvq.add_argument("--steps", type=int)
    tvq.add_argument("--batch-size", type=int, dest="batch_size")
    tvq.add_argument("--lr", type=float)
    tvq.add_argument("--content-vocab", type=int, dest="content_vocab")
    _add_seed(tvq, default=None)
    tvq.set_defaults(handler=_cmd_train_vqvae)

    tmae = train_sub.add_parser("mae", help="train the masked autoencoder")
    tmae.add_argument("--corpus", required=True, help="corpus directory")
    tmae.add_argument("--tokenizers", required=True,
                      help="checkpoint from `train vqvae`")
    tmae.add_argument("--out", required=True, help="model bundle path")
    tmae.add_argument("--config", help="JSON file of defaults")
    tmae.add_argument("--model", choices=("tiny", "full"))
    tmae.add_argument("--steps", type=int)
    tmae.add_argument("--batch-size", type=int, dest="batch_size")
    tmae.add_argument("--lr", type=float)
    tmae.add_argument("--warmup-steps", type=int, dest="warmup_steps")
    tmae.add_argument("--weight-decay", type=float, dest="weight_decay")
    tmae.add_argument("--phase-split", type=float, dest="phase_split")
    tmae.add_argument("--clean-only", action="store_true", default=None,
                      help="train on clean variants only")
    tmae.add_argument("--log-dir", dest="log_dir",
                      help="directory for metrics/checkpoints during training")
    tmae.add_argument("--cache-dir", dest="cache_dir",
                      help="token cache directory (default: "
                           "$SPEECHMAE_CACHE_DIR)")
    _add_seed(tmae, default=None)
    tmae.set_defaults(handler=_cmd_train_mae)

    ana = sub.add_parser("analyze", help="waveform -> attribute tracks")
    ana.add_argument("wav", help="input wav (16 kHz mono)")
    ana.add_argument("--bundle", required=True, help="trained model bundle")
    ana.add_argument("--out", required=True, help="attrs JSON path")
    _add_seed(ana)
    ana.set_defaults(handler=_cmd_analyze)

    res = sub.add_parser("resynth",
                         help="analyze, edit attributes, regenerate audio")
    res.add_argument("wav", help="input wav (16 kHz mono)")
    res.add_argument("--bundle", required=True, help="trained model bundle")
    res.add_argument("--pitch-shift", type=_percent, dest="pitch_shift",
                     metavar="P%", help="scale voiced pitch by P percent")
    res.add_argument("--set-snr", type=float, dest="set_snr", metavar="DB")
    res.add_argument("--set-c50", type=float, dest="set_c50", metavar="DB")
    res.add_argument("--scale-loudness", type=float, dest="scale_loudness",
                     metavar="F")
    res.add_argument("--set-speaker", type=int, dest="set_speaker",
                     metavar="L", help="target speaker label")
    res.add_argument("--out", required=True, help="output wav path")
    res.add_argument("--report", help="detailed JSON report path")
    res.add_argument("--gl-iters", type=int, default=60, dest="gl_iters")
    _add_seed(res)
    res.set_defaults(handler=_cmd_resynth)

    ev = sub.add_parser("eval", help="experiment runners")
    ev_sub = ev.add_subparsers(dest="subcommand", required=True)

    evf = ev_sub.add_parser("f0", help="pitch robustness across degradations")
    evf.add_argument("--bundle", required=True)
    evf.add_argument("--corpus", required=True)
    evf.add_argument("--out", required=True, help="output directory")
    _add_seed(evf)
    evf.set_defaults(handler=_cmd_eval_f0)

    evp = ev_sub.add_parser("pitch-shift", help="pitch-shift control accuracy")
    evp.add_argument("--bundle", required=True)
    evp.add_argument("--corpus", required=True)
    evp.add_argument("--out", required=True, help="output directory")
    evp.add_argument("--gl-iters", type=int, default=60, dest="gl_iters")
    _add_seed(evp)
    evp.set_defaults(handler=_cmd_eval_pitch_shift)

    evd = ev_sub.add_parser("denoise", help="denoising via the snr attribute")
    evd.add_argument("--bundle", required=True)
    evd.add_argument("--corpus", required=True)
    evd.add_argument("--out", required=True, help="output directory")
    evd.add_argument("--variant", default="snr0",
                     help="which degraded variant to denoise")
    evd.add_argument("--target-snr", type=float, default=40.0,
                     dest="target_snr")
    evd.add_argument("--gl-iters", type=int, default=60, dest="gl_iters")
    evd.add_argument("--passthrough", action="store_true",
                     help="also resynthesize at the input's true snr")
    _add_seed(evd)
    evd.set_defaults(handler=_cmd_eval_denoise)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
