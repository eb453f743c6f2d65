"""Session-scale fixtures: the fully trained pipeline.

Building these takes on the order of half an hour of CPU time, so they are
session-scoped and only constructed when a test actually asks for them.
Module-level test files stay hermetic and fast; the acceptance suite and
the trained-model quality tests share these.
"""

import time
from types import SimpleNamespace

import pytest

from speechmae.cli import main as cli_main
from speechmae.corpus import build_training_examples, load_records
from speechmae.mae import MaeConfig
from speechmae.training import (
    TrainSchedule,
    evaluate_directions,
    load_checkpoint,
    load_tokenizers,
    train_mae,
)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Corpus -> tokenizers -> trained bundle, driven through the CLI.

    The model is trained on the full memorization corpus (all degradation
    variants) with the default schedule, which is the configuration the
    analysis- and control-quality requirements are stated against.
    """
    root = tmp_path_factory.mktemp("pipeline")
    corpus_dir = root / "corpus"
    tokenizers_path = root / "tokenizers.pt"
    bundle_path = root / "bundle.pt"
    exit_codes = {
        "corpus gen": cli_main(
            ["corpus", "gen", "--out", str(corpus_dir), "--seed", "0"]),
        "train vqvae": cli_main(
            ["train", "vqvae", "--corpus", str(corpus_dir),
             "--out", str(tokenizers_path), "--seed", "0"]),
        "train mae": cli_main(
            ["train", "mae", "--corpus", str(corpus_dir),
             "--tokenizers", str(tokenizers_path),
             "--out", str(bundle_path), "--seed", "0"]),
    }
    for stage, code in exit_codes.items():
        assert code == 0, f"pipeline stage {stage!r} failed"
    return SimpleNamespace(
        root=root,
        corpus_dir=corpus_dir,
        tokenizers_path=tokenizers_path,
        bundle_path=bundle_path,
        exit_codes=exit_codes,
        records=load_records(corpus_dir / "manifest.jsonl"),
        bundle=load_checkpoint(bundle_path),
    )


@pytest.fixture(scope="session")
def overfit_convergence(pipeline):
    """The memorization run: a tiny model trained on the eight clean
    canonical utterances with the default schedule, with its wall-clock
    time.  Pitch covers are excluded; this run measures pure recall."""
    vqvae, manifest = load_tokenizers(pipeline.tokenizers_path)
    records = [r for r in pipeline.records
               if r.variant == "clean" and r.role in ("coverage", "probe")]
    examples = build_training_examples(records, manifest, vqvae)
    schedule = TrainSchedule()
    start = time.perf_counter()
    result = train_mae(examples, manifest, vqvae, MaeConfig.tiny(), schedule)
    seconds = time.perf_counter() - start
    report = evaluate_directions(result.model, examples, result.layout)
    return SimpleNamespace(result=result, report=report, seconds=seconds,
                           schedule=schedule, n_examples=len(examples))
