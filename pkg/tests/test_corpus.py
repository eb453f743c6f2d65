"""Tests for synthetic corpus generation and the token example pipeline."""

import numpy as np
import pytest
import torch

from speechmae import dsp
from speechmae.corpus import (
    OVERFIT_VARIANTS,
    SEGMENT_SECONDS,
    UtterancePlan,
    build_overfit_plans,
    build_training_examples,
    default_speakers,
    fit_manifest,
    layout_for_examples,
    load_records,
    pitch_cover_plans,
    random_plans,
    render_utterance,
    segment_bounds,
    write_corpus,
    write_overfit_corpus,
)
from speechmae.quantizers import (
    ATTR_FAMILIES,
    SNR,
    TokenizerManifest,
    quantize_linear,
)
from speechmae.vqvae import MelFrameVqvae, VqvaeConfig

SEG_SAMPLES = int(SEGMENT_SECONDS * dsp.SAMPLE_RATE)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    records = write_overfit_corpus(out, seed=0)
    return out, records


@pytest.fixture(scope="module")
def manifest(corpus):
    _, records = corpus
    return fit_manifest(records, seed=0)


@pytest.fixture(scope="module")
def vqvae(corpus):
    """A codebook-seeded (not trained) tokenizer; enough for shape tests."""
    _, records = corpus
    model = MelFrameVqvae(VqvaeConfig())
    mel = dsp.mel_spectrogram(dsp.read_wav(records[0].clean_path))
    with torch.no_grad():
        z = model.encode_latent(model.normalize(
            torch.from_numpy(mel.values).float()))
    torch.manual_seed(0)
    model.init_codebooks_from(z, np.random.default_rng(0))
    return model


@pytest.fixture(scope="module")
def examples(corpus, manifest, vqvae):
    _, records = corpus
    return build_training_examples(records, manifest, vqvae)


class TestSynthesis:
    def test_render_shapes(self):
        plan = build_overfit_plans(seed=0)[0]
        wav, contour = render_utterance(plan, seed=0)
        assert len(wav) == SEG_SAMPLES
        assert contour.shape == (SEG_SAMPLES // dsp.HOP_SIZE,)

    def test_tracker_matches_programmed_contour(self):
        # the pitch oracle should recover the generator's own contour
        for i, plan in enumerate(build_overfit_plans(seed=0)[:3]):
            wav, contour = render_utterance(plan, seed=i)
            tracked = dsp.estimate_f0_acf(wav)
            both = (contour > 0) & (tracked > 0)
            assert both.mean() > 0.75
            aae = np.abs(tracked[both] - contour[both]).mean()
            assert aae < 2.0

    def test_render_deterministic(self):
        plan = build_overfit_plans(seed=0)[0]
        a, _ = render_utterance(plan, seed=7)
        b, _ = render_utterance(plan, seed=7)
        assert np.array_equal(a.samples, b.samples)

    def test_speakers_differ(self):
        plans = build_overfit_plans(seed=0)
        spk1 = plans[0]
        spk2 = UtterancePlan(spk1.utt_id, default_speakers(2)[1], spk1.slots)
        a, _ = render_utterance(spk1, seed=0)
        b, _ = render_utterance(spk2, seed=0)
        assert not np.allclose(a.samples, b.samples)


class TestPlans:
    def test_random_plan_counts(self):
        plans = random_plans(default_speakers(4), per_speaker=8, seed=0)
        assert len(plans) == 32
        assert {p.speaker.label for p in plans} == {1, 2, 3, 4}
        for p in plans:
            for s in p.slots:
                assert 80.0 <= s.f0_start <= 300.0
                assert 80.0 <= s.f0_end <= 300.0

    def test_overfit_plan_structure(self):
        plans = build_overfit_plans(seed=0)
        assert len(plans) == 8
        roles = [p.role for p in plans]
        assert roles.count("coverage") == 6
        assert roles.count("probe") == 2
        for p in plans:
            if p.role == "probe":
                for s in p.slots:
                    assert 160.0 <= min(s.f0_start, s.f0_end)
                    assert max(s.f0_start, s.f0_end) <= 200.0

    def test_coverage_tiles_pitch_range(self):
        plans = build_overfit_plans(seed=0)
        for label in (1, 2):
            spans = sorted(
                (min(s.f0_start, s.f0_end), max(s.f0_start, s.f0_end))
                for p in plans
                if p.speaker.label == label and p.role == "coverage"
                for s in p.slots)
            reach = spans[0][1]
            assert spans[0][0] <= 80.0
            for lo, hi in spans[1:]:
                assert lo <= reach          # no gaps between glide bands
                reach = max(reach, hi)
            assert reach >= 300.0

    def test_plans_deterministic(self):
        assert build_overfit_plans(seed=3) == build_overfit_plans(seed=3)

    def test_pitch_covers_keep_vowels_and_levels(self):
        base = build_overfit_plans(seed=0)
        covers = pitch_cover_plans(base, per_utterance=2, seed=0)
        assert len(covers) == 2 * len(base)
        by_id = {p.utt_id: p for p in base}
        for cover in covers:
            assert cover.role == "pitch_cover"
            parent = by_id[cover.utt_id.rsplit("_pv", 1)[0]]
            assert cover.speaker == parent.speaker
            for got, want in zip(cover.slots, parent.slots):
                assert got.vowel == want.vowel
                assert got.level == want.level

    def test_pitch_covers_span_wide_range(self):
        base = build_overfit_plans(seed=0)
        covers = pitch_cover_plans(base, per_utterance=3, seed=0,
                                   f0_range=(60.0, 440.0))
        starts = [s.f0_start for p in covers for s in p.slots]
        assert min(starts) < 80.0        # below the canonical tiling
        assert max(starts) > 330.0       # above it
        for p in covers:
            for s in p.slots:
                assert 60.0 <= s.f0_start <= 440.0
                assert 60.0 <= s.f0_end <= 440.0


class TestCorpusFiles:
    def test_clean_variant_shares_path(self, tmp_path):
        plans = random_plans(default_speakers(2), per_speaker=1, seed=1)
        records = write_corpus(plans, tmp_path, seed=1)
        assert len(records) == 2
        for rec in records:
            assert rec.mixture_path == rec.clean_path
            assert rec.degradation.snr_db == dsp.DB_CLAMP

    def test_snr_variant_measures_exactly(self, tmp_path):
        plans = random_plans(default_speakers(2), per_speaker=1, seed=2)[:1]
        records = write_corpus(plans, tmp_path,
                               variants=[("snr10", 10.0, None)], seed=2)
        rec = records[0]
        clean = dsp.read_wav(rec.clean_path)
        mixture = dsp.read_wav(rec.mixture_path)
        resid = mixture.samples - clean.samples
        snr = 10.0 * np.log10(np.mean(clean.samples ** 2)
                              / np.mean(resid ** 2))
        # 16-bit quantization of the wav files costs a little precision
        assert abs(snr - 10.0) < 0.05
        assert rec.degradation.snr_db == 10.0

    def test_reverb_variant_records_c50(self, tmp_path):
        plans = random_plans(default_speakers(2), per_speaker=1, seed=3)[:1]
        records = write_corpus(plans, tmp_path,
                               variants=[("rev", None, 8.0)], seed=3)
        meta = records[0].degradation
        assert abs(meta.c50_db - 8.0) < 0.01
        assert records[0].mixture_path != records[0].clean_path

    def test_manifest_roundtrip(self, corpus):
        out, records = corpus
        loaded = load_records(out / "manifest.jsonl")
        assert [r.to_json() for r in loaded] == [r.to_json() for r in records]

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text("")
        with pytest.raises(ValueError, match="no records"):
            load_records(path)


class TestOverfitCorpus:
    def test_record_grid(self, corpus):
        _, records = corpus
        canonical = [r for r in records if r.role in ("coverage", "probe")]
        covers = [r for r in records if r.role == "pitch_cover"]
        assert len(canonical) + len(covers) == len(records)
        # canonical: clean/snr0/snr40 plus one mid-SNR mixture each
        assert len(canonical) == 8 * (len(OVERFIT_VARIANTS) + 1)
        assert len({r.utt_id for r in canonical}) == 8
        assert {r.variant for r in canonical} > {"clean", "snr0", "snr40"}
        # covers: three clean re-pitched renders per canonical utterance
        assert len(covers) == 8 * 3
        assert all(r.variant == "clean" for r in covers)

    def test_mid_snr_variants_inside_range(self, corpus):
        _, records = corpus
        mids = [r for r in records
                if r.variant not in ("clean", "snr0", "snr40")]
        assert len(mids) == 8
        for rec in mids:
            assert 5.0 <= rec.degradation.snr_db <= 30.0
            clean = dsp.read_wav(rec.clean_path)
            mixture = dsp.read_wav(rec.mixture_path)
            resid = mixture.samples - clean.samples
            snr = 10.0 * np.log10(np.mean(clean.samples ** 2)
                                  / np.mean(resid ** 2))
            assert abs(snr - rec.degradation.snr_db) < 0.05

    def test_all_signals_segment_length(self, corpus):
        _, records = corpus
        for rec in records:
            assert len(dsp.read_wav(rec.mixture_path)) == SEG_SAMPLES

    def test_noisy_variant_snr(self, corpus):
        _, records = corpus
        rec = next(r for r in records if r.variant == "snr0")
        clean = dsp.read_wav(rec.clean_path)
        mixture = dsp.read_wav(rec.mixture_path)
        resid = mixture.samples - clean.samples
        snr = 10.0 * np.log10(np.mean(clean.samples ** 2)
                              / np.mean(resid ** 2))
        assert abs(snr - 0.0) < 0.05

    def test_rerun_is_bit_identical(self, corpus, tmp_path):
        out, _ = corpus
        again = write_overfit_corpus(tmp_path, seed=0)
        name = again[0].clean_path.split("/")[-1]
        a = (out / name).read_bytes()
        b = (tmp_path / name).read_bytes()
        assert a == b


class TestManifestFit:
    def test_specs_complete(self, manifest):
        assert set(manifest.specs) == set(ATTR_FAMILIES)
        assert manifest.n_speakers == 2
        assert manifest.codebook.size == 100


class TestSegmentBounds:
    def test_exact_multiple(self):
        assert segment_bounds(2 * SEG_SAMPLES) == [
            (0, SEG_SAMPLES), (SEG_SAMPLES, 2 * SEG_SAMPLES)]

    def test_trailing_partial(self):
        bounds = segment_bounds(SEG_SAMPLES + 100)
        assert bounds == [(0, SEG_SAMPLES),
                          (SEG_SAMPLES, SEG_SAMPLES + 100)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            segment_bounds(0)


class TestExamples:
    def test_shapes_match_layout(self, examples, manifest, vqvae):
        layout = layout_for_examples(manifest, vqvae)
        assert len(examples) == 8 * 4 + 8 * 3    # canonical grid + covers
        for ex in examples:
            assert set(ex.tokens) == {"mel", *ATTR_FAMILIES}
            for fam in layout.families:
                grid = ex.tokens[fam.name]
                assert grid.shape == (fam.n_tokens, fam.entries_per_token)
                assert grid.min() >= 1
                assert grid.max() <= fam.vocab_size

    def test_clean_snr_tokens_hit_top_bin(self, examples, manifest):
        spec = manifest.specs[SNR]
        top = int(quantize_linear(np.array([dsp.DB_CLAMP]), spec)[0])
        for ex in examples:
            if ex.variant == "clean":
                assert np.all(ex.tokens[SNR] == top)

    def test_cache_roundtrip(self, corpus, manifest, vqvae, examples,
                             tmp_path, monkeypatch):
        _, records = corpus
        subset = records[:2]
        first = build_training_examples(subset, manifest, vqvae,
                                        cache_dir=tmp_path)
        # a cache hit must not recompute anything
        monkeypatch.setattr("speechmae.corpus.tokenize_segment",
                            _refuse_tokenize)
        second = build_training_examples(subset, manifest, vqvae,
                                         cache_dir=tmp_path)
        for a, b in zip(first, second):
            assert a.utt_id == b.utt_id
            for name in a.tokens:
                assert np.array_equal(a.tokens[name], b.tokens[name])

    def test_cache_rejects_other_manifest(self, corpus, manifest, vqvae,
                                          tmp_path, monkeypatch):
        _, records = corpus
        subset = records[:1]
        build_training_examples(subset, manifest, vqvae, cache_dir=tmp_path)
        other = TokenizerManifest.from_json(
            manifest.to_json().replace('"s01"', '"renamed"'))
        assert other.digest() != manifest.digest()
        monkeypatch.setattr("speechmae.corpus.tokenize_segment",
                            _refuse_tokenize)
        with pytest.raises(RuntimeError, match="recompute"):
            build_training_examples(subset, other, vqvae, cache_dir=tmp_path)

    def test_cache_dir_from_environment(self, corpus, manifest, vqvae,
                                        tmp_path, monkeypatch):
        _, records = corpus
        monkeypatch.setenv("SPEECHMAE_CACHE_DIR", str(tmp_path))
        build_training_examples(records[:1], manifest, vqvae)
        assert list(tmp_path.glob("*.npz"))


def _refuse_tokenize(*args, **kwargs):
    raise RuntimeError("cache miss forced a recompute")
