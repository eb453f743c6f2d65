"""Tests for the token layout and mask samplers."""

import numpy as np
import pytest
from scipy.stats import kstest

from speechmae.masking import (
    MEL,
    FamilyGeometry,
    MaskPattern,
    TokenLayout,
    all_or_nothing_mask,
    coupled_mask_counts,
    round_half_up,
    sample_coupled_mask,
)
from speechmae.quantizers import (
    ATTR_FAMILIES,
    KMeansCodebook,
    TokenizerManifest,
    default_attr_specs,
)


@pytest.fixture(scope="module")
def layout():
    manifest = TokenizerManifest(
        specs=default_attr_specs(n_speakers=2),
        codebook=KMeansCodebook(np.zeros((100, 13)), "test"),
        speaker_names={1: "a", 2: "b"},
    )
    return TokenLayout.for_segment(manifest, n_mel_frames=200,
                                   mel_entries=8, mel_vocab=128)


class TestRounding:
    def test_half_rounds_up(self):
        assert round_half_up(0.5) == 1
        assert round_half_up(1.5) == 2
        assert round_half_up(2.4999) == 2
        assert round_half_up(0.0) == 0


class TestTokenLayout:
    def test_two_second_segment_counts(self, layout):
        assert layout.n_mel_tokens == 200
        for name in ATTR_FAMILIES:
            assert layout.family(name).n_tokens == 50
        assert layout.total_tokens == 500

    def test_family_slices_partition_the_sequence(self, layout):
        covered = np.zeros(layout.total_tokens, dtype=int)
        for fam in layout.families:
            sl = layout.family_slice(fam.name)
            covered[sl] += 1
            assert sl.stop - sl.start == fam.n_tokens
        assert np.all(covered == 1)

    def test_mel_comes_first(self, layout):
        assert layout.families[0].name == MEL
        assert layout.family_slice(MEL).start == 0

    def test_one_second_segment(self):
        manifest = TokenizerManifest(
            specs=default_attr_specs(n_speakers=2),
            codebook=KMeansCodebook(np.zeros((100, 13)), "test"),
            speaker_names={1: "a", 2: "b"},
        )
        lay = TokenLayout.for_segment(manifest, 100, 8, 128)
        assert lay.n_mel_tokens == 100
        assert lay.family("content").n_tokens == 25
        assert lay.family("f0").n_tokens == 25

    def test_layout_requires_mel_first(self):
        fams = (FamilyGeometry("f0", 10, 4, 100),)
        with pytest.raises(ValueError, match="mel"):
            TokenLayout(fams)

    def test_unknown_family_raises(self, layout):
        with pytest.raises(KeyError):
            layout.family("reverb")


class TestCoupledMask:
    def test_exact_counts_at_fixed_ratios(self, layout):
        rng = np.random.default_rng(0)
        for p in [0.0, 0.25, 0.5, 0.777, 1.0]:
            pattern = sample_coupled_mask(layout, rng, ratio=p)
            counts = coupled_mask_counts(layout, p)
            mel_slice = layout.family_slice(MEL)
            assert int(pattern.flags[mel_slice].sum()) == counts[MEL]
            for name in ATTR_FAMILIES:
                sl = layout.family_slice(name)
                assert int(pattern.flags[sl].sum()) == counts[name]

    def test_count_coupling_is_complementary(self, layout):
        # more mel hidden always means fewer attribute tokens hidden
        for p in np.linspace(0, 1, 21):
            counts = coupled_mask_counts(layout, float(p))
            assert counts[MEL] == round_half_up(p * 200)
            assert counts["f0"] == round_half_up((1 - p) * 50)

    def test_visible_set_never_empty(self, layout):
        rng = np.random.default_rng(1)
        for _ in range(200):
            pattern = sample_coupled_mask(layout, rng)
            assert pattern.n_masked < layout.total_tokens

    def test_ratio_distribution_is_uniform(self, layout):
        # KS test on the sampled coupling ratios at alpha = 0.01
        rng = np.random.default_rng(2)
        ratios = [sample_coupled_mask(layout, rng).ratio for _ in range(2000)]
        result = kstest(ratios, "uniform")
        assert result.pvalue > 0.01

    def test_mel_masked_fraction_is_uniform(self, layout):
        # the realized masked fraction inherits the uniform law up to
        # the 1/200 count discretization
        rng = np.random.default_rng(3)
        mel_slice = layout.family_slice(MEL)
        fracs = []
        for _ in range(2000):
            pattern = sample_coupled_mask(layout, rng)
            fracs.append(pattern.flags[mel_slice].sum() / 200.0)
        result = kstest(fracs, "uniform")
        assert result.pvalue > 0.01

    def test_positions_are_hit_uniformly(self, layout):
        rng = np.random.default_rng(4)
        hits = np.zeros(layout.total_tokens)
        n = 3000
        for _ in range(n):
            hits += sample_coupled_mask(layout, rng).flags
        rates = hits / n
        # each position is masked with probability ~1/2 on average
        assert np.all(np.abs(rates - 0.5) < 0.06)

    def test_bad_ratio_rejected(self, layout):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError, match="ratio"):
            sample_coupled_mask(layout, rng, ratio=1.5)

    def test_deterministic_given_seed(self, layout):
        a = sample_coupled_mask(layout, np.random.default_rng(42))
        b = sample_coupled_mask(layout, np.random.default_rng(42))
        np.testing.assert_array_equal(a.flags, b.flags)
        assert a.ratio == b.ratio


class TestAllOrNothing:
    def test_hide_mel(self, layout):
        pattern = all_or_nothing_mask(layout, MEL)
        mel_slice = layout.family_slice(MEL)
        assert np.all(pattern.flags[mel_slice])
        assert not np.any(pattern.flags[mel_slice.stop:])
        assert pattern.ratio == 1.0

    def test_hide_attributes(self, layout):
        pattern = all_or_nothing_mask(layout, "attributes")
        mel_slice = layout.family_slice(MEL)
        assert not np.any(pattern.flags[mel_slice])
        assert np.all(pattern.flags[mel_slice.stop:])
        assert pattern.ratio == 0.0

    def test_directions_are_exact_complements(self, layout):
        hide_mel = all_or_nothing_mask(layout, MEL).flags
        hide_attrs = all_or_nothing_mask(layout, "attributes").flags
        assert np.all(hide_mel ^ hide_attrs)
        assert not np.any(hide_mel & hide_attrs)

    def test_unknown_stream_rejected(self, layout):
        with pytest.raises(ValueError, match="hide"):
            all_or_nothing_mask(layout, "loudness")


class TestMaskPattern:
    def test_flags_must_be_1d(self):
        with pytest.raises(ValueError, match="1-D"):
            MaskPattern(np.zeros((2, 3), dtype=bool), 0.5)

    def test_ratio_must_be_in_unit_interval(self):
        with pytest.raises(ValueError, match="ratio"):
            MaskPattern(np.zeros(10, dtype=bool), -0.1)
