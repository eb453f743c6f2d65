"""Tests for the masked token autoencoder."""

import math

import numpy as np
import pytest
import torch

from speechmae.mae import (
    MaeConfig,
    MaskedTokenModel,
    masked_accuracy,
    sinusoidal_positions,
    smooth_table_init,
)
from speechmae.masking import (
    MEL,
    FamilyGeometry,
    TokenLayout,
    all_or_nothing_mask,
    sample_coupled_mask,
)


def small_layout() -> TokenLayout:
    """A miniature layout with the same family structure as the real one."""
    return TokenLayout((
        FamilyGeometry(MEL, 6, 8, 12),
        FamilyGeometry("content", 3, 2, 10),
        FamilyGeometry("f0", 3, 4, 9),
        FamilyGeometry("loudness", 2, 4, 8),
        FamilyGeometry("speaker", 2, 4, 3),
        FamilyGeometry("snr", 2, 4, 8),
        FamilyGeometry("c50", 2, 4, 8),
    ))


def random_tokens(layout, batch, seed=0):
    rng = np.random.default_rng(seed)
    return {f.name: torch.from_numpy(
        rng.integers(1, f.vocab_size + 1,
                     size=(batch, f.n_tokens, f.entries_per_token)))
        for f in layout.families}


def random_mask(layout, batch, seed=0, ratio=None):
    rng = np.random.default_rng(seed)
    flags = np.stack([sample_coupled_mask(layout, rng, ratio=ratio).flags
                      for _ in range(batch)])
    return torch.from_numpy(flags)


@pytest.fixture(scope="module")
def layout():
    return small_layout()


@pytest.fixture(scope="module")
def model(layout):
    return MaskedTokenModel(MaeConfig.tiny(), layout, seed=0)


class TestConfig:
    def test_tiny_preset(self):
        cfg = MaeConfig.tiny()
        assert cfg.width == 32
        assert cfg.encoder_blocks == 2 and cfg.decoder_blocks == 2
        assert cfg.heads == 4

    def test_width_must_divide_by_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            MaeConfig(width=30, heads=4)

    def test_width_must_divide_by_entries(self, layout):
        # mel has 8 entries per token; width 36 is not divisible by 8
        with pytest.raises(ValueError, match="divisible"):
            MaskedTokenModel(MaeConfig(width=36, heads=2), layout)


class TestInitializers:
    def test_sinusoidal_positions_shape_and_bounds(self):
        table = sinusoidal_positions(50, 32)
        assert table.shape == (50, 32)
        assert float(table.abs().max()) <= 1.0 + 1e-6

    def test_smooth_table_is_smooth_in_the_index(self):
        gen = torch.Generator().manual_seed(0)
        table = smooth_table_init(400, 16, gen)
        rng = np.random.default_rng(0)
        w = table.numpy()
        step = np.linalg.norm(np.diff(w, axis=0), axis=1).mean()
        far = np.linalg.norm(w[rng.integers(0, 400, 500)]
                             - w[rng.integers(0, 400, 500)], axis=1).mean()
        assert step < 0.25 * far

    def test_heads_start_at_zero(self, model, layout):
        for fam in layout.families:
            head = model.heads[fam.name]
            assert float(head.weight.detach().abs().sum()) == 0.0
            assert float(head.bias.detach().abs().sum()) == 0.0


class TestForward:
    def test_logit_shapes(self, model, layout):
        toks = random_tokens(layout, 3)
        logits = model(toks, random_mask(layout, 3))
        for fam in layout.families:
            assert logits[fam.name].shape == (3, fam.n_tokens,
                                              fam.entries_per_token,
                                              fam.vocab_size)

    def test_deterministic_given_seed(self, layout):
        a = MaskedTokenModel(MaeConfig.tiny(), layout, seed=3)
        b = MaskedTokenModel(MaeConfig.tiny(), layout, seed=3)
        toks = random_tokens(layout, 2)
        mask = random_mask(layout, 2)
        la, lb = a(toks, mask), b(toks, mask)
        for name in la:
            torch.testing.assert_close(la[name], lb[name])

    def test_packing_order_does_not_change_logits(self, model, layout):
        toks = random_tokens(layout, 2)
        mask = random_mask(layout, 2, ratio=0.5)
        base = model(toks, mask)
        orders = torch.stack([
            torch.from_numpy(np.random.default_rng(i).permutation(
                np.flatnonzero(~mask[i].numpy())))
            for i in range(2)])
        shuffled = model(toks, mask, visible_order=orders)
        for name in base:
            torch.testing.assert_close(base[name], shuffled[name])

    def test_all_masked_example_rejected(self, model, layout):
        toks = random_tokens(layout, 1)
        mask = torch.ones(1, layout.total_tokens, dtype=torch.bool)
        with pytest.raises(ValueError, match="visible"):
            model(toks, mask)

    def test_wrong_mask_shape_rejected(self, model, layout):
        toks = random_tokens(layout, 2)
        with pytest.raises(ValueError, match="mask"):
            model(toks, torch.zeros(2, 7, dtype=torch.bool))

    def test_token_out_of_vocab_rejected(self, model, layout):
        toks = random_tokens(layout, 1)
        toks[MEL][0, 0, 0] = 13
        with pytest.raises(ValueError, match="outside"):
            model(toks, random_mask(layout, 1))

    def test_zero_token_rejected(self, model, layout):
        toks = random_tokens(layout, 1)
        toks["f0"][0, 0, 0] = 0
        with pytest.raises(ValueError, match="outside"):
            model(toks, random_mask(layout, 1))

    def test_inconsistent_visible_order_rejected(self, model, layout):
        toks = random_tokens(layout, 1)
        mask = random_mask(layout, 1, ratio=0.5)
        bad = torch.zeros(1, int((~mask[0]).sum()), dtype=torch.long)
        bad[0, :] = torch.nonzero(mask[0]).squeeze(1)[:bad.shape[1]]
        with pytest.raises(ValueError, match="visible_order"):
            model(toks, mask, visible_order=bad)


class TestLoss:
    def test_step0_loss_is_uniform_baseline(self, model, layout):
        # zero-initialized heads emit flat logits, so the loss must equal the
        # masked-entry-weighted mean of ln(vocab) exactly
        toks = random_tokens(layout, 4)
        mask = random_mask(layout, 4)
        logits = model(toks, mask)
        loss, _ = model.loss_on_masked(logits, toks, mask)
        num = den = 0.0
        for fam in layout.families:
            sl = layout.family_slice(fam.name)
            cnt = int(mask[:, sl].sum()) * fam.entries_per_token
            num += cnt * math.log(fam.vocab_size)
            den += cnt
        assert abs(float(loss.detach()) - num / den) < 1e-5

    def test_loss_ignores_visible_targets(self, model, layout):
        toks = random_tokens(layout, 2)
        mask = random_mask(layout, 2, ratio=0.5)
        logits = model(toks, mask)
        loss_a, _ = model.loss_on_masked(logits, toks, mask)
        corrupted = {k: v.clone() for k, v in toks.items()}
        for fam in layout.families:
            sl = layout.family_slice(fam.name)
            visible = ~mask[:, sl]
            grid = corrupted[fam.name]
            grid[visible.unsqueeze(-1).expand_as(grid)] = 1
        loss_b, _ = model.loss_on_masked(logits, corrupted, mask)
        assert float(loss_a.detach()) == float(loss_b.detach())

    def test_per_family_report_covers_masked_families(self, model, layout):
        toks = random_tokens(layout, 2)
        mask = torch.from_numpy(
            np.tile(all_or_nothing_mask(layout, MEL).flags, (2, 1)))
        logits = model(toks, mask)
        _, per_fam = model.loss_on_masked(logits, toks, mask)
        assert set(per_fam) == {MEL}

    def test_empty_mask_rejected(self, model, layout):
        toks = random_tokens(layout, 1)
        mask = torch.zeros(1, layout.total_tokens, dtype=torch.bool)
        logits = model(toks, random_mask(layout, 1))
        with pytest.raises(ValueError, match="hides nothing"):
            model.loss_on_masked(logits, toks, mask)


class TestPrediction:
    def test_zero_heads_predict_index_one(self, model, layout):
        # flat logits tie everywhere; ties resolve to the lowest index
        toks = random_tokens(layout, 1)
        logits = model(toks, random_mask(layout, 1))
        pred = model.predict_tokens(logits)
        for name, grid in pred.items():
            assert np.all(grid == 1)

    def test_masked_accuracy_matches_manual_count(self, model, layout):
        toks = random_tokens(layout, 3, seed=5)
        mask = torch.from_numpy(
            np.tile(all_or_nothing_mask(layout, "attributes").flags, (3, 1)))
        acc = masked_accuracy(model, toks, mask)
        # untrained model predicts 1 everywhere, so accuracy per family is
        # the fraction of masked targets equal to 1
        for fam in layout.families[1:]:
            want = toks[fam.name].numpy()
            expect = float((want == 1).mean())
            assert abs(acc[fam.name] - expect) < 1e-12
        assert MEL not in acc


class TestGradients:
    def test_analytic_gradients_match_finite_differences(self, layout):
        # float64 end-to-end check through embeddings, both transformer
        # stacks, the scatter, and the heads
        torch.manual_seed(0)
        model = MaskedTokenModel(MaeConfig.tiny(), layout, seed=0).double()
        for head in model.heads.values():
            torch.nn.init.normal_(head.weight, std=0.05)
            torch.nn.init.normal_(head.bias, std=0.05)
        toks = random_tokens(layout, 2, seed=1)
        mask = random_mask(layout, 2, seed=2)

        def compute_loss():
            logits = model(toks, mask)
            loss, _ = model.loss_on_masked(logits, toks, mask)
            return loss

        loss = compute_loss()
        model.zero_grad()
        loss.backward()

        probes = {
            "mel entry table": model.entry_embeds[MEL][0].weight,
            "f0 entry table": model.entry_embeds["f0"][1].weight,
            "speaker entry table": model.entry_embeds["speaker"][0].weight,
            "mask token": model.mask_token,
            "encoder position": model.enc_pos,
            "mel head weight": model.heads[MEL].weight,
        }
        h = 1e-6
        for label, param in probes.items():
            grad = param.grad
            assert grad is not None, label
            flat = grad.reshape(-1)
            idx = int(flat.abs().argmax())
            analytic = float(flat[idx])
            assert abs(analytic) > 1e-12, f"{label}: zero gradient probe"
            with torch.no_grad():
                base = float(param.reshape(-1)[idx])
                param.reshape(-1)[idx] = base + h
                up = float(compute_loss())
                param.reshape(-1)[idx] = base - h
                down = float(compute_loss())
                param.reshape(-1)[idx] = base
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            assert rel < 1e-4, f"{label}: rel err {rel:.2e}"
