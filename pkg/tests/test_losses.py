import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from emovc.domains import PairMask
from emovc.losses import (
    AnnealState,
    LossWeights,
    MetricsLog,
    adversarial_loss,
    anneal_weight,
    cycle_consistency_loss,
    f0_consistency_loss,
    full_objective,
    norm_consistency_loss,
    source_classifier_loss,
    speech_consistency_loss,
    style_diversification_loss,
    style_reconstruction_loss,
)
from helpers import tiny_models, random_features


def logit(p: float) -> float:
    return math.log(p / (1 - p))


class LogitFromInput(nn.Module):
    """Reads its 'score' from cell [0, 0] of each sample, so tests can pin
    discriminator outputs exactly."""

    def forward(self, x, speaker, emotion):
        return x[:, 0, 0]


class FixedLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float64)
        self.n_classes = self.logits.shape[-1]

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


class FixedStyle(nn.Module):
    def __init__(self, style):
        super().__init__()
        self.style = torch.as_tensor(style, dtype=torch.float64)

    def forward(self, x, domain):
        return self.style.expand(x.shape[0], -1)


class IdentityGenerator(nn.Module):
    def forward(self, x, pitch_feats, sp, em):
        return x


class AddPerCall(nn.Module):
    def __init__(self, delta):
        super().__init__()
        self.delta = delta

    def forward(self, x, pitch_feats, sp, em):
        return x + self.delta


class EmotionBroadcastGenerator(nn.Module):
    def forward(self, x, pitch_feats, sp, em):
        return em.unsqueeze(-1).expand(-1, em.shape[1], x.shape[-1])


class MeanContourExtractor(nn.Module):
    def forward(self, x):
        contour = x.mean(dim=1)
        return x, contour


class PassthroughProbe(nn.Module):
    def features(self, x):
        return x


class FirstBinProbe(nn.Module):
    def features(self, x):
        return x[:, :1, :]


class TestAdversarialLoss:
    def test_constant_half_discriminator(self, rng):
        # a real discriminator with zeroed head emits logit 0 -> prob 0.5
        models = tiny_models()
        with torch.no_grad():
            models.discriminator.heads.weight.zero_()
            models.discriminator.heads.bias.zero_()
        x = random_features(rng, 3)
        fake = random_features(rng, 3)
        mask = PairMask(np.ones(3, dtype=bool))
        loss = adversarial_loss(models.discriminator, x, [0, 1, 2], [0, 1, 0],
                                fake, [0, 0, 0], [0, 1, 2], mask, "discriminator")
        assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-12)

    def test_hand_case(self, rng):
        x = random_features(rng, 2)
        fake = random_features(rng, 2)
        x[:, 0, 0] = logit(0.9)
        fake[:, 0, 0] = logit(0.2)
        mask = PairMask(np.ones(2, dtype=bool))
        loss = adversarial_loss(LogitFromInput(), x, [0, 0], [0, 0],
                                fake, [0, 0], [0, 0], mask, "discriminator")
        expected = -(math.log(0.9) + math.log(0.8))
        assert loss.item() == pytest.approx(expected, rel=1e-9)

    def test_generator_side_value(self, rng):
        fake = random_features(rng, 2)
        fake[:, 0, 0] = logit(0.2)
        x = random_features(rng, 2)
        mask = PairMask(np.ones(2, dtype=bool))
        loss = adversarial_loss(LogitFromInput(), x, [0, 0], [0, 0],
                                fake, [0, 0], [0, 0], mask, "generator")
        assert loss.item() == pytest.approx(-math.log(0.2), rel=1e-9)

    def test_all_masked_is_zero_without_graph(self, rng):
        models = tiny_models()
        x = random_features(rng, 4)
        fake = random_features(rng, 4)
        mask = PairMask(np.zeros(4, dtype=bool))
        loss = adversarial_loss(models.discriminator, x, [0] * 4, [0] * 4,
                                fake, [2] * 4, [1] * 4, mask, "discriminator")
        assert loss.item() == 0.0
        assert loss.grad_fn is None

    def test_mask_drops_samples_exactly(self, rng):
        models = tiny_models()
        x = random_features(rng, 4)
        fake = random_features(rng, 4)
        src = [0, 1, 2, 0]
        trg_sp, trg_em = [0, 2, 1, 2], [1, 1, 2, 2]
        mask = PairMask(np.array([True, False, True, False]))
        full = adversarial_loss(models.discriminator, x, src, [0] * 4,
                                fake, trg_sp, trg_em, mask, "discriminator")
        reduced = adversarial_loss(
            models.discriminator, x[[0, 2]], [0, 2], [0, 0],
            fake[[0, 2]], [0, 1], [1, 2], PairMask(np.ones(2, dtype=bool)),
            "discriminator")
        assert full.item() == pytest.approx(reduced.item(), rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            adversarial_loss(LogitFromInput(), torch.zeros(0, 4, 8), [], [],
                             torch.zeros(0, 4, 8), [], [],
                             PairMask(np.zeros(0, dtype=bool)), "discriminator")

    def test_unknown_side_rejected(self, rng):
        x = random_features(rng, 1)
        with pytest.raises(ValueError, match="side"):
            adversarial_loss(LogitFromInput(), x, [0], [0], x, [0], [0],
                             PairMask(np.ones(1, dtype=bool)), "critic")


class TestSourceClassifierLoss:
    def test_uniform_logits(self, rng):
        sp = FixedLogits(torch.zeros(1, 3))
        em = FixedLogits(torch.zeros(1, 3))
        x = random_features(rng, 5)
        loss = source_classifier_loss(sp, em, x, [0, 1, 2, 0, 1], [2, 2, 0, 1, 0])
        assert loss.item() == pytest.approx(2 * math.log(3), rel=1e-12)

    def test_confident_correct_goes_to_zero(self, rng):
        logits = torch.full((1, 4), -50.0)
        logits[0, 1] = 50.0
        sp = FixedLogits(logits)
        em = FixedLogits(logits)
        x = random_features(rng, 3)
        loss = source_classifier_loss(sp, em, x, [1, 1, 1], [1, 1, 1])
        assert loss.item() < 1e-8

    def test_two_class_hand_case(self, rng):
        sp = FixedLogits(torch.tensor([[1.0, 0.0]]))
        em = FixedLogits(torch.tensor([[1.0, 0.0]]))
        x = random_features(rng, 1)
        loss = source_classifier_loss(sp, em, x, [0], [0])
        per_term = math.log(1 + math.exp(-1))
        assert loss.item() == pytest.approx(2 * per_term, rel=1e-9)

    def test_label_out_of_range(self, rng):
        sp = FixedLogits(torch.zeros(1, 2))
        em = FixedLogits(torch.zeros(1, 2))
        with pytest.raises(ValueError, match="label"):
            source_classifier_loss(sp, em, random_features(rng, 1), [2], [0])


class TestStyleReconstructionLoss:
    def test_exact_reconstruction(self, rng):
        style = torch.ones(1, 16, dtype=torch.float64)
        enc = FixedStyle(style)
        x = random_features(rng, 3)
        loss = style_reconstruction_loss(enc, enc, x, style.expand(3, -1),
                                         style.expand(3, -1), [0] * 3, [0] * 3)
        assert loss.item() == 0.0

    def test_constant_offset_value(self, rng):
        base = torch.zeros(1, 16, dtype=torch.float64)
        enc_sp = FixedStyle(base + 0.1)  # re-extracted differs by 0.1 per dim
        enc_em = FixedStyle(base)
        x = random_features(rng, 4)
        loss = style_reconstruction_loss(enc_sp, enc_em, x, base.expand(4, -1),
                                         base.expand(4, -1), [0] * 4, [0] * 4)
        assert loss.item() == pytest.approx(1.6, rel=1e-12)

    def test_sign_symmetry(self, rng):
        base = torch.zeros(1, 16, dtype=torch.float64)
        x = random_features(rng, 2)
        plus = style_reconstruction_loss(FixedStyle(base + 0.1), FixedStyle(base),
                                         x, base.expand(2, -1), base.expand(2, -1),
                                         [0, 0], [0, 0])
        minus = style_reconstruction_loss(FixedStyle(base - 0.1), FixedStyle(base),
                                          x, base.expand(2, -1), base.expand(2, -1),
                                          [0, 0], [0, 0])
        assert plus.item() == pytest.approx(minus.item(), rel=1e-12)

    def test_dimension_mismatch(self, rng):
        base = torch.zeros(2, 16, dtype=torch.float64)
        with pytest.raises(ValueError, match="dimensions"):
            style_reconstruction_loss(FixedStyle(base), FixedStyle(base),
                                      random_features(rng, 2), base,
                                      torch.zeros(2, 8, dtype=torch.float64),
                                      [0, 0], [0, 0])


class TestStyleDiversificationLoss:
    def test_identical_pairs(self, rng):
        models = tiny_models()
        x = random_features(rng, 2)
        pf = torch.zeros(2, 4, x.shape[-1], dtype=torch.float64)
        sp = torch.zeros(2, 6, dtype=torch.float64)
        em = torch.ones(2, 6, dtype=torch.float64)
        loss = style_diversification_loss(models.generator, x, pf, (sp, sp), (em, em))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_style_blind_generator(self, rng):
        x = random_features(rng, 3)
        pf = torch.zeros(3, 4, x.shape[-1], dtype=torch.float64)
        sp1, sp2 = (torch.randn(3, 6, dtype=torch.float64) for _ in range(2))
        em1, em2 = (torch.randn(3, 6, dtype=torch.float64) for _ in range(2))
        loss = style_diversification_loss(IdentityGenerator(), x, pf, (sp1, sp2), (em1, em2))
        assert loss.item() == 0.0

    def test_linear_broadcast_oracle(self, rng):
        x = random_features(rng, 3, n_bins=6, n_frames=10)
        pf = torch.zeros(3, 4, 10, dtype=torch.float64)
        sp1 = torch.zeros(3, 6, dtype=torch.float64)
        sp2 = torch.ones(3, 6, dtype=torch.float64)
        em1 = torch.tensor(rng.standard_normal((3, 6)))
        em2 = torch.tensor(rng.standard_normal((3, 6)))
        loss = style_diversification_loss(
            EmotionBroadcastGenerator(), x, pf, (sp1, sp2), (em1, em2))
        # terms 1 and 3 both equal mean |em1 - em2|; term 2 is zero
        oracle = 2 * float((em1 - em2).abs().mean())
        assert loss.item() == pytest.approx(oracle, rel=1e-12)


class TestF0ConsistencyLoss:
    def test_identical_inputs(self, rng):
        models = tiny_models()
        x = random_features(rng, 2)
        assert f0_consistency_loss(models.pitch_extractor, x, x.clone()).item() == 0.0

    def test_constant_offset(self, rng):
        x = random_features(rng, 3)
        loss = f0_consistency_loss(MeanContourExtractor(), x, x + 0.2)
        assert loss.item() == pytest.approx(0.2, rel=1e-9)

    def test_bin_permutation_invariance(self, rng):
        x = random_features(rng, 2)
        gen = random_features(rng, 2)
        perm = torch.randperm(x.shape[1])
        a = f0_consistency_loss(MeanContourExtractor(), x, gen)
        b = f0_consistency_loss(MeanContourExtractor(), x[:, perm], gen[:, perm])
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_frame_mismatch(self, rng):
        with pytest.raises(ValueError, match="frame"):
            f0_consistency_loss(MeanContourExtractor(), random_features(rng, 1),
                                random_features(rng, 1, n_frames=20))


class TestNormConsistencyLoss:
    def test_identical_inputs(self, rng):
        x = random_features(rng, 2)
        assert norm_consistency_loss(x, x.clone()).item() == 0.0

    def test_doubling_positive_input(self, rng):
        x = torch.tensor(rng.uniform(0.1, 1.0, size=(3, 5, 7)))
        loss = norm_consistency_loss(x, 2 * x)
        oracle = float(x.abs().sum(dim=1).mean())
        assert loss.item() == pytest.approx(oracle, rel=1e-12)

    def test_silent_frame_padding(self, rng):
        x = random_features(rng, 2, n_bins=4, n_frames=10)
        gen = random_features(rng, 2, n_bins=4, n_frames=10)
        pad = torch.zeros(2, 4, 1, dtype=torch.float64)
        base = norm_consistency_loss(x, gen)
        padded = norm_consistency_loss(torch.cat([x, pad], -1), torch.cat([gen, pad], -1))
        # per-frame terms for the original frames are untouched
        assert padded.item() * 11 == pytest.approx(base.item() * 10, rel=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="shape"):
            norm_consistency_loss(random_features(rng, 1),
                                  random_features(rng, 1, n_frames=12))


class TestSpeechConsistencyLoss:
    def test_identical_inputs(self, rng):
        models = tiny_models()
        x = random_features(rng, 2)
        assert speech_consistency_loss(models.content_probe, x, x.clone()).item() == 0.0

    def test_constant_feature_offset(self, rng):
        x = random_features(rng, 2)
        loss = speech_consistency_loss(PassthroughProbe(), x, x + 0.05)
        assert loss.item() == pytest.approx(0.05, rel=1e-9)

    def test_depends_only_on_probe_features(self, rng):
        x = random_features(rng, 2)
        gen = x.clone()
        gen[:, 3, :] += 5.0  # differs outside the probe's receptive field
        assert speech_consistency_loss(FirstBinProbe(), x, gen).item() == 0.0


class TestCycleConsistencyLoss:
    def test_identity_generator(self, rng):
        models = tiny_models()
        x = random_features(rng, 2)
        loss = cycle_consistency_loss(
            IdentityGenerator(), models.speaker_encoder, models.emotion_encoder,
            models.pitch_extractor, x, [0, 1], [0, 1], fake=x)
        assert loss.item() == 0.0

    def test_constant_round_trip_offset(self, rng):
        models = tiny_models()
        x = random_features(rng, 2)
        gen = AddPerCall(0.005)
        fake = gen(x, None, None, None)
        loss = cycle_consistency_loss(
            gen, models.speaker_encoder, models.emotion_encoder,
            models.pitch_extractor, x, [0, 1], [0, 1], fake=fake)
        assert loss.item() == pytest.approx(0.01, rel=1e-9)

    def test_nonnegative(self, rng):
        models = tiny_models()
        x = random_features(rng, 3)
        fake = random_features(rng, 3)
        loss = cycle_consistency_loss(
            models.generator, models.speaker_encoder, models.emotion_encoder,
            models.pitch_extractor, x, [0, 1, 2], [0, 1, 2], fake=fake)
        assert loss.item() >= 0.0


class TestAnnealing:
    def test_endpoint_values(self):
        state = AnnealState()
        assert anneal_weight(state, 0) == 5.0
        assert anneal_weight(state, 50) == 5.0
        assert anneal_weight(state, 100) == 2.5
        assert anneal_weight(state, 150) == 0.0
        assert anneal_weight(state, 400) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(e1=st.integers(0, 300), e2=st.integers(0, 300))
    def test_monotone_nonincreasing(self, e1, e2):
        state = AnnealState()
        lo, hi = sorted((e1, e2))
        assert anneal_weight(state, lo) >= anneal_weight(state, hi)

    def test_piecewise_linear_and_continuous(self):
        state = AnnealState()
        for e in range(51, 150):
            interp = 5.0 * (150 - e) / 100
            assert anneal_weight(state, e) == pytest.approx(interp, rel=1e-12)
        assert anneal_weight(state, 50) == pytest.approx(anneal_weight(state, 51) + 0.05)

    def test_invalid_states(self):
        with pytest.raises(ValueError):
            AnnealState(start_epoch=100, end_epoch=100)
        with pytest.raises(ValueError):
            AnnealState(initial_weight=1.0, final_weight=2.0)
        with pytest.raises(ValueError):
            anneal_weight(AnnealState(), -1)


class TestFullObjective:
    def test_all_zero_weights(self):
        weights = LossWeights(0, 0, 0, 0, 0, 0, 0, 0)
        state = AnnealState(initial_weight=0.0, final_weight=0.0)
        g, d = full_objective(weights, state, 10,
                              {k: 1.0 for k in ("adv_g", "advcls_g", "sty", "ds",
                                                "f0", "norm", "asr", "cyc",
                                                "adv_d", "advcls_c")})
        assert g == 0.0 and d == 0.0

    def test_linearity_single_weight(self):
        weights = LossWeights(0, 0, 3.0, 0, 0, 0, 0, 0)
        g, _ = full_objective(weights, AnnealState(), 0, {"sty": 2.0}, anneal=False)
        assert g == pytest.approx(6.0)

    def test_annealed_f0_contribution(self):
        weights = LossWeights(0, 0, 0, 0, 5.0, 0, 0, 0)
        g_mid, _ = full_objective(weights, AnnealState(), 100, {"f0": 1.0, "norm": 0.0})
        assert g_mid == pytest.approx(2.5)
        g_off, _ = full_objective(weights, AnnealState(), 100, {"f0": 1.0}, anneal=False)
        assert g_off == pytest.approx(5.0)

    def test_diversification_negated(self):
        weights = LossWeights(0, 0, 0, 2.0, 0, 0, 0, 0)
        g, _ = full_objective(weights, AnnealState(), 0, {"ds": 1.5}, anneal=False)
        assert g == pytest.approx(-3.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            full_objective(LossWeights(lambda_adv=-1.0), AnnealState(), 0, {})


class TestMetricsLog:
    def test_write_read_truncate(self, tmp_path):
        path = tmp_path / "metrics.tsv"
        with MetricsLog(path) as log:
            log.write(1, {"g_total": 1.5, "adv_d": 0.25})
            log.write(2, {"g_total": 1.25})
            log.write(3, {"g_total": 1.0})
        series = MetricsLog.read(path)
        assert series["g_total"] == [(1, 1.5), (2, 1.25), (3, 1.0)]
        assert series["adv_d"] == [(1, 0.25)]
        MetricsLog.truncate(path, 2)
        assert MetricsLog.read(path)["g_total"] == [(1, 1.5), (2, 1.25)]
