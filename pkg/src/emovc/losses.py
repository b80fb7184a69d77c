"""Training objectives.

Conventions used throughout:

* adversarial terms use the logistic form; a masked sample contributes
  exactly nothing — no value, no gradient — to the real/fake terms
* style distances are L1 summed over embedding dimensions, averaged over
  the batch
* feature-map distances (diversification, speech/cycle consistency) are
  L1 averaged over all coordinates and the batch
* the pitch- and silence-preservation weights start at 5 and decay
  linearly to 0 across the configured epoch window
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from emovc.domains import PairMask


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_advcls: float = 0.5
    lambda_sty: float = 1.0
    lambda_ds: float = 1.0
    lambda_f0: float = 5.0
    lambda_norm: float = 5.0
    lambda_asr: float = 1.0
    lambda_cyc: float = 1.0

    def validate(self) -> None:
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class AnnealState:
    epoch: int = 0
    start_epoch: int = 50
    end_epoch: int = 150
    initial_weight: float = 5.0
    final_weight: float = 0.0

    def __post_init__(self):
        if self.start_epoch >= self.end_epoch:
            raise ValueError("start_epoch must be < end_epoch")
        if self.final_weight > self.initial_weight:
            raise ValueError("annealing must not increase the weight")


def anneal_weight(state: AnnealState, epoch: int) -> float:
    """Piecewise-linear decay: flat until start, linear to final at end."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch <= state.start_epoch:
        return float(state.initial_weight)
    if epoch >= state.end_epoch:
        return float(state.final_weight)
    frac = (epoch - state.start_epoch) / (state.end_epoch - state.start_epoch)
    return float(state.initial_weight + (state.final_weight - state.initial_weight) * frac)


def _mask_tensor(mask, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, PairMask):
        mask = mask.kept
    return torch.as_tensor(np.asarray(mask, dtype=bool), device=like.device)


def adversarial_loss(
    discriminator,
    real: torch.Tensor,
    src_speaker,
    src_emotion,
    fake: torch.Tensor,
    trg_speaker,
    trg_emotion,
    mask,
    side: str,
) -> torch.Tensor:
    """Real/fake objective with per-sample masking of unseen target pairs.

    Discriminator side scores real samples under their source pair and
    fakes under their target pair; generator side is the non-saturating
    fooling term on the fakes. Both are averaged over mask-kept samples
    only and return 0 (with no graph) when everything is masked.
    """
    if real.shape[0] == 0:
        raise ValueError("empty batch")
    kept = _mask_tensor(mask, real)
    if not bool(kept.any()):
        return real.new_zeros(())
    idx = kept.nonzero(as_tuple=True)[0]
    sp_t = torch.as_tensor(np.asarray(trg_speaker), device=real.device)[idx]
    em_t = torch.as_tensor(np.asarray(trg_emotion), device=real.device)[idx]
    fake_logit = discriminator(fake[idx], sp_t, em_t)
    if side == "generator":
        return F.softplus(-fake_logit).mean()
    if side != "discriminator":
        raise ValueError(f"unknown side {side!r}")
    sp_s = torch.as_tensor(np.asarray(src_speaker), device=real.device)[idx]
    em_s = torch.as_tensor(np.asarray(src_emotion), device=real.device)[idx]
    real_logit = discriminator(real[idx], sp_s, em_s)
    # softplus(-r) == -log sigmoid(r); softplus(f) == -log(1 - sigmoid(f))
    return (F.softplus(-real_logit) + F.softplus(fake_logit)).mean()


def source_classifier_loss(
    speaker_classifier,
    emotion_classifier,
    generated: torch.Tensor,
    speaker_labels,
    emotion_labels,
) -> torch.Tensor:
    """Cross entropy of both source classifiers on converted samples.

    The classifier step passes source labels; the generator step passes
    target labels. Never masked: classifiers see all fakes, seen or not.
    """
    sp = torch.as_tensor(np.asarray(speaker_labels), device=generated.device, dtype=torch.long)
    em = torch.as_tensor(np.asarray(emotion_labels), device=generated.device, dtype=torch.long)
    if sp.max() >= speaker_classifier.n_classes or em.max() >= emotion_classifier.n_classes:
        raise ValueError("label out of range")
    return (F.cross_entropy(speaker_classifier(generated), sp)
            + F.cross_entropy(emotion_classifier(generated), em))


def style_reconstruction_loss(
    speaker_encoder,
    emotion_encoder,
    generated: torch.Tensor,
    speaker_style: torch.Tensor,
    emotion_style: torch.Tensor,
    speaker_codes,
    emotion_codes,
) -> torch.Tensor:
    """L1 between the styles used for generation and styles re-extracted
    from the generated sample, under the reference domain codes."""
    if speaker_style.shape != emotion_style.shape:
        raise ValueError("speaker and emotion styles must share dimensions")
    re_sp = speaker_encoder(generated, speaker_codes)
    re_em = emotion_encoder(generated, emotion_codes)
    return ((speaker_style - re_sp).abs().sum(dim=1).mean()
            + (emotion_style - re_em).abs().sum(dim=1).mean())


def style_diversification_loss(
    generator,
    x: torch.Tensor,
    pitch_feats: torch.Tensor,
    speaker_styles: tuple[torch.Tensor, torch.Tensor],
    emotion_styles: tuple[torch.Tensor, torch.Tensor],
    return_fake: bool = False,
):
    """Mean L1 spread of outputs across style draws from the same domains.

    Three terms: vary the emotion style, vary the speaker style, and vary
    the emotion style again under the alternate speaker style. Maximized
    by the generator (enters the full objective with a negative sign).
    """
    sp1, sp2 = speaker_styles
    em1, em2 = emotion_styles
    b = x.shape[0]
    # all four style combinations in one batched forward
    x4 = x.repeat(4, 1, 1)
    p4 = pitch_feats.repeat(4, 1, 1)
    sp4 = torch.cat([sp1, sp1, sp2, sp2], dim=0)
    em4 = torch.cat([em1, em2, em1, em2], dim=0)
    g11, g12, g21, g22 = generator(x4, p4, sp4, em4).split(b, dim=0)
    loss = ((g11 - g12).abs().mean()
            + (g11 - g21).abs().mean()
            + (g21 - g22).abs().mean())
    if return_fake:
        return loss, g11
    return loss


def f0_consistency_loss(pitch_extractor, x: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """L1 between normalized pitch contours of source and converted sample."""
    if x.shape[-1] != generated.shape[-1]:
        raise ValueError("frame-count mismatch")
    _, contour_x = pitch_extractor(x)
    _, contour_g = pitch_extractor(generated)
    return (contour_x - contour_g).abs().mean()


def norm_consistency_loss(x: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Preserves the speech/silence profile: compares per-frame absolute
    column sums, averaged over frames."""
    if x.shape != generated.shape:
        raise ValueError("shape mismatch")
    frame_x = x.abs().sum(dim=-2)
    frame_g = generated.abs().sum(dim=-2)
    return (frame_x - frame_g).abs().mean()


def speech_consistency_loss(content_probe, x: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """L1 between frozen content-probe feature maps of source and output."""
    return (content_probe.features(x) - content_probe.features(generated)).abs().mean()


def cycle_consistency_loss(
    generator,
    speaker_encoder,
    emotion_encoder,
    pitch_extractor,
    x: torch.Tensor,
    src_speaker_codes,
    src_emotion_codes,
    fake: torch.Tensor,
) -> torch.Tensor:
    """Round trip: convert the fake back with source styles re-extracted
    from the original input, compare to the input."""
    src_sp_style = speaker_encoder(x, src_speaker_codes)
    src_em_style = emotion_encoder(x, src_emotion_codes)
    pitch_feats, _ = pitch_extractor(fake)
    recon = generator(fake, pitch_feats, src_sp_style, src_em_style)
    return (x - recon).abs().mean()


def full_objective(
    weights: LossWeights,
    anneal_state: AnnealState,
    epoch: int,
    components: Mapping[str, torch.Tensor | float],
    anneal: bool = True,
):
    """Weighted generator-side and critic-side totals.

    ``components`` may hold tensors (during training) or floats (for
    reporting); missing entries count as zero. Keys: adv_g, advcls_g, sty,
    ds, f0, norm, asr, cyc, adv_d, advcls_c.
    """
    weights.validate()
    get = lambda k: components.get(k, 0.0)
    if anneal:
        w_f0 = anneal_weight(anneal_state, epoch)
        w_norm = anneal_weight(anneal_state, epoch)
    else:
        w_f0, w_norm = weights.lambda_f0, weights.lambda_norm
    g_total = (
        weights.lambda_adv * get("adv_g")
        + weights.lambda_advcls * get("advcls_g")
        + weights.lambda_sty * get("sty")
        - weights.lambda_ds * get("ds")
        + w_f0 * get("f0")
        + w_norm * get("norm")
        + weights.lambda_asr * get("asr")
        + weights.lambda_cyc * get("cyc")
    )
    d_total = weights.lambda_adv * get("adv_d") + weights.lambda_advcls * get("advcls_c")
    return g_total, d_total


class MetricsLog:
    """Line-oriented per-step metrics: tab-separated (step, name, value)."""

    def __init__(self, path, append: bool = False):
        self.path = path
        self._fh = open(path, "a" if append else "w")

    def write(self, step: int, values: Mapping[str, float]) -> None:
        for name, value in values.items():
            self._fh.write(f"{step}\t{name}\t{float(value):.10g}\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def read(path) -> dict[str, list[tuple[int, float]]]:
        series: dict[str, list[tuple[int, float]]] = {}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                step, name, value = line.split("\t")
                series.setdefault(name, []).append((int(step), float(value)))
        return series

    @staticmethod
    def truncate(path, max_step: int) -> None:
        """Drop entries past max_step (used when resuming mid-run)."""
        with open(path) as f:
            lines = [ln for ln in f if ln.strip() and int(ln.split("\t", 1)[0]) <= max_step]
        with open(path, "w") as f:
            f.writelines(lines)
