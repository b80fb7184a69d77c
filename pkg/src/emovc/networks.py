"""Network definitions.

All modules are deliberately small: a few convolutional stages each, so a
full adversarial run finishes in minutes on a CPU. The contracts that
matter are the I/O shapes, deterministic evaluation, differentiability,
and per-domain head routing — not layer-for-layer fidelity to any larger
architecture.

Head indexing convention for the discriminator: flat = speaker * n_emotions
+ emotion. Checkpoints depend on it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from emovc.domains import DomainCatalog

CHECKPOINT_VERSION = 1


@dataclass
class ModelHyperParams:
    n_bins: int = 48
    style_dim: int = 16
    latent_dim: int = 8
    gen_channels: int = 8
    disc_channels: int = 12
    style_hidden: int = 48
    map_hidden: int = 48
    pitch_dim: int = 8
    content_feat_dim: int = 16
    n_symbols: int = 12

    def validate(self) -> None:
        if self.n_bins % 8 != 0:
            raise ValueError("n_bins must be divisible by 8")
        for name in ("style_dim", "latent_dim", "gen_channels", "disc_channels",
                     "style_hidden", "map_hidden", "pitch_dim", "content_feat_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def _bin_ramp(x: torch.Tensor) -> torch.Tensor:
    """Constant-in-time bin-position channel, range [-1, 1]."""
    b, _, n_bins, n_frames = x.shape
    ramp = torch.linspace(-1.0, 1.0, n_bins, dtype=x.dtype, device=x.device)
    return ramp.view(1, 1, n_bins, 1).expand(b, 1, n_bins, n_frames)


class FiLM(nn.Module):
    """Per-channel scale/shift computed from a style vector."""

    def __init__(self, style_dim: int, channels: int):
        super().__init__()
        self.affine = nn.Linear(style_dim, 2 * channels)
        self.affine.bias.data.zero_()

    def forward(self, h: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.affine(style).chunk(2, dim=1)
        gamma = gamma.unsqueeze(-1).unsqueeze(-1)
        beta = beta.unsqueeze(-1).unsqueeze(-1)
        return (1.0 + gamma) * h + beta


class StyledBlock(nn.Module):
    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.norm1 = nn.InstanceNorm2d(channels, affine=False)
        self.norm2 = nn.InstanceNorm2d(channels, affine=False)
        self.film1 = FiLM(style_dim, channels)
        self.film2 = FiLM(style_dim, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h, style):
        out = self.conv1(F.leaky_relu(self.film1(self.norm1(h), style), 0.2))
        out = self.conv2(F.leaky_relu(self.film2(self.norm2(out), style), 0.2))
        return h + out


class Generator(nn.Module):
    """Style-conditioned encoder/decoder over (n_bins, n_frames) features.

    Takes the source features, per-frame pitch features from the frozen
    extractor, and one style vector per factor. Output shape equals input
    shape for any frame count (internal padding handles non-multiples of 4).
    """

    def __init__(self, hp: ModelHyperParams):
        super().__init__()
        c = hp.gen_channels
        style = 2 * hp.style_dim
        self.hp = hp
        self.enc1 = nn.Sequential(nn.Conv2d(2, c, 3, padding=1), nn.InstanceNorm2d(c, affine=True))
        self.enc2 = nn.Sequential(nn.Conv2d(c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c, affine=True))
        self.enc3 = nn.Sequential(nn.Conv2d(2 * c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c, affine=True))
        self.fuse = nn.Conv2d(2 * c + hp.pitch_dim, 2 * c, 3, padding=1)
        self.res1 = StyledBlock(2 * c, style)
        self.res2 = StyledBlock(2 * c, style)
        # nearest-upsample + conv in place of transposed convs: same role,
        # cheaper backward on CPU
        self.dec1 = nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.dec1_norm = nn.InstanceNorm2d(2 * c, affine=False)
        self.dec1_film = FiLM(style, 2 * c)
        self.dec2 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec2_norm = nn.InstanceNorm2d(c, affine=False)
        self.dec2_film = FiLM(style, c)
        self.out_conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.out_film = FiLM(style, c)
        self.out_conv2 = nn.Conv2d(c, 1, 3, padding=1)

    def forward(
        self,
        x: torch.Tensor,            # (B, n_bins, T)
        pitch_feats: torch.Tensor,  # (B, pitch_dim, T)
        speaker_style: torch.Tensor,
        emotion_style: torch.Tensor,
    ) -> torch.Tensor:
        if x.shape[1] != self.hp.n_bins:
            raise ValueError(f"expected {self.hp.n_bins} bins, got {x.shape[1]}")
        if pitch_feats.shape[-1] != x.shape[-1]:
            raise ValueError("pitch features must be frame-aligned with the input")
        n_frames = x.shape[-1]
        pad = (-n_frames) % 4
        style = torch.cat([speaker_style, emotion_style], dim=1)

        h = x.unsqueeze(1)
        if pad:
            h = F.pad(h, (0, pad))
            pitch_feats = F.pad(pitch_feats, (0, pad))
        h = torch.cat([h, _bin_ramp(h)], dim=1)
        e1 = F.leaky_relu(self.enc1(h), 0.2)
        e2 = F.leaky_relu(self.enc2(e1), 0.2)
        e3 = F.leaky_relu(self.enc3(e2), 0.2)

        p = F.avg_pool1d(pitch_feats, kernel_size=4, stride=4)
        p = p.unsqueeze(2).expand(-1, -1, e3.shape[2], -1)
        h = F.leaky_relu(self.fuse(torch.cat([e3, p], dim=1)), 0.2)
        h = self.res1(h, style)
        h = self.res2(h, style)

        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.dec1_film(self.dec1_norm(self.dec1(h)), style), 0.2)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.dec2_film(self.dec2_norm(self.dec2(h)), style), 0.2)
        h = h + e1  # skip keeps fine content structure cheap to reproduce
        h = F.leaky_relu(self.out_film(self.out_conv1(h), style), 0.2)
        out = self.out_conv2(h).squeeze(1)
        if pad:
            out = out[..., :n_frames]
        return out


class _ConvTrunk(nn.Module):
    """Shared conv feature extractor used by D, the classifiers and S."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c, affine=True), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c, affine=True), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 2 * c, 3, 1, 1), nn.LeakyReLU(0.2),
        )
        self.out_dim = 2 * c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x.unsqueeze(1))
        return h.mean(dim=(2, 3))


class StyleEncoder(nn.Module):
    """Reference features + domain code -> fixed-dimension style vector."""

    def __init__(self, hp: ModelHyperParams, n_domains: int, channels: int | None = None):
        super().__init__()
        self.n_domains = n_domains
        self.style_dim = hp.style_dim
        self.trunk = _ConvTrunk(channels or hp.disc_channels)
        self.shared = nn.Linear(self.trunk.out_dim, hp.style_hidden)
        self.heads = nn.Linear(hp.style_hidden, n_domains * hp.style_dim)

    def forward(self, x: torch.Tensor, domain: torch.Tensor) -> torch.Tensor:
        domain = torch.as_tensor(domain, device=x.device, dtype=torch.long)
        if domain.ndim == 0:
            domain = domain.expand(x.shape[0])
        if torch.any(domain < 0) or torch.any(domain >= self.n_domains):
            raise ValueError("domain code out of range")
        h = F.leaky_relu(self.shared(self.trunk(x)), 0.2)
        all_styles = self.heads(h).view(-1, self.n_domains, self.style_dim)
        return all_styles[torch.arange(x.shape[0], device=x.device), domain]


class MappingNetwork(nn.Module):
    """Latent draw + domain code -> style vector, for reference-free use."""

    def __init__(self, hp: ModelHyperParams, n_domains: int):
        super().__init__()
        self.n_domains = n_domains
        self.style_dim = hp.style_dim
        self.latent_dim = hp.latent_dim
        h = hp.map_hidden
        self.shared = nn.Sequential(
            nn.Linear(hp.latent_dim, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
        )
        self.heads = nn.Linear(h, n_domains * hp.style_dim)

    def forward(self, z: torch.Tensor, domain: torch.Tensor) -> torch.Tensor:
        domain = torch.as_tensor(domain, device=z.device, dtype=torch.long)
        if domain.ndim == 0:
            domain = domain.expand(z.shape[0])
        if torch.any(domain < 0) or torch.any(domain >= self.n_domains):
            raise ValueError("domain code out of range")
        h = self.shared(z)
        all_styles = self.heads(h).view(-1, self.n_domains, self.style_dim)
        return all_styles[torch.arange(z.shape[0], device=z.device), domain]


class Discriminator(nn.Module):
    """Shared trunk with one real/fake head per (speaker, emotion) pair."""

    def __init__(self, hp: ModelHyperParams, n_speakers: int, n_emotions: int):
        super().__init__()
        self.n_speakers = n_speakers
        self.n_emotions = n_emotions
        self.trunk = _ConvTrunk(hp.disc_channels)
        self.heads = nn.Linear(self.trunk.out_dim, n_speakers * n_emotions)

    @property
    def n_pairs(self) -> int:
        return self.n_speakers * self.n_emotions

    def trunk_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor, speaker: torch.Tensor, emotion: torch.Tensor) -> torch.Tensor:
        speaker = torch.as_tensor(speaker, device=x.device, dtype=torch.long)
        emotion = torch.as_tensor(emotion, device=x.device, dtype=torch.long)
        if speaker.ndim == 0:
            speaker = speaker.expand(x.shape[0])
        if emotion.ndim == 0:
            emotion = emotion.expand(x.shape[0])
        if torch.any(speaker < 0) or torch.any(speaker >= self.n_speakers):
            raise ValueError("speaker index out of range")
        if torch.any(emotion < 0) or torch.any(emotion >= self.n_emotions):
            raise ValueError("emotion index out of range")
        flat = speaker * self.n_emotions + emotion
        logits = self.heads(self.trunk(x))
        return logits[torch.arange(x.shape[0], device=x.device), flat]


class SourceClassifier(nn.Module):
    """Predicts the source speaker or emotion of a (converted) sample."""

    def __init__(self, hp: ModelHyperParams, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.trunk = _ConvTrunk(hp.disc_channels)
        self.head = nn.Linear(self.trunk.out_dim, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))


class PitchExtractor(nn.Module):
    """Frame-wise pitch features plus a per-utterance normalized contour.

    Trained on the synthetic ground truth, then frozen; stays differentiable
    with respect to its input so consistency losses can push gradients
    through it.
    """

    def __init__(self, hp: ModelHyperParams):
        super().__init__()
        self.hp = hp
        self.conv = nn.Sequential(
            nn.Conv2d(1, 8, (5, 5), (2, 1), (2, 2)), nn.LeakyReLU(0.2),
            nn.Conv2d(8, 16, (5, 5), (2, 1), (2, 2)), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 16, (5, 5), (2, 1), (2, 2)), nn.LeakyReLU(0.2),
        )
        flat = 16 * (hp.n_bins // 8)
        self.frame = nn.Conv1d(flat, hp.pitch_dim, 5, padding=2)
        self.head = nn.Conv1d(hp.pitch_dim, 1, 5, padding=2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv(x.unsqueeze(1))
        h = h.flatten(1, 2)
        feats = F.leaky_relu(self.frame(h), 0.2)
        raw = self.head(feats).squeeze(1)
        mean = raw.mean(dim=1, keepdim=True)
        std = raw.std(dim=1, unbiased=False, keepdim=True)
        contour = (raw - mean) / (std + 1e-5)
        return feats, contour


class ContentProbe(nn.Module):
    """Frame-wise content-symbol classifier; its feature maps stand in for
    recognizer features in the speech-consistency loss. Silence is the last
    class."""

    def __init__(self, hp: ModelHyperParams):
        super().__init__()
        self.hp = hp
        self.n_classes = hp.n_symbols + 1
        self.conv = nn.Sequential(
            nn.Conv2d(1, 8, (5, 3), (2, 1), (2, 1)), nn.LeakyReLU(0.2),
            nn.Conv2d(8, 16, (5, 3), (2, 1), (2, 1)), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 16, (5, 3), (2, 1), (2, 1)), nn.LeakyReLU(0.2),
        )
        flat = 16 * (hp.n_bins // 8)
        self.frame = nn.Conv1d(flat, hp.content_feat_dim, 3, padding=1)
        self.head = nn.Conv1d(hp.content_feat_dim, self.n_classes, 3, padding=1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x.unsqueeze(1)).flatten(1, 2)
        return F.leaky_relu(self.frame(h), 0.2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class ModelSet:
    """All trainable and frozen networks of one model instance."""

    hp: ModelHyperParams
    n_speakers: int
    n_emotions: int
    catalog_hash: str
    generator: Generator
    speaker_encoder: StyleEncoder
    emotion_encoder: StyleEncoder
    speaker_mapper: MappingNetwork
    emotion_mapper: MappingNetwork
    discriminator: Discriminator
    speaker_classifier: SourceClassifier
    emotion_classifier: SourceClassifier
    pitch_extractor: PitchExtractor
    content_probe: ContentProbe

    def modules(self) -> dict[str, nn.Module]:
        return {
            "generator": self.generator,
            "speaker_encoder": self.speaker_encoder,
            "emotion_encoder": self.emotion_encoder,
            "speaker_mapper": self.speaker_mapper,
            "emotion_mapper": self.emotion_mapper,
            "discriminator": self.discriminator,
            "speaker_classifier": self.speaker_classifier,
            "emotion_classifier": self.emotion_classifier,
            "pitch_extractor": self.pitch_extractor,
            "content_probe": self.content_probe,
        }

    def generator_side(self) -> dict[str, nn.Module]:
        return {k: self.modules()[k] for k in
                ("generator", "speaker_encoder", "emotion_encoder", "speaker_mapper", "emotion_mapper")}

    def critic_side(self) -> dict[str, nn.Module]:
        return {k: self.modules()[k] for k in
                ("discriminator", "speaker_classifier", "emotion_classifier")}

    def frozen(self) -> dict[str, nn.Module]:
        return {k: self.modules()[k] for k in ("pitch_extractor", "content_probe")}

    def freeze_probes(self) -> None:
        for m in self.frozen().values():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)


def build_model_set(
    hp: ModelHyperParams,
    catalog: DomainCatalog,
    seed: int,
) -> ModelSet:
    hp.validate()
    torch.manual_seed(seed)
    return ModelSet(
        hp=hp,
        n_speakers=catalog.n_speakers,
        n_emotions=catalog.n_emotions,
        catalog_hash=catalog.content_hash(),
        generator=Generator(hp),
        speaker_encoder=StyleEncoder(hp, catalog.n_speakers),
        emotion_encoder=StyleEncoder(hp, catalog.n_emotions),
        speaker_mapper=MappingNetwork(hp, catalog.n_speakers),
        emotion_mapper=MappingNetwork(hp, catalog.n_emotions),
        discriminator=Discriminator(hp, catalog.n_speakers, catalog.n_emotions),
        speaker_classifier=SourceClassifier(hp, catalog.n_speakers),
        emotion_classifier=SourceClassifier(hp, catalog.n_emotions),
        pitch_extractor=PitchExtractor(hp),
        content_probe=ContentProbe(hp),
    )


def save_checkpoint(path, models: ModelSet, step: int, epoch: int, extra: dict | None = None) -> None:
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "hp": asdict(models.hp),
        "n_speakers": models.n_speakers,
        "n_emotions": models.n_emotions,
        "catalog_hash": models.catalog_hash,
        "step": step,
        "epoch": epoch,
        "state": {name: m.state_dict() for name, m in models.modules().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ModelSet, int, int, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    hp = ModelHyperParams(**payload["hp"])
    ns, ne = payload["n_speakers"], payload["n_emotions"]
    models = ModelSet(
        hp=hp,
        n_speakers=ns,
        n_emotions=ne,
        catalog_hash=payload["catalog_hash"],
        generator=Generator(hp),
        speaker_encoder=StyleEncoder(hp, ns),
        emotion_encoder=StyleEncoder(hp, ne),
        speaker_mapper=MappingNetwork(hp, ns),
        emotion_mapper=MappingNetwork(hp, ne),
        discriminator=Discriminator(hp, ns, ne),
        speaker_classifier=SourceClassifier(hp, ns),
        emotion_classifier=SourceClassifier(hp, ne),
        pitch_extractor=PitchExtractor(hp),
        content_probe=ContentProbe(hp),
    )
    for name, module in models.modules().items():
        module.load_state_dict(payload["state"][name])
    models.freeze_probes()
    return models, payload["step"], payload["epoch"], payload["extra"]
