"""Training orchestration.

Each batch gets one discriminator/classifier update followed by one
generator-side update. Both updates combine a latent-mapped style path and
a reference-encoded style path (averaged), so the mapping networks and the
style encoders train together. The source classifiers join the game only
after the configured introduction epoch, which is also where the pitch-
and silence-preservation weights start their linear decay.

The pitch extractor and content probe are trained supervised on the
synthetic ground truth before adversarial training starts and stay frozen
afterwards.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from emovc.corpus import (
    Batch,
    Corpus,
    SamplerPolicy,
    augment_style_nuisances,
    labeled_batch,
    make_batch,
)
from emovc.domains import DomainPair, PairMask
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
from emovc.networks import (
    ModelHyperParams,
    ModelSet,
    build_model_set,
    load_checkpoint,
    save_checkpoint,
)


class NonFiniteLossError(RuntimeError):
    """Raised when any step loss turns non-finite; a diagnostic snapshot is
    written first when a run directory is available."""


@dataclass
class TrainingConfig:
    total_epochs: int = 150
    batch_size: int = 10
    classifier_start_epoch: int | None = None  # default: total_epochs // 3
    anneal_start_epoch: int | None = None      # default: classifier_start_epoch
    anneal_end_epoch: int | None = None        # default: total_epochs
    crop_len: int = 96
    seed: int = 0
    lr_generator: float = 2e-4
    lr_style_encoder: float = 2e-4
    lr_mapper: float = 2e-4
    lr_discriminator: float = 2e-4
    lr_classifier: float = 2e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    checkpoint_interval: int = 50
    use_virtual_pairing: bool = True
    use_fake_pair_masking: bool = True
    generator_fake_pair_masking: bool = True
    use_annealing: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    pitch_pretrain_steps: int = 600
    content_pretrain_steps: int = 500
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 16
    torch_threads: int = 1
    hp: ModelHyperParams = field(default_factory=ModelHyperParams)

    def resolved(self) -> "TrainingConfig":
        cfg = replace(self)
        if cfg.classifier_start_epoch is None:
            cfg.classifier_start_epoch = max(1, round(cfg.total_epochs / 3))
        if cfg.anneal_start_epoch is None:
            cfg.anneal_start_epoch = cfg.classifier_start_epoch
        if cfg.anneal_end_epoch is None:
            cfg.anneal_end_epoch = cfg.total_epochs
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.classifier_start_epoch is not None and self.classifier_start_epoch >= self.total_epochs:
            raise ValueError("classifier_start_epoch must be < total_epochs")
        for name in ("lr_generator", "lr_style_encoder", "lr_mapper", "lr_discriminator",
                     "lr_classifier", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.anneal_start_epoch is not None and self.anneal_end_epoch is not None:
            if self.anneal_start_epoch >= self.anneal_end_epoch:
                raise ValueError("anneal_start_epoch must be < anneal_end_epoch")
        self.weights.validate()

    def anneal_state(self) -> AnnealState:
        cfg = self if self.anneal_start_epoch is not None else self.resolved()
        return AnnealState(
            start_epoch=cfg.anneal_start_epoch,
            end_epoch=cfg.anneal_end_epoch,
            initial_weight=cfg.weights.lambda_f0,
            final_weight=0.0,
        )


@dataclass
class TrainState:
    models: ModelSet
    optimizers: dict
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    pretrain_metrics: dict = field(default_factory=dict)


def _make_optimizers(models: ModelSet, config: TrainingConfig) -> dict:
    betas = (config.adam_beta1, config.adam_beta2)
    adam = lambda params, lr: torch.optim.Adam(params, lr=lr, betas=betas)
    return {
        "generator": adam(models.generator.parameters(), config.lr_generator),
        "style_encoders": adam(
            list(models.speaker_encoder.parameters()) + list(models.emotion_encoder.parameters()),
            config.lr_style_encoder),
        "mappers": adam(
            list(models.speaker_mapper.parameters()) + list(models.emotion_mapper.parameters()),
            config.lr_mapper),
        "discriminator": adam(models.discriminator.parameters(), config.lr_discriminator),
        "classifiers": adam(
            list(models.speaker_classifier.parameters()) + list(models.emotion_classifier.parameters()),
            config.lr_classifier),
    }


def pretrain_pitch_extractor(
    extractor,
    corpus: Corpus,
    steps: int,
    batch_size: int,
    crop_len: int,
    lr: float,
    rng: np.random.Generator,
) -> float:
    """Regress the per-crop standardized ground-truth contour; returns the
    mean absolute error on full-length held-out utterances.

    Training crops get style-nuisance augmentation so the frozen contour
    stays stable when the generator changes gain, tilt or modulation.
    """
    opt = torch.optim.Adam(extractor.parameters(), lr=lr)
    extractor.train()
    for _ in range(steps):
        x, _, _, f0, _ = labeled_batch(corpus, batch_size, crop_len, rng, split="train")
        x = augment_style_nuisances(x, rng)
        _, contour = extractor(torch.from_numpy(x))
        loss = (contour - torch.from_numpy(f0)).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    extractor.eval()
    return pitch_extractor_mae(extractor, corpus, split="test")


def pitch_extractor_mae(extractor, corpus: Corpus, split: str = "test") -> float:
    errors = []
    with torch.no_grad():
        for i in corpus.indices(split):
            x = torch.from_numpy(corpus.normalized(i)[None])
            _, contour = extractor(x)
            gt = corpus.f0_contours[i].astype(np.float64)
            gt = (gt - gt.mean()) / (gt.std() + 1e-6)
            errors.append(float((contour[0].numpy() - gt).__abs__().mean()))
    return float(np.mean(errors))


def pretrain_content_probe(
    probe,
    corpus: Corpus,
    steps: int,
    batch_size: int,
    crop_len: int,
    lr: float,
    rng: np.random.Generator,
) -> float:
    """Frame-wise symbol classification (silence mapped to the last class);
    returns held-out frame accuracy.

    Style-nuisance augmentation keeps the probe's feature maps insensitive
    to the directions emotion conversion is allowed to move.
    """
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    probe.train()
    silence = probe.n_classes - 1
    for _ in range(steps):
        x, _, _, _, syms = labeled_batch(corpus, batch_size, crop_len, rng, split="train")
        x = augment_style_nuisances(x, rng)
        labels = np.where(syms < 0, silence, syms)
        logits = probe(torch.from_numpy(x))
        loss = F.cross_entropy(logits, torch.from_numpy(labels))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    probe.eval()
    correct = total = 0
    with torch.no_grad():
        for i in corpus.indices("test"):
            x = torch.from_numpy(corpus.normalized(i)[None])
            pred = probe(x).argmax(dim=1)[0].numpy()
            labels = np.where(corpus.frame_symbols[i] < 0, silence, corpus.frame_symbols[i])
            correct += int((pred == labels).sum())
            total += len(labels)
    return correct / max(1, total)


def _tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr))


def _all_true_mask(n: int) -> PairMask:
    return PairMask(kept=np.ones(n, dtype=bool))


def _styles_for_batch(models: ModelSet, batch: Batch, torch_gen: torch.Generator, path: str):
    """Two style draws per factor from one path (latent-mapped or
    reference-encoded). Steps alternate between the paths, so both the
    mapping networks and the style encoders train."""
    b = len(batch)
    sp = torch.from_numpy(batch.trg_speaker)
    em = torch.from_numpy(batch.trg_emotion)
    if path == "mapped":
        z = [torch.randn(b, models.hp.latent_dim, generator=torch_gen) for _ in range(4)]
        return (
            models.speaker_mapper(z[0], sp), models.emotion_mapper(z[1], em),
            models.speaker_mapper(z[2], sp), models.emotion_mapper(z[3], em),
        )
    return (
        models.speaker_encoder(_tensor(batch.ref_speaker_feats), sp),
        models.emotion_encoder(_tensor(batch.ref_emotion_feats), em),
        models.speaker_encoder(_tensor(batch.ref_speaker_feats2), sp),
        models.emotion_encoder(_tensor(batch.ref_emotion_feats2), em),
    )


def train_step(state: TrainState, batch: Batch, config: TrainingConfig) -> dict[str, float]:
    """One discriminator/classifier update then one generator-side update."""
    models = state.models
    epoch = state.epoch
    classifier_active = epoch > config.classifier_start_epoch
    anneal_state = config.anneal_state()

    x = _tensor(batch.src)
    mask_d = batch.mask if config.use_fake_pair_masking else _all_true_mask(len(batch))
    if config.use_fake_pair_masking and config.generator_fake_pair_masking:
        mask_g = batch.mask
    else:
        mask_g = _all_true_mask(len(batch))

    with torch.no_grad():
        pitch_feats, _ = models.pitch_extractor(x)

    path = "mapped" if state.step % 2 == 0 else "encoded"
    sp1, em1, sp2, em2 = _styles_for_batch(models, batch, state.torch_gen, path)

    # ---------------------------------------------- discriminator/classifier
    with torch.no_grad():
        fakes = models.generator(x, pitch_feats, sp1, em1)

    components_d: dict[str, torch.Tensor | float] = {}
    components_d["adv_d"] = adversarial_loss(
        models.discriminator, x, batch.src_speaker, batch.src_emotion,
        fakes, batch.trg_speaker, batch.trg_emotion, mask_d, "discriminator")
    if classifier_active:
        components_d["advcls_c"] = source_classifier_loss(
            models.speaker_classifier, models.emotion_classifier,
            fakes, batch.src_speaker, batch.src_emotion)

    _, d_total = full_objective(config.weights, anneal_state, epoch, components_d,
                                anneal=config.use_annealing)
    for name in ("discriminator", "classifiers"):
        state.optimizers[name].zero_grad(set_to_none=True)
    if torch.is_tensor(d_total) and d_total.requires_grad:
        d_total.backward()
        state.optimizers["discriminator"].step()
        if classifier_active:
            state.optimizers["classifiers"].step()

    # ------------------------------------------------------- generator side
    components_g: dict[str, torch.Tensor | float] = {}
    ds, fake = style_diversification_loss(
        models.generator, x, pitch_feats, (sp1, sp2), (em1, em2), return_fake=True)
    components_g["ds"] = ds
    components_g["adv_g"] = adversarial_loss(
        models.discriminator, x, batch.src_speaker, batch.src_emotion,
        fake, batch.trg_speaker, batch.trg_emotion, mask_g, "generator")
    if classifier_active:
        components_g["advcls_g"] = source_classifier_loss(
            models.speaker_classifier, models.emotion_classifier,
            fake, batch.trg_speaker, batch.trg_emotion)
    components_g["sty"] = style_reconstruction_loss(
        models.speaker_encoder, models.emotion_encoder, fake, sp1, em1,
        batch.trg_speaker, batch.trg_emotion)
    components_g["f0"] = f0_consistency_loss(models.pitch_extractor, x, fake)
    components_g["norm"] = norm_consistency_loss(x, fake)
    components_g["asr"] = speech_consistency_loss(models.content_probe, x, fake)
    components_g["cyc"] = cycle_consistency_loss(
        models.generator, models.speaker_encoder, models.emotion_encoder,
        models.pitch_extractor, x, batch.src_speaker, batch.src_emotion, fake)

    g_total, _ = full_objective(config.weights, anneal_state, epoch, components_g,
                                anneal=config.use_annealing)
    for name in ("generator", "style_encoders", "mappers"):
        state.optimizers[name].zero_grad(set_to_none=True)
    g_total.backward()
    for name in ("generator", "style_encoders", "mappers"):
        state.optimizers[name].step()

    metrics = {"epoch": float(epoch)}
    for key, value in {**components_d, **components_g}.items():
        metrics[key] = float(value.detach()) if torch.is_tensor(value) else float(value)
    metrics["d_total"] = float(d_total.detach()) if torch.is_tensor(d_total) else float(d_total)
    metrics["g_total"] = float(g_total.detach())
    metrics["w_anneal"] = (anneal_weight(anneal_state, epoch)
                           if config.use_annealing else config.weights.lambda_f0)
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NonFiniteLossError(f"non-finite loss at step {state.step + 1}: {metrics}")
    return metrics


def _rng_snapshot(state: TrainState) -> dict:
    return {
        "np_rng": state.np_rng.bit_generator.state,
        "torch_gen": state.torch_gen.get_state(),
    }


def _restore_rng(state: TrainState, snap: dict) -> None:
    state.np_rng.bit_generator.state = snap["np_rng"]
    state.torch_gen.set_state(snap["torch_gen"])


def init_train_state(config: TrainingConfig, corpus: Corpus) -> TrainState:
    """Fresh state: seeded model init plus pitch/content probe pretraining."""
    config = config.resolved()
    seq = np.random.SeedSequence(config.seed)
    init_seed, pitch_seed, content_seed, batch_seed, latent_seed = (
        int(s.generate_state(1)[0]) for s in seq.spawn(5))

    hp = replace(config.hp, n_bins=corpus.n_bins, n_symbols=corpus.params.n_symbols)
    models = build_model_set(hp, corpus.catalog, seed=init_seed)

    pitch_mae = pretrain_pitch_extractor(
        models.pitch_extractor, corpus, config.pitch_pretrain_steps,
        config.pretrain_batch_size, config.crop_len, config.pretrain_lr,
        np.random.default_rng(pitch_seed))
    content_acc = pretrain_content_probe(
        models.content_probe, corpus, config.content_pretrain_steps,
        config.pretrain_batch_size, config.crop_len, config.pretrain_lr,
        np.random.default_rng(content_seed))
    models.freeze_probes()

    torch_gen = torch.Generator()
    torch_gen.manual_seed(latent_seed)
    state = TrainState(
        models=models,
        optimizers=_make_optimizers(models, config),
        np_rng=np.random.default_rng(batch_seed),
        torch_gen=torch_gen,
    )
    state.pretrain_metrics = {"pitch_mae": pitch_mae, "content_frame_acc": content_acc}
    return state


def run_training(
    config: TrainingConfig,
    corpus: Corpus,
    run_dir=None,
    resume: bool = False,
) -> TrainState:
    """Full training loop with periodic checkpoints and a metrics log."""
    config = config.resolved()
    torch.set_num_threads(config.torch_threads)
    run_path = Path(run_dir) if run_dir is not None else None
    ckpt_last = run_path / "checkpoint_last.pt" if run_path else None

    if resume:
        if ckpt_last is None or not ckpt_last.exists():
            raise FileNotFoundError("resume requested but no checkpoint_last.pt found")
        state = load_train_state(ckpt_last, config, corpus)
        if run_path and (run_path / "metrics.tsv").exists():
            MetricsLog.truncate(run_path / "metrics.tsv", state.step)
    else:
        state = init_train_state(config, corpus)

    if state.models.catalog_hash != corpus.catalog.content_hash():
        raise ValueError("checkpoint catalog does not match the corpus catalog")

    policy = SamplerPolicy(use_virtual_pairing=config.use_virtual_pairing, crop_len=config.crop_len)
    train_count = len(corpus.indices("train"))
    steps_per_epoch = max(1, train_count // config.batch_size)

    log = None
    if run_path:
        run_path.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(run_path / "metrics.tsv", append=resume)
        if state.pretrain_metrics and not resume:
            log.write(0, state.pretrain_metrics)

    try:
        for epoch in range(state.epoch + 1, config.total_epochs + 1):
            state.epoch = epoch
            for _ in range(steps_per_epoch):
                batch = make_batch(corpus, config.batch_size, policy, state.np_rng)
                try:
                    metrics = train_step(state, batch, config)
                except NonFiniteLossError:
                    if run_path:
                        _save_state(run_path / "diverged.pt", state, config)
                    raise
                state.step += 1
                state.history.append((state.step, metrics))
                if log:
                    log.write(state.step, metrics)
            if run_path and (epoch % config.checkpoint_interval == 0 or epoch == config.total_epochs):
                _save_state(ckpt_last, state, config)
                _save_state(run_path / f"checkpoint_epoch{epoch:04d}.pt", state, config)
    finally:
        if log:
            log.close()
    return state


def _save_state(path, state: TrainState, config: TrainingConfig) -> None:
    extra = {
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers.items()},
        "rng": _rng_snapshot(state),
        "pretrain_metrics": state.pretrain_metrics,
        "config": _config_dict(config),
    }
    save_checkpoint(path, state.models, state.step, state.epoch, extra)


def _config_dict(config: TrainingConfig) -> dict:
    d = asdict(config)
    return d


def load_train_state(path, config: TrainingConfig, corpus: Corpus) -> TrainState:
    models, step, epoch, extra = load_checkpoint(path)
    state = TrainState(
        models=models,
        optimizers=_make_optimizers(models, config.resolved()),
        np_rng=np.random.default_rng(0),
        torch_gen=torch.Generator(),
        epoch=epoch,
        step=step,
    )
    for name, opt_state in extra["optimizers"].items():
        state.optimizers[name].load_state_dict(opt_state)
    _restore_rng(state, extra["rng"])
    state.pretrain_metrics = extra.get("pretrain_metrics", {})
    return state


def convert(
    models: ModelSet,
    features: np.ndarray,
    target: DomainPair,
    mode: str = "mapped",
    z_speaker: torch.Tensor | None = None,
    z_emotion: torch.Tensor | None = None,
    ref_speaker: np.ndarray | None = None,
    ref_emotion: np.ndarray | None = None,
    torch_gen: torch.Generator | None = None,
) -> np.ndarray:
    """Convert one normalized feature matrix to the target pair.

    ``mapped`` draws (or takes) latent codes and uses the mapping networks;
    ``referenced`` extracts styles from the given reference matrices.
    """
    if not (0 <= target.speaker < models.n_speakers):
        raise ValueError(f"speaker index {target.speaker} outside checkpoint range "
                         f"[0, {models.n_speakers})")
    if not (0 <= target.emotion < models.n_emotions):
        raise ValueError(f"emotion index {target.emotion} outside checkpoint range "
                         f"[0, {models.n_emotions})")
    x = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))[None]
    sp = torch.tensor([target.speaker])
    em = torch.tensor([target.emotion])
    with torch.no_grad():
        if mode == "mapped":
            if z_speaker is None or z_emotion is None:
                gen = torch_gen if torch_gen is not None else torch.Generator().manual_seed(0)
                if z_speaker is None:
                    z_speaker = torch.randn(1, models.hp.latent_dim, generator=gen)
                if z_emotion is None:
                    z_emotion = torch.randn(1, models.hp.latent_dim, generator=gen)
            style_sp = models.speaker_mapper(z_speaker, sp)
            style_em = models.emotion_mapper(z_emotion, em)
        elif mode == "referenced":
            if ref_speaker is None or ref_emotion is None:
                raise ValueError("referenced mode needs ref_speaker and ref_emotion features")
            style_sp = models.speaker_encoder(
                torch.from_numpy(np.ascontiguousarray(ref_speaker, dtype=np.float32))[None], sp)
            style_em = models.emotion_encoder(
                torch.from_numpy(np.ascontiguousarray(ref_emotion, dtype=np.float32))[None], em)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        pitch_feats, _ = models.pitch_extractor(x)
        out = models.generator(x, pitch_feats, style_sp, style_em)
    return out[0].numpy()
