"""Objective evaluation of converted samples.

Emotion conversion is scored by a frozen classifier probe trained on real
corpus data; speaker similarity is the mean inner product between
unit-normalized embeddings from a frozen speaker classifier's penultimate
layer. Unseen-pair cells are scored on utterances from neutral-only
speakers converted to non-neutral emotions, which is exactly the data
condition the model never saw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from emovc.corpus import Corpus, crop_example
from emovc.domains import DomainPair
from emovc.losses import MetricsLog
from emovc.networks import ModelHyperParams, ModelSet, SourceClassifier
from emovc.trainer import TrainingConfig, convert, run_training


class EvaluationGateError(RuntimeError):
    """A frozen probe failed its accuracy gate; evaluation is meaningless."""


@dataclass
class ConvertedSample:
    features: np.ndarray  # normalized feature space
    target: DomainPair


@dataclass
class CellMetrics:
    emotion_accuracy: float
    speaker_similarity: float
    count: int


@dataclass
class EvalReport:
    cells: dict[tuple[int, int], CellMetrics]
    overall_emotion_accuracy: float
    mean_speaker_similarity: float
    similarity_by_speaker: dict[int, float]
    sample_count: int
    speakers: tuple[str, ...] = ()
    emotions: tuple[str, ...] = ()

    def to_text(self) -> str:
        lines = [f"{'cell':<24}{'emo_acc':>10}{'spk_sim':>10}{'n':>6}"]
        for (s, e), m in sorted(self.cells.items()):
            name = f"{self.speakers[s]}/{self.emotions[e]}" if self.speakers else f"{s}/{e}"
            lines.append(f"{name:<24}{m.emotion_accuracy:>10.3f}{m.speaker_similarity:>10.3f}{m.count:>6d}")
        lines.append(f"{'overall':<24}{self.overall_emotion_accuracy:>10.3f}"
                     f"{self.mean_speaker_similarity:>10.3f}{self.sample_count:>6d}")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        rows = ["cell_speaker\tcell_emotion\temotion_accuracy\tspeaker_similarity\tcount"]
        for (s, e), m in sorted(self.cells.items()):
            rows.append(f"{s}\t{e}\t{m.emotion_accuracy:.6f}\t{m.speaker_similarity:.6f}\t{m.count}")
        rows.append(f"overall\toverall\t{self.overall_emotion_accuracy:.6f}"
                    f"\t{self.mean_speaker_similarity:.6f}\t{self.sample_count}")
        return "\n".join(rows) + "\n"


def train_classifier_probe(
    corpus: Corpus,
    kind: str,
    seed: int = 0,
    steps: int = 400,
    batch_size: int = 16,
    crop_len: int = 96,
    lr: float = 1e-3,
) -> tuple[SourceClassifier, float]:
    """Train a supervised probe on real data; returns it frozen with its
    held-out full-utterance accuracy."""
    from emovc.corpus import labeled_batch
    import torch.nn.functional as F

    if kind == "emotion":
        n_classes, label_col = corpus.catalog.n_emotions, 2
    elif kind == "speaker":
        n_classes, label_col = corpus.catalog.n_speakers, 1
    else:
        raise ValueError(f"unknown probe kind {kind!r}")

    hp = ModelHyperParams(n_bins=corpus.n_bins, n_symbols=corpus.params.n_symbols)
    torch.manual_seed(seed)
    probe = SourceClassifier(hp, n_classes)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    probe.train()
    for _ in range(steps):
        parts = labeled_batch(corpus, batch_size, crop_len, rng, split="train")
        x, labels = parts[0], parts[label_col]
        loss = F.cross_entropy(probe(torch.from_numpy(x)), torch.from_numpy(labels))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    probe.eval()
    for p in probe.parameters():
        p.requires_grad_(False)

    correct = total = 0
    with torch.no_grad():
        for i in corpus.indices("test"):
            rec = corpus.records[i]
            label = rec.emotion if kind == "emotion" else rec.speaker
            pred = int(probe(torch.from_numpy(corpus.normalized(i)[None])).argmax(dim=1))
            correct += int(pred == label)
            total += 1
    return probe, correct / max(1, total)


def train_emotion_probe(corpus: Corpus, seed: int = 0, gate: float = 0.95, **kwargs) -> SourceClassifier:
    probe, acc = train_classifier_probe(corpus, "emotion", seed=seed, **kwargs)
    if acc < gate:
        raise EvaluationGateError(f"emotion probe held-out accuracy {acc:.3f} below gate {gate}")
    return probe


def train_speaker_embedder(corpus: Corpus, seed: int = 0, gate: float = 0.95, **kwargs) -> SourceClassifier:
    probe, acc = train_classifier_probe(corpus, "speaker", seed=seed, **kwargs)
    if acc < gate:
        raise EvaluationGateError(f"speaker probe held-out accuracy {acc:.3f} below gate {gate}")
    return probe


def speaker_embedding(probe: SourceClassifier, features: np.ndarray) -> np.ndarray:
    """Unit-normalized penultimate-layer embedding of one feature matrix."""
    with torch.no_grad():
        emb = probe.features(torch.from_numpy(np.ascontiguousarray(features, np.float32))[None])[0]
    emb = emb.numpy().astype(np.float64)
    return emb / (np.linalg.norm(emb) + 1e-12)


def emotion_accuracy(
    probe: SourceClassifier,
    samples: list[ConvertedSample],
) -> tuple[dict[tuple[int, int], tuple[float, int]], float]:
    """Fraction of converted samples the probe assigns to their target
    emotion, per (target speaker, target emotion) cell and overall."""
    if not samples:
        raise ValueError("empty converted set")
    hits: dict[tuple[int, int], list[int]] = {}
    with torch.no_grad():
        for s in samples:
            pred = int(probe(torch.from_numpy(
                np.ascontiguousarray(s.features, np.float32))[None]).argmax(dim=1))
            key = (s.target.speaker, s.target.emotion)
            hits.setdefault(key, []).append(int(pred == s.target.emotion))
    per_cell = {k: (float(np.mean(v)), len(v)) for k, v in hits.items()}
    overall = float(np.mean([h for v in hits.values() for h in v]))
    return per_cell, overall


def speaker_similarity(
    embedder: SourceClassifier,
    samples: list[ConvertedSample],
    references: dict[int, list[np.ndarray]],
) -> tuple[float, dict[int, float]]:
    """Mean inner product between converted-sample embeddings and the target
    speaker's reference embeddings, plus the same mean against every
    speaker (for target-versus-other comparisons)."""
    ref_embs = {
        spk: np.stack([speaker_embedding(embedder, r) for r in refs])
        for spk, refs in references.items()
    }
    for s in samples:
        if s.target.speaker not in ref_embs:
            raise ValueError(f"missing reference utterances for speaker {s.target.speaker}")
    sims_target = []
    sims_by_speaker: dict[int, list[float]] = {spk: [] for spk in ref_embs}
    for s in samples:
        emb = speaker_embedding(embedder, s.features)
        for spk, refs in ref_embs.items():
            sim = float(np.mean(refs @ emb))
            sims_by_speaker[spk].append(sim)
            if spk == s.target.speaker:
                sims_target.append(sim)
    return float(np.mean(sims_target)), {k: float(np.mean(v)) for k, v in sims_by_speaker.items()}


def convert_unseen_pairs(
    models: ModelSet,
    corpus: Corpus,
    mode: str = "mapped",
    crops_per_utterance: int = 3,
    draws_per_crop: int = 2,
    crop_len: int = 96,
    seed: int = 0,
) -> list[ConvertedSample]:
    """Convert held-out utterances of neutral-only speakers to each
    non-neutral emotion of the same speaker (the unseen cells)."""
    rng = np.random.default_rng(seed)
    torch_gen = torch.Generator()
    torch_gen.manual_seed(seed)
    samples: list[ConvertedSample] = []
    for spk in corpus.catalog.neutral_only_speakers():
        test_idx = corpus.speaker_indices(spk, split="test", emotion=0)
        for idx in test_idx:
            for _ in range(crops_per_utterance):
                x, _, _ = crop_example(corpus, idx, crop_len, rng)
                for emotion in range(1, corpus.catalog.n_emotions):
                    target = DomainPair(spk, emotion)
                    for _ in range(draws_per_crop):
                        if mode == "mapped":
                            out = convert(models, x, target, mode="mapped", torch_gen=torch_gen)
                        else:
                            ridx_em = corpus.emotion_indices(emotion, "train")
                            ridx_sp = corpus.speaker_indices(spk, "train", emotion=0)
                            rem, _, _ = crop_example(
                                corpus, int(ridx_em[rng.integers(len(ridx_em))]), crop_len, rng)
                            rsp, _, _ = crop_example(
                                corpus, int(ridx_sp[rng.integers(len(ridx_sp))]), crop_len, rng)
                            out = convert(models, x, target, mode="referenced",
                                          ref_speaker=rsp, ref_emotion=rem)
                        samples.append(ConvertedSample(features=out, target=target))
    if not samples:
        raise ValueError("no unseen-pair cells: corpus has no neutral-only speakers")
    return samples


def reference_utterances(corpus: Corpus, split: str = "test") -> dict[int, list[np.ndarray]]:
    refs: dict[int, list[np.ndarray]] = {}
    for spk in range(corpus.catalog.n_speakers):
        idx = corpus.speaker_indices(spk, split=split)
        refs[spk] = [corpus.normalized(i) for i in idx]
    return refs


def evaluate_models(
    models: ModelSet,
    corpus: Corpus,
    emotion_probe: SourceClassifier,
    speaker_embedder: SourceClassifier,
    mode: str = "mapped",
    seed: int = 0,
    crops_per_utterance: int = 3,
    draws_per_crop: int = 2,
    crop_len: int = 96,
) -> EvalReport:
    if models.catalog_hash != corpus.catalog.content_hash():
        raise ValueError("checkpoint catalog does not match the corpus (mismatched corpora)")
    samples = convert_unseen_pairs(
        models, corpus, mode=mode, crops_per_utterance=crops_per_utterance,
        draws_per_crop=draws_per_crop, crop_len=crop_len, seed=seed)
    per_cell_acc, overall_acc = emotion_accuracy(emotion_probe, samples)
    refs = reference_utterances(corpus)
    mean_sim, by_speaker = speaker_similarity(speaker_embedder, samples, refs)

    cells = {}
    for key, (acc, n) in per_cell_acc.items():
        cell_samples = [s for s in samples if (s.target.speaker, s.target.emotion) == key]
        sim, _ = speaker_similarity(speaker_embedder, cell_samples, refs)
        cells[key] = CellMetrics(emotion_accuracy=acc, speaker_similarity=sim, count=n)
    return EvalReport(
        cells=cells,
        overall_emotion_accuracy=overall_acc,
        mean_speaker_similarity=mean_sim,
        similarity_by_speaker=by_speaker,
        sample_count=len(samples),
        speakers=corpus.catalog.speakers,
        emotions=corpus.catalog.emotions,
    )


ABLATION_VARIANTS = ("full", "no-vdp", "no-fpm", "no-anneal", "no-f0norm")


def apply_ablation(config: TrainingConfig, variant: str) -> TrainingConfig:
    if variant == "full":
        return replace(config)
    if variant == "no-vdp":
        return replace(config, use_virtual_pairing=False)
    if variant == "no-fpm":
        return replace(config, use_fake_pair_masking=False)
    if variant == "no-anneal":
        return replace(config, use_annealing=False)
    if variant == "no-f0norm":
        weights = replace(config.weights, lambda_f0=0.0, lambda_norm=0.0)
        return replace(config, use_annealing=False, weights=weights)
    raise ValueError(f"unknown ablation variant {variant!r}; known: {', '.join(ABLATION_VARIANTS)}")


def ablation_report(
    corpus: Corpus,
    base_config: TrainingConfig,
    variants: tuple[str, ...] = ABLATION_VARIANTS,
    run_root=None,
    probe_seed: int = 0,
    eval_seed: int = 0,
    mode: str = "mapped",
) -> dict[str, EvalReport]:
    """Train every variant with the shared seed and budget, then score all
    of them with the same frozen probes."""
    emotion_probe = train_emotion_probe(corpus, seed=probe_seed, crop_len=base_config.crop_len)
    embedder = train_speaker_embedder(corpus, seed=probe_seed, crop_len=base_config.crop_len)
    reports: dict[str, EvalReport] = {}
    for variant in variants:
        cfg = apply_ablation(base_config, variant)
        run_dir = Path(run_root) / variant if run_root else None
        state = run_training(cfg, corpus, run_dir=run_dir)
        reports[variant] = evaluate_models(
            state.models, corpus, emotion_probe, embedder,
            mode=mode, seed=eval_seed, crop_len=base_config.crop_len)
    return reports


def ablation_table(reports: dict[str, EvalReport]) -> str:
    lines = [f"{'variant':<14}{'emo_acc':>10}{'spk_sim':>10}{'n':>6}"]
    for name, rep in reports.items():
        lines.append(f"{name:<14}{rep.overall_emotion_accuracy:>10.3f}"
                     f"{rep.mean_speaker_similarity:>10.3f}{rep.sample_count:>6d}")
    return "\n".join(lines)


def render_metric_plots(metrics_path, out_dir) -> list[Path]:
    """One metric-versus-step PNG per logged metric name."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = MetricsLog.read(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, points in sorted(series.items()):
        steps = [p[0] for p in points]
        values = [p[1] for p in points]
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.plot(steps, values, linewidth=0.9)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        ax.set_title(name)
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
