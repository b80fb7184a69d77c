"""Command-line entry point.

Subcommands: gen-corpus, train, convert, evaluate, report. Every command
is deterministic given --seed and its inputs, and exits 0 only when all of
its gates pass. EMOVC_RUN_ROOT sets the default parent directory for run
directories.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from emovc import config as cfgmod
from emovc.config import ConfigError
from emovc.corpus import (
    Corpus,
    SynthesisParams,
    generate_corpus,
    read_feature_file,
    write_feature_file,
)
from emovc.domains import DomainPair, build_catalog
from emovc.evaluation import (
    ABLATION_VARIANTS,
    ConvertedSample,
    emotion_accuracy,
    evaluate_models,
    reference_utterances,
    render_metric_plots,
    speaker_similarity,
    train_emotion_probe,
    train_speaker_embedder,
)
from emovc.networks import load_checkpoint
from emovc.trainer import TrainingConfig, convert, run_training


class CliError(Exception):
    pass


def _parse_names(raw: str, prefix: str) -> list[str]:
    """Either an integer count (names generated) or a comma-separated list."""
    raw = raw.strip()
    if raw.isdigit():
        n = int(raw)
        if prefix == "emo":
            return ["neutral"] + [f"emo{i}" for i in range(1, n)]
        return [f"{prefix}{i}" for i in range(n)]
    names = [part.strip() for part in raw.split(",") if part.strip()]
    if not names:
        raise CliError(f"empty {prefix} list")
    return names


def _run_root() -> Path:
    return Path(os.environ.get("EMOVC_RUN_ROOT", "runs"))


class _RunLock:
    """Exclusive lockfile so two writers cannot share a run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"run directory is locked by another writer: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def cmd_gen_corpus(args) -> int:
    out_dir = Path(args.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise CliError(f"output directory {out_dir} is not empty (use --force to overwrite)")

    speakers = _parse_names(args.speakers, "spk")
    emotions = _parse_names(args.emotions, "emo")
    neutral_only = []
    if args.neutral_only:
        neutral_only = [part.strip() for part in args.neutral_only.split(",") if part.strip()]
    unknown = [n for n in neutral_only if n not in speakers]
    if unknown:
        raise CliError(f"--neutral-only names not in speaker list: {', '.join(unknown)}")

    seen = []
    for s, name in enumerate(speakers):
        if name in neutral_only:
            seen.append((s, 0))
        else:
            seen.extend((s, e) for e in range(len(emotions)))
    catalog = build_catalog(speakers, emotions, seen)

    params = SynthesisParams(n_bins=args.n_bins)
    corpus = generate_corpus(catalog, per_cell=args.per_cell, params=params,
                             seed=args.seed, split_ratio=args.split_ratio)
    corpus.save(out_dir)
    print(f"wrote {len(corpus)} utterances "
          f"({len(corpus.indices('train'))} train / {len(corpus.indices('test'))} test) "
          f"to {out_dir}")
    return 0


def _load_train_config(args) -> TrainingConfig:
    entries: dict[str, str] = {}
    if args.config:
        entries.update(cfgmod.read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got {item!r}"])
        key, _, value = item.partition("=")
        entries[key.strip()] = value.strip()
    if args.epochs is not None:
        entries["trainer.total_epochs"] = str(args.epochs)
    if args.batch_size is not None:
        entries["trainer.batch_size"] = str(args.batch_size)
    if args.seed is not None:
        entries["trainer.seed"] = str(args.seed)
    return cfgmod.apply_entries(TrainingConfig(), entries)


def cmd_train(args) -> int:
    from emovc.evaluation import apply_ablation

    corpus = Corpus.load(args.corpus)
    try:
        config = _load_train_config(args)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    if args.ablation:
        if args.ablation not in ABLATION_VARIANTS:
            raise CliError(f"unknown ablation {args.ablation!r}; "
                           f"known: {', '.join(ABLATION_VARIANTS)}")
        config = apply_ablation(config, args.ablation)

    run_dir = Path(args.run_dir) if args.run_dir else _run_root() / "run"
    run_dir.mkdir(parents=True, exist_ok=True)
    with _RunLock(run_dir):
        resolved = config.resolved()
        cfgmod.write_config_file(run_dir / "resolved.cfg", resolved)
        state = run_training(resolved, corpus, run_dir=run_dir, resume=args.resume)
    print(f"trained to epoch {state.epoch} (step {state.step}); run dir: {run_dir}")
    if state.pretrain_metrics:
        print(f"pitch extractor MAE {state.pretrain_metrics.get('pitch_mae', float('nan')):.4f}, "
              f"content probe frame accuracy "
              f"{state.pretrain_metrics.get('content_frame_acc', float('nan')):.4f}")
    return 0


def cmd_convert(args) -> int:
    corpus = Corpus.load(args.corpus)
    models, _, _, _ = load_checkpoint(args.checkpoint)
    if models.catalog_hash != corpus.catalog.content_hash():
        raise CliError("checkpoint catalog does not match the corpus catalog")
    try:
        speaker = corpus.catalog.speaker_index(args.speaker)
        emotion = corpus.catalog.emotion_index(args.emotion)
    except KeyError as err:
        raise CliError(str(err)) from None

    raw = read_feature_file(args.input)
    x = (raw - corpus.norm_mean) / corpus.norm_std
    rng = np.random.default_rng(args.seed)
    torch_gen = torch.Generator()
    torch_gen.manual_seed(args.seed)

    kwargs = {}
    if args.mode == "referenced":
        if args.ref_speaker_file and args.ref_emotion_file:
            ref_sp = (read_feature_file(args.ref_speaker_file) - corpus.norm_mean) / corpus.norm_std
            ref_em = (read_feature_file(args.ref_emotion_file) - corpus.norm_mean) / corpus.norm_std
        else:
            sp_pool = corpus.speaker_indices(speaker, "train", emotion=0) or \
                corpus.speaker_indices(speaker, "train")
            em_pool = corpus.emotion_indices(emotion, "train")
            if not sp_pool or not em_pool:
                raise CliError("no reference utterances available in the corpus for this target")
            ref_sp = corpus.normalized(int(sp_pool[rng.integers(len(sp_pool))]))
            ref_em = corpus.normalized(int(em_pool[rng.integers(len(em_pool))]))
        kwargs = {"ref_speaker": ref_sp, "ref_emotion": ref_em}

    out = convert(models, x.astype(np.float32), DomainPair(speaker, emotion),
                  mode=args.mode, torch_gen=torch_gen, **kwargs)
    out_raw = out * corpus.norm_std + corpus.norm_mean

    if args.out:
        out_path = Path(args.out)
    else:
        stem = Path(args.input).stem
        out_path = Path(args.input).parent / f"{stem}__to__{args.speaker}_{args.emotion}.mel"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_feature_file(out_path, out_raw)
    print(f"wrote {out_path}")
    return 0


def _scan_converted_dir(corpus: Corpus, directory: Path) -> list[ConvertedSample]:
    samples = []
    for path in sorted(directory.glob("*.mel")):
        stem = path.stem
        if "__to__" not in stem:
            continue
        target_part = stem.split("__to__", 1)[1]
        speaker_name, _, emotion_name = target_part.rpartition("_")
        try:
            target = DomainPair(corpus.catalog.speaker_index(speaker_name),
                                corpus.catalog.emotion_index(emotion_name))
        except KeyError as err:
            raise CliError(f"{path.name}: {err}") from None
        feats = (read_feature_file(path) - corpus.norm_mean) / corpus.norm_std
        samples.append(ConvertedSample(features=feats.astype(np.float32), target=target))
    if not samples:
        raise CliError(f"no converted feature files matching '*__to__<speaker>_<emotion>.mel' "
                       f"in {directory}")
    return samples


def cmd_evaluate(args) -> int:
    corpus = Corpus.load(args.corpus)
    emotion_probe = train_emotion_probe(corpus, seed=args.probe_seed)
    embedder = train_speaker_embedder(corpus, seed=args.probe_seed)

    if args.converted_dir:
        samples = _scan_converted_dir(corpus, Path(args.converted_dir))
        per_cell, overall = emotion_accuracy(emotion_probe, samples)
        mean_sim, by_speaker = speaker_similarity(embedder, samples, reference_utterances(corpus))
        lines = ["cell_speaker\tcell_emotion\temotion_accuracy\tcount"]
        for (s, e), (acc, n) in sorted(per_cell.items()):
            lines.append(f"{s}\t{e}\t{acc:.6f}\t{n}")
        lines.append(f"overall\toverall\t{overall:.6f}\t{len(samples)}")
        report_tsv = "\n".join(lines) + "\n"
        report_txt = (f"converted-set evaluation ({len(samples)} samples)\n"
                      f"emotion accuracy: {overall:.3f}\n"
                      f"speaker similarity: {mean_sim:.3f}\n")
    else:
        models, _, _, _ = load_checkpoint(args.checkpoint)
        report = evaluate_models(models, corpus, emotion_probe, embedder,
                                 mode=args.mode, seed=args.seed)
        report_tsv = report.to_tsv()
        report_txt = report.to_text() + "\n"

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report_txt)
    (out_dir / "report.tsv").write_text(report_tsv)
    print(report_txt)
    print(f"wrote {out_dir / 'report.txt'} and {out_dir / 'report.tsv'}")
    return 0


def cmd_report(args) -> int:
    metrics_path = Path(args.run_dir) / "metrics.tsv"
    if not metrics_path.exists():
        raise CliError(f"no metrics log at {metrics_path}")
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.run_dir) / "plots"
    written = render_metric_plots(metrics_path, out_dir)
    print(f"wrote {len(written)} plots to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emovc",
        description="Speaker and emotion style conversion on synthetic mel-like features.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus")
    p.add_argument("--speakers", required=True,
                   help="count or comma-separated speaker names")
    p.add_argument("--emotions", required=True,
                   help="count or comma-separated emotion names (first is neutral)")
    p.add_argument("--neutral-only", default="",
                   help="comma-separated speakers that get only neutral data")
    p.add_argument("--per-cell", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=0.9)
    p.add_argument("--n-bins", type=int, default=48)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="run adversarial training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--config", help="flat dotted-key config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--ablation", choices=ABLATION_VARIANTS)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--emotion", required=True)
    p.add_argument("--mode", choices=("mapped", "referenced"), default="mapped")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref-speaker-file")
    p.add_argument("--ref-emotion-file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="score conversions with frozen probes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--converted-dir", help="score existing converted feature files instead")
    p.add_argument("--mode", choices=("mapped", "referenced"), default="mapped")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render metric-vs-step plots")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and not args.checkpoint and not args.converted_dir:
        parser.error("evaluate needs --checkpoint or --converted-dir")
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        for problem in err.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
