"""Speaker/emotion domain bookkeeping.

A catalog enumerates speaker and emotion identifiers and records which
(speaker, emotion) cells actually exist in the corpus ("seen" pairs).
Everything downstream — virtual target sampling, fake-pair masking,
reference resolution — is defined against this structure.

Convention: emotion index 0 is the neutral/reference emotion. A
"neutral-only" speaker is one whose only seen cell is (speaker, 0).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CATALOG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainPair:
    """One (speaker, emotion) domain combination."""

    speaker: int
    emotion: int

    def flat_index(self, n_emotions: int) -> int:
        # fixed head-indexing convention, also used by the discriminator
        return self.speaker * n_emotions + self.emotion


@dataclass(frozen=True)
class DomainCatalog:
    speakers: tuple[str, ...]
    emotions: tuple[str, ...]
    seen_pairs: frozenset[tuple[int, int]]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def n_emotions(self) -> int:
        return len(self.emotions)

    @property
    def n_pairs(self) -> int:
        return self.n_speakers * self.n_emotions

    @property
    def unseen_pairs(self) -> frozenset[tuple[int, int]]:
        full = {(s, e) for s in range(self.n_speakers) for e in range(self.n_emotions)}
        return frozenset(full - self.seen_pairs)

    def neutral_only_speakers(self) -> list[int]:
        out = []
        for s in range(self.n_speakers):
            cells = {e for (sp, e) in self.seen_pairs if sp == s}
            if cells == {0}:
                out.append(s)
        return out

    def speaker_index(self, name: str) -> int:
        try:
            return self.speakers.index(name)
        except ValueError:
            raise KeyError(f"unknown speaker {name!r}; valid: {', '.join(self.speakers)}") from None

    def emotion_index(self, name: str) -> int:
        try:
            return self.emotions.index(name)
        except ValueError:
            raise KeyError(f"unknown emotion {name!r}; valid: {', '.join(self.emotions)}") from None

    def content_hash(self) -> str:
        payload = json.dumps(
            {
                "speakers": list(self.speakers),
                "emotions": list(self.emotions),
                "seen": sorted(self.seen_pairs),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class PairMask:
    """Per-sample keep flags for a batch of target pairs.

    kept[i] is True iff the i-th target pair is seen. Only real/fake
    discriminator terms honor the mask; source classifiers never do.
    """

    kept: np.ndarray

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)

    def __len__(self) -> int:
        return len(self.kept)

    @property
    def any_kept(self) -> bool:
        return bool(self.kept.any())


def build_catalog(
    speakers: Sequence[str],
    emotions: Sequence[str],
    seen_pairs: Iterable[tuple[int, int]],
) -> DomainCatalog:
    """Validate and assemble a domain catalog.

    Rejects duplicate identifiers, out-of-range pairs, an empty seen set
    and any speaker that has no seen cell at all.
    """
    speakers = tuple(speakers)
    emotions = tuple(emotions)
    if not speakers or not emotions:
        raise ValueError("speaker and emotion lists must be nonempty")
    if len(set(speakers)) != len(speakers):
        raise ValueError("duplicate speaker identifiers")
    if len(set(emotions)) != len(emotions):
        raise ValueError("duplicate emotion identifiers")

    seen = frozenset((int(s), int(e)) for s, e in seen_pairs)
    if not seen:
        raise ValueError("seen_pairs must be nonempty")
    for s, e in seen:
        if not (0 <= s < len(speakers)) or not (0 <= e < len(emotions)):
            raise ValueError(f"seen pair ({s}, {e}) out of range")
    covered = {s for s, _ in seen}
    missing = sorted(set(range(len(speakers))) - covered)
    if missing:
        names = ", ".join(speakers[i] for i in missing)
        raise ValueError(f"speakers with no seen pairs: {names}")

    return DomainCatalog(speakers=speakers, emotions=emotions, seen_pairs=seen)


def is_seen(catalog: DomainCatalog, pair: DomainPair) -> bool:
    if not (0 <= pair.speaker < catalog.n_speakers):
        raise ValueError(f"speaker index {pair.speaker} out of range")
    if not (0 <= pair.emotion < catalog.n_emotions):
        raise ValueError(f"emotion index {pair.emotion} out of range")
    return (pair.speaker, pair.emotion) in catalog.seen_pairs


def sample_virtual_target(catalog: DomainCatalog, rng: np.random.Generator) -> DomainPair:
    """Draw a target pair with speaker and emotion sampled independently.

    Both marginals are uniform, so the draw may land on an unseen pair;
    that is the point — it virtually pairs a speaker with emotions it has
    no real data for.
    """
    return DomainPair(
        speaker=int(rng.integers(catalog.n_speakers)),
        emotion=int(rng.integers(catalog.n_emotions)),
    )


def sample_seen_target(catalog: DomainCatalog, rng: np.random.Generator) -> DomainPair:
    """Draw a target pair uniformly over the seen cells only.

    Used when virtual pairing is disabled for ablation.
    """
    cells = sorted(catalog.seen_pairs)
    s, e = cells[int(rng.integers(len(cells)))]
    return DomainPair(speaker=s, emotion=e)


def fake_pair_mask(catalog: DomainCatalog, target_pairs: Sequence[DomainPair]) -> PairMask:
    """Keep flags for discriminator training: kept[i] == is_seen(pair_i)."""
    kept = np.array([is_seen(catalog, p) for p in target_pairs], dtype=bool)
    return PairMask(kept=kept)


def save_catalog(catalog: DomainCatalog, path) -> None:
    payload = {
        "format_version": CATALOG_FORMAT_VERSION,
        "speakers": list(catalog.speakers),
        "emotions": list(catalog.emotions),
        "seen_pairs": sorted(catalog.seen_pairs),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load_catalog(path) -> DomainCatalog:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != CATALOG_FORMAT_VERSION:
        raise ValueError(f"unsupported catalog format version in {path}")
    return build_catalog(
        payload["speakers"], payload["emotions"], [tuple(p) for p in payload["seen_pairs"]]
    )
