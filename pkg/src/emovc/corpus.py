"""Synthetic multi-speaker, multi-emotion feature corpus.

Every utterance is rendered from fully factorized ground truth:

* speaker   -> smooth spectral envelope + mean pitch-band position
* emotion   -> pitch shift/scale, spectral tilt, energy modulation,
               silence-gap ratio, overall gain
* content   -> a sequence of symbols, each a distinct spectro-temporal
               patch in the upper frequency bins

The pitch band is a narrow bump whose bin position follows a smooth
contour; that contour (in normalized [0, 1] frequency units) is stored
per utterance as ground truth, together with per-frame content labels.

Feature files are one-per-utterance binary containers:
magic ``EMEL`` (4 bytes), then format version, n_bins and n_frames as
little-endian uint32, then row-major float32 values. Pitch contours use
the same container with n_bins == 1.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from emovc.domains import (
    DomainCatalog,
    DomainPair,
    PairMask,
    build_catalog,
    fake_pair_mask,
    sample_seen_target,
    sample_virtual_target,
    save_catalog,
)

FEATURE_MAGIC = b"EMEL"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1
MIN_FRAMES = 8


@dataclass
class MelSpectrogram:
    """Real-valued (n_bins, n_frames) feature matrix."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError(f"expected 2-D features, got shape {v.shape}")
        if v.shape[1] < MIN_FRAMES:
            raise ValueError(f"need at least {MIN_FRAMES} frames, got {v.shape[1]}")
        if not np.isfinite(v).all():
            raise ValueError("features contain non-finite entries")
        self.values = v

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def write_feature_file(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("feature files hold 2-D matrices")
    header = struct.pack("<4sIII", FEATURE_MAGIC, FEATURE_VERSION, values.shape[0], values.shape[1])
    with open(path, "wb") as f:
        f.write(header)
        f.write(values.tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated header")
        magic, version, n_bins, n_frames = struct.unpack("<4sIII", header)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != n_bins * n_frames:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(n_bins, n_frames).astype(np.float32)


@dataclass
class SynthesisParams:
    """Knobs of the synthetic corpus generator."""

    n_bins: int = 48
    n_symbols: int = 12
    frames_min: int = 104
    frames_max: int = 136
    segment_min: int = 8
    segment_max: int = 14
    gap_min: int = 3
    gap_max: int = 8
    noise_sd: float = 0.02
    speaker_spread: float = 1.0
    emotion_spread: float = 1.0

    def validate(self) -> None:
        if self.n_bins < 16:
            raise ValueError("n_bins too small for the rendering layout")
        if not (2 <= self.n_symbols <= 24):
            raise ValueError("n_symbols must be in [2, 24]")
        if self.frames_min < MIN_FRAMES or self.frames_max < self.frames_min:
            raise ValueError("invalid frame-count range")
        if self.segment_min < 2 or self.segment_max < self.segment_min:
            raise ValueError("invalid segment-length range")
        if self.gap_min < 1 or self.gap_max < self.gap_min:
            raise ValueError("invalid gap-length range")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.speaker_spread <= 0 or self.emotion_spread <= 0:
            raise ValueError("zero-variance generator parameters: spreads must be > 0")


@dataclass
class SpeakerParams:
    envelope: np.ndarray  # (n_bins,) positive
    pitch_mean: float     # normalized [0, 1] frequency units
    pitch_sd: float


@dataclass
class EmotionParams:
    pitch_shift: float    # added to the speaker's pitch mean
    pitch_scale: float    # multiplies contour variation
    tilt: float           # spectral slope, low vs high bins
    mod_depth: float      # temporal energy modulation depth
    mod_rate: float       # modulation cycles per 96 frames
    gain: float
    silence_ratio: float  # expected fraction of silent frames


@dataclass
class UtteranceRecord:
    uid: str
    speaker: int
    emotion: int
    n_frames: int
    content_ids: list[int]
    split: str = "train"  # train | test


# Non-neutral emotions get evenly spaced attribute levels assigned through
# coprime-stride permutations, so any two emotions differ by at least one
# full level gap in every attribute, whatever the emotion count.
_ATTR_STRIDES = {
    "pitch_shift": 1,
    "pitch_scale": 2,
    "tilt": 3,
    "mod_depth": 5,
    "mod_rate": 7,
    "gain": 11,
    "silence_ratio": 13,
}


def _perm_level(i: int, key: str, m: int) -> int:
    k = _ATTR_STRIDES[key]
    if math.gcd(k, m) != 1:
        k = 1
    return ((i - 1) * k) % m


def _spaced(lo: float, hi: float, j: int, m: int) -> float:
    if m == 1:
        return 0.5 * (lo + hi)
    return lo + (hi - lo) * j / (m - 1)


def _signed_spaced(lo: float, hi: float, j: int, m: int, base_sign: float) -> float:
    # alternating sign with magnitudes stepped away from zero
    sign = base_sign * (1.0 if j % 2 == 0 else -1.0)
    n_levels = (m + 1) // 2
    mag = _spaced(lo, hi, j // 2, n_levels)
    return sign * mag


def make_emotion_params(n_emotions: int, spread: float) -> list[EmotionParams]:
    neutral = EmotionParams(
        pitch_shift=0.0, pitch_scale=1.0, tilt=0.0,
        mod_depth=0.03, mod_rate=3.0, gain=1.0, silence_ratio=0.15,
    )
    out = [neutral]
    m = n_emotions - 1
    for i in range(1, n_emotions):
        lvl = {key: _perm_level(i, key, m) for key in _ATTR_STRIDES}
        raw = EmotionParams(
            pitch_shift=_signed_spaced(0.025, 0.07, lvl["pitch_shift"], m, 1.0),
            pitch_scale=_spaced(0.5, 2.0, lvl["pitch_scale"], m),
            tilt=_signed_spaced(0.7, 1.5, lvl["tilt"], m, -1.0),
            mod_depth=_spaced(0.25, 0.55, lvl["mod_depth"], m),
            mod_rate=_spaced(2.0, 7.0, lvl["mod_rate"], m),
            gain=_spaced(0.85, 1.35, lvl["gain"], m),
            silence_ratio=_spaced(0.05, 0.33, lvl["silence_ratio"], m),
        )
        out.append(EmotionParams(
            pitch_shift=neutral.pitch_shift + spread * (raw.pitch_shift - neutral.pitch_shift),
            pitch_scale=neutral.pitch_scale + spread * (raw.pitch_scale - neutral.pitch_scale),
            tilt=neutral.tilt + spread * (raw.tilt - neutral.tilt),
            mod_depth=neutral.mod_depth + spread * (raw.mod_depth - neutral.mod_depth),
            mod_rate=raw.mod_rate,
            gain=neutral.gain + spread * (raw.gain - neutral.gain),
            silence_ratio=min(0.4, max(0.02, neutral.silence_ratio + spread * (raw.silence_ratio - neutral.silence_ratio))),
        ))
    return out


def make_speaker_params(n_speakers: int, params: SynthesisParams, seed_seq: np.random.SeedSequence) -> list[SpeakerParams]:
    children = seed_seq.spawn(n_speakers)
    out = []
    bins = np.arange(params.n_bins) / max(1, params.n_bins - 1)
    for s in range(n_speakers):
        rng = np.random.default_rng(children[s])
        curve = np.zeros(params.n_bins)
        for _ in range(3):
            freq = rng.uniform(1.0, 4.0)
            phase = rng.uniform(0, 2 * math.pi)
            amp = rng.uniform(0.4, 1.0)
            curve += amp * np.cos(2 * math.pi * freq * bins + phase)
        curve = curve / max(1e-6, np.abs(curve).max())
        envelope = np.exp(0.55 * params.speaker_spread * curve)
        # one strong speaker-specific resonance keeps speakers apart even
        # when the random ripple curves come out similar
        if n_speakers > 1:
            formant = params.n_bins * (0.38 + 0.54 * s / (n_speakers - 1))
        else:
            formant = params.n_bins * 0.65
        envelope = envelope * (1.0 + 0.9 * params.speaker_spread * _bump(np.arange(params.n_bins, dtype=np.float64), formant, 2.5))
        pitch_mean = 0.14 + 0.20 * (s + 0.5) / n_speakers
        pitch_sd = 0.035 + 0.015 * ((s * 0.6180339887498949) % 1.0)
        out.append(SpeakerParams(envelope=envelope.astype(np.float64),
                                 pitch_mean=float(pitch_mean), pitch_sd=float(pitch_sd)))
    return out


def _symbol_center(k: int, params: SynthesisParams) -> float:
    lo, hi = params.n_bins * 0.50, params.n_bins * 0.92
    return lo + (hi - lo) * k / max(1, params.n_symbols - 1)


def _symbol_drift(k: int) -> float:
    return float((k % 7) - 3)


def _symbol_tempenv(k: int, frac: np.ndarray) -> np.ndarray:
    kind = k % 4
    if kind == 0:
        return np.ones_like(frac)
    if kind == 1:
        return 0.55 + 0.9 * frac
    if kind == 2:
        return 1.45 - 0.9 * frac
    return 0.6 + 0.85 * np.sin(math.pi * frac)


def _bump(bins: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((bins - center) / width) ** 2)


def synthesize_utterance(
    speaker: SpeakerParams,
    emotion: EmotionParams,
    params: SynthesisParams,
    seed_seq: np.random.SeedSequence,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Render one utterance.

    Returns (features (n_bins, T), f0_contour (T,), frame_symbols (T,),
    content_ids). Content draws come from a dedicated substream so the
    same seed with a different emotion yields identical content_ids.
    """
    content_rng, prosody_rng, noise_rng = (np.random.default_rng(s) for s in seed_seq.spawn(3))

    n_frames_target = int(content_rng.integers(params.frames_min, params.frames_max + 1))
    segments: list[tuple[int, int]] = []  # (symbol, length)
    total_content = 0
    while total_content < n_frames_target:
        sym = int(content_rng.integers(params.n_symbols))
        length = int(content_rng.integers(params.segment_min, params.segment_max + 1))
        segments.append((sym, length))
        total_content += length
    content_ids = [sym for sym, _ in segments]

    # gap probability calibrated so the expected silent fraction matches
    # the emotion's silence_ratio given the mean segment/gap lengths
    mean_seg = 0.5 * (params.segment_min + params.segment_max)
    mean_gap = 0.5 * (params.gap_min + params.gap_max)
    ratio = emotion.silence_ratio
    p_gap = min(1.0, ratio * mean_seg / (mean_gap * max(1e-6, 1.0 - ratio)))

    frame_symbols: list[int] = []
    for sym, length in segments:
        frame_symbols.extend([sym] * length)
        if prosody_rng.random() < p_gap:
            gap = int(prosody_rng.integers(params.gap_min, params.gap_max + 1))
            frame_symbols.extend([-1] * gap)
    frame_symbols_arr = np.array(frame_symbols, dtype=np.int64)
    n_frames = len(frame_symbols_arr)

    # smooth AR(1) pitch walk; contour holds its value through silence
    a = 0.9
    walk = np.empty(n_frames)
    walk[0] = prosody_rng.normal()
    sigma = math.sqrt(1 - a * a)
    for t in range(1, n_frames):
        walk[t] = a * walk[t - 1] + sigma * prosody_rng.normal()
    f0 = speaker.pitch_mean + emotion.pitch_shift + emotion.pitch_scale * speaker.pitch_sd * walk
    f0 = np.clip(f0, 0.08, 0.42)
    voiced = frame_symbols_arr >= 0
    last = f0[np.argmax(voiced)] if voiced.any() else 0.2
    for t in range(n_frames):
        if voiced[t]:
            last = f0[t]
        else:
            f0[t] = last

    bins = np.arange(params.n_bins, dtype=np.float64)
    bin_frac = bins / max(1, params.n_bins - 1)
    tilt_curve = np.exp(emotion.tilt * (bin_frac - 0.5))
    phase = prosody_rng.uniform(0, 2 * math.pi)
    t_idx = np.arange(n_frames)
    energy = emotion.gain * (1.0 + emotion.mod_depth * np.sin(2 * math.pi * emotion.mod_rate * t_idx / 96.0 + phase))

    spec = np.zeros((params.n_bins, n_frames))
    seg_pos = np.zeros(n_frames)  # fractional position inside the segment
    start = 0
    for sym, length in segments:
        # segment frames are contiguous by construction; gaps follow them
        seg_pos[start:start + length] = (np.arange(length) + 0.5) / length
        start += length
        while start < n_frames and frame_symbols_arr[start] == -1:
            start += 1

    for t in range(n_frames):
        sym = frame_symbols_arr[t]
        if sym < 0:
            continue
        band = _bump(bins, f0[t] * params.n_bins, 1.3)
        frac = seg_pos[t]
        center = _symbol_center(sym, params) + _symbol_drift(sym) * (frac - 0.5)
        patch = _symbol_tempenv(sym, np.array(frac))[()] * _bump(bins, center, 1.7)
        spec[:, t] = speaker.envelope * tilt_curve * energy[t] * (band + 0.95 * patch)

    feats = np.log1p(5.0 * spec)
    feats += params.noise_sd * noise_rng.standard_normal(feats.shape)
    return feats.astype(np.float32), f0.astype(np.float32), frame_symbols_arr, content_ids


class Corpus:
    """In-memory corpus: records plus features, contours and frame labels."""

    def __init__(
        self,
        catalog: DomainCatalog,
        params: SynthesisParams,
        speaker_params: list[SpeakerParams],
        emotion_params: list[EmotionParams],
        records: list[UtteranceRecord],
        features: list[np.ndarray],
        f0_contours: list[np.ndarray],
        frame_symbols: list[np.ndarray],
        seed: int,
    ):
        self.catalog = catalog
        self.params = params
        self.speaker_params = speaker_params
        self.emotion_params = emotion_params
        self.records = records
        self.features = features
        self.f0_contours = f0_contours
        self.frame_symbols = frame_symbols
        self.seed = seed
        self.norm_mean = 0.0
        self.norm_std = 1.0
        self._recompute_norm_stats()

    def _recompute_norm_stats(self) -> None:
        flat = np.concatenate([f.ravel() for f in self.features])
        self.norm_mean = float(flat.mean())
        self.norm_std = float(flat.std())

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_bins(self) -> int:
        return self.params.n_bins

    def normalized(self, index: int) -> np.ndarray:
        return ((self.features[index] - self.norm_mean) / self.norm_std).astype(np.float32)

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(len(self.records)))
        return [i for i, r in enumerate(self.records) if r.split == split]

    def cell_indices(self, speaker: int, emotion: int, split: str | None = None) -> list[int]:
        return [
            i for i, r in enumerate(self.records)
            if r.speaker == speaker and r.emotion == emotion and (split is None or r.split == split)
        ]

    def emotion_indices(self, emotion: int, split: str = "train") -> list[int]:
        return [i for i, r in enumerate(self.records) if r.emotion == emotion and r.split == split]

    def speaker_indices(self, speaker: int, split: str = "train", emotion: int | None = None) -> list[int]:
        return [
            i for i, r in enumerate(self.records)
            if r.speaker == speaker and r.split == split and (emotion is None or r.emotion == emotion)
        ]

    # ------------------------------------------------------------- disk I/O

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "features").mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "catalog": {
                "speakers": list(self.catalog.speakers),
                "emotions": list(self.catalog.emotions),
                "seen_pairs": sorted(self.catalog.seen_pairs),
            },
            "synthesis": asdict(self.params),
            "speaker_params": [
                {"envelope": sp.envelope.tolist(), "pitch_mean": sp.pitch_mean, "pitch_sd": sp.pitch_sd}
                for sp in self.speaker_params
            ],
            "emotion_params": [asdict(ep) for ep in self.emotion_params],
            "normalization": {"mean": self.norm_mean, "std": self.norm_std},
            "utterances": [
                {
                    "uid": r.uid,
                    "speaker": r.speaker,
                    "emotion": r.emotion,
                    "n_frames": r.n_frames,
                    "content_ids": r.content_ids,
                    "split": r.split,
                    "frame_symbols": self.frame_symbols[i].tolist(),
                }
                for i, r in enumerate(self.records)
            ],
        }
        with open(out / "manifest.json", "w") as f:
            json.dump(manifest, f, sort_keys=True)
            f.write("\n")
        save_catalog(self.catalog, out / "catalog.json")
        for i, r in enumerate(self.records):
            write_feature_file(out / "features" / f"{r.uid}.mel", self.features[i])
            write_feature_file(out / "features" / f"{r.uid}.f0c", self.f0_contours[i][None, :])

    @classmethod
    def load(cls, in_dir) -> "Corpus":
        root = Path(in_dir)
        with open(root / "manifest.json") as f:
            manifest = json.load(f)
        if manifest.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version in {root}")
        catalog = build_catalog(
            manifest["catalog"]["speakers"],
            manifest["catalog"]["emotions"],
            [tuple(p) for p in manifest["catalog"]["seen_pairs"]],
        )
        params = SynthesisParams(**manifest["synthesis"])
        speaker_params = [
            SpeakerParams(envelope=np.array(d["envelope"]), pitch_mean=d["pitch_mean"], pitch_sd=d["pitch_sd"])
            for d in manifest["speaker_params"]
        ]
        emotion_params = [EmotionParams(**d) for d in manifest["emotion_params"]]
        records, features, contours, frame_syms = [], [], [], []
        for u in manifest["utterances"]:
            records.append(UtteranceRecord(
                uid=u["uid"], speaker=u["speaker"], emotion=u["emotion"],
                n_frames=u["n_frames"], content_ids=list(u["content_ids"]), split=u["split"],
            ))
            feats = read_feature_file(root / "features" / f"{u['uid']}.mel")
            MelSpectrogram(feats)  # enforce invariants on load
            features.append(feats)
            contours.append(read_feature_file(root / "features" / f"{u['uid']}.f0c")[0])
            frame_syms.append(np.array(u["frame_symbols"], dtype=np.int64))
        corpus = cls(catalog, params, speaker_params, emotion_params,
                     records, features, contours, frame_syms, seed=manifest["seed"])
        # keep the stats that were frozen at generation time
        corpus.norm_mean = manifest["normalization"]["mean"]
        corpus.norm_std = manifest["normalization"]["std"]
        return corpus


def generate_corpus(
    catalog: DomainCatalog,
    per_cell: int,
    params: SynthesisParams | None = None,
    seed: int = 0,
    split_ratio: float = 0.9,
) -> Corpus:
    """Synthesize per_cell utterances for every seen (speaker, emotion) cell."""
    params = params or SynthesisParams()
    params.validate()
    if per_cell < 2:
        raise ValueError("per_cell must be >= 2 so every cell can hold out a test utterance")

    root_seq = np.random.SeedSequence(seed)
    speaker_seq, utt_seq, split_seq = root_seq.spawn(3)
    speaker_params = make_speaker_params(catalog.n_speakers, params, speaker_seq)
    emotion_params = make_emotion_params(catalog.n_emotions, params.emotion_spread)

    records, features, contours, frame_syms = [], [], [], []
    cells = sorted(catalog.seen_pairs)
    utt_children = utt_seq.spawn(len(cells) * per_cell)
    uid = 0
    for ci, (s, e) in enumerate(cells):
        for k in range(per_cell):
            feats, f0, syms, content_ids = synthesize_utterance(
                speaker_params[s], emotion_params[e], params, utt_children[ci * per_cell + k]
            )
            records.append(UtteranceRecord(
                uid=f"utt_{uid:05d}", speaker=s, emotion=e,
                n_frames=feats.shape[1], content_ids=content_ids,
            ))
            features.append(feats)
            contours.append(f0)
            frame_syms.append(syms)
            uid += 1

    corpus = Corpus(catalog, params, speaker_params, emotion_params,
                    records, features, contours, frame_syms, seed=seed)
    split_corpus(corpus, ratio=split_ratio, seed=int(split_seq.generate_state(1)[0]))
    return corpus


def split_corpus(corpus: Corpus, ratio: float, seed: int) -> dict[str, list[int]]:
    """Assign train/test splits, stratified per seen cell."""
    if not (0.0 < ratio < 1.0):
        raise ValueError("split ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    assignment: dict[str, list[int]] = {"train": [], "test": []}
    for s, e in sorted(corpus.catalog.seen_pairs):
        idxs = corpus.cell_indices(s, e)
        if len(idxs) < 2:
            raise ValueError(f"cell ({s}, {e}) too small to hold out a test utterance")
        idxs = list(rng.permutation(idxs))
        n_test = int(round((1.0 - ratio) * len(idxs)))
        n_test = min(max(1, n_test), len(idxs) - 1)
        for i in idxs[:n_test]:
            corpus.records[i].split = "test"
            assignment["test"].append(int(i))
        for i in idxs[n_test:]:
            corpus.records[i].split = "train"
            assignment["train"].append(int(i))
    return assignment


# ------------------------------------------------------------------ batching


@dataclass
class SamplerPolicy:
    use_virtual_pairing: bool = True
    crop_len: int = 96


@dataclass
class Batch:
    """One training batch, all features normalized and cropped."""

    src: np.ndarray                 # (B, n_bins, L)
    src_speaker: np.ndarray         # (B,)
    src_emotion: np.ndarray
    trg_speaker: np.ndarray
    trg_emotion: np.ndarray
    ref_speaker_feats: np.ndarray   # style references for the target speaker
    ref_emotion_feats: np.ndarray   # style references for the target emotion
    ref_speaker_feats2: np.ndarray  # second draws, for diversification
    ref_emotion_feats2: np.ndarray
    ref_speaker_src: np.ndarray     # provenance (speaker of each R_sp)
    ref_emotion_src: np.ndarray     # provenance (speaker of each R_em)
    ref_emotion_kind: np.ndarray    # provenance (emotion of each R_em)
    src_f0: np.ndarray              # (B, L) ground-truth contour, z-scored per crop
    src_frame_symbols: np.ndarray   # (B, L) with -1 for silence
    mask: PairMask

    def __len__(self) -> int:
        return self.src.shape[0]

    def target_pairs(self) -> list[DomainPair]:
        return [DomainPair(int(s), int(e)) for s, e in zip(self.trg_speaker, self.trg_emotion)]


def _crop(values: np.ndarray, start: int, length: int, pad_value=0.0) -> np.ndarray:
    sl = values[..., start:start + length]
    if sl.shape[-1] == length:
        return sl
    pad = length - sl.shape[-1]
    widths = [(0, 0)] * (values.ndim - 1) + [(0, pad)]
    return np.pad(sl, widths, constant_values=pad_value)


def _zscore(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return (x - x.mean()) / (x.std() + eps)


def crop_example(corpus: Corpus, index: int, crop_len: int, rng: np.random.Generator):
    """Random crop of one utterance: (features, f0_target, frame_symbols)."""
    feats = corpus.normalized(index)
    total = feats.shape[1]
    start = int(rng.integers(0, max(1, total - crop_len + 1)))
    x = _crop(feats, start, crop_len)
    f0 = _zscore(_crop(corpus.f0_contours[index], start, crop_len).astype(np.float64)).astype(np.float32)
    syms = _crop(corpus.frame_symbols[index], start, crop_len, pad_value=-1)
    return x, f0, syms


def _pick_emotion_reference(corpus: Corpus, emotion: int, rng: np.random.Generator) -> int:
    pool = corpus.emotion_indices(emotion, split="train")
    if not pool:
        name = corpus.catalog.emotions[emotion]
        raise ValueError(f"no reference utterance exists for emotion {name!r}")
    return int(pool[rng.integers(len(pool))])


def _pick_speaker_reference(corpus: Corpus, speaker: int, rng: np.random.Generator) -> int:
    # prefer the target speaker's neutral data; fall back to any seen cell
    pool = corpus.speaker_indices(speaker, split="train", emotion=0)
    if not pool:
        pool = corpus.speaker_indices(speaker, split="train")
    if not pool:
        name = corpus.catalog.speakers[speaker]
        raise ValueError(f"no reference utterance exists for speaker {name!r}")
    return int(pool[rng.integers(len(pool))])


def make_batch(
    corpus: Corpus,
    batch_size: int,
    policy: SamplerPolicy,
    rng: np.random.Generator,
) -> Batch:
    """Sample a training batch with virtually paired targets and references."""
    train = corpus.indices("train")
    if not train:
        raise ValueError("train split is empty")
    L = policy.crop_len

    src, f0s, syms = [], [], []
    src_sp, src_em, trg_sp, trg_em = [], [], [], []
    ref_sp, ref_em, ref_sp2, ref_em2 = [], [], [], []
    ref_sp_src, ref_em_src, ref_em_kind = [], [], []
    pairs: list[DomainPair] = []

    for _ in range(batch_size):
        idx = int(train[rng.integers(len(train))])
        x, f0, sym = crop_example(corpus, idx, L, rng)
        rec = corpus.records[idx]
        if policy.use_virtual_pairing:
            target = sample_virtual_target(corpus.catalog, rng)
        else:
            target = sample_seen_target(corpus.catalog, rng)

        for sink_feats, sink_src, picker, arg in (
            (ref_sp, ref_sp_src, _pick_speaker_reference, target.speaker),
            (ref_sp2, None, _pick_speaker_reference, target.speaker),
        ):
            ridx = picker(corpus, arg, rng)
            rx, _, _ = crop_example(corpus, ridx, L, rng)
            sink_feats.append(rx)
            if sink_src is not None:
                sink_src.append(corpus.records[ridx].speaker)
        for sink_feats, track, picker, arg in (
            (ref_em, True, _pick_emotion_reference, target.emotion),
            (ref_em2, False, _pick_emotion_reference, target.emotion),
        ):
            ridx = picker(corpus, arg, rng)
            rx, _, _ = crop_example(corpus, ridx, L, rng)
            sink_feats.append(rx)
            if track:
                ref_em_src.append(corpus.records[ridx].speaker)
                ref_em_kind.append(corpus.records[ridx].emotion)

        src.append(x)
        f0s.append(f0)
        syms.append(sym)
        src_sp.append(rec.speaker)
        src_em.append(rec.emotion)
        trg_sp.append(target.speaker)
        trg_em.append(target.emotion)
        pairs.append(target)

    return Batch(
        src=np.stack(src),
        src_speaker=np.array(src_sp), src_emotion=np.array(src_em),
        trg_speaker=np.array(trg_sp), trg_emotion=np.array(trg_em),
        ref_speaker_feats=np.stack(ref_sp), ref_emotion_feats=np.stack(ref_em),
        ref_speaker_feats2=np.stack(ref_sp2), ref_emotion_feats2=np.stack(ref_em2),
        ref_speaker_src=np.array(ref_sp_src),
        ref_emotion_src=np.array(ref_em_src), ref_emotion_kind=np.array(ref_em_kind),
        src_f0=np.stack(f0s), src_frame_symbols=np.stack(syms),
        mask=fake_pair_mask(corpus.catalog, pairs),
    )


def augment_style_nuisances(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomize the emotion-style directions of normalized features.

    Adds per-sample gain, spectral-tilt and temporal-modulation offsets —
    the directions emotions move features along — so probes trained with
    this augmentation learn style-invariant content/pitch representations,
    the role recognizer features play for consistency losses.
    """
    b, n_bins, n_frames = x.shape
    gain = rng.uniform(-0.6, 0.6, size=(b, 1, 1))
    tilt = rng.uniform(-0.8, 0.8, size=(b, 1, 1))
    ramp = (np.arange(n_bins) / max(1, n_bins - 1) - 0.5).reshape(1, n_bins, 1)
    depth = rng.uniform(0.0, 0.5, size=(b, 1, 1))
    rate = rng.uniform(2.0, 7.0, size=(b, 1, 1))
    phase = rng.uniform(0.0, 2 * np.pi, size=(b, 1, 1))
    t = np.arange(n_frames).reshape(1, 1, n_frames)
    wobble = depth * np.sin(2 * np.pi * rate * t / 96.0 + phase)
    return (x + gain + tilt * ramp + wobble).astype(np.float32)


def labeled_batch(
    corpus: Corpus,
    batch_size: int,
    crop_len: int,
    rng: np.random.Generator,
    split: str = "train",
):
    """Supervised batch for probe/extractor training.

    Returns (features (B, n_bins, L), speaker labels, emotion labels,
    f0 targets (B, L), frame symbols (B, L)).
    """
    pool = corpus.indices(split)
    if not pool:
        raise ValueError(f"{split} split is empty")
    xs, sps, ems, f0s, syms = [], [], [], [], []
    for _ in range(batch_size):
        idx = int(pool[rng.integers(len(pool))])
        x, f0, sym = crop_example(corpus, idx, crop_len, rng)
        rec = corpus.records[idx]
        xs.append(x)
        sps.append(rec.speaker)
        ems.append(rec.emotion)
        f0s.append(f0)
        syms.append(sym)
    return np.stack(xs), np.array(sps), np.array(ems), np.stack(f0s), np.stack(syms)
