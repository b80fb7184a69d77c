import numpy as np
import pytest

from emovc.corpus import (
    Corpus,
    MelSpectrogram,
    SamplerPolicy,
    SynthesisParams,
    generate_corpus,
    labeled_batch,
    make_batch,
    read_feature_file,
    split_corpus,
    synthesize_utterance,
    write_feature_file,
)
from emovc.domains import build_catalog, is_seen, DomainPair


class TestFeatureFiles:
    def test_round_trip_exact(self, tmp_path, rng):
        values = rng.standard_normal((48, 30)).astype(np.float32)
        path = tmp_path / "x.mel"
        write_feature_file(path, values)
        back = read_feature_file(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mel"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(ValueError, match="bad magic"):
            read_feature_file(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "x.mel"
        write_feature_file(path, rng.standard_normal((4, 10)).astype(np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="size mismatch"):
            read_feature_file(path)


class TestMelSpectrogramInvariants:
    def test_rejects_nonfinite(self):
        values = np.zeros((8, 10), dtype=np.float32)
        values[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            MelSpectrogram(values)

    def test_rejects_too_few_frames(self):
        with pytest.raises(ValueError, match="at least"):
            MelSpectrogram(np.zeros((8, 4), dtype=np.float32))


class TestGeneration:
    def test_cell_enumeration(self, smoke_corpus):
        # 2 full speakers x 3 emotions + 1 neutral-only = 7 cells x 20
        assert len(smoke_corpus) == 140

    def test_determinism_bitwise(self, small_catalog, tmp_path):
        a = generate_corpus(small_catalog, per_cell=3, seed=99)
        b = generate_corpus(small_catalog, per_cell=3, seed=99)
        for fa, fb in zip(a.features, b.features):
            np.testing.assert_array_equal(fa, fb)
        a.save(tmp_path / "a")
        b.save(tmp_path / "b")
        for name in ("manifest.json", "catalog.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        ua = sorted((tmp_path / "a" / "features").iterdir())
        ub = sorted((tmp_path / "b" / "features").iterdir())
        assert [p.name for p in ua] == [p.name for p in ub]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(ua, ub))

    def test_factor_isolation(self, small_corpus):
        params = small_corpus.params
        seed = np.random.SeedSequence(1234)
        f_a, c_a, _, ids_a = synthesize_utterance(
            small_corpus.speaker_params[0], small_corpus.emotion_params[0], params,
            np.random.SeedSequence(1234))
        f_b, c_b, _, ids_b = synthesize_utterance(
            small_corpus.speaker_params[0], small_corpus.emotion_params[1], params,
            np.random.SeedSequence(1234))
        assert ids_a == ids_b
        assert abs(float(c_a.mean()) - float(c_b.mean())) > 0.005

    def test_rejects_small_per_cell(self, small_catalog):
        with pytest.raises(ValueError, match="per_cell"):
            generate_corpus(small_catalog, per_cell=1)

    def test_rejects_degenerate_params(self, small_catalog):
        with pytest.raises(ValueError, match="zero-variance"):
            generate_corpus(small_catalog, per_cell=2,
                            params=SynthesisParams(emotion_spread=0.0))
        with pytest.raises(ValueError, match="zero-variance"):
            generate_corpus(small_catalog, per_cell=2,
                            params=SynthesisParams(speaker_spread=0.0))

    def test_no_unseen_utterances(self, small_corpus):
        for rec in small_corpus.records:
            assert is_seen(small_corpus.catalog, DomainPair(rec.speaker, rec.emotion))

    def test_normalization_stats(self, smoke_corpus):
        flat = np.concatenate([
            ((f - smoke_corpus.norm_mean) / smoke_corpus.norm_std).ravel()
            for f in smoke_corpus.features
        ])
        assert abs(float(flat.mean())) <= 0.01
        assert abs(float(flat.std()) - 1.0) <= 0.02


class TestSplit:
    def test_nine_to_one(self, smoke_corpus):
        assert len(smoke_corpus.indices("train")) == 126
        assert len(smoke_corpus.indices("test")) == 14
        for s, e in smoke_corpus.catalog.seen_pairs:
            assert len(smoke_corpus.cell_indices(s, e, "train")) == 18
            assert len(smoke_corpus.cell_indices(s, e, "test")) == 2

    def test_half_split_on_two_utterance_cell(self, small_catalog):
        corpus = generate_corpus(small_catalog, per_cell=2, seed=1)
        split_corpus(corpus, ratio=0.5, seed=0)
        for s, e in corpus.catalog.seen_pairs:
            assert len(corpus.cell_indices(s, e, "train")) == 1
            assert len(corpus.cell_indices(s, e, "test")) == 1

    def test_same_seed_same_assignment(self, small_catalog):
        a = generate_corpus(small_catalog, per_cell=4, seed=3)
        b = generate_corpus(small_catalog, per_cell=4, seed=3)
        assert [r.split for r in a.records] == [r.split for r in b.records]

    def test_rejects_bad_ratio(self, small_corpus):
        with pytest.raises(ValueError, match="ratio"):
            split_corpus(small_corpus, ratio=1.5, seed=0)

    def test_cell_too_small(self, small_catalog):
        corpus = generate_corpus(small_catalog, per_cell=2, seed=1)
        # orphan one utterance of cell (0, 0) into a cell of size 1
        drop = corpus.cell_indices(0, 0)[0]
        corpus.records = [r for i, r in enumerate(corpus.records) if i != drop]
        corpus.features = [f for i, f in enumerate(corpus.features) if i != drop]
        corpus.f0_contours = [c for i, c in enumerate(corpus.f0_contours) if i != drop]
        corpus.frame_symbols = [s for i, s in enumerate(corpus.frame_symbols) if i != drop]
        with pytest.raises(ValueError, match="too small"):
            split_corpus(corpus, ratio=0.9, seed=0)


class TestRoundTrip:
    def test_save_load(self, small_corpus, tmp_path):
        small_corpus.save(tmp_path / "c")
        back = Corpus.load(tmp_path / "c")
        assert back.catalog == small_corpus.catalog
        assert back.norm_mean == small_corpus.norm_mean
        assert back.norm_std == small_corpus.norm_std
        assert len(back) == len(small_corpus)
        for i in range(len(back)):
            np.testing.assert_array_equal(back.features[i], small_corpus.features[i])
            np.testing.assert_array_equal(back.f0_contours[i], small_corpus.f0_contours[i])
            np.testing.assert_array_equal(back.frame_symbols[i], small_corpus.frame_symbols[i])
            assert back.records[i] == small_corpus.records[i]


class TestBatching:
    def test_shapes(self, small_corpus, rng):
        batch = make_batch(small_corpus, 10, SamplerPolicy(crop_len=96), rng)
        assert batch.src.shape == (10, 48, 96)
        assert batch.ref_speaker_feats.shape == (10, 48, 96)
        assert batch.ref_emotion_feats2.shape == (10, 48, 96)
        assert batch.src_f0.shape == (10, 96)
        assert batch.src_frame_symbols.shape == (10, 96)
        assert len(batch.mask) == 10

    def test_f0_targets_standardized(self, small_corpus, rng):
        batch = make_batch(small_corpus, 6, SamplerPolicy(crop_len=96), rng)
        means = batch.src_f0.mean(axis=1)
        stds = batch.src_f0.std(axis=1)
        assert np.abs(means).max() < 1e-4
        assert np.abs(stds - 1.0).max() < 0.05

    def test_single_seen_pair_targets(self, rng):
        cat = build_catalog(["solo"], ["neutral"], [(0, 0)])
        corpus = generate_corpus(cat, per_cell=4, seed=0)
        batch = make_batch(corpus, 6, SamplerPolicy(), rng)
        assert set(batch.trg_speaker.tolist()) == {0}
        assert set(batch.trg_emotion.tolist()) == {0}
        assert batch.mask.kept.all()

    def test_unseen_target_reference_resolution(self, small_corpus):
        rng = np.random.default_rng(11)
        seen_any_unseen = False
        for _ in range(20):
            batch = make_batch(small_corpus, 10, SamplerPolicy(), rng)
            for i in range(len(batch)):
                pair = DomainPair(int(batch.trg_speaker[i]), int(batch.trg_emotion[i]))
                # the emotion reference always carries the target emotion
                assert batch.ref_emotion_kind[i] == batch.trg_emotion[i]
                # the speaker reference always comes from the target speaker
                assert batch.ref_speaker_src[i] == batch.trg_speaker[i]
                if not is_seen(small_corpus.catalog, pair):
                    seen_any_unseen = True
                    assert batch.ref_emotion_src[i] != batch.trg_speaker[i]
        assert seen_any_unseen

    def test_mask_matches_membership(self, small_corpus, rng):
        batch = make_batch(small_corpus, 16, SamplerPolicy(), rng)
        expected = [
            is_seen(small_corpus.catalog, DomainPair(int(s), int(e)))
            for s, e in zip(batch.trg_speaker, batch.trg_emotion)
        ]
        assert batch.mask.kept.tolist() == expected

    def test_missing_emotion_reference(self):
        cat = build_catalog(["a", "b"], ["neutral", "ghost"], [(0, 0), (1, 0)])
        corpus = generate_corpus(cat, per_cell=3, seed=0)
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError, match="no reference utterance exists for emotion"):
            for _ in range(50):  # virtual targets hit 'ghost' quickly
                make_batch(corpus, 8, SamplerPolicy(), rng)

    def test_labeled_batch(self, small_corpus, rng):
        x, sp, em, f0, syms = labeled_batch(small_corpus, 5, 64, rng)
        assert x.shape == (5, 48, 64)
        assert sp.shape == em.shape == (5,)
        assert f0.shape == syms.shape == (5, 64)
        assert syms.max() < small_corpus.params.n_symbols
