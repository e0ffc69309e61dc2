"""Corpus generation: determinism, split structure, serialization, and a
learnability sanity check."""

import numpy as np
import pytest

from labelaware.langsim import (
    Corpus,
    CorpusConfig,
    LanguageSpec,
    build_corpus,
    load_corpus,
    make_language_spec,
    sample_utterance,
    save_corpus,
)
from labelaware.streams import derive_rng


CFG = CorpusConfig()


class TestLanguageSpec:
    def test_deterministic_for_same_id_and_seed(self):
        a = make_language_spec(3, 11, CFG)
        b = make_language_spec(3, 11, CFG)
        np.testing.assert_array_equal(a.transition_matrix, b.transition_matrix)
        np.testing.assert_array_equal(a.emission_means, b.emission_means)

    def test_distinct_ids_differ(self):
        a = make_language_spec(0, 11, CFG)
        b = make_language_spec(1, 11, CFG)
        assert np.any(a.emission_means != b.emission_means)

    def test_transition_rows_sum_to_one(self):
        spec = make_language_spec(5, 0, CFG)
        np.testing.assert_allclose(spec.transition_matrix.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(spec.transition_matrix > 0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            make_language_spec(0, 0, CorpusConfig(num_states=1))
        with pytest.raises(ValueError):
            make_language_spec(0, 0, CorpusConfig(num_features=0))


def _degenerate_spec(num_features=4, std=0.0):
    return LanguageSpec(
        language_id=9,
        num_states=1,
        transition_matrix=np.ones((1, 1)),
        emission_means=np.arange(num_features, dtype=np.float64)[None, :],
        emission_std=std,
    )


class TestSampleUtterance:
    def test_degenerate_chain_emits_the_mean(self):
        spec = _degenerate_spec()
        u = sample_utterance(spec, 10, derive_rng(0))
        np.testing.assert_array_equal(u.frames, np.tile(spec.emission_means[0], (10, 1)))
        assert u.label == 9

    def test_fixed_stream_repeats(self):
        spec = make_language_spec(2, 5, CFG)
        a = sample_utterance(spec, 50, derive_rng(42, 1))
        b = sample_utterance(spec, 50, derive_rng(42, 1))
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_law_of_large_numbers_one_state(self):
        std = 0.7
        spec = _degenerate_spec(num_features=6, std=std)
        u = sample_utterance(spec, 10_000, derive_rng(4))
        bound = 3 * std / np.sqrt(10_000)
        assert np.all(np.abs(u.frames.mean(axis=0) - spec.emission_means[0]) < bound)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            sample_utterance(_degenerate_spec(), 0, derive_rng(0))


class TestBuildCorpus:
    def test_default_split_arithmetic(self, default_corpus):
        c = default_corpus
        assert len(c.splits["pretrain"]) == 8 * 200
        assert len(c.overlap_set) == 8
        assert len(c.nonoverlap_set) == 4
        assert len(c.splits["finetune_train"]) == 12 * 50
        assert len(c.splits["dev"]) == 12 * 15
        assert len(c.splits["test"]) == 12 * 35

    def test_fully_labeled_by_default(self, default_corpus):
        assert all(u.label is not None for u in default_corpus.splits["pretrain"])

    def test_labeled_fraction_arithmetic(self):
        cfg = CorpusConfig(labeled_fraction=0.25)
        corpus = build_corpus(cfg, 1)
        labeled = [u for u in corpus.splits["pretrain"] if u.label is not None]
        assert len(labeled) == round(0.25 * 1600) == 400

    def test_label_strip_keeps_frames(self):
        full = build_corpus(CorpusConfig(), 3)
        partial = build_corpus(CorpusConfig(labeled_fraction=0.5), 3)
        for a, b in zip(full.splits["pretrain"], partial.splits["pretrain"]):
            assert a.utterance_id == b.utterance_id
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_pretrain_only_overlap_languages(self, default_corpus):
        langs = {u.label for u in default_corpus.splits["pretrain"]}
        assert langs == set(default_corpus.overlap_set)

    def test_overlap_partition(self, default_corpus):
        c = default_corpus
        assert not (c.overlap_set & c.nonoverlap_set)
        assert c.overlap_set | c.nonoverlap_set == set(c.language_ids())

    def test_utterance_ids_globally_unique(self, default_corpus):
        ids = [u.utterance_id for utts in default_corpus.splits.values() for u in utts]
        assert len(ids) == len(set(ids))

    def test_pure_function_of_config_and_seed(self):
        a = build_corpus(CorpusConfig(), 5)
        b = build_corpus(CorpusConfig(), 5)
        for split in a.splits:
            for ua, ub in zip(a.splits[split], b.splits[split]):
                np.testing.assert_array_equal(ua.frames, ub.frames)
                assert ua.label == ub.label

    def test_frame_lengths_within_range(self, default_corpus):
        cfg = default_corpus.config
        for u in default_corpus.splits["dev"]:
            assert cfg.min_frames <= u.num_frames <= cfg.max_frames

    def test_pretrain_exceeding_total_rejected(self):
        with pytest.raises(ValueError):
            build_corpus(CorpusConfig(num_languages=4, num_pretrain_languages=5), 0)

    def test_mean_frame_centroid_classifier_beats_chance(self, default_corpus):
        """Languages must be learnable from raw features."""
        c = default_corpus
        train = c.splits["finetune_train"]
        feats = {l: [] for l in c.language_ids()}
        for u in train:
            feats[u.label].append(u.frames.mean(axis=0))
        centroids = {l: np.mean(v, axis=0) for l, v in feats.items()}
        labels = sorted(centroids)
        cmat = np.stack([centroids[l] for l in labels])
        correct = 0
        dev = c.splits["dev"]
        for u in dev:
            d = np.linalg.norm(cmat - u.frames.mean(axis=0), axis=1)
            if labels[int(np.argmin(d))] == u.label:
                correct += 1
        assert correct / len(dev) > 1.0 / len(labels)


class TestSerialization:
    def test_round_trip(self, tmp_path, small_corpus):
        save_corpus(small_corpus, tmp_path / "c")
        loaded = load_corpus(tmp_path / "c")
        assert loaded.overlap_set == small_corpus.overlap_set
        assert loaded.nonoverlap_set == small_corpus.nonoverlap_set
        assert loaded.config == small_corpus.config
        for split in small_corpus.splits:
            for a, b in zip(small_corpus.splits[split], loaded.splits[split]):
                assert a.utterance_id == b.utterance_id
                assert a.label == b.label
                np.testing.assert_array_equal(a.frames, b.frames)

    def test_rerun_is_byte_identical(self, tmp_path, small_corpus):
        d1 = save_corpus(small_corpus, tmp_path / "a")
        d2 = save_corpus(small_corpus, tmp_path / "b")
        assert (d1 / "manifest.json").read_bytes() == (d2 / "manifest.json").read_bytes()
        for split in small_corpus.splits:
            for u in small_corpus.splits[split]:
                name = f"{split}/utt_{u.utterance_id:06d}.bin"
                assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_unlabeled_sentinel_round_trips(self, tmp_path):
        corpus = build_corpus(
            CorpusConfig(
                num_languages=3, num_pretrain_languages=2, num_features=4,
                min_frames=5, max_frames=8, pretrain_per_language=6,
                finetune_per_language=2, dev_per_language=1, test_per_language=1,
                labeled_fraction=0.5,
            ),
            2,
        )
        save_corpus(corpus, tmp_path / "c")
        loaded = load_corpus(tmp_path / "c")
        orig = [u.label for u in corpus.splits["pretrain"]]
        back = [u.label for u in loaded.splits["pretrain"]]
        assert orig == back
        assert None in back
