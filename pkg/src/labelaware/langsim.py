"""Synthetic multilingual corpus generation.

Each "language" is a hidden-Markov process over feature frames: a
row-stochastic transition matrix over a few hidden states, each state
emitting Gaussian frames around its own mean vector. Languages differ by
their independently drawn emission means, so utterances are separable but
noisy, which is enough to exercise pre-training and evaluation protocols
at desk scale.

The corpus is split into pretrain / finetune_train / dev / test. Only the
first ``num_pretrain_languages`` appear in pretrain; the remaining
languages exist only in the fine-tuning splits, giving an overlap /
non-overlap partition of the label set for evaluation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .streams import (
    DOMAIN_LABEL_MASK,
    DOMAIN_LANGUAGE,
    DOMAIN_UTTERANCE,
    derive_rng,
)

SPLITS = ("pretrain", "finetune_train", "dev", "test")

_HEADER = struct.Struct("<qqqq")  # frames, features, label-or--1, utterance_id


@dataclass(frozen=True)
class LanguageSpec:
    """One language's hidden-Markov generative process."""

    language_id: int
    num_states: int
    transition_matrix: np.ndarray  # (num_states, num_states), rows sum to 1
    emission_means: np.ndarray     # (num_states, num_features)
    emission_std: float


@dataclass(frozen=True)
class Utterance:
    frames: np.ndarray  # (T, F) float64
    label: int | None
    utterance_id: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class CorpusConfig:
    num_languages: int = 12
    num_pretrain_languages: int = 8
    num_features: int = 20
    num_states: int = 5
    emission_std: float = 1.0
    # Distance between language processes relative to frame noise. 0.2 puts
    # pipelines in the 0.75-0.90 accuracy band; much larger values make the
    # languages separable at ~100% by any encoder and the comparisons vacuous.
    mean_scale: float = 0.2
    min_frames: int = 80
    max_frames: int = 120
    pretrain_per_language: int = 200
    finetune_per_language: int = 50
    dev_per_language: int = 15
    test_per_language: int = 35
    labeled_fraction: float = 1.0


@dataclass(frozen=True)
class Corpus:
    languages: tuple[LanguageSpec, ...]
    splits: dict[str, tuple[Utterance, ...]]
    overlap_set: frozenset[int]
    nonoverlap_set: frozenset[int]
    config: CorpusConfig = field(default_factory=CorpusConfig)
    master_seed: int = 0

    @property
    def num_features(self) -> int:
        return self.languages[0].emission_means.shape[1]

    def language_ids(self) -> list[int]:
        return [spec.language_id for spec in self.languages]

    def labeled_pretrain(self) -> list[Utterance]:
        return [u for u in self.splits["pretrain"] if u.label is not None]

    def unlabeled_pretrain(self) -> list[Utterance]:
        return [u for u in self.splits["pretrain"] if u.label is None]


def make_language_spec(language_id: int, seed: int, config: CorpusConfig) -> LanguageSpec:
    """Deterministic language process for (language_id, seed)."""
    if config.num_states < 2:
        raise ValueError(f"num_states must be >= 2, got {config.num_states}")
    if config.num_features < 1:
        raise ValueError(f"num_features must be >= 1, got {config.num_features}")
    rng = derive_rng(seed, DOMAIN_LANGUAGE, language_id)
    raw = rng.uniform(0.05, 1.0, size=(config.num_states, config.num_states))
    transition = raw / raw.sum(axis=1, keepdims=True)
    means = config.mean_scale * rng.normal(size=(config.num_states, config.num_features))
    return LanguageSpec(
        language_id=language_id,
        num_states=config.num_states,
        transition_matrix=transition,
        emission_means=means,
        emission_std=config.emission_std,
    )


def sample_utterance(
    spec: LanguageSpec,
    num_frames: int,
    rng: np.random.Generator,
    utterance_id: int = 0,
) -> Utterance:
    """Sample a labelled utterance: uniform initial state, then the chain."""
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    states = np.empty(num_frames, dtype=np.intp)
    states[0] = rng.integers(spec.num_states)
    if num_frames > 1:
        cum = np.cumsum(spec.transition_matrix, axis=1)
        draws = rng.random(num_frames - 1)
        for t in range(1, num_frames):
            states[t] = np.searchsorted(cum[states[t - 1]], draws[t - 1], side="right")
    noise = rng.normal(size=(num_frames, spec.emission_means.shape[1]))
    frames = spec.emission_means[states] + spec.emission_std * noise
    return Utterance(frames=frames, label=spec.language_id, utterance_id=utterance_id)


def _split_counts(config: CorpusConfig) -> dict[str, int]:
    return {
        "pretrain": config.pretrain_per_language,
        "finetune_train": config.finetune_per_language,
        "dev": config.dev_per_language,
        "test": config.test_per_language,
    }


def build_corpus(config: CorpusConfig, master_seed: int) -> Corpus:
    """Pure function of (config, master_seed).

    Pretrain utterances come only from the first ``num_pretrain_languages``
    languages; the other splits cover all languages. Utterance ids are
    globally unique and each utterance has its own derived RNG stream, so
    the data does not depend on generation order.
    """
    if config.num_pretrain_languages > config.num_languages:
        raise ValueError(
            f"num_pretrain_languages {config.num_pretrain_languages} exceeds "
            f"num_languages {config.num_languages}"
        )
    if not 0.0 <= config.labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in [0, 1], got {config.labeled_fraction}")
    languages = tuple(
        make_language_spec(i, master_seed, config) for i in range(config.num_languages)
    )
    counts = _split_counts(config)
    splits: dict[str, tuple[Utterance, ...]] = {}
    uid = 0
    for split in SPLITS:
        lang_range = (
            config.num_pretrain_languages if split == "pretrain" else config.num_languages
        )
        utts = []
        for lang in range(lang_range):
            for _ in range(counts[split]):
                rng = derive_rng(master_seed, DOMAIN_UTTERANCE, uid)
                num_frames = int(rng.integers(config.min_frames, config.max_frames + 1))
                utts.append(sample_utterance(languages[lang], num_frames, rng, uid))
                uid += 1
        splits[split] = tuple(utts)

    pretrain = list(splits["pretrain"])
    labeled_count = round(config.labeled_fraction * len(pretrain))
    if labeled_count < len(pretrain):
        rng = derive_rng(master_seed, DOMAIN_LABEL_MASK)
        stripped = rng.choice(len(pretrain), size=len(pretrain) - labeled_count, replace=False)
        for i in np.sort(stripped):
            pretrain[i] = replace(pretrain[i], label=None)
        splits["pretrain"] = tuple(pretrain)

    overlap = frozenset(range(config.num_pretrain_languages))
    nonoverlap = frozenset(range(config.num_pretrain_languages, config.num_languages))
    return Corpus(
        languages=languages,
        splits=splits,
        overlap_set=overlap,
        nonoverlap_set=nonoverlap,
        config=config,
        master_seed=master_seed,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _utterance_bytes(u: Utterance) -> bytes:
    t, f = u.frames.shape
    label = -1 if u.label is None else int(u.label)
    header = _HEADER.pack(t, f, label, u.utterance_id)
    body = np.ascontiguousarray(u.frames, dtype="<f8").tobytes()
    return header + body


def _utterance_from_bytes(raw: bytes) -> Utterance:
    t, f, label, uid = _HEADER.unpack_from(raw)
    frames = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=t * f)
    frames = frames.reshape(t, f).astype(np.float64)
    return Utterance(frames=frames, label=None if label == -1 else label, utterance_id=uid)


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write one directory per split plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "master_seed": corpus.master_seed,
        "config": {
            k: getattr(corpus.config, k) for k in CorpusConfig.__dataclass_fields__
        },
        "overlap_set": sorted(corpus.overlap_set),
        "nonoverlap_set": sorted(corpus.nonoverlap_set),
        "languages": [
            {
                "language_id": spec.language_id,
                "num_states": spec.num_states,
                "emission_std": spec.emission_std,
                "transition_matrix": spec.transition_matrix.tolist(),
                "emission_means": spec.emission_means.tolist(),
            }
            for spec in corpus.languages
        ],
        "splits": {
            split: [u.utterance_id for u in utts] for split, utts in corpus.splits.items()
        },
    }
    for split, utts in corpus.splits.items():
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for u in utts:
            (split_dir / f"utt_{u.utterance_id:06d}.bin").write_bytes(_utterance_bytes(u))
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return out


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    config = CorpusConfig(**manifest["config"])
    languages = tuple(
        LanguageSpec(
            language_id=lang["language_id"],
            num_states=lang["num_states"],
            transition_matrix=np.asarray(lang["transition_matrix"], dtype=np.float64),
            emission_means=np.asarray(lang["emission_means"], dtype=np.float64),
            emission_std=lang["emission_std"],
        )
        for lang in manifest["languages"]
    )
    splits = {}
    for split, ids in manifest["splits"].items():
        utts = []
        for uid in ids:
            raw = (root / split / f"utt_{uid:06d}.bin").read_bytes()
            utts.append(_utterance_from_bytes(raw))
        splits[split] = tuple(utts)
    return Corpus(
        languages=languages,
        splits=splits,
        overlap_set=frozenset(manifest["overlap_set"]),
        nonoverlap_set=frozenset(manifest["nonoverlap_set"]),
        config=config,
        master_seed=manifest["master_seed"],
    )
