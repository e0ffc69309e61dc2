"""Batch construction for metric learning, plus label-corruption utilities.

Batches follow a languages-per-batch x utterances-per-language scheme so
every labeled anchor is guaranteed same-label positives and cross-label
negatives, with optional unlabeled slots appended for the
self-supervised objective. Label corruption (missing or noisy) models
imperfect metadata in the pre-training pool; it never touches frames or
the fine-tuning splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .langsim import Corpus, Utterance


@dataclass(frozen=True)
class BatchSpec:
    """P languages x K labeled utterances, plus unlabeled slots."""

    languages_per_batch: int = 8   # P
    per_language: int = 4          # K
    unlabeled_slots: int = 0

    def __post_init__(self):
        if self.languages_per_batch < 1 or self.per_language < 2:
            raise ValueError(
                "batch needs >= 1 language and >= 2 utterances per language, got "
                f"P={self.languages_per_batch}, K={self.per_language}"
            )
        if self.unlabeled_slots < 0:
            raise ValueError(f"unlabeled_slots must be >= 0, got {self.unlabeled_slots}")

    @property
    def batch_size(self) -> int:
        return self.languages_per_batch * self.per_language + self.unlabeled_slots


def default_batch_spec(corpus: Corpus, languages_per_batch: int = 8,
                       per_language: int = 4) -> BatchSpec:
    """Unlabeled slots proportional to the corpus unlabeled fraction."""
    pretrain = corpus.splits["pretrain"]
    unlabeled = sum(1 for u in pretrain if u.label is None)
    frac = unlabeled / len(pretrain) if pretrain else 0.0
    slots = round(frac * languages_per_batch * per_language)
    return BatchSpec(languages_per_batch, per_language, slots)


def sample_batch(
    corpus: Corpus, spec: BatchSpec, rng: np.random.Generator
) -> list[Utterance]:
    """P languages without replacement, K labeled utterances each, then
    unlabeled fills; the assembled batch is shuffled."""
    pretrain = corpus.splits["pretrain"]
    by_lang: dict[int, list[Utterance]] = {}
    unlabeled_pool = []
    for u in pretrain:
        if u.label is None:
            unlabeled_pool.append(u)
        else:
            by_lang.setdefault(u.label, []).append(u)
    eligible = sorted(l for l, us in by_lang.items() if len(us) >= spec.per_language)
    if len(eligible) < spec.languages_per_batch:
        raise ValueError(
            f"batch needs {spec.languages_per_batch} languages with >= "
            f"{spec.per_language} labeled utterances, corpus has {len(eligible)} "
            f"(labeled languages: {len(by_lang)})"
        )
    langs = rng.choice(eligible, size=spec.languages_per_batch, replace=False)
    batch: list[Utterance] = []
    for lang in langs:
        pool = by_lang[int(lang)]
        picks = rng.choice(len(pool), size=spec.per_language, replace=False)
        batch.extend(pool[i] for i in picks)
    n_slots = min(spec.unlabeled_slots, len(unlabeled_pool))
    if n_slots:
        picks = rng.choice(len(unlabeled_pool), size=n_slots, replace=False)
        batch.extend(unlabeled_pool[i] for i in picks)
    order = rng.permutation(len(batch))
    return [batch[i] for i in order]


# ---------------------------------------------------------------------------
# label corruption
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorruptionPlan:
    """Which pretrain utterances lose or swap their label."""

    mode: str                       # "missing" | "noisy"
    fraction: float
    affected: tuple[int, ...]       # utterance ids, sorted
    replacements: dict[int, int]    # utterance id -> new label (noisy mode)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "fraction": self.fraction,
                "affected": list(self.affected),
                "replacements": {str(k): v for k, v in self.replacements.items()},
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CorruptionPlan":
        obj = json.loads(text)
        return cls(
            mode=obj["mode"],
            fraction=obj["fraction"],
            affected=tuple(obj["affected"]),
            replacements={int(k): v for k, v in obj["replacements"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def apply_corruption(corpus: Corpus, plan: CorruptionPlan) -> Corpus:
    """New corpus with the plan applied to the pretrain split only.

    Frames are shared, labels are rewritten; applying the same plan to a
    fresh copy of the original corpus reproduces the result exactly.
    """
    affected = set(plan.affected)
    new_pretrain = []
    for u in corpus.splits["pretrain"]:
        if u.utterance_id in affected:
            if plan.mode == "missing":
                new_pretrain.append(replace(u, label=None))
            else:
                new_pretrain.append(replace(u, label=plan.replacements[u.utterance_id]))
        else:
            new_pretrain.append(u)
    splits = dict(corpus.splits)
    splits["pretrain"] = tuple(new_pretrain)
    return replace(corpus, splits=splits)


def corrupt_labels(
    corpus: Corpus, mode: str, p: float, rng: np.random.Generator
) -> tuple[Corpus, CorruptionPlan]:
    """Strip (missing) or uniformly re-draw (noisy) a fraction p of the
    labeled pretrain utterances. Noisy replacements exclude the true label
    and come from the pretrain label set."""
    if mode not in ("missing", "noisy"):
        raise ValueError(f"mode must be 'missing' or 'noisy', got {mode!r}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {p}")
    labeled = [u for u in corpus.splits["pretrain"] if u.label is not None]
    n_affected = round(p * len(labeled))
    if n_affected == 0:
        plan = CorruptionPlan(mode=mode, fraction=p, affected=(), replacements={})
        return corpus, plan
    labeled_ids = np.array(sorted(u.utterance_id for u in labeled))
    affected = np.sort(rng.choice(labeled_ids, size=n_affected, replace=False))
    replacements: dict[int, int] = {}
    if mode == "noisy":
        label_of = {u.utterance_id: u.label for u in labeled}
        pretrain_labels = sorted({u.label for u in labeled})
        if len(pretrain_labels) < 2:
            raise ValueError("noisy corruption needs >= 2 pretrain labels to swap between")
        for uid in affected:
            options = [l for l in pretrain_labels if l != label_of[int(uid)]]
            replacements[int(uid)] = int(rng.choice(options))
    plan = CorruptionPlan(
        mode=mode, fraction=p, affected=tuple(int(i) for i in affected),
        replacements=replacements,
    )
    return apply_corruption(corpus, plan), plan
