"""Experiment pipelines: pretrain -> finetune -> evaluate, plus sweeps.

A pipeline cell is fully determined by (corpus descriptor, train config,
finetune config, encoder config). Cells that share their self-supervised
first phase (same corpus, seed, and SSL settings) reuse one phase-1
checkpoint: the training loop is resumable bit-exactly, so a resumed run
equals an uninterrupted one. An optional on-disk cell cache short-cuts
repeated evaluations of identical cells; clear it after code changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

from . import mining
from . import trainer as tr
from .config import ExperimentConfig
from .encoder import EncoderConfig
from .evalkit import MetricsReport, ScoredTrial, SubsetMetrics, split_report
from .langsim import Corpus, build_corpus
from .streams import DOMAIN_CORRUPTION, derive_rng

SUBSETS = ("overall", "overlap", "nonoverlap")
METRICS = ("accuracy", "macro_f1", "eer")

LOSS_VARIANTS = ("ssl_only", "hard_only", "ssl+semi_hard", "ssl+ge2e", "ssl+hard")


@dataclass
class CellResult:
    report: MetricsReport
    trials: list[ScoredTrial] | None = None
    model: tr.Checkpoint | None = None


def corpus_from_config(cfg: ExperimentConfig) -> Corpus:
    return build_corpus(cfg.corpus_config(), cfg.master_seed())


def corruption_descriptor(mode: str, fraction: float, seed: int) -> str:
    return f"{mode}:{fraction!r}:{seed}"


def corrupt_for_run(
    corpus: Corpus, mode: str, fraction: float, corruption_seed: int, run_seed: int
) -> tuple[Corpus, mining.CorruptionPlan | None]:
    """Apply label corruption with a realization keyed by the run seed."""
    if mode == "none" or fraction == 0.0:
        return corpus, None
    mode_idx = ("missing", "noisy").index(mode)
    rng = derive_rng(
        corruption_seed, DOMAIN_CORRUPTION, mode_idx, round(fraction * 10000), run_seed
    )
    return mining.corrupt_labels(corpus, mode, fraction, rng)


def describe_corpus(cfg: ExperimentConfig, corruption: str = "none:0.0:0") -> str:
    c = cfg.values["corpus"]
    fields = ",".join(f"{k}={c[k]!r}" for k in sorted(c))
    return f"corpus({fields})|corr({corruption})"


# ---------------------------------------------------------------------------
# phase-1 sharing
# ---------------------------------------------------------------------------


def _phase1_config(tcfg: tr.TrainConfig) -> tr.TrainConfig:
    """Normalize away every field that cannot influence the SSL-only phase."""
    return replace(
        tcfg,
        total_steps=tcfg.ssl_only_steps,
        supervised_loss="none",
        label_weight=0.0,
        margin=0.2,
        ge2e_variant="literal",
        checkpoint_every=0,
    )


def pretrain_with_shared_phase1(
    corpus: Corpus,
    corpus_key: str,
    tcfg: tr.TrainConfig,
    ecfg: EncoderConfig,
    phase1_cache: dict | None = None,
    log_path=None,
) -> tr.Checkpoint:
    """Pretrain, reusing a cached SSL-only prefix when one applies."""
    sharable = (
        phase1_cache is not None
        and tcfg.ssl_loss != "none"
        and 0 < tcfg.ssl_only_steps <= tcfg.total_steps
    )
    if not sharable:
        return tr.pretrain(corpus, tcfg, encoder_config=ecfg, log_path=log_path)
    p1cfg = _phase1_config(tcfg)
    key = (corpus_key, p1cfg, ecfg)
    phase1 = phase1_cache.get(key)
    if phase1 is None:
        phase1 = tr.pretrain(corpus, p1cfg, encoder_config=ecfg)
        phase1_cache[key] = phase1
    return tr.pretrain(corpus, tcfg, resume=phase1, log_path=log_path)


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


def evaluate_model(model: tr.Checkpoint, corpus: Corpus, split: str = "test"):
    utts = corpus.splits[split]
    scores = tr.classify(model, utts)
    trials = [
        ScoredTrial(utterance_id=u.utterance_id, true_label=u.label, scores=s)
        for u, s in zip(utts, scores)
    ]
    report = split_report(trials, corpus.overlap_set, corpus.nonoverlap_set)
    return trials, report


def _cell_key(corpus_key: str, tcfg, ftcfg, ecfg) -> str:
    blob = f"{corpus_key}|{tcfg!r}|{ftcfg!r}|{ecfg!r}"
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def _report_to_json(report: MetricsReport) -> dict:
    return {
        "rows": report.rows(),
        "per_class_f1": {str(k): v for k, v in report.per_class_f1.items()},
    }


def _report_from_json(obj: dict) -> MetricsReport:
    subs = {}
    for row in obj["rows"]:
        subs[row["subset"]] = SubsetMetrics(
            name=row["subset"], num_classes=row["num_classes"],
            num_trials=row["num_trials"], accuracy=row["accuracy"],
            macro_f1=row["macro_f1"], eer=row["eer"],
        )
    return MetricsReport(
        overall=subs["overall"], overlap=subs["overlap"], nonoverlap=subs["nonoverlap"],
        per_class_f1={int(k): v for k, v in obj["per_class_f1"].items()},
    )


def run_cell(
    corpus: Corpus,
    corpus_key: str,
    tcfg: tr.TrainConfig,
    ftcfg: tr.FinetuneConfig,
    ecfg: EncoderConfig,
    phase1_cache: dict | None = None,
    cache_dir: str | Path | None = None,
    keep_model: bool = False,
) -> CellResult:
    """One pipeline cell: pretrain, finetune, evaluate on the test split."""
    cache_file = None
    if cache_dir is not None:
        cache_file = Path(cache_dir) / f"{_cell_key(corpus_key, tcfg, ftcfg, ecfg)}.json"
        if cache_file.exists():
            return CellResult(report=_report_from_json(json.loads(cache_file.read_text())))
    ckpt = pretrain_with_shared_phase1(corpus, corpus_key, tcfg, ecfg, phase1_cache)
    model = tr.finetune(ckpt, corpus, ftcfg)
    trials, report = evaluate_model(model, corpus)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(_report_to_json(report), sort_keys=True))
    return CellResult(report=report, trials=trials, model=model if keep_model else None)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def loss_variant_config(tcfg: tr.TrainConfig, variant: str) -> tr.TrainConfig:
    if variant == "ssl_only":
        return replace(tcfg, supervised_loss="none", label_weight=0.0)
    if variant == "hard_only":
        return replace(tcfg, ssl_loss="none", supervised_loss="hard")
    if variant == "ssl+semi_hard":
        return replace(tcfg, supervised_loss="semi_hard")
    if variant == "ssl+ge2e":
        return replace(tcfg, supervised_loss="ge2e")
    if variant == "ssl+hard":
        return replace(tcfg, supervised_loss="hard")
    raise ValueError(f"unknown loss variant {variant!r} (known: {LOSS_VARIANTS})")


def report_columns() -> list[str]:
    cols = []
    for sub in SUBSETS:
        cols.append(f"{sub}_classes")
        cols.append(f"{sub}_trials")
        for m in METRICS:
            cols.append(f"{sub}_{m}")
    return cols


def report_cells(report: MetricsReport) -> dict[str, object]:
    out = {}
    for sub_name, sub in (("overall", report.overall), ("overlap", report.overlap),
                          ("nonoverlap", report.nonoverlap)):
        out[f"{sub_name}_classes"] = sub.num_classes
        out[f"{sub_name}_trials"] = sub.num_trials
        for m in METRICS:
            out[f"{sub_name}_{m}"] = getattr(sub, m)
    return out


def sweep_rows(
    cfg: ExperimentConfig,
    axis: str,
    corpus: Corpus | None = None,
    phase1_cache: dict | None = None,
    cache_dir=None,
) -> list[dict]:
    """One row per (axis value, seed), plus a mean row per value.

    The lambda axis varies the supervised weight; the noise axis varies
    (corruption mode, fraction); the loss axis varies the objective
    combination. Training and fine-tuning seeds advance together.
    """
    if corpus is None:
        corpus = corpus_from_config(cfg)
    ecfg = cfg.encoder_config()
    seeds = cfg["sweep"]["seeds"]
    phase1_cache = {} if phase1_cache is None else phase1_cache
    base_key = describe_corpus(cfg)

    if axis == "lambda":
        values = [("lambda", v) for v in cfg["sweep"]["lambda_values"]]
    elif axis == "noise":
        values = [
            ("noise", (mode, frac))
            for mode in cfg["sweep"]["noise_modes"]
            for frac in cfg["sweep"]["noise_fractions"]
        ]
    elif axis == "loss":
        values = [("loss", v) for v in cfg["sweep"]["loss_variants"]]
    else:
        raise ValueError(f"unknown sweep axis {axis!r} (known: lambda, noise, loss)")

    rows: list[dict] = []
    for _, value in values:
        per_seed = []
        for seed in seeds:
            tcfg = cfg.train_config(seed=seed)
            ftcfg = cfg.finetune_config(seed=seed)
            cell_corpus, corpus_key = corpus, base_key
            if axis == "lambda":
                tcfg = replace(tcfg, label_weight=float(value))
                label = repr(float(value))
            elif axis == "noise":
                mode, frac = value
                cell_corpus, _ = corrupt_for_run(
                    corpus, mode, frac, cfg["corruption"]["seed"], seed
                )
                corr = corruption_descriptor(mode, frac, seed)
                corpus_key = describe_corpus(cfg, corr)
                label = f"{mode}:{frac!r}"
            else:
                tcfg = loss_variant_config(tcfg, str(value))
                label = str(value)
            result = run_cell(
                cell_corpus, corpus_key, tcfg, ftcfg, ecfg,
                phase1_cache=phase1_cache, cache_dir=cache_dir,
            )
            row = {"axis": axis, "value": label, "seed": seed}
            row.update(report_cells(result.report))
            rows.append(row)
            per_seed.append(row)
        mean_row = {"axis": axis, "value": per_seed[0]["value"], "seed": "mean"}
        for col in report_columns():
            vals = [r[col] for r in per_seed if r[col] is not None]
            if col.endswith("_classes") or col.endswith("_trials"):
                mean_row[col] = per_seed[0][col]
            else:
                mean_row[col] = sum(vals) / len(vals) if vals else None
        rows.append(mean_row)
    return rows
