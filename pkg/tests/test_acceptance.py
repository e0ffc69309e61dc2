"""Acceptance suite.

Each test enforces one exit criterion at its stated tolerance and prints
one PASS line (pytest shows the print on failure together with the
assert). Criteria 1-4 train the full experiment matrix: 3 seeds per
cell, cells sharing their SSL-only first phase where configurations
agree. Set LABELAWARE_ACCEPT_CACHE to a directory to reuse finished
cells across pytest invocations (clear it after code changes).
"""

import os
import time

import numpy as np
import pytest

import labelaware.diffkit as dk
from conftest import rel_err
from labelaware import cli
from labelaware.encoder import EncoderConfig, MaskPlan, encode_graph, make_quantizer, quantize_targets
from labelaware.evalkit import eer, pooled_trials
from labelaware.experiments import corrupt_for_run, evaluate_model, run_cell
from labelaware.langsim import CorpusConfig, build_corpus
from labelaware.objectives import (
    EmbeddingBatch,
    angular_distance,
    contrastive_loss_graph,
    ge2e_graph,
    ge2e_loss,
    mlm_loss_graph,
    ssl_mlm_loss,
    triplet_hard_graph,
    triplet_loss_hard,
    triplet_loss_semi_hard,
    triplet_semi_hard_graph,
)
from labelaware.streams import derive_rng
from labelaware.trainer import (
    Checkpoint,
    FinetuneConfig,
    TrainConfig,
    finetune,
    init_checkpoint,
    pretrain,
)
from test_objectives import oracle_ge2e, oracle_hard, oracle_semi_hard, random_batch
from test_evalkit import oracle_eer

SEEDS = (0, 1, 2)
ENC = EncoderConfig(num_features=20, num_classes=12)


def report_line(criterion, detail):
    print(f"ACCEPTANCE criterion {criterion}: PASS - {detail}", flush=True)


class MatrixRunner:
    """Lazily computes pipeline cells with shared phase-1 checkpoints."""

    def __init__(self):
        self.corpus = build_corpus(CorpusConfig(), 0)
        self.phase1_cache = {}
        self.cells = {}
        self.cache_dir = os.environ.get("LABELAWARE_ACCEPT_CACHE") or None
        self.timings = {}

    def corrupted(self, fraction, seed):
        corpus, _ = corrupt_for_run(self.corpus, "missing", fraction, 0, seed)
        return corpus

    def cell(self, tag, ssl, supervised, weight, seed, missing=0.0):
        key = (tag, seed)
        if key in self.cells:
            return self.cells[key]
        tcfg = TrainConfig(
            ssl_loss=ssl, supervised_loss=supervised, label_weight=weight, seed=seed
        )
        if missing:
            corpus = self.corrupted(missing, seed)
            corpus_key = f"default0|missing:{missing}:{seed}"
        else:
            corpus, corpus_key = self.corpus, "default0"
        started = time.perf_counter()
        result = run_cell(
            corpus, corpus_key, tcfg, FinetuneConfig(seed=seed), ENC,
            phase1_cache=self.phase1_cache, cache_dir=self.cache_dir,
        )
        self.timings[key] = time.perf_counter() - started
        self.cells[key] = result
        return result


# tag -> (ssl, supervised, weight) plus optional missing fraction appended
CELL_DEFS = {
    "mlm/ssl_only": ("mlm", "none", 0.0),
    "mlm/lasr16": ("mlm", "hard", 16.0),
    "contrastive/ssl_only": ("contrastive", "none", 0.0),
    "contrastive/lasr16": ("contrastive", "hard", 16.0),
    "mlm/hard_only": ("none", "hard", 16.0),
    "mlm/lasr2": ("mlm", "hard", 2.0),
    "mlm/lasr32": ("mlm", "hard", 32.0),
    "mlm/lasr16_p25": ("mlm", "hard", 16.0, 0.25),
    "mlm/lasr16_p50": ("mlm", "hard", 16.0, 0.50),
    "mlm/lasr16_p75": ("mlm", "hard", 16.0, 0.75),
}


@pytest.fixture(scope="module")
def matrix():
    return MatrixRunner()


def _cell_args(tag):
    spec = CELL_DEFS[tag]
    ssl, supervised, weight = spec[:3]
    missing = spec[3] if len(spec) > 3 else 0.0
    return ssl, supervised, weight, missing


def get_mean(matrix, tag, subset="overall"):
    ssl, supervised, weight, missing = _cell_args(tag)
    accs = [
        getattr(
            matrix.cell(tag, ssl, supervised, weight, seed, missing).report, subset
        ).accuracy
        for seed in SEEDS
    ]
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# criterion 8: metric unit values (cheap; run first)
# ---------------------------------------------------------------------------


def test_criterion_8_metric_unit_values():
    mlm = ssl_mlm_loss(np.zeros((20, 64)), np.arange(20) % 64)
    assert abs(mlm - np.log(64)) <= 1e-9

    ortho = angular_distance(np.array([3.0, 0.0, 0.0]), np.array([0.0, 0.0, 7.0]))
    assert abs(ortho - 0.5) <= 1e-6

    corpus = build_corpus(CorpusConfig(), 0)
    n_models = 5
    accs = []
    for seed in range(n_models):
        model = init_checkpoint(ENC, seed=100 + seed)
        _, report = evaluate_model(model, corpus)
        accs.append(report.overall.accuracy)
    L = len(corpus.languages)
    n_trials = n_models * len(corpus.splits["test"])
    se = np.sqrt((1 / L) * (1 - 1 / L) / n_trials)
    assert abs(np.mean(accs) - 1 / L) <= 3 * se, accs
    report_line(8, f"uniform MLM=ln(64), orthogonal distance=0.5, "
                   f"random-model acc {np.mean(accs):.4f} vs chance {1/L:.4f}")


# ---------------------------------------------------------------------------
# criterion 5: gradient suite (< 1 minute)
# ---------------------------------------------------------------------------


def _loss_case_ok(emb, labels, gamma=0.2):
    from test_objectives import _mining_margins_ok
    return _mining_margins_ok(emb, labels)


def test_criterion_5_gradient_suite():
    started = time.perf_counter()
    rng_cases = 0
    seed = 0
    enc_cfg = EncoderConfig(
        num_features=3, context=1, hidden_dim=4, embed_dim=3, codebook_size=5,
        code_dim=2, num_classes=3,
    )
    while rng_cases < 100:
        emb, labels = random_batch(seed + 7000, size=6, num_labels=2, dim=3)
        seed += 1
        if not _loss_case_ok(emb, labels):
            continue
        rng_cases += 1
        case_rng = np.random.default_rng(seed)
        logits = case_rng.normal(size=(4, 5))
        targets = case_rng.integers(5, size=4)
        ctx = case_rng.normal(size=(5, 3))
        lat = case_rng.normal(size=(5, 3))
        frames = case_rng.normal(size=(5, 3))
        plan = MaskPlan(positions=(1, 3), span_length=2, mask_rate=0.3)
        from labelaware.encoder import init_params
        params = init_params(enc_cfg, seed)

        graphs = {
            "semi_hard": (
                {"h": emb},
                lambda n: triplet_semi_hard_graph(n["h"], labels, 0.2, derive_rng(1, seed))[0],
            ),
            "hard": ({"h": emb}, lambda n: triplet_hard_graph(n["h"], labels, 0.2)[0]),
            "ge2e": ({"h": emb}, lambda n: ge2e_graph(n["h"], labels)[0]),
            "mlm": ({"x": logits}, lambda n: mlm_loss_graph(n["x"], targets)),
            "contrastive": (
                {"c": ctx, "z": lat},
                lambda n: contrastive_loss_graph(
                    n["c"], n["z"], np.zeros(5, dtype=int), 3, 0.2, derive_rng(2, seed)
                )[0],
            ),
            "combined": (
                {"h": emb, "x": logits},
                lambda n: dk.add(
                    mlm_loss_graph(n["x"], targets),
                    dk.scale(triplet_hard_graph(n["h"], labels, 0.2)[0], 16.0),
                ),
            ),
            "encoder": (
                dict(params.blocks),
                lambda n: dk.reduce_sum(
                    dk.mul(
                        encode_graph(n, enc_cfg, n["enc_w1"].tape, [frames], [plan])[0],
                        np.linspace(-1, 1, 15).reshape(5, 3),
                    )
                ),
            ),
        }
        for name, (inputs, graph) in graphs.items():
            wrt = list(inputs)
            _, grads = dk.evaluate_with_gradients(graph, inputs, wrt)
            fd = dk.finite_difference_gradient(graph, inputs, wrt, eps=1e-5)
            for k in wrt:
                err = rel_err(grads[k], fd[k])
                assert err < 1e-4, f"{name}/{k} case {rng_cases}: rel err {err}"
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"
    report_line(5, f"100 cases x 7 graphs vs central differences in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 6: oracle suites
# ---------------------------------------------------------------------------


def test_criterion_6_oracle_suites():
    for seed in range(50):
        emb, labels = random_batch(seed + 4000, size=24, num_labels=6)
        batch = EmbeddingBatch(emb, labels)
        hard, _ = triplet_loss_hard(batch, 0.2)
        want, _ = oracle_hard(emb, labels, 0.2)
        assert abs(hard - want) <= 1e-9
        semi, _ = triplet_loss_semi_hard(batch, 0.2, derive_rng(41, seed))
        want, _ = oracle_semi_hard(emb, labels, 0.2, derive_rng(41, seed))
        assert abs(semi - want) <= 1e-9
        g, _ = ge2e_loss(batch)
        want, _ = oracle_ge2e(emb, labels)
        assert abs(g - want) <= 1e-9

    rng = np.random.default_rng(4242)
    from labelaware.evalkit import ScoredTrial
    trials = [
        ScoredTrial(i, int(rng.integers(5)), rng.dirichlet(np.ones(5) * 0.8))
        for i in range(60)
    ]
    tar, non = pooled_trials(trials)
    assert abs(eer(trials) - oracle_eer(tar.tolist(), non.tolist())) <= 1e-9

    qcfg = EncoderConfig(num_features=12, codebook_size=32, code_dim=6, num_classes=3)
    q = make_quantizer(qcfg, 3)
    frames = rng.normal(size=(80, 12))
    codes = quantize_targets(q, frames)
    for i in range(80):
        p = q.projection @ frames[i]
        norm = np.sqrt((p * p).sum())
        if norm > 0:
            p = p / norm
        d2 = ((p[None, :] - q.codebook) ** 2).sum(axis=1)
        assert codes[i] == int(np.argmin(d2))
    report_line(6, "mining losses (50 batches), EER sweep, and quantizer match oracles")


# ---------------------------------------------------------------------------
# criterion 7: reduction and determinism
# ---------------------------------------------------------------------------


TINY_INI = """
[corpus]
master_seed = 4
num_languages = 5
num_pretrain_languages = 3
num_features = 6
min_frames = 12
max_frames = 18
pretrain_per_language = 12
finetune_per_language = 6
dev_per_language = 2
test_per_language = 4
mean_scale = 0.5

[encoder]
hidden_dim = 10
embed_dim = 6
codebook_size = 8
code_dim = 3
context = 1

[pretrain]
seed = 1
total_steps = 10
ssl_only_steps = 6
warmup_steps = 2
batch_languages = 3
batch_per_language = 2

[finetune]
steps = 12
seed = 1
"""


def test_criterion_7_reduction_and_determinism(small_corpus, tmp_path):
    ecfg = EncoderConfig(
        num_features=8, context=1, hidden_dim=12, embed_dim=8, codebook_size=16,
        code_dim=4, num_classes=6,
    )
    kw = dict(total_steps=14, ssl_only_steps=8, warmup_steps=3,
              batch_languages=3, batch_per_language=2, seed=0)
    lasr0 = pretrain(small_corpus, TrainConfig(label_weight=0.0, **kw), encoder_config=ecfg)
    base = pretrain(
        small_corpus, TrainConfig(supervised_loss="none", label_weight=0.0, **kw),
        encoder_config=ecfg,
    )
    for k in lasr0.params.blocks:
        assert np.array_equal(lasr0.params.blocks[k], base.params.blocks[k]), k

    half = pretrain(
        small_corpus, TrainConfig(label_weight=16.0, total_steps=7, ssl_only_steps=8,
                                  warmup_steps=3, batch_languages=3,
                                  batch_per_language=2, seed=0),
        encoder_config=ecfg,
    )
    ckpt_path = tmp_path / "half.ckpt"
    half.save(ckpt_path)
    resumed = pretrain(
        small_corpus, TrainConfig(label_weight=16.0, **kw),
        resume=Checkpoint.load(ckpt_path),
    )
    full = pretrain(small_corpus, TrainConfig(label_weight=16.0, **kw), encoder_config=ecfg)
    for k in full.params.blocks:
        assert np.array_equal(full.params.blocks[k], resumed.params.blocks[k]), k
    for k in full.adam.m:
        assert np.array_equal(full.adam.m[k], resumed.adam.m[k]), k

    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    corpus_dir = tmp_path / "corpus"
    assert cli.main(["gen-data", "--config", str(ini), "--out", str(corpus_dir)]) == 0
    outputs = {}
    for run in ("r1", "r2"):
        base_dir = tmp_path / run
        assert cli.main(["pretrain", "--config", str(ini), "--corpus", str(corpus_dir),
                         "--out", str(base_dir / "pre")]) == 0
        assert cli.main(["finetune", "--config", str(ini), "--corpus", str(corpus_dir),
                         "--checkpoint", str(base_dir / "pre" / "final.ckpt"),
                         "--out", str(base_dir / "ft")]) == 0
        assert cli.main(["evaluate", "--config", str(ini), "--corpus", str(corpus_dir),
                         "--model", str(base_dir / "ft" / "model.ckpt"),
                         "--out", str(base_dir / "eval")]) == 0
        outputs[run] = {
            rel: (base_dir / rel).read_bytes()
            for rel in ("pre/final.ckpt", "pre/pretrain_log.csv", "ft/model.ckpt",
                        "eval/trials.csv", "eval/metrics.csv")
        }
    assert outputs["r1"] == outputs["r2"]
    report_line(7, "weight-0 == SSL baseline, resume == uninterrupted, "
                   "repeated pipeline byte-identical")


# ---------------------------------------------------------------------------
# criteria 1-4: the directional experiment matrix
# ---------------------------------------------------------------------------


def test_criterion_1_label_aware_beats_ssl_baseline(matrix):
    gaps = {}
    for variant in ("mlm", "contrastive"):
        base_all = get_mean(matrix, f"{variant}/ssl_only", "overall")
        base_no = get_mean(matrix, f"{variant}/ssl_only", "nonoverlap")
        lasr_all = get_mean(matrix, f"{variant}/lasr16", "overall")
        lasr_no = get_mean(matrix, f"{variant}/lasr16", "nonoverlap")
        gaps[variant] = (lasr_all - base_all, lasr_no - base_no)
        assert lasr_all - base_all >= 0.02, (
            f"{variant}: overall {lasr_all:.4f} vs {base_all:.4f}"
        )
        assert lasr_no - base_no >= 0.02, (
            f"{variant}: nonoverlap {lasr_no:.4f} vs {base_no:.4f}"
        )
    slowest = max(matrix.timings.values()) if matrix.timings else 0.0
    assert slowest < 600.0, f"slowest cell took {slowest:.0f}s"
    report_line(1, "gaps (overall, nonoverlap) " + ", ".join(
        f"{v}: +{a*100:.1f}/+{b*100:.1f} pts" for v, (a, b) in gaps.items()
    ) + f"; slowest cell {slowest:.0f}s")


def test_criterion_2_loss_ordering(matrix):
    combined = get_mean(matrix, "mlm/lasr16")
    ssl_only = get_mean(matrix, "mlm/ssl_only")
    hard_only = get_mean(matrix, "mlm/hard_only")
    assert combined >= ssl_only
    assert combined >= hard_only
    report_line(2, f"ssl+hard {combined:.4f} >= ssl_only {ssl_only:.4f} "
                   f"and >= hard_only {hard_only:.4f}")


def test_criterion_3_weight_sweep_shape(matrix):
    acc2 = get_mean(matrix, "mlm/lasr2")
    acc16 = get_mean(matrix, "mlm/lasr16")
    acc32 = get_mean(matrix, "mlm/lasr32")
    assert acc16 >= acc2, f"16: {acc16:.4f} < 2: {acc2:.4f}"
    assert acc32 <= acc16, f"32: {acc32:.4f} > 16: {acc16:.4f}"
    report_line(3, f"accuracy at weight 2/16/32: {acc2:.4f} / {acc16:.4f} / {acc32:.4f}")


def test_criterion_4_missing_label_robustness(matrix):
    baseline = get_mean(matrix, "mlm/ssl_only")
    grid = {
        0.0: get_mean(matrix, "mlm/lasr16"),
        0.25: get_mean(matrix, "mlm/lasr16_p25"),
        0.5: get_mean(matrix, "mlm/lasr16_p50"),
        0.75: get_mean(matrix, "mlm/lasr16_p75"),
    }
    assert grid[0.75] > baseline, f"p=0.75 {grid[0.75]:.4f} vs baseline {baseline:.4f}"
    fractions = sorted(grid)
    inversions = [
        grid[b] - grid[a]
        for a, b in zip(fractions, fractions[1:])
        if grid[b] > grid[a]
    ]
    assert len(inversions) <= 1, f"grid {grid}"
    assert all(v <= 0.01 for v in inversions), f"grid {grid}"
    report_line(4, "accuracy by missing fraction " + ", ".join(
        f"p={p}: {grid[p]:.4f}" for p in fractions) + f"; baseline {baseline:.4f}")
