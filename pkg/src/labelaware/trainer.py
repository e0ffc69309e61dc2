"""Optimization loop: Adam, warmup + inverse-sqrt schedule, pre-training
with the combined objective, and supervised fine-tuning.

Pre-training runs in two phases: the first ``ssl_only_steps`` optimize the
self-supervised loss alone, the remainder add the weighted supervised
embedding loss on a separate unmasked forward pass. Every random draw is
keyed by (seed, domain, step), so trajectories are bit-reproducible,
resumable from checkpoints, and identical to the pure self-supervised
baseline whenever the supervised term is disabled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffkit as dk
from . import encoder as enc
from . import mining, objectives
from .langsim import Corpus, Utterance
from .objectives import UNLABELED, LossBundle, MiningCounts
from .streams import (
    DOMAIN_BATCH,
    DOMAIN_FINETUNE_BATCH,
    DOMAIN_HEAD_INIT,
    DOMAIN_LOSS,
    DOMAIN_MASK,
    derive_rng,
)

SUPERVISED_CHOICES = ("none", "semi_hard", "hard", "ge2e")
SSL_CHOICES = ("contrastive", "mlm", "none")

LOG_COLUMNS = (
    "step", "lr", "ssl_loss", "supervised_loss", "total",
    "anchors_used", "anchors_skipped",
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 3000
    ssl_only_steps: int = 2000      # first phase; remaining steps add supervision
    warmup_steps: int = 300
    peak_lr: float = 3e-3
    label_weight: float = 16.0      # lambda in the combined objective
    supervised_loss: str = "hard"   # none | semi_hard | hard | ge2e
    ssl_loss: str = "mlm"           # contrastive | mlm | none
    seed: int = 0
    checkpoint_every: int = 0       # 0 = final checkpoint only
    margin: float = 0.2
    distractors: int = 5
    temperature: float = 0.1
    mask_rate: float = 0.15
    span_length: int = 3
    batch_languages: int = 8
    batch_per_language: int = 4
    ge2e_variant: str = "literal"
    clip_norm: float = 5.0
    quantizer_seed: int = 777
    supervised_pass: str = "clean"  # clean | masked: which encode feeds pooling
    # Ramp the supervised weight linearly over the first N steps of the
    # labeled phase (0 disables); softens the objective switch.
    weight_ramp_steps: int = 0

    def __post_init__(self):
        if self.supervised_pass not in ("clean", "masked"):
            raise ValueError("supervised_pass must be 'clean' or 'masked'")
        if self.weight_ramp_steps < 0:
            raise ValueError("weight_ramp_steps must be >= 0")
        if self.supervised_loss not in SUPERVISED_CHOICES:
            raise ValueError(f"supervised_loss must be one of {SUPERVISED_CHOICES}")
        if self.ssl_loss not in SSL_CHOICES:
            raise ValueError(f"ssl_loss must be one of {SSL_CHOICES}")
        if self.ssl_loss == "none" and self.supervised_loss == "none":
            raise ValueError("at least one of ssl_loss / supervised_loss must be active")
        if self.ssl_loss == "none" and self.label_weight <= 0:
            raise ValueError("supervised-only training needs label_weight > 0")
        if not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ValueError("warmup_steps must be < total_steps")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.label_weight < 0:
            raise ValueError("label_weight must be >= 0")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter blocks."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: enc.EncoderParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.blocks.items()},
            v={k: np.zeros_like(p) for k, p in params.blocks.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )


def init_checkpoint(
    ecfg: enc.EncoderConfig, seed: int, quantizer_seed: int = 0
) -> Checkpoint:
    """Freshly initialized, untrained model."""
    params = enc.init_params(ecfg, seed)
    return Checkpoint(
        params=params, adam=AdamState.for_params(params), step=0,
        quantizer_seed=quantizer_seed,
    )


def lr_schedule(step: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup to peak_lr, then inverse-sqrt decay; continuous at the
    boundary."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup_steps < 1:
        return float(peak_lr / np.sqrt(step))
    return float(peak_lr * min(step / warmup_steps, np.sqrt(warmup_steps / step)))


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, in place on params and state."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        if np.isnan(g).any():
            raise TrainingError(f"NaN gradient in block {name!r} at step {t}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != param {params[name].shape}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Global-norm clipping across all blocks."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: enc.EncoderParams
    adam: AdamState
    step: int
    quantizer_seed: int
    history: list[LossBundle] = field(default_factory=list)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            params=self.params.copy(), adam=self.adam.copy(), step=self.step,
            quantizer_seed=self.quantizer_seed, history=list(self.history),
        )

    def save(self, path: str | Path) -> None:
        extra = {"opt.step": np.array([float(self.step)])}
        for k, v in self.adam.m.items():
            extra[f"opt.m.{k}"] = v
        for k, v in self.adam.v.items():
            extra[f"opt.v.{k}"] = v
        enc.save_checkpoint(path, self.params, self.quantizer_seed, extra)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        params, qseed, extra = enc.load_checkpoint(path)
        adam = AdamState.for_params(params)
        step = int(extra.get("opt.step", np.zeros(1))[0])
        for k in params.blocks:
            if f"opt.m.{k}" in extra:
                adam.m[k] = extra[f"opt.m.{k}"]
                adam.v[k] = extra[f"opt.v.{k}"]
        adam.step = step
        return cls(params=params, adam=adam, step=step, quantizer_seed=qseed)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


def _masked_positions(segments, plans) -> tuple[np.ndarray, np.ndarray]:
    """Global row indices of masked frames plus their utterance index."""
    rows, owner = [], []
    for i, ((start, _), plan) in enumerate(zip(segments, plans)):
        for p in plan.positions:
            rows.append(start + p)
            owner.append(i)
    return np.asarray(rows, dtype=np.intp), np.asarray(owner, dtype=np.intp)


def _supervised_graph(cfg: TrainConfig, h: dk.Node, labels, loss_rng):
    if cfg.supervised_loss == "semi_hard":
        return objectives.triplet_semi_hard_graph(h, labels, cfg.margin, loss_rng)
    if cfg.supervised_loss == "hard":
        return objectives.triplet_hard_graph(h, labels, cfg.margin)
    if cfg.supervised_loss == "ge2e":
        return objectives.ge2e_graph(h, labels, cfg.ge2e_variant)
    raise ValueError(f"no supervised graph for {cfg.supervised_loss!r}")


class _StepGraph:
    """Builds the per-step loss graph; records bundle ingredients."""

    def __init__(self, cfg: TrainConfig, ecfg: enc.EncoderConfig,
                 quantizer: enc.RandomQuantizer | None, code_cache: dict):
        self.cfg = cfg
        self.ecfg = ecfg
        self.quantizer = quantizer
        self.code_cache = code_cache

    def targets_for(self, utt: Utterance) -> np.ndarray:
        codes = self.code_cache.get(utt.utterance_id)
        if codes is None:
            codes = enc.quantize_targets(self.quantizer, utt.frames)
            self.code_cache[utt.utterance_id] = codes
        return codes

    def build(self, tape: dk.GradTape, batch: Sequence[Utterance],
              plans, use_supervised: bool, loss_rng,
              weight: float | None = None) -> tuple[dk.Node, LossBundle]:
        cfg = self.cfg
        if weight is None:
            weight = cfg.label_weight
        nodes = self.param_nodes
        frames_list = [u.frames for u in batch]
        ssl_node = None
        sup_node = None
        counts = MiningCounts()
        n_masked = 0
        clean_z = clean_segments = None
        masked_z = segments = None

        sup_on_masked = cfg.supervised_pass == "masked" and cfg.ssl_loss != "none"
        need_clean = (use_supervised and not sup_on_masked) or cfg.ssl_loss == "contrastive"
        if need_clean:
            clean_z, clean_segments = enc.encode_graph(nodes, self.ecfg, tape, frames_list)

        if cfg.ssl_loss != "none":
            masked_z, segments = enc.encode_graph(nodes, self.ecfg, tape, frames_list, plans)
            rows, owner = _masked_positions(segments, plans)
            n_masked = rows.size
            z_at_mask = dk.gather_rows(masked_z, rows)
            if cfg.ssl_loss == "mlm":
                logits = dk.add(
                    dk.matmul(z_at_mask, nodes["mlm_w"]),
                    dk.reshape(nodes["mlm_b"], (1, self.ecfg.codebook_size)),
                )
                targets = np.concatenate(
                    [self.targets_for(u)[list(p.positions)] for u, p in zip(batch, plans)]
                )
                ssl_node = objectives.mlm_loss_graph(logits, targets)
            else:
                context = dk.matmul(z_at_mask, nodes["ctr_w"])
                latents = dk.gather_rows(clean_z, rows)
                ssl_node, _, _ = objectives.contrastive_loss_graph(
                    context, latents, owner, cfg.distractors, cfg.temperature, loss_rng,
                )

        if use_supervised:
            if sup_on_masked:
                h = enc.pool_graph(masked_z, segments)
            else:
                h = enc.pool_graph(clean_z, clean_segments)
            labels = np.array(
                [UNLABELED if u.label is None else u.label for u in batch], dtype=np.int64
            )
            sup_node, counts = _supervised_graph(cfg, h, labels, loss_rng)

        if ssl_node is not None and sup_node is not None:
            total = dk.add(ssl_node, dk.scale(sup_node, weight))
        elif ssl_node is not None:
            total = ssl_node
        else:
            total = dk.scale(sup_node, weight)

        bundle = objectives.combined_loss(
            ssl_loss=float(ssl_node.value) if ssl_node is not None else 0.0,
            supervised_loss=float(sup_node.value) if sup_node is not None else 0.0,
            weight=weight,
            counts=counts,
            masked_positions=n_masked,
        )
        return total, bundle


def _run_graph_step(tape_builder, params: enc.EncoderParams, wrt):
    """Evaluate a step graph and return (grads, bundle)."""
    tape = dk.GradTape()
    nodes = {k: tape.input(v) for k, v in params.blocks.items()}
    total, bundle = tape_builder(tape, nodes)
    adjoint = tape.backward(total)
    grads = {}
    for name in wrt:
        g = adjoint.get(nodes[name].idx)
        grads[name] = np.zeros_like(params.blocks[name]) if g is None else g
    return grads, bundle


def pretrain(
    corpus: Corpus,
    config: TrainConfig,
    encoder_config: enc.EncoderConfig | None = None,
    resume: Checkpoint | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> Checkpoint:
    """Run the pre-training loop and return the final checkpoint.

    Per step: sample a structured batch, compute the self-supervised loss
    on masked encodes of all utterances, optionally the supervised loss on
    pooled clean encodes of the labeled ones, combine, and take one
    clipped Adam step. With ``resume`` the loop continues from
    ``resume.step + 1`` and reproduces an uninterrupted run bit-exactly.
    """
    cfg = config
    if resume is not None:
        ecfg = resume.params.config
        ckpt = resume.copy()
        start_step = ckpt.step
    else:
        ecfg = encoder_config or enc.EncoderConfig(
            num_features=corpus.num_features, num_classes=len(corpus.languages)
        )
        params0 = enc.init_params(ecfg, cfg.seed)
        ckpt = Checkpoint(
            params=params0,
            adam=AdamState.for_params(params0),
            step=0,
            quantizer_seed=cfg.quantizer_seed,
        )
        start_step = 0
    params = ckpt.params
    quantizer = (
        enc.make_quantizer(ecfg, ckpt.quantizer_seed) if cfg.ssl_loss == "mlm" else None
    )
    batch_spec = mining.default_batch_spec(
        corpus, cfg.batch_languages, cfg.batch_per_language
    )
    graph = _StepGraph(cfg, ecfg, quantizer, code_cache={})
    wrt = list(params.blocks)
    log_file = None
    writer = None
    if log_path is not None:
        fresh = start_step == 0 or not Path(log_path).exists()
        log_file = open(log_path, "a" if not fresh else "w", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(LOG_COLUMNS)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    try:
        for step in range(start_step + 1, cfg.total_steps + 1):
            batch_rng = derive_rng(cfg.seed, DOMAIN_BATCH, step)
            mask_rng = derive_rng(cfg.seed, DOMAIN_MASK, step)
            loss_rng = derive_rng(cfg.seed, DOMAIN_LOSS, step)
            try:
                batch = mining.sample_batch(corpus, batch_spec, batch_rng)
                plans = [
                    enc.plan_mask(u.num_frames, cfg.mask_rate, cfg.span_length, mask_rng)
                    for u in batch
                ]
                in_label_phase = cfg.ssl_loss == "none" or step > cfg.ssl_only_steps
                eff_weight = cfg.label_weight
                if in_label_phase and cfg.weight_ramp_steps and cfg.ssl_loss != "none":
                    into_phase = step - cfg.ssl_only_steps
                    eff_weight *= min(1.0, into_phase / cfg.weight_ramp_steps)
                use_supervised = (
                    in_label_phase
                    and cfg.supervised_loss != "none"
                    and eff_weight > 0
                )

                def build(tape, nodes, batch=batch, plans=plans, use_sup=use_supervised,
                          rng=loss_rng, w=eff_weight):
                    graph.param_nodes = nodes
                    return graph.build(tape, batch, plans, use_sup, rng, weight=w)

                grads, bundle = _run_graph_step(build, params, wrt)
            except (ValueError, dk.DiffError) as e:
                raise TrainingError(f"pre-training step {step}: {e}") from e
            grads = clip_gradients(grads, cfg.clip_norm)
            lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr)
            adam_step(params.blocks, grads, ckpt.adam, lr)
            ckpt.step = step
            ckpt.history.append(bundle)
            if writer:
                writer.writerow([
                    step, repr(lr), repr(bundle.ssl_loss), repr(bundle.supervised_loss),
                    repr(bundle.total), bundle.anchors_used, bundle.anchors_skipped,
                ])
            if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                ckpt.save(ckpt_dir / f"step_{step:06d}.ckpt")
        if ckpt_dir:
            ckpt.save(ckpt_dir / "final.ckpt")
    finally:
        if log_file:
            log_file.close()
    return ckpt


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 1000
    mode: str = "full"        # full | head_only
    batch_size: int = 64
    peak_lr: float = 3e-4     # gentle: adapts the encoder without erasing the init
    warmup_steps: int = 100
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.mode not in ("head_only", "full"):
            raise ValueError(f"mode must be head_only or full, got {self.mode!r}")


def finetune(
    checkpoint: Checkpoint,
    corpus: Corpus,
    config: FinetuneConfig,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Train the classifier head (optionally the whole encoder) with
    softmax cross-entropy on pooled embeddings of the finetune split.

    The head is freshly initialized from the fine-tune seed, so zero steps
    returns the checkpoint with a new head. head_only freezes the encoder,
    which lets the pooled embeddings be computed once up front.
    """
    cfg = config
    model = checkpoint.copy()
    ecfg = model.params.config
    utts = list(corpus.splits["finetune_train"])
    labels = np.array([u.label for u in utts], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= ecfg.num_classes:
        raise ValueError(
            f"fine-tune label outside [0, {ecfg.num_classes}): "
            f"range {labels.min()}..{labels.max()}"
        )
    head_rng = derive_rng(cfg.seed, DOMAIN_HEAD_INIT)
    model.params.blocks["cls_w"] = head_rng.normal(
        size=(ecfg.embed_dim, ecfg.num_classes)
    ) / np.sqrt(ecfg.embed_dim)
    model.params.blocks["cls_b"] = np.zeros(ecfg.num_classes)
    adam = AdamState.for_params(model.params)
    params = model.params
    wrt = (
        ["cls_w", "cls_b"]
        if cfg.mode == "head_only"
        else ["cls_w", "cls_b", "enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w3", "enc_b3"]
    )
    features = enc.encode_and_pool(params, utts) if cfg.mode == "head_only" else None

    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "lr", "loss"])
    try:
        for step in range(1, cfg.steps + 1):
            rng = derive_rng(cfg.seed, DOMAIN_FINETUNE_BATCH, step)
            idx = rng.choice(len(utts), size=min(cfg.batch_size, len(utts)), replace=False)
            tape = dk.GradTape()
            nodes = {k: tape.input(v) for k, v in params.blocks.items()}
            if cfg.mode == "head_only":
                h = tape.constant(features[idx])
            else:
                z, segments = enc.encode_graph(
                    nodes, ecfg, tape, [utts[i].frames for i in idx]
                )
                h = enc.pool_graph(z, segments)
            logits = dk.add(
                dk.matmul(h, nodes["cls_w"]),
                dk.reshape(nodes["cls_b"], (1, ecfg.num_classes)),
            )
            loss = dk.reduce_mean(dk.softmax_cross_entropy(logits, labels[idx]))
            adjoint = tape.backward(loss)
            grads = {}
            for name in wrt:
                g = adjoint.get(nodes[name].idx)
                grads[name] = np.zeros_like(params.blocks[name]) if g is None else g
            grads = clip_gradients(grads, cfg.clip_norm)
            lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr)
            adam_step(params.blocks, grads, adam, lr)
            if writer:
                writer.writerow([step, repr(lr), repr(float(loss.value))])
    finally:
        if log_file:
            log_file.close()
    model.adam = adam
    model.step = cfg.steps
    return model


def classify(
    model: Checkpoint, utterances: Sequence[Utterance], chunk: int = 64
) -> np.ndarray:
    """Softmax class posteriors (B, L) from pooled clean embeddings."""
    params = model.params
    parts = [
        enc.encode_and_pool(params, utterances[i:i + chunk])
        for i in range(0, len(utterances), chunk)
    ]
    h = np.concatenate(parts, axis=0)
    logits = h @ params.blocks["cls_w"] + params.blocks["cls_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    return expv / expv.sum(axis=1, keepdims=True)
