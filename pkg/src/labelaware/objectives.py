"""Loss functions over utterance embeddings and masked-frame predictions.

Supervised losses operate on the angular distance between pooled
utterance embeddings: semi-hard triplet, hard-mined triplet, and a
generalized end-to-end contrast of the extreme same-/different-label
distances per anchor. Self-supervised losses operate at masked frame
positions: cross-entropy against frozen random-quantizer codes, or an
InfoNCE contrast of masked-context embeddings against the clean latents
at the same positions.

Every loss has two entry points: a ``*_graph`` builder used inside
training graphs (gradients flow through selected distances only, never
through the mining decisions), and a value-level wrapper for evaluation
and oracle tests. Unlabeled embeddings (sentinel label) never act as
anchors, positives, or negatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import diffkit as dk

UNLABELED = -1


class BatchCompositionError(ValueError):
    """No usable anchors in a batch; points at sampler misconfiguration."""


@dataclass
class MiningCounts:
    anchors_used: int = 0
    anchors_skipped: int = 0


@dataclass
class LossBundle:
    """Per-step record of the combined objective."""

    ssl_loss: float
    supervised_loss: float
    total: float
    weight: float  # trade-off multiplier on the supervised term
    anchors_used: int = 0
    anchors_skipped: int = 0
    masked_positions: int = 0


# ---------------------------------------------------------------------------
# angular distance
# ---------------------------------------------------------------------------


def angular_distance(a: np.ndarray, b: np.ndarray) -> float:
    """arccos of cosine similarity, normalized to [0, 1]. Scale-invariant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("angular_distance: zero-norm input")
    cos = np.clip(a @ b / (na * nb), -1.0 + dk.ARCCOS_CLIP, 1.0 - dk.ARCCOS_CLIP)
    return float(np.arccos(cos) / np.pi)


def pairwise_distances_graph(h: dk.Node) -> dk.Node:
    """(B, B) angular distances between rows of the embedding node."""
    norms = np.sqrt((h.value * h.value).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("pairwise angular distance: zero-norm embedding")
    sq = dk.reduce_sum(dk.mul(h, h), axis=1)
    norm_col = dk.reshape(dk.sqrt(sq), (h.shape[0], 1))
    unit = dk.divide(h, norm_col)
    cos = dk.matmul(unit, dk.transpose2d(unit))
    return dk.scale(dk.arccos_clamped(cos), 1.0 / np.pi)


def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """Value-level pairwise angular distances with an exact zero diagonal."""
    tape = dk.GradTape()
    d = pairwise_distances_graph(tape.constant(embeddings)).value.copy()
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class EmbeddingBatch:
    """Pooled utterance embeddings with labels and cached distances."""

    embeddings: np.ndarray  # (B, D)
    labels: np.ndarray      # (B,) ints; UNLABELED marks label-free rows
    distance_matrix: np.ndarray = field(init=False)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} != batch {self.embeddings.shape[0]}"
            )
        self.distance_matrix = pairwise_distances(self.embeddings)


# ---------------------------------------------------------------------------
# mining helpers
# ---------------------------------------------------------------------------


def _positive_negative_sets(labels: np.ndarray):
    """Per labeled anchor: same-label indices (minus self), different-label
    labeled indices. Unlabeled rows appear in neither set."""
    labeled = labels != UNLABELED
    out = []
    for i in range(labels.shape[0]):
        if not labeled[i]:
            continue
        same = np.flatnonzero(labeled & (labels == labels[i]))
        pos = same[same != i]
        neg = np.flatnonzero(labeled & (labels != labels[i]))
        out.append((i, pos, neg))
    return out


def _no_anchor_error(labels) -> BatchCompositionError:
    n_labeled = int(np.sum(np.asarray(labels) != UNLABELED))
    return BatchCompositionError(
        f"no anchor has both a positive and a negative partner "
        f"({n_labeled} labeled of {len(labels)}); use a sampler that puts "
        f">= 2 utterances per language and >= 2 languages in each batch"
    )


def _assemble_hinge(
    d_node: dk.Node, anchors, pos_idx, neg_idx, gamma: float, n_used: int
) -> dk.Node:
    d_pos = dk.take_pairs(d_node, anchors, pos_idx)
    d_neg = dk.take_pairs(d_node, anchors, neg_idx)
    terms = dk.hinge(dk.add(dk.sub(d_pos, d_neg), float(gamma)))
    return dk.scale(dk.reduce_sum(terms), 1.0 / n_used)


# ---------------------------------------------------------------------------
# supervised losses (graph builders)
# ---------------------------------------------------------------------------


def triplet_semi_hard_graph(
    h: dk.Node, labels: np.ndarray, gamma: float, rng: np.random.Generator
) -> tuple[dk.Node, MiningCounts]:
    """Random positive, then the closest negative that is still farther
    than it; if none qualifies, the overall closest negative. Summed over
    anchors and divided by the number of contributing anchors."""
    if gamma < 0:
        raise ValueError(f"margin must be >= 0, got {gamma}")
    labels = np.asarray(labels)
    d_node = pairwise_distances_graph(h)
    d = d_node.value
    anchors, pos_sel, neg_sel = [], [], []
    skipped = 0
    for i, pos, neg in _positive_negative_sets(labels):
        if pos.size == 0 or neg.size == 0:
            skipped += 1
            continue
        p = int(rng.choice(pos))
        d_ip = d[i, p]
        semi = neg[d[i, neg] > d_ip]
        pool = semi if semi.size else neg
        n = int(pool[np.argmin(d[i, pool])])
        anchors.append(i)
        pos_sel.append(p)
        neg_sel.append(n)
    if not anchors:
        raise _no_anchor_error(labels)
    loss = _assemble_hinge(d_node, anchors, pos_sel, neg_sel, gamma, len(anchors))
    return loss, MiningCounts(anchors_used=len(anchors), anchors_skipped=skipped)


def triplet_hard_graph(
    h: dk.Node, labels: np.ndarray, gamma: float
) -> tuple[dk.Node, MiningCounts]:
    """Most distant positive vs closest negative per anchor. Gradients flow
    only through the two selected distances of each anchor."""
    if gamma < 0:
        raise ValueError(f"margin must be >= 0, got {gamma}")
    labels = np.asarray(labels)
    d_node = pairwise_distances_graph(h)
    d = d_node.value
    anchors, pos_sel, neg_sel = [], [], []
    skipped = 0
    for i, pos, neg in _positive_negative_sets(labels):
        if pos.size == 0 or neg.size == 0:
            skipped += 1
            continue
        anchors.append(i)
        pos_sel.append(int(pos[np.argmax(d[i, pos])]))
        neg_sel.append(int(neg[np.argmin(d[i, neg])]))
    if not anchors:
        raise _no_anchor_error(labels)
    loss = _assemble_hinge(d_node, anchors, pos_sel, neg_sel, gamma, len(anchors))
    return loss, MiningCounts(anchors_used=len(anchors), anchors_skipped=skipped)


def ge2e_graph(
    h: dk.Node, labels: np.ndarray, variant: str = "literal"
) -> tuple[dk.Node, MiningCounts]:
    """Per anchor: 1 - sigmoid(most distant positive) + sigmoid(closest
    negative). The "similarity" variant applies sigmoid to (1 - distance)
    instead."""
    if variant not in ("literal", "similarity"):
        raise ValueError(f"unknown ge2e variant {variant!r}")
    labels = np.asarray(labels)
    d_node = pairwise_distances_graph(h)
    d = d_node.value
    anchors, pos_sel, neg_sel = [], [], []
    skipped = 0
    for i, pos, neg in _positive_negative_sets(labels):
        if pos.size == 0 or neg.size == 0:
            skipped += 1
            continue
        anchors.append(i)
        pos_sel.append(int(pos[np.argmax(d[i, pos])]))
        neg_sel.append(int(neg[np.argmin(d[i, neg])]))
    if not anchors:
        raise _no_anchor_error(labels)
    d_pos = dk.take_pairs(d_node, anchors, pos_sel)
    d_neg = dk.take_pairs(d_node, anchors, neg_sel)
    if variant == "similarity":
        d_pos = dk.sub(1.0, d_pos)
        d_neg = dk.sub(1.0, d_neg)
    terms = dk.add(dk.sub(1.0, dk.sigmoid(d_pos)), dk.sigmoid(d_neg))
    loss = dk.scale(dk.reduce_sum(terms), 1.0 / len(anchors))
    return loss, MiningCounts(anchors_used=len(anchors), anchors_skipped=skipped)


# ---------------------------------------------------------------------------
# self-supervised losses
# ---------------------------------------------------------------------------


def mlm_loss_graph(logits: dk.Node, targets: np.ndarray) -> dk.Node:
    """Mean softmax cross-entropy over masked positions."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("masked-prediction loss: no masked positions")
    return dk.reduce_mean(dk.softmax_cross_entropy(logits, targets))


def contrastive_loss_graph(
    context: dk.Node,
    latents: dk.Node,
    utterance_of: np.ndarray,
    distractors: int,
    temperature: float,
    rng: np.random.Generator,
) -> tuple[dk.Node, int, int]:
    """InfoNCE at masked positions.

    Row t of ``context`` is contrasted against row t of ``latents`` (the
    positive) plus up to ``distractors`` latents sampled uniformly without
    replacement from other masked positions of the same utterance.
    Positions whose utterance has no other masked position are skipped.
    Returns (loss node, positions used, positions skipped).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    utterance_of = np.asarray(utterance_of)
    n = context.shape[0]
    if n == 0:
        raise ValueError("contrastive loss: no masked positions")

    def _unit(x: dk.Node) -> dk.Node:
        sq = dk.reduce_sum(dk.mul(x, x), axis=1)
        return dk.divide(x, dk.reshape(dk.sqrt(sq), (x.shape[0], 1)))

    sim = dk.scale(dk.matmul(_unit(context), dk.transpose2d(_unit(latents))),
                   1.0 / temperature)

    by_width: dict[int, tuple[list[int], list[list[int]]]] = {}
    skipped = 0
    for t in range(n):
        others = np.flatnonzero((utterance_of == utterance_of[t]) & (np.arange(n) != t))
        if others.size == 0:
            skipped += 1
            continue
        k = min(distractors, others.size)
        cands = [t] + [int(j) for j in rng.choice(others, size=k, replace=False)]
        rows, cand_lists = by_width.setdefault(k + 1, ([], []))
        rows.append(t)
        cand_lists.append(cands)
    if not by_width:
        raise ValueError("contrastive loss: every masked position lacks distractors")

    ce_parts = []
    used = 0
    for width in sorted(by_width):
        rows, cand_lists = by_width[width]
        row_idx = np.repeat(rows, width)
        col_idx = np.concatenate(cand_lists)
        logits = dk.reshape(dk.take_pairs(sim, row_idx, col_idx), (len(rows), width))
        ce_parts.append(dk.softmax_cross_entropy(logits, np.zeros(len(rows), dtype=np.intp)))
        used += len(rows)
    return dk.reduce_mean(dk.concat_vec(ce_parts)), used, skipped


# ---------------------------------------------------------------------------
# value-level wrappers
# ---------------------------------------------------------------------------


def _value_of(build):
    tape = dk.GradTape()
    node, counts = build(tape)
    return float(node.value), counts


def triplet_loss_semi_hard(
    batch: EmbeddingBatch, gamma: float, rng: np.random.Generator
) -> tuple[float, MiningCounts]:
    return _value_of(
        lambda tape: triplet_semi_hard_graph(
            tape.constant(batch.embeddings), batch.labels, gamma, rng
        )
    )


def triplet_loss_hard(batch: EmbeddingBatch, gamma: float) -> tuple[float, MiningCounts]:
    return _value_of(
        lambda tape: triplet_hard_graph(tape.constant(batch.embeddings), batch.labels, gamma)
    )


def ge2e_loss(batch: EmbeddingBatch, variant: str = "literal") -> tuple[float, MiningCounts]:
    return _value_of(
        lambda tape: ge2e_graph(tape.constant(batch.embeddings), batch.labels, variant)
    )


def ssl_mlm_loss(predictions: np.ndarray, targets: np.ndarray, mask_plan=None) -> float:
    """Mean cross-entropy of (n, V) logits against quantizer codes."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets)
    if mask_plan is not None and len(mask_plan.positions) != targets.size:
        raise ValueError(
            f"targets ({targets.size}) do not match mask plan "
            f"({len(mask_plan.positions)} positions)"
        )
    tape = dk.GradTape()
    return float(mlm_loss_graph(tape.constant(predictions), targets).value)


def ssl_contrastive_loss(
    context: np.ndarray,
    latents: np.ndarray,
    utterance_of: np.ndarray,
    distractors: int,
    temperature: float,
    rng: np.random.Generator,
) -> tuple[float, int, int]:
    tape = dk.GradTape()
    node, used, skipped = contrastive_loss_graph(
        tape.constant(context), tape.constant(latents), utterance_of,
        distractors, temperature, rng,
    )
    return float(node.value), used, skipped


def combined_loss(
    ssl_loss: float,
    supervised_loss: float,
    weight: float,
    counts: MiningCounts | None = None,
    masked_positions: int = 0,
) -> LossBundle:
    """Total objective: ssl + weight * supervised. weight=0 reduces to the
    pure self-supervised baseline."""
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    counts = counts or MiningCounts()
    return LossBundle(
        ssl_loss=float(ssl_loss),
        supervised_loss=float(supervised_loss),
        total=float(ssl_loss) + float(weight) * float(supervised_loss),
        weight=float(weight),
        anchors_used=counts.anchors_used,
        anchors_skipped=counts.anchors_skipped,
        masked_positions=masked_positions,
    )
