"""Frame encoder, pooling, input masking, and the frozen random quantizer.

The encoder is a per-frame MLP over a stacked context window: frame t is
concatenated with its c neighbours on each side (zero-padded at utterance
edges) and mapped (2c+1)*F -> H -> H -> D. Masked positions have their
input frame replaced by a trainable mask embedding *before* context
stacking, so one encoder serves both masked-prediction objectives and
clean utterance embedding.

The random quantizer is a frozen random projection plus a frozen
L2-normalized codebook; it turns frames into discrete target codes for
the masked-prediction loss and is never updated by training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffkit as dk
from .streams import DOMAIN_PARAM_INIT, DOMAIN_QUANTIZER, derive_rng

_ACTIVATIONS = ("tanh", "relu", "linear")

# parameter block names, in checkpoint order
PARAM_KEYS = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w3", "enc_b3",
    "mask_embed", "mlm_w", "mlm_b", "ctr_w", "cls_w", "cls_b",
)


@dataclass(frozen=True)
class EncoderConfig:
    num_features: int = 20   # F, frame feature dimension
    context: int = 2         # c, frames of context each side
    hidden_dim: int = 64     # H
    embed_dim: int = 32      # D
    codebook_size: int = 64  # V
    code_dim: int = 16       # quantizer projection dimension
    num_classes: int = 12    # L
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def stacked_dim(self) -> int:
        return (2 * self.context + 1) * self.num_features


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {
        "enc_w1": (cfg.stacked_dim, cfg.hidden_dim),
        "enc_b1": (cfg.hidden_dim,),
        "enc_w2": (cfg.hidden_dim, cfg.hidden_dim),
        "enc_b2": (cfg.hidden_dim,),
        "enc_w3": (cfg.hidden_dim, cfg.embed_dim),
        "enc_b3": (cfg.embed_dim,),
        "mask_embed": (cfg.num_features,),
        "mlm_w": (cfg.embed_dim, cfg.codebook_size),
        "mlm_b": (cfg.codebook_size,),
        "ctr_w": (cfg.embed_dim, cfg.embed_dim),
        "cls_w": (cfg.embed_dim, cfg.num_classes),
        "cls_b": (cfg.num_classes,),
    }


@dataclass
class EncoderParams:
    """All trainable parameter blocks plus their configuration."""

    config: EncoderConfig
    blocks: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.blocks.items()})

    def validate(self):
        expected = param_shapes(self.config)
        if set(self.blocks) != set(expected):
            raise ValueError(
                f"parameter blocks {sorted(self.blocks)} != expected {sorted(expected)}"
            )
        for k, shape in expected.items():
            if self.blocks[k].shape != shape:
                raise ValueError(f"block {k}: shape {self.blocks[k].shape} != {shape}")


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Weights ~ N(0, 1/fan_in), biases 0, mask embedding ~ N(0, 0.01)."""
    rng = derive_rng(seed, DOMAIN_PARAM_INIT)
    blocks = {}
    for name, shape in param_shapes(cfg).items():
        if name == "mask_embed":
            blocks[name] = 0.1 * rng.normal(size=shape)
        elif name.endswith("_b") or name.startswith("enc_b"):
            blocks[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            blocks[name] = rng.normal(size=shape) / np.sqrt(fan_in)
    return EncoderParams(cfg, blocks)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...]  # sorted masked frame indices
    span_length: int
    mask_rate: float


def plan_mask(
    num_frames: int, mask_rate: float, span_length: int, rng: np.random.Generator
) -> MaskPlan:
    """Sample span starts without replacement until coverage >= mask_rate*T.

    Overlapping spans merge; at least one span is always placed.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError(f"mask_rate must be in (0, 1), got {mask_rate}")
    if not 1 <= span_length <= num_frames:
        raise ValueError(
            f"span_length must be in [1, {num_frames}], got {span_length}"
        )
    target = mask_rate * num_frames
    starts = rng.permutation(num_frames - span_length + 1)
    covered: set[int] = set()
    for start in starts:
        covered.update(range(start, start + span_length))
        if len(covered) >= target:
            break
    return MaskPlan(
        positions=tuple(sorted(covered)), span_length=span_length, mask_rate=mask_rate
    )


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def _activation(cfg: EncoderConfig, x: dk.Node) -> dk.Node:
    if cfg.activation == "tanh":
        return dk.tanh(x)
    if cfg.activation == "relu":
        return dk.relu(x)
    return x


def segments_for(frames_list: Sequence[np.ndarray]) -> list[tuple[int, int]]:
    """Row ranges of each utterance inside the concatenated frame matrix."""
    segments = []
    offset = 0
    for f in frames_list:
        segments.append((offset, offset + f.shape[0]))
        offset += f.shape[0]
    return segments


def encode_graph(
    params: Mapping[str, dk.Node],
    cfg: EncoderConfig,
    tape: dk.GradTape,
    frames_list: Sequence[np.ndarray],
    mask_plans: Sequence[MaskPlan | None] | None = None,
) -> tuple[dk.Node, list[tuple[int, int]]]:
    """Differentiable batched encode.

    Frames of all utterances are concatenated row-wise; returns the
    (sum_T, D) frame-embedding node plus per-utterance row segments.
    Masked rows are replaced by the mask embedding before context
    stacking, so the mask embedding receives gradients.
    """
    for f in frames_list:
        if f.shape[1] != cfg.num_features:
            raise ValueError(
                f"frame feature dim {f.shape[1]} != configured {cfg.num_features}"
            )
    segments = segments_for(frames_list)
    total = segments[-1][1]
    stacked_frames = np.concatenate(frames_list, axis=0)

    if mask_plans is not None and any(p is not None for p in mask_plans):
        indicator = np.zeros((total, 1))
        for (start, _), plan in zip(segments, mask_plans):
            if plan is not None and plan.positions:
                indicator[start + np.asarray(plan.positions, dtype=np.intp), 0] = 1.0
        zeroed = stacked_frames * (1.0 - indicator)
        mask_row = dk.reshape(params["mask_embed"], (1, cfg.num_features))
        x = dk.add(tape.constant(zeroed), dk.matmul(tape.constant(indicator), mask_row))
    else:
        x = tape.constant(stacked_frames)

    h = dk.context_stack(x, segments, cfg.context)
    h = _activation(cfg, dk.add(dk.matmul(h, params["enc_w1"]),
                                dk.reshape(params["enc_b1"], (1, cfg.hidden_dim))))
    h = _activation(cfg, dk.add(dk.matmul(h, params["enc_w2"]),
                                dk.reshape(params["enc_b2"], (1, cfg.hidden_dim))))
    z = dk.add(dk.matmul(h, params["enc_w3"]),
               dk.reshape(params["enc_b3"], (1, cfg.embed_dim)))
    return z, segments


def encode(
    params: EncoderParams, frames: np.ndarray, mask_plan: MaskPlan | None = None
) -> np.ndarray:
    """Frame embeddings (T, D) for a single utterance."""
    tape = dk.GradTape()
    nodes = {k: tape.constant(v) for k, v in params.blocks.items()}
    z, _ = encode_graph(nodes, params.config, tape, [np.asarray(frames, dtype=np.float64)],
                        [mask_plan])
    return z.value


def pool_graph(z: dk.Node, segments: Sequence[tuple[int, int]]) -> dk.Node:
    """Mean over frames per utterance: (B, D) utterance embeddings."""
    return dk.segment_mean(z, segments)


def pool(frame_embeddings: np.ndarray) -> np.ndarray:
    """Utterance embedding: the mean over frame embeddings."""
    z = np.asarray(frame_embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"pool expects a nonempty (T, D) matrix, got shape {z.shape}")
    tape = dk.GradTape()
    return dk.segment_mean(tape.constant(z), [(0, z.shape[0])]).value[0]


def encode_and_pool(params: EncoderParams, utterances) -> np.ndarray:
    """Pooled embeddings (B, D) for a batch of utterances, no masking."""
    tape = dk.GradTape()
    nodes = {k: tape.constant(v) for k, v in params.blocks.items()}
    z, segments = encode_graph(nodes, params.config, tape,
                               [u.frames for u in utterances])
    return pool_graph(z, segments).value


# ---------------------------------------------------------------------------
# random quantizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomQuantizer:
    """Frozen random projection + frozen L2-normalized codebook."""

    projection: np.ndarray  # (code_dim, F)
    codebook: np.ndarray    # (V, code_dim), rows unit norm
    seed: int


def make_quantizer(cfg: EncoderConfig, seed: int) -> RandomQuantizer:
    rng = derive_rng(seed, DOMAIN_QUANTIZER)
    projection = rng.normal(size=(cfg.code_dim, cfg.num_features)) / np.sqrt(cfg.num_features)
    codebook = rng.normal(size=(cfg.codebook_size, cfg.code_dim))
    codebook = codebook / np.linalg.norm(codebook, axis=1, keepdims=True)
    return RandomQuantizer(projection=projection, codebook=codebook, seed=seed)


def quantize_targets(q: RandomQuantizer, frames: np.ndarray) -> np.ndarray:
    """Nearest-codebook code per frame; ties break to the lowest index.

    The projected frame is L2-normalized before the distance scan; a
    zero-norm projection falls back to the unnormalized (zero) vector.
    No gradient flows through this op.
    """
    frames = np.asarray(frames, dtype=np.float64)
    proj = frames @ q.projection.T
    norms = np.sqrt((proj * proj).sum(axis=1, keepdims=True))
    normed = np.where(norms > 0.0, proj / np.where(norms > 0.0, norms, 1.0), proj)
    diff = normed[:, None, :] - q.codebook[None, :, :]
    dist2 = (diff * diff).sum(axis=2)
    return np.argmin(dist2, axis=1)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"LAWENC01"
_CKPT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: EncoderParams,
    quantizer_seed: int,
    extra: Mapping[str, np.ndarray] | None = None,
) -> None:
    """Binary checkpoint: fixed header then named float64 blocks.

    Header: magic, version, F, H, D, V, L, c, quantizer seed, activation.
    ``extra`` carries optimizer state and counters as additional blocks.
    """
    cfg = params.config
    out = bytearray()
    out += _CKPT_MAGIC
    act = cfg.activation.encode()
    out += struct.pack(
        "<qqqqqqqqq", _CKPT_VERSION, cfg.num_features, cfg.hidden_dim, cfg.embed_dim,
        cfg.codebook_size, cfg.num_classes, cfg.context, quantizer_seed, cfg.code_dim,
    )
    out += struct.pack("<q", len(act)) + act
    blocks = dict(params.blocks)
    if extra:
        blocks.update({k: np.asarray(v, dtype=np.float64) for k, v in extra.items()})
    out += struct.pack("<q", len(blocks))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        nb = name.encode()
        out += struct.pack("<q", len(nb)) + nb
        out += struct.pack("<q", arr.ndim)
        out += struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b""
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, int, dict[str, np.ndarray]]:
    """Load and shape-validate a checkpoint; returns (params, quantizer_seed, extra)."""
    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    off = len(_CKPT_MAGIC)
    version, f, h, d, v, l, c, qseed, code_dim = struct.unpack_from("<qqqqqqqqq", raw, off)
    off += 9 * 8
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (act_len,) = struct.unpack_from("<q", raw, off)
    off += 8
    activation = raw[off:off + act_len].decode()
    off += act_len
    cfg = EncoderConfig(
        num_features=f, context=c, hidden_dim=h, embed_dim=d, codebook_size=v,
        code_dim=code_dim, num_classes=l, activation=activation,
    )
    (n_blocks,) = struct.unpack_from("<q", raw, off)
    off += 8
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<q", raw, off)
        off += 8
        name = raw[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<q", raw, off)
        off += 8
        shape = struct.unpack_from(f"<{ndim}q", raw, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", offset=off, count=count).astype(np.float64)
        off += 8 * count
        blocks[name] = arr.reshape(shape)
    param_blocks = {k: blocks.pop(k) for k in PARAM_KEYS if k in blocks}
    params = EncoderParams(cfg, param_blocks)
    params.validate()
    return params, qseed, blocks
