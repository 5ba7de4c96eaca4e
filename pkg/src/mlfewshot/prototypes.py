"""Prototype construction from support-image local features and a label vector.

A label's prototype is the sum of two parts: a channel-grouped cross-
attention readout of the label's support features queried by its word
embedding, and a dynamic-convolution branch whose two kernels are generated
from that embedding and applied to the features most similar to it.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class LabelSupportPool:
    """The local features backing one label's prototype.

    features: (count, joint_dim) projected local features, on tape.
    origins: per row, (support image index, grid row, grid col).
    """

    label: str
    features: Tensor
    origins: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ConfigError(f"support pool for {self.label!r} must be a non-empty matrix")
        if len(self.origins) != self.features.shape[0]:
            raise ConfigError(f"support pool for {self.label!r} has mismatched origins")


@dataclass
class AttentionParams:
    """Per-head query transforms plus the output MLP."""

    queries: list[Tensor]   # heads x (head_dim, joint_dim)
    mlp_w1: Tensor          # (joint_dim, joint_dim)
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    dropout: float = 0.1

    @property
    def heads(self):
        return len(self.queries)

    @property
    def head_dim(self):
        return self.queries[0].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {f"attention.query.{j}": q for j, q in enumerate(self.queries)}
        out.update({
            "attention.mlp.w1": self.mlp_w1,
            "attention.mlp.b1": self.mlp_b1,
            "attention.mlp.w2": self.mlp_w2,
            "attention.mlp.b2": self.mlp_b2,
        })
        return out


@dataclass
class DynConvParams:
    """Kernel generators and per-stage norms for the dynamic-convolution branch."""

    gen1_weight: Tensor   # (inner_dim * joint_dim, joint_dim)
    gen1_bias: Tensor
    gen2_weight: Tensor   # (joint_dim * inner_dim, joint_dim)
    gen2_bias: Tensor
    norm1_gain: Tensor    # (inner_dim,)
    norm1_bias: Tensor
    norm2_gain: Tensor    # (joint_dim,)
    norm2_bias: Tensor
    top_count: int        # how many most-similar features feed the branch

    @property
    def inner_dim(self):
        return self.norm1_gain.shape[0]

    @property
    def joint_dim(self):
        return self.norm2_gain.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "dynconv.gen1.weight": self.gen1_weight,
            "dynconv.gen1.bias": self.gen1_bias,
            "dynconv.gen2.weight": self.gen2_weight,
            "dynconv.gen2.bias": self.gen2_bias,
            "dynconv.norm1.gain": self.norm1_gain,
            "dynconv.norm1.bias": self.norm1_bias,
            "dynconv.norm2.gain": self.norm2_gain,
            "dynconv.norm2.bias": self.norm2_bias,
        }


@dataclass
class Prototype:
    """A label's prototype and its two components."""

    label: str
    vector: Tensor
    attention_part: Tensor
    dynconv_part: Tensor
    attention_weights: np.ndarray | None = None  # (heads, pool size) if collected


def _uniform(rng, shape, fan_in, gain: float = 1.0):
    bound = gain / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# Near-identity starting points: the output MLP opens as (roughly) the
# identity map and each head's query transform as the slice of the label
# vector that the head attends with, so an untrained prototype is already
# an attention-pooled support feature instead of a random mix.  Small
# uniform noise breaks symmetry; training moves things from there.
_INIT_NOISE = 0.1
# Gain on the identity slice of each query transform; >1 makes the initial
# attention peakier (projected features give tiny dot products otherwise).
_QUERY_GAIN = 8.0
# The kernel generators start mostly label-independent (bias-dominated)
# and the second norm gain starts small so this branch does not drown the
# attention branch before training balances them.
_GEN_NOISE = 0.25
_NORM2_GAIN = 0.05


def _near_identity(rng, dim):
    noise = _uniform(rng, (dim, dim), dim, gain=_INIT_NOISE).data
    return Tensor(np.eye(dim) + noise, requires_grad=True)


def init_attention(joint_dim: int, heads: int, rng, dropout: float = 0.1) -> AttentionParams:
    if heads < 1 or joint_dim % heads != 0:
        raise ConfigError(f"head count {heads} must divide the joint dimension {joint_dim}")
    head_dim = joint_dim // heads
    queries = []
    for j in range(heads):
        base = np.zeros((head_dim, joint_dim))
        base[:, j * head_dim:(j + 1) * head_dim] = _QUERY_GAIN * np.eye(head_dim)
        noise = _uniform(rng, (head_dim, joint_dim), joint_dim, gain=_INIT_NOISE).data
        queries.append(Tensor(base + noise, requires_grad=True))
    return AttentionParams(
        queries=queries,
        mlp_w1=_near_identity(rng, joint_dim),
        mlp_b1=Tensor(np.zeros(joint_dim), requires_grad=True),
        mlp_w2=_near_identity(rng, joint_dim),
        mlp_b2=Tensor(np.zeros(joint_dim), requires_grad=True),
        dropout=dropout,
    )


def init_dynconv(joint_dim: int, inner_dim: int, top_count: int, rng) -> DynConvParams:
    if inner_dim < 1 or top_count < 1:
        raise ConfigError(f"dynconv needs positive dims, got inner {inner_dim}, top {top_count}")
    return DynConvParams(
        gen1_weight=_uniform(rng, (inner_dim * joint_dim, joint_dim), joint_dim, gain=_GEN_NOISE),
        gen1_bias=_uniform(rng, (inner_dim * joint_dim,), joint_dim),
        gen2_weight=_uniform(rng, (joint_dim * inner_dim, joint_dim), joint_dim, gain=_GEN_NOISE),
        gen2_bias=_uniform(rng, (joint_dim * inner_dim,), joint_dim),
        norm1_gain=Tensor(np.ones(inner_dim), requires_grad=True),
        norm1_bias=Tensor(np.zeros(inner_dim), requires_grad=True),
        norm2_gain=Tensor(np.full(joint_dim, _NORM2_GAIN), requires_grad=True),
        norm2_bias=Tensor(np.zeros(joint_dim), requires_grad=True),
        top_count=top_count,
    )


def attention_prototype(params: AttentionParams, pool: LabelSupportPool, label_joint: Tensor,
                        rng=None, training: bool = False, collect_weights: bool = False):
    """Channel-grouped cross-attention readout of the pool, queried by the label.

    Head j sees the j-th channel slice of every pooled feature as both key
    and value; its query is that head's transform of the label vector.  The
    concatenated head outputs pass through the MLP.  Returns the prototype
    component and, when asked, the (heads, pool) attention weight matrix.
    """
    joint_dim = params.mlp_w1.shape[0]
    if pool.features.shape[1] != joint_dim:
        raise ConfigError(
            f"pool features have dim {pool.features.shape[1]}, attention expects {joint_dim}"
        )
    head_dim = params.head_dim
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    slices = ad.split(pool.features, params.heads, axis=1)
    head_outputs = []
    weights = [] if collect_weights else None
    for transform, chunk in zip(params.queries, slices):
        query = ad.matmul(transform, label_joint)               # (head_dim,)
        logits = ad.scale(ad.matmul(chunk, query), inv_sqrt)    # (count,)
        attention = ad.softmax(logits)
        if collect_weights:
            weights.append(attention.data.copy())
        head_outputs.append(ad.matmul(attention, chunk))        # (head_dim,)
    merged = ad.concat(head_outputs, axis=0)                    # (joint_dim,)
    hidden = ad.gelu(ad.add(ad.matmul(params.mlp_w1, merged), params.mlp_b1))
    hidden = ad.dropout(hidden, params.dropout, rng=rng, training=training)
    out = ad.add(ad.matmul(params.mlp_w2, hidden), params.mlp_b2)
    return out, (np.stack(weights) if collect_weights else None)


def select_top_features(pool: LabelSupportPool, label_joint: Tensor, top_count: int):
    """Pick the `top_count` pool rows most cosine-similar to the label vector.

    Ties break by ascending (image index, row, col); zero-norm rows are
    excluded with a warning.  Returns (selected rows tensor, their origins).
    """
    if top_count < 1:
        raise ConfigError(f"top_count must be >= 1, got {top_count}")
    values = pool.features.data
    norms = np.linalg.norm(values, axis=1)
    label_vec = label_joint.data
    label_norm = np.linalg.norm(label_vec)
    if label_norm == 0.0:
        raise ad.DegenerateVectorError("degenerate-vector: label vector has zero length")
    candidates = []
    for idx in range(values.shape[0]):
        if norms[idx] == 0.0:
            log.warning("pool %r: feature %s has zero norm, excluded from selection",
                        pool.label, pool.origins[idx])
            continue
        similarity = float(values[idx] @ label_vec) / (norms[idx] * label_norm)
        candidates.append((-similarity, pool.origins[idx], idx))
    if not candidates:
        raise ConfigError(f"empty-selection: every feature in pool {pool.label!r} has zero norm")
    candidates.sort()
    picked = [idx for _, _, idx in candidates[:top_count]]
    origins = tuple(pool.origins[i] for i in picked)
    return ad.gather_rows(pool.features, picked), origins


def dynconv_prototype(params: DynConvParams, selected: Tensor, label_joint: Tensor) -> Tensor:
    """Two generated-kernel stages over the selected features, mean-combined.

    Both kernels come from linear maps of the label vector.  Each stage is
    matrix-multiply, layer norm, ReLU; the output averages over however
    many features were actually selected.
    """
    if selected.ndim != 2 or selected.shape[0] < 1:
        raise ConfigError("dynconv: needs at least one selected feature")
    inner, joint = params.inner_dim, params.joint_dim
    kernel1 = ad.reshape(ad.add(ad.matmul(params.gen1_weight, label_joint), params.gen1_bias),
                         (inner, joint))
    kernel2 = ad.reshape(ad.add(ad.matmul(params.gen2_weight, label_joint), params.gen2_bias),
                         (joint, inner))
    mid = ad.relu(ad.layer_norm(ad.matmul(selected, ad.transpose(kernel1)),
                                params.norm1_gain, params.norm1_bias))
    out_rows = ad.relu(ad.layer_norm(ad.matmul(mid, ad.transpose(kernel2)),
                                     params.norm2_gain, params.norm2_bias))
    return ad.mean(out_rows, axis=0)


def build_prototype(attention: AttentionParams, dynconv: DynConvParams,
                    pool: LabelSupportPool, label_joint: Tensor,
                    rng=None, training: bool = False, collect_weights: bool = False) -> Prototype:
    """Sum of the attention and dynamic-convolution components."""
    att_part, weights = attention_prototype(attention, pool, label_joint,
                                            rng=rng, training=training,
                                            collect_weights=collect_weights)
    selected, _ = select_top_features(pool, label_joint, dynconv.top_count)
    dyn_part = dynconv_prototype(dynconv, selected, label_joint)
    return Prototype(
        label=pool.label,
        vector=ad.add(att_part, dyn_part),
        attention_part=att_part,
        dynconv_part=dyn_part,
        attention_weights=weights,
    )


def simple_attention_prototype(global_joints, label_joint: Tensor, scale: float) -> Tensor:
    """Baseline prototype: softmax(scale * cos)-weighted average of the
    label's projected support global features."""
    global_joints = list(global_joints)
    if not global_joints:
        raise ConfigError("simple attention needs at least one support feature")
    logits = []
    for g in global_joints:
        logits.append(ad.reshape(ad.scale(ad.cosine(label_joint, g), scale), (1,)))
    weights = ad.softmax(ad.concat(logits, axis=0))
    stacked = ad.concat([ad.reshape(g, (1, g.shape[0])) for g in global_joints], axis=0)
    return ad.matmul(weights, stacked)


def export_attention_weights(path, prototype: Prototype, origins=None):
    """Write collected attention weights as text: one line per head, one
    column per pooled feature; origins go into a leading comment."""
    if prototype.attention_weights is None:
        raise ConfigError("prototype was built without collect_weights")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# label {prototype.label}\n")
        if origins is not None:
            handle.write("# origins " + " ".join(f"{i}:{r}:{c}" for i, r, c in origins) + "\n")
        for head in prototype.attention_weights:
            handle.write(" ".join(f"{v:.6f}" for v in head) + "\n")
