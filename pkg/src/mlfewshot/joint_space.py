"""The joint visual/text embedding space and the class-mapping loss.

Global visual features and label word embeddings are projected into one
space by two bias-free linear maps; an image/label score is a scaled
cosine similarity there, and the class-mapping loss is summed binary
cross-entropy of those scores against the multi-hot ground truth.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError


@dataclass
class JointSpaceParams:
    """Bias-free projections into the joint space plus the score scale."""

    visual: Tensor  # (joint_dim, channels)
    text: Tensor    # (joint_dim, embed_dim)
    scale: float    # multiplies every cosine score

    @property
    def joint_dim(self):
        return self.visual.shape[0]

    @property
    def channels(self):
        return self.visual.shape[1]

    @property
    def embed_dim(self):
        return self.text.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"joint.visual": self.visual, "joint.text": self.text}


def init_joint_space(channels, embed_dim, joint_dim, scale, rng) -> JointSpaceParams:
    """Seeded uniform +-1/sqrt(fan_in) initialization for both projections."""
    if joint_dim < 1 or channels < 1 or embed_dim < 1:
        raise ConfigError(f"joint space dims must be positive, got ({joint_dim}, {channels}, {embed_dim})")
    visual = rng.uniform(-1.0 / np.sqrt(channels), 1.0 / np.sqrt(channels), size=(joint_dim, channels))
    text = rng.uniform(-1.0 / np.sqrt(embed_dim), 1.0 / np.sqrt(embed_dim), size=(joint_dim, embed_dim))
    return JointSpaceParams(
        visual=Tensor(visual, requires_grad=True),
        text=Tensor(text, requires_grad=True),
        scale=float(scale),
    )


def project_visual(params: JointSpaceParams, feature: Tensor) -> Tensor:
    """Map a pooled visual feature (channels,) into the joint space."""
    return ad.matmul(params.visual, feature)


def project_label(params: JointSpaceParams, embedding: Tensor) -> Tensor:
    """Map a label word embedding (embed_dim,) into the joint space."""
    return ad.matmul(params.text, embedding)


def score(params: JointSpaceParams, visual_joint: Tensor, label_joint: Tensor) -> Tensor:
    """Scaled cosine similarity between two joint-space vectors."""
    return ad.scale(ad.cosine(visual_joint, label_joint), params.scale)


def cm_loss(params: JointSpaceParams, pooled_features, targets, label_joints) -> Tensor:
    """Class-mapping loss: summed BCE of every (image, label) score.

    pooled_features: per-image pooled visual features (channels,), on tape.
    targets: (n_images, n_labels) multi-hot array.
    label_joints: per-label joint-space vectors, on tape.
    """
    pooled_features = list(pooled_features)
    label_joints = list(label_joints)
    y = np.asarray(targets, dtype=np.float64)
    if not pooled_features:
        raise ConfigError("cm_loss: support set is empty")
    if not label_joints:
        raise ConfigError("cm_loss: label set is empty")
    if y.shape != (len(pooled_features), len(label_joints)):
        raise ConfigError(
            f"cm_loss: targets shape {y.shape} does not match "
            f"({len(pooled_features)}, {len(label_joints)})"
        )
    scores = []
    for feature in pooled_features:
        visual_joint = project_visual(params, feature)
        for label_joint in label_joints:
            scores.append(ad.reshape(score(params, visual_joint, label_joint), (1,)))
    flat = ad.concat(scores, axis=0)
    return ad.tensor_sum(ad.bce_with_logits(flat, y.reshape(-1)))


def zero_shot_probabilities(params: JointSpaceParams, pooled_features, label_joints) -> np.ndarray:
    """Sigmoid of the scaled cosine of each pooled feature against each label.

    Prior-knowledge-only prediction: no support images are consulted.
    Returns an (n_images, n_labels) probability matrix.
    """
    rows = []
    for feature in pooled_features:
        visual_joint = project_visual(params, feature)
        row = [ad.sigmoid(score(params, visual_joint, lj)).item() for lj in label_joints]
        rows.append(row)
    return np.array(rows, dtype=np.float64)
