"""Loss-change measurement: per-image local-feature importance and selection.

Each support image gets a grid of importance weights, fitted at test time
by minimizing that image's class-mapping loss under weighted pooling with
everything else frozen.  A first-order estimate of how much the loss would
change if a cell were removed is tracked with a momentum accumulator, and
cells whose sigmoided accumulator clears a threshold are kept.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .features import weighted_pool
from .joint_space import JointSpaceParams, project_label
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class LcmConfig:
    """Knobs for importance fitting and feature selection."""

    threshold: float = 0.65     # selection threshold on sigma(accumulator), in [0.5, 1)
    learning_rate: float = 0.01
    epochs: int = 20
    momentum_cap: float = 0.95

    def __post_init__(self):
        validate_threshold(self.threshold)
        if self.epochs < 1:
            raise ConfigError(f"lcm epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"lcm learning rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.momentum_cap < 1.0:
            raise ConfigError(f"momentum cap must lie in (0, 1), got {self.momentum_cap}")


def validate_threshold(threshold: float):
    # sigma of a nonnegative accumulator is always >= 0.5, so 0.5 keeps everything
    if not 0.5 <= threshold < 1.0:
        raise ConfigError(f"selection threshold must lie in [0.5, 1), got {threshold}")


@dataclass
class ImportanceMap:
    """Fitted state for one support image."""

    importance: np.ndarray   # (h, w) weights in [0, 1]
    accumulator: np.ndarray  # (h, w) momentum-smoothed loss-change grid, nonnegative
    iteration: int           # index of the last momentum update


def normalize_importance(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; exact zeros are lifted to the smallest nonzero
    entry of the normalized map so no cell is removed permanently; a
    constant map becomes all ones."""
    v = np.asarray(values, dtype=np.float64)
    low = v.min()
    high = v.max()
    if high == low:
        return np.ones_like(v)
    out = (v - low) / (high - low)
    smallest_nonzero = out[out > 0].min()
    out[out == 0] = smallest_nonzero
    return out


def momentum_alpha(iteration: int, cap: float = 0.95) -> float:
    """Warm-up coefficient min(1 - 1/(i+1), cap) for iteration i >= 1."""
    if iteration < 1:
        raise ConfigError(f"momentum iteration starts at 1, got {iteration}")
    return min(1.0 - 1.0 / (iteration + 1), cap)


def momentum_update(accumulator: np.ndarray, grid: np.ndarray, iteration: int,
                    cap: float = 0.95) -> np.ndarray:
    """f_i = alpha_i * f_{i-1} + (1 - alpha_i) * g_i with f_0 = 0."""
    alpha = momentum_alpha(iteration, cap)
    return alpha * np.asarray(accumulator, dtype=np.float64) + (1.0 - alpha) * np.asarray(grid, dtype=np.float64)


def _frozen_view(joint: JointSpaceParams) -> JointSpaceParams:
    # shares data, drops requires_grad: only the importance weights may train
    return JointSpaceParams(
        visual=Tensor(joint.visual.data),
        text=Tensor(joint.text.data),
        scale=joint.scale,
    )


def _project_labels(frozen: JointSpaceParams, label_embeddings: np.ndarray) -> list[Tensor]:
    return [project_label(frozen, Tensor(w)) for w in np.asarray(label_embeddings, dtype=np.float64)]


def _image_loss(frozen: JointSpaceParams, fmap: Tensor, targets_row: np.ndarray,
                label_joints: list[Tensor], weights: Tensor):
    """This image's CM loss with importance-weighted pooling."""
    pooled = weighted_pool(fmap, weights)
    visual_joint = ad.matmul(frozen.visual, pooled)
    scores = []
    for label_joint in label_joints:
        s = ad.scale(ad.cosine(visual_joint, label_joint), frozen.scale)
        scores.append(ad.reshape(s, (1,)))
    flat = ad.concat(scores, axis=0)
    return ad.tensor_sum(ad.bce_with_logits(flat, targets_row))


def loss_change_exact(joint: JointSpaceParams, fmap: np.ndarray, targets_row,
                      label_embeddings, importance: np.ndarray, row: int, col: int) -> float:
    """|loss(importance) - loss(importance with cell (row, col) zeroed)|,
    by two forward passes."""
    frozen = _frozen_view(joint)
    label_joints = _project_labels(frozen, label_embeddings)
    fmap_t = Tensor(fmap)
    y = np.asarray(targets_row, dtype=np.float64)
    with_cell = _image_loss(frozen, fmap_t, y, label_joints, Tensor(importance)).item()
    zeroed = np.array(importance, dtype=np.float64, copy=True)
    zeroed[row, col] = 0.0
    without_cell = _image_loss(frozen, fmap_t, y, label_joints, Tensor(zeroed)).item()
    return abs(with_cell - without_cell)


def loss_change_taylor(joint: JointSpaceParams, fmap: np.ndarray, targets_row,
                       label_embeddings, importance: np.ndarray) -> np.ndarray:
    """First-order grid |importance * d loss / d importance| for every cell,
    from one forward and one backward pass."""
    frozen = _frozen_view(joint)
    label_joints = _project_labels(frozen, label_embeddings)
    weights = Tensor(np.array(importance, dtype=np.float64, copy=True), requires_grad=True)
    loss = _image_loss(frozen, Tensor(fmap), np.asarray(targets_row, dtype=np.float64),
                       label_joints, weights)
    loss.backward()
    grad = weights.grad if weights.grad is not None else np.zeros_like(weights.data)
    return np.abs(weights.data * grad)


def fit_importance(joint: JointSpaceParams, fmap: np.ndarray, targets_row,
                   label_embeddings, config: LcmConfig, *, trained: bool = True) -> ImportanceMap:
    """Fit one support image's importance weights with the model frozen.

    Per epoch: one Adam step on the weights minimizing the image's CM loss
    under weighted pooling, clamp to [0, 1] and normalize, then refresh the
    loss-change grid and fold it into the momentum accumulator.
    """
    if not trained:
        raise ConfigError("untrained-model: importance weights are fitted on a trained model")
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ConfigError(f"fit_importance: expected a (c, h, w) feature map, got {fmap.shape}")
    frozen = _frozen_view(joint)
    label_joints = _project_labels(frozen, label_embeddings)
    y = np.asarray(targets_row, dtype=np.float64)
    fmap_t = Tensor(fmap)
    grid_shape = fmap.shape[1:]

    weights = Tensor(np.ones(grid_shape), requires_grad=True)
    accumulator = np.zeros(grid_shape)
    optimizer = Adam({"importance": weights}, lr=config.learning_rate)
    for iteration in range(1, config.epochs + 1):
        optimizer.zero_grad()
        loss = _image_loss(frozen, fmap_t, y, label_joints, weights)
        loss.backward()
        optimizer.step()
        np.clip(weights.data, 0.0, 1.0, out=weights.data)
        weights.data[...] = normalize_importance(weights.data)
        grid = loss_change_taylor(joint, fmap, y, label_embeddings, weights.data)
        accumulator = momentum_update(accumulator, grid, iteration, config.momentum_cap)
    return ImportanceMap(importance=weights.data.copy(), accumulator=accumulator,
                         iteration=config.epochs)


def sigma_grid(state: ImportanceMap) -> np.ndarray:
    """Sigmoid of the accumulator; what the selection threshold is applied to."""
    return 1.0 / (1.0 + np.exp(-state.accumulator))


def select_features(state: ImportanceMap, threshold: float) -> np.ndarray:
    """Boolean keep-mask: sigma(accumulator) >= threshold.

    The accumulator is nonnegative, so threshold 0.5 keeps every cell and
    reduces the pipeline to the base model.
    """
    validate_threshold(threshold)
    return sigma_grid(state) >= threshold


def selection_with_fallback(mask: np.ndarray, image_id: str = "?") -> np.ndarray:
    """Guard against empty selections: an all-false mask falls back to all-true."""
    if not mask.any():
        log.warning("selection mask for image %s dropped every cell; keeping all", image_id)
        return np.ones_like(mask, dtype=bool)
    return mask


def write_importance_grid(path, grid: np.ndarray):
    """Write a (h, w) grid as text, one row per line."""
    grid = np.asarray(grid)
    with open(path, "w", encoding="utf-8") as handle:
        for row in grid:
            handle.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def write_selection_mask(path, mask: np.ndarray):
    with open(path, "w", encoding="utf-8") as handle:
        for row in np.asarray(mask).astype(int):
            handle.write(" ".join(str(v) for v in row) + "\n")
