"""Ranking metrics and episodic evaluation.

Average precision ranks by descending score with ties broken by original
position; episode-level numbers are averaged unweighted across episodes.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import seeding
from .autodiff import Tensor
from .embeddings import embed_label
from .episodes import records_for_split, sample_episode_with_retries
from .errors import ConfigError
from .features import global_pool
from .joint_space import project_visual, zero_shot_probabilities
from .lcm import LcmConfig, fit_importance, select_features, selection_with_fallback, sigma_grid
from .model import (
    FeatureStore,
    ModelState,
    build_pools,
    episode_prototypes,
    feature_map_tensor,
    local_feature_rows,
    score_against,
)
from .prototypes import simple_attention_prototype

EVAL_MODES = ("base", "lcm", "zeroshot", "simple-attention")


class UndefinedAveragePrecision(ValueError):
    """Raised when AP is requested for a target vector with no positives."""


def average_precision(scores, targets) -> float:
    """AP of one ranking: mean precision at each positive's rank.

    Descending score order; equal scores keep their original relative order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ConfigError(f"average_precision: {s.shape} scores vs {y.shape} targets")
    positives = y.sum()
    if positives == 0:
        raise UndefinedAveragePrecision("undefined-ap: no positive targets")
    order = np.lexsort((np.arange(s.size), -s))
    ranked = y[order]
    cumulative = np.cumsum(ranked)
    ranks = np.arange(1, s.size + 1)
    precision_at_positives = (cumulative / ranks)[ranked > 0]
    return float(precision_at_positives.sum() / positives)


def micro_average_precision(score_matrix, target_matrix) -> float:
    """AP over every (image, label) pair pooled into one ranking."""
    s = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(target_matrix, dtype=np.float64)
    if s.shape != y.shape:
        raise ConfigError(f"micro_average_precision: {s.shape} vs {y.shape}")
    return average_precision(s.reshape(-1), y.reshape(-1))


def per_label_average_precision(score_matrix, target_matrix, labels) -> dict[str, float]:
    """AP per column; columns without positives are skipped."""
    s = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(target_matrix, dtype=np.float64)
    out = {}
    for li, label in enumerate(labels):
        if y[:, li].sum() == 0:
            continue
        out[label] = average_precision(s[:, li], y[:, li])
    return out


def macro_average_precision(score_matrix, target_matrix, labels) -> float:
    """Mean of the per-label APs that are defined."""
    per_label = per_label_average_precision(score_matrix, target_matrix, labels)
    if not per_label:
        raise UndefinedAveragePrecision("undefined-ap: no label has positive targets")
    return float(np.mean(list(per_label.values())))


def f1_scores(prob_matrix, target_matrix) -> tuple[float, float]:
    """(micro, macro) F1 at the fixed threshold: predict iff probability > 0.5.

    A label with no true and no predicted positives scores 0 and still
    counts toward the macro mean.
    """
    p = np.asarray(prob_matrix, dtype=np.float64)
    y = np.asarray(target_matrix, dtype=np.float64)
    if p.shape != y.shape:
        raise ConfigError(f"f1_scores: {p.shape} vs {y.shape}")
    predicted = p > 0.5
    actual = y > 0.5

    def f1(pred, act):
        tp = float(np.logical_and(pred, act).sum())
        fp = float(np.logical_and(pred, ~act).sum())
        fn = float(np.logical_and(~pred, act).sum())
        denom = 2 * tp + fp + fn
        return 0.0 if denom == 0 else 2 * tp / denom

    micro = f1(predicted.reshape(-1), actual.reshape(-1))
    macro = float(np.mean([f1(predicted[:, li], actual[:, li]) for li in range(y.shape[1])]))
    return micro, macro


@dataclass
class MetricsReport:
    micro_ap: float
    macro_ap: float
    micro_f1: float
    macro_f1: float
    per_label_ap: dict[str, float] = field(default_factory=dict)
    episodes: int = 0

    def to_dict(self) -> dict:
        return {
            "micro_ap": self.micro_ap,
            "macro_ap": self.macro_ap,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "per_label_ap": {k: self.per_label_ap[k] for k in sorted(self.per_label_ap)},
            "episodes": self.episodes,
        }


def _episode_probabilities(model: ModelState, episode, store, embeddings_by_label,
                           mode, theta, lcm_config, collect_detail):
    """Score every query image against every episode label; returns
    (probability matrix, detail rows)."""
    labels = list(episode.labels)
    label_joints = {
        label: Tensor(model.joint.text.data @ embeddings_by_label[label])
        for label in labels
    }
    query_maps = [feature_map_tensor(model, store.get(i)) for i in episode.query_ids]
    query_globals = [global_pool(m) for m in query_maps]
    detail = []

    if mode == "zeroshot":
        probs = zero_shot_probabilities(model.joint, query_globals,
                                        [label_joints[label] for label in labels])
        return probs, detail

    support_maps = [feature_map_tensor(model, store.get(i)) for i in episode.support_ids]

    if mode == "simple-attention":
        projected = [project_visual(model.joint, global_pool(m)) for m in support_maps]
        vectors = []
        for li, label in enumerate(labels):
            members = [projected[i] for i in range(len(projected))
                       if episode.support_targets[i, li] > 0]
            vectors.append(simple_attention_prototype(members, label_joints[label],
                                                      model.joint.scale))
        _, matrix = score_against(model.joint, query_globals, vectors)
        return expit(matrix), detail

    grid = (support_maps[0].shape[1], support_maps[0].shape[2])
    masks = None
    if mode == "lcm":
        embed_matrix = np.stack([embeddings_by_label[label] for label in labels])
        masks = []
        for i, image_id in enumerate(episode.support_ids):
            state = fit_importance(model.joint, support_maps[i].data,
                                   episode.support_targets[i], embed_matrix,
                                   lcm_config, trained=model.trained)
            mask = selection_with_fallback(select_features(state, theta), image_id)
            masks.append(mask)
            if collect_detail:
                detail.append({
                    "image_id": image_id,
                    "sigma": sigma_grid(state),
                    "mask": mask,
                    "importance": state.importance,
                })
    projections = [local_feature_rows(model.joint, m) for m in support_maps]
    pools = build_pools(labels, episode.support_targets, projections, grid, masks)
    protos = episode_prototypes(model, pools, label_joints, training=False)
    _, matrix = score_against(model.joint, query_globals,
                              [protos[label].vector for label in labels])
    return expit(matrix), detail


def evaluate(model: ModelState, manifest, vocabulary, table, *, split="novel",
             episodes=50, k_shot=1, seed=0, mode="base", theta=0.65,
             lcm_config: LcmConfig | None = None, store=None,
             normalize_embeddings=False, collect_detail=False, retries=20,
             threads=1) -> tuple[MetricsReport, list]:
    """Evaluate over seeded episodes of the given split.

    Episode sampling depends only on (seed, episode index), so different
    modes at the same seed see identical episodes.  Detail rows carry the
    per-support-image importance data in "lcm" mode when asked.
    """
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown-mode: {mode!r} is not one of {EVAL_MODES}")
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    if mode == "lcm" and lcm_config is None:
        lcm_config = LcmConfig(threshold=theta)
    if store is None:
        store = FeatureStore(manifest)
    labels = list(vocabulary.labels_for(split))
    if not labels:
        raise ConfigError(f"split {split!r} has no labels")
    record_pool = records_for_split(manifest, vocabulary, split)
    embeddings_by_label = {
        label: embed_label(table, label, normalize=normalize_embeddings)
        for label in labels
    }

    def run_episode(idx):
        episode = sample_episode_with_retries(
            manifest, record_pool, labels, k_shot,
            lambda attempt: seeding.substream(seed, "eval", idx, attempt),
            retries=retries)
        probs, detail = _episode_probabilities(model, episode, store, embeddings_by_label,
                                               mode, theta, lcm_config, collect_detail)
        targets = episode.query_targets
        row = {
            "micro_ap": micro_average_precision(probs, targets),
            "macro_ap": macro_average_precision(probs, targets, episode.labels),
            "per_label_ap": per_label_average_precision(probs, targets, episode.labels),
        }
        row["micro_f1"], row["macro_f1"] = f1_scores(probs, targets)
        for entry in detail:
            entry["episode"] = idx
        return row, detail

    if threads == 1:
        results = [run_episode(idx) for idx in range(episodes)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_episode, range(episodes)))

    rows = [r for r, _ in results]
    all_detail = [entry for _, d in results for entry in d]
    per_label_values: dict[str, list[float]] = {}
    for row in rows:
        for label, value in row["per_label_ap"].items():
            per_label_values.setdefault(label, []).append(value)
    report = MetricsReport(
        micro_ap=float(np.mean([r["micro_ap"] for r in rows])),
        macro_ap=float(np.mean([r["macro_ap"] for r in rows])),
        micro_f1=float(np.mean([r["micro_f1"] for r in rows])),
        macro_f1=float(np.mean([r["macro_f1"] for r in rows])),
        per_label_ap={label: float(np.mean(vals)) for label, vals in per_label_values.items()},
        episodes=episodes,
    )
    return report, all_detail
