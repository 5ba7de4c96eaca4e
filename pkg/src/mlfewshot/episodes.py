"""Dataset manifests, episode sampling, and a synthetic planted-signal generator.

A manifest is UTF-8 JSON-lines, one record per line with fields id, features
(path relative to the manifest), and labels; '#' lines are comments.  An
episode draws K support images per label and a fixed 4 query images per
label, all without replacement across the whole episode.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingTable, LabelVocabulary, write_embedding_file, write_vocabulary
from .errors import DataError, InsufficientImagesError
from .features import write_feature_file

log = logging.getLogger(__name__)

QUERY_PER_LABEL = 4


@dataclass
class ManifestRecord:
    image_id: str
    features: str          # path relative to the manifest file
    labels: tuple[str, ...]


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]
    by_label: dict[str, list[int]] = field(default_factory=dict)
    by_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_label:
            for idx, record in enumerate(self.records):
                self.by_id[record.image_id] = idx
                for label in record.labels:
                    self.by_label.setdefault(label, []).append(idx)

    def feature_path(self, index: int) -> Path:
        return self.root / self.records[index].features

    def record_for(self, image_id: str) -> ManifestRecord:
        if image_id not in self.by_id:
            raise DataError(f"no-such-image: {image_id!r} is not in the manifest")
        return self.records[self.by_id[image_id]]


def load_manifest(path, vocabulary: LabelVocabulary | None = None,
                  check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest {path} does not exist")
    records = []
    ids = set()
    known = set(vocabulary.all_labels()) if vocabulary is not None else None
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as bad:
                raise DataError(f"manifest {path}: line {lineno} is not valid JSON") from bad
            if not isinstance(obj, dict) or not {"id", "features", "labels"} <= obj.keys():
                raise DataError(f"manifest {path}: line {lineno} lacks id/features/labels")
            labels = tuple(obj["labels"])
            if not labels:
                raise DataError(f"manifest {path}: image {obj['id']!r} has no labels")
            if obj["id"] in ids:
                raise DataError(f"manifest {path}: duplicate image id {obj['id']!r}")
            ids.add(obj["id"])
            if known is not None:
                unknown = [l for l in labels if l not in known]
                if unknown:
                    raise DataError(
                        f"manifest {path}: image {obj['id']!r} has labels outside the vocabulary: {unknown}"
                    )
            records.append(ManifestRecord(str(obj["id"]), str(obj["features"]), labels))
    if not records:
        raise DataError(f"manifest {path} lists no images")
    manifest = DatasetManifest(root=path.parent, records=records)
    if check_files:
        for idx in range(len(records)):
            feature_file = manifest.feature_path(idx)
            if not feature_file.is_file():
                raise DataError(f"manifest {path}: feature file {feature_file} is missing")
    return manifest


def write_manifest(path, records, provenance: str | None = None):
    with open(path, "w", encoding="utf-8") as handle:
        if provenance:
            handle.write(f"# {provenance}\n")
        for record in records:
            handle.write(json.dumps(
                {"id": record.image_id, "features": record.features, "labels": list(record.labels)},
                sort_keys=True) + "\n")


def records_for_split(manifest: DatasetManifest, vocabulary: LabelVocabulary,
                      split: str) -> list[int]:
    """Indices of images whose labels all belong to the split."""
    allowed = set(vocabulary.labels_for(split))
    return [i for i, r in enumerate(manifest.records) if set(r.labels) <= allowed]


@dataclass
class Episode:
    """One few-shot task: labels, support and query ids, multi-hot targets
    restricted to the episode's label set."""

    labels: tuple[str, ...]
    k_shot: int
    support_ids: tuple[str, ...]
    support_targets: np.ndarray   # (k_shot * n_labels, n_labels)
    query_ids: tuple[str, ...]
    query_targets: np.ndarray     # (4 * n_labels, n_labels)
    query_per_label: int = QUERY_PER_LABEL


def _multi_hot(manifest, ids, labels) -> np.ndarray:
    index = {label: i for i, label in enumerate(labels)}
    out = np.zeros((len(ids), len(labels)), dtype=np.float64)
    for row, image_id in enumerate(ids):
        for label in manifest.record_for(image_id).labels:
            if label in index:
                out[row, index[label]] = 1.0
    return out


def _draw_for_labels(manifest, pool, labels, per_label, excluded, rng):
    """Draw `per_label` fresh images carrying each label, label order seeded.

    An image picked for one label also counts toward any other label it
    carries, but every label still draws `per_label` fresh images.
    """
    chosen: list[int] = []
    chosen_set = set(excluded)
    order = [labels[i] for i in rng.permutation(len(labels))]
    for label in order:
        candidates = sorted(set(manifest.by_label.get(label, ())) & pool - chosen_set)
        if len(candidates) < per_label:
            raise InsufficientImagesError(label, per_label, len(candidates))
        picks = rng.choice(len(candidates), size=per_label, replace=False)
        for p in sorted(picks):
            chosen.append(candidates[p])
            chosen_set.add(candidates[p])
    return chosen


def sample_episode(manifest: DatasetManifest, record_pool, labels, k_shot: int,
                   rng, query_per_label: int = QUERY_PER_LABEL) -> Episode:
    """Sample a K-shot episode over the given labels from a record pool.

    Support gets exactly k_shot * len(labels) distinct images; queries get
    query_per_label per label, disjoint from support.  Raises
    InsufficientImagesError when a label cannot be covered.
    """
    labels = tuple(labels)
    if not labels:
        raise DataError("episode needs at least one label")
    if k_shot < 1:
        raise DataError(f"k_shot must be >= 1, got {k_shot}")
    pool = set(record_pool)
    support = _draw_for_labels(manifest, pool, labels, k_shot, set(), rng)
    query = _draw_for_labels(manifest, pool, labels, query_per_label, set(support), rng)
    support_ids = tuple(manifest.records[i].image_id for i in support)
    query_ids = tuple(manifest.records[i].image_id for i in query)
    return Episode(
        labels=labels,
        k_shot=k_shot,
        support_ids=support_ids,
        support_targets=_multi_hot(manifest, support_ids, labels),
        query_ids=query_ids,
        query_targets=_multi_hot(manifest, query_ids, labels),
        query_per_label=query_per_label,
    )


def sample_episode_with_retries(manifest, record_pool, labels, k_shot, make_rng,
                                retries: int = 20, query_per_label: int = QUERY_PER_LABEL) -> Episode:
    """Resample with fresh seeds up to `retries` times before giving up.

    make_rng(attempt) must return a fresh deterministic generator per attempt.
    """
    last = None
    for attempt in range(retries):
        try:
            return sample_episode(manifest, record_pool, labels, k_shot, make_rng(attempt),
                                  query_per_label=query_per_label)
        except InsufficientImagesError as err:
            last = err
    raise last


def validate_episode(episode: Episode, manifest: DatasetManifest | None = None) -> list[str]:
    """Return a list of invariant violations; empty means the episode is sound."""
    problems = []
    n = len(episode.labels)
    if len(episode.support_ids) != episode.k_shot * n:
        problems.append(
            f"support size {len(episode.support_ids)} != k_shot*labels {episode.k_shot * n}"
        )
    if len(episode.query_ids) != episode.query_per_label * n:
        problems.append(
            f"query size {len(episode.query_ids)} != {episode.query_per_label}*labels"
        )
    if len(set(episode.support_ids)) != len(episode.support_ids):
        problems.append("support ids are not distinct")
    if len(set(episode.query_ids)) != len(episode.query_ids):
        problems.append("query ids are not distinct")
    overlap = set(episode.support_ids) & set(episode.query_ids)
    if overlap:
        problems.append(f"support and query overlap: {sorted(overlap)}")
    support_cover = episode.support_targets.sum(axis=0)
    query_cover = episode.query_targets.sum(axis=0)
    for i, label in enumerate(episode.labels):
        if support_cover[i] < episode.k_shot:
            problems.append(f"label {label!r} has {int(support_cover[i])} support images, needs {episode.k_shot}")
        if query_cover[i] < episode.query_per_label:
            problems.append(f"label {label!r} has {int(query_cover[i])} query images, needs {episode.query_per_label}")
    if manifest is not None:
        for image_id in episode.support_ids + episode.query_ids:
            manifest.record_for(image_id)  # raises on unknown ids
    return problems


@dataclass
class SyntheticDataset:
    """Paths and ground truth for a generated planted-signal dataset."""

    manifest_path: Path
    splits_path: Path
    embeddings_path: Path
    cells_path: Path
    vocabulary: LabelVocabulary
    signatures: dict[str, np.ndarray]          # label -> unit feature-space direction
    cell_labels: dict[str, list[list[str | None]]]  # image id -> per-cell planted label


def make_synthetic(out_dir, *, n_base=8, n_validation=0, n_novel=4, images_per_label=40,
                   grid=(6, 6), channels=32, embed_dim=16, signal_fraction=0.5,
                   signal_noise=0.3, background_scale=1.0, extra_label_prob=0.5,
                   seed=0) -> SyntheticDataset:
    """Generate feature files, manifest, split file, and embedding file.

    Each label gets a random unit word embedding; its feature-space
    signature is a fixed linear map of that embedding, normalized.  The map
    has orthonormal columns, so signature geometry mirrors embedding
    geometry exactly.  Every image plants its labels' signatures (plus
    white noise of scale `signal_noise`) in disjoint random cell sets
    covering `signal_fraction` of the grid; remaining cells are pure white
    noise of scale `background_scale`.  With signal_fraction 1.0 and zero
    noise, every cell equals one of the image's signatures exactly.
    """
    if not 0.0 < signal_fraction <= 1.0:
        raise DataError(f"signal_fraction must lie in (0, 1], got {signal_fraction}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feature_dir = out_dir / "features"
    feature_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = grid

    names = [f"lab{i:02d}" for i in range(n_base + n_validation + n_novel)]
    vocabulary = LabelVocabulary(
        base=tuple(names[:n_base]),
        validation=tuple(names[n_base:n_base + n_validation]),
        novel=tuple(names[n_base + n_validation:]),
    )

    # embeddings and feature signatures share one fixed linear relation;
    # orthonormal columns keep signature cosines equal to embedding cosines
    relation = np.linalg.qr(rng.standard_normal((channels, embed_dim)))[0]
    embeddings = {}
    signatures = {}
    for name in names:
        vec = rng.standard_normal(embed_dim)
        vec /= np.linalg.norm(vec)
        embeddings[name] = vec
        sig = relation @ vec
        signatures[name] = sig / np.linalg.norm(sig)

    split_of = {name: vocabulary.split_of(name) for name in names}
    same_split = {name: [n for n in names if split_of[n] == split_of[name] and n != name]
                  for name in names}

    records = []
    cell_labels: dict[str, list[list[str | None]]] = {}
    n_signal = max(1, round(signal_fraction * h * w))
    counter = 0
    for name in names:
        for _ in range(images_per_label):
            image_labels = [name]
            others = same_split[name]
            if others and rng.random() < extra_label_prob:
                image_labels.append(others[rng.integers(len(others))])
            cells = rng.permutation(h * w)[:n_signal]
            assignment: list[str | None] = [None] * (h * w)
            for pos, cell in enumerate(cells):
                assignment[cell] = image_labels[pos % len(image_labels)]
            fmap = np.empty((channels, h, w))
            for cell in range(h * w):
                row, col = divmod(cell, w)
                if assignment[cell] is None:
                    fmap[:, row, col] = background_scale * rng.standard_normal(channels)
                else:
                    fmap[:, row, col] = signatures[assignment[cell]] \
                        + signal_noise * rng.standard_normal(channels)
            image_id = f"img{counter:05d}"
            counter += 1
            rel = f"features/{image_id}.fmap"
            write_feature_file(feature_dir / f"{image_id}.fmap", fmap)
            records.append(ManifestRecord(image_id, rel, tuple(sorted(set(image_labels)))))
            cell_labels[image_id] = [
                [assignment[r * w + c] for c in range(w)] for r in range(h)
            ]

    provenance = f"synthetic planted-signal dataset, seed {seed}"
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, records, provenance=provenance)
    splits_path = out_dir / "labels.tsv"
    write_vocabulary(splits_path, vocabulary, provenance=provenance)
    embeddings_path = out_dir / "embeddings.txt"
    write_embedding_file(embeddings_path, EmbeddingTable(embed_dim, embeddings))
    cells_path = out_dir / "cells.json"
    with open(cells_path, "w", encoding="utf-8") as handle:
        json.dump(cell_labels, handle, sort_keys=True)

    return SyntheticDataset(
        manifest_path=manifest_path,
        splits_path=splits_path,
        embeddings_path=embeddings_path,
        cells_path=cells_path,
        vocabulary=vocabulary,
        signatures=signatures,
        cell_labels=cell_labels,
    )
