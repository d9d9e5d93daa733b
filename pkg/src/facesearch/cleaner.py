"""Discriminability-guided data cleaning.

Two steps, applied in order:

1. inter-class merging: class pairs whose (unit) centroid cosine exceeds
   ``tau_inter`` are unioned transitively; each merged group is relabeled to
   its smallest original class id.  Merging changes centroids, so they are
   recomputed under the merged labels before filtering.
2. intra-class filtering: a sample's discriminability is the ratio of its
   cosine similarity to its own class centroid over its similarity to the
   hardest (most similar) negative centroid.  Samples whose ratio falls
   below ``tau_intra`` are removed.

Boundary rule: merging requires a strict ``> tau_inter``; removal requires a
strict ``< tau_intra``.  A sample whose hardest-negative similarity is
nonpositive has an undefined ratio; it is the farthest kind of sample from
every negative class, so it is kept and counted in the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .synthdata import TRUTH_CLEAN, TRUTH_FLIP, TRUTH_OUTLIER, LabeledDataset


class EmptyClassError(ValueError):
    """A class referenced by the labels has no member samples."""


class DegenerateCentroidError(ValueError):
    """Class mean has (numerically) zero norm and cannot be normalized."""


class UndefinedRatioError(ValueError):
    """Hardest-negative similarity is nonpositive; the ratio is undefined."""


class DegenerateDatasetError(RuntimeError):
    """Cleaning left fewer than two classes."""


@dataclass(frozen=True)
class CleanParams:
    """Thresholds for the two cleaning steps.

    ``leave_one_out`` excludes the sample itself from its own-class centroid
    when computing discriminability (off by default: the centroid is the
    plain class mean, sample included).
    """

    tau_intra: float
    tau_inter: float
    leave_one_out: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_intra <= 1.0 or not 0.0 <= self.tau_inter <= 1.0:
            raise ValueError("cleaning thresholds must lie in [0, 1]")


@dataclass
class CentroidTable:
    centroids: np.ndarray  # (K, d), unit-norm rows
    class_sizes: np.ndarray  # (K,)

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]


@dataclass
class CleanReport:
    """Bookkeeping of one cleaning run, against ground truth when present."""

    kept_indices: np.ndarray
    removed_indices: np.ndarray
    merge_map: np.ndarray  # original class id -> merged representative id
    output_label_map: np.ndarray  # original class id -> compacted output id (-1 dropped)
    dropped_classes: list[int] = field(default_factory=list)
    n_undefined_ratio: int = 0
    noise_precision: float = float("nan")
    noise_recall: float = float("nan")
    outlier_recall: float = float("nan")
    flip_recall: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "kept_indices": [int(i) for i in self.kept_indices],
            "removed_indices": [int(i) for i in self.removed_indices],
            "merge_map": [int(i) for i in self.merge_map],
            "output_label_map": [int(i) for i in self.output_label_map],
            "dropped_classes": [int(i) for i in self.dropped_classes],
            "n_undefined_ratio": self.n_undefined_ratio,
            "noise_precision": self.noise_precision,
            "noise_recall": self.noise_recall,
            "outlier_recall": self.outlier_recall,
            "flip_recall": self.flip_recall,
        }


def class_centroids(
    embeddings: np.ndarray, labels: np.ndarray, n_classes: int | None = None
) -> CentroidTable:
    """Unit-normalized per-class means (each sample contributes to its own class)."""
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 0
    sizes = np.bincount(labels, minlength=n_classes)
    if np.any(sizes == 0):
        empty = np.flatnonzero(sizes == 0)
        raise EmptyClassError(f"classes without samples: {empty.tolist()}")
    sums = np.zeros((n_classes, embeddings.shape[1]))
    np.add.at(sums, labels, embeddings)
    means = sums / sizes[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms < 1e-12):
        bad = np.flatnonzero(norms < 1e-12)
        raise DegenerateCentroidError(f"zero-norm class means: {bad.tolist()}")
    return CentroidTable(centroids=means / norms[:, None], class_sizes=sizes)


def discriminability(
    i: int, embeddings: np.ndarray, labels: np.ndarray, table: CentroidTable
) -> float:
    """Own-centroid similarity over hardest-negative similarity for sample ``i``."""
    if table.n_classes < 2:
        raise ValueError("discriminability needs at least 2 classes")
    sims = table.centroids @ embeddings[i]
    p = int(labels[i])
    pos = sims[p]
    neg = np.delete(sims, p)
    hardest = float(neg.max())
    if hardest <= 0.0:
        raise UndefinedRatioError(
            f"sample {i}: hardest-negative similarity {hardest} is nonpositive"
        )
    return float(pos / hardest)


def discriminability_scores(
    embeddings: np.ndarray,
    labels: np.ndarray,
    table: CentroidTable,
    leave_one_out: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized discriminability for every sample.

    Returns (scores, undefined); ``undefined`` marks samples whose hardest
    negative similarity is nonpositive (their score entry is +inf).
    """
    if table.n_classes < 2:
        raise ValueError("discriminability needs at least 2 classes")
    sims = embeddings @ table.centroids.T  # (n, K)
    rows = np.arange(len(labels))
    pos = sims[rows, labels].copy()
    if leave_one_out:
        # own-class centroid with the sample removed; falls back to the
        # plain centroid for singleton classes
        sums = np.zeros((table.n_classes, embeddings.shape[1]))
        np.add.at(sums, labels, embeddings)
        loo = sums[labels] - embeddings
        counts = table.class_sizes[labels] - 1
        loo_norm = np.linalg.norm(loo, axis=1)
        ok = (counts > 0) & (loo_norm > 1e-12)
        with np.errstate(invalid="ignore", divide="ignore"):
            pos_loo = np.einsum("ij,ij->i", embeddings, loo) / loo_norm
        pos = np.where(ok, pos_loo, pos)
    masked = sims.copy()
    masked[rows, labels] = -np.inf
    hardest = masked.max(axis=1)
    undefined = hardest <= 0.0
    scores = np.full(len(labels), np.inf)
    defined = ~undefined
    scores[defined] = pos[defined] / hardest[defined]
    return scores, undefined


def merge_classes(table: CentroidTable, tau_inter: float) -> np.ndarray:
    """Union classes whose centroid cosine strictly exceeds ``tau_inter``.

    Merging is transitive; the returned map sends every class id to the
    smallest id in its merged group (idempotent by construction).
    """
    k = table.n_classes
    parent = np.arange(k)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    # fp rounding on unit rows can push a cosine past 1.0; clip so a
    # threshold of exactly 1.0 merges nothing
    sims = np.clip(table.centroids @ table.centroids.T, -1.0, 1.0)
    for i in range(k):
        for j in range(i + 1, k):
            if sims[i, j] > tau_inter:
                ri, rj = find(i), find(j)
                if ri != rj:
                    # keep the smaller id as representative
                    lo, hi = (ri, rj) if ri < rj else (rj, ri)
                    parent[hi] = lo
    merge_map = np.array([find(i) for i in range(k)], dtype=np.int64)
    return merge_map


def clean(ds: LabeledDataset, params: CleanParams) -> tuple[LabeledDataset, CleanReport]:
    """Merge near-duplicate classes, then drop low-discriminability samples.

    Output labels are compacted to [0, K'); the report records which input
    rows were kept/removed, the class merge map, and detection quality
    against the dataset's ground-truth noise annotations.
    """
    ds.validate()
    emb, labels = ds.clean_embeddings, ds.labels
    k = ds.n_classes

    table0 = class_centroids(emb, labels, k)
    merge_map = merge_classes(table0, params.tau_inter)

    reps = np.unique(merge_map)
    if len(reps) < 2:
        raise DegenerateDatasetError("merging collapsed the dataset to a single class")
    dense_of_rep = {int(r): i for i, r in enumerate(reps)}
    dense_labels = np.array([dense_of_rep[int(merge_map[c])] for c in labels])

    table1 = class_centroids(emb, dense_labels, len(reps))
    scores, undefined = discriminability_scores(
        emb, dense_labels, table1, leave_one_out=params.leave_one_out
    )
    removed_mask = (scores < params.tau_intra) & ~undefined
    kept_mask = ~removed_mask

    surviving = np.unique(dense_labels[kept_mask])
    if len(surviving) < 2:
        raise DegenerateDatasetError("fewer than two classes survive cleaning")
    dropped_dense = np.setdiff1d(np.arange(len(reps)), surviving)
    dropped_classes = sorted(int(reps[d]) for d in dropped_dense)

    compact = np.full(len(reps), -1, dtype=np.int64)
    compact[surviving] = np.arange(len(surviving))

    # original class id -> output id (through merge + compaction)
    output_label_map = np.array(
        [compact[dense_of_rep[int(merge_map[c])]] for c in range(k)], dtype=np.int64
    )

    kept_indices = np.flatnonzero(kept_mask)
    out = ds.subset(kept_indices)
    out.labels = compact[dense_labels[kept_mask]]
    orig = out.truth_original
    out.truth_original = np.where(orig >= 0, output_label_map[orig], -1)
    out.n_classes = int(len(surviving))

    report = CleanReport(
        kept_indices=kept_indices,
        removed_indices=np.flatnonzero(removed_mask),
        merge_map=merge_map,
        output_label_map=output_label_map,
        dropped_classes=dropped_classes,
        n_undefined_ratio=int(undefined.sum()),
    )
    _score_against_truth(ds, removed_mask, report)
    return out, report


def _score_against_truth(
    ds: LabeledDataset, removed_mask: np.ndarray, report: CleanReport
) -> None:
    noise_mask = ds.truth_kind != TRUTH_CLEAN
    n_removed = int(removed_mask.sum())
    n_noise = int(noise_mask.sum())
    hit = removed_mask & noise_mask
    if n_removed:
        report.noise_precision = float(hit.sum() / n_removed)
    if n_noise:
        report.noise_recall = float(hit.sum() / n_noise)
    out_mask = ds.truth_kind == TRUTH_OUTLIER
    flip_mask = ds.truth_kind == TRUTH_FLIP
    if out_mask.any():
        report.outlier_recall = float((removed_mask & out_mask).sum() / out_mask.sum())
    if flip_mask.any():
        report.flip_recall = float((removed_mask & flip_mask).sum() / flip_mask.sum())
