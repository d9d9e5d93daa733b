"""Synthetic identity datasets with controlled intra- and inter-class noise.

Each sample is a point near one of ``n_classes`` directions drawn uniformly
on the unit hypersphere.  Two noise mechanisms are injected with ground-truth
bookkeeping:

* outliers: the sample is replaced by a uniform random unit vector and
  belongs to no class (intra-class noise once labeled);
* label flips: the sample keeps its clean geometry but is relabeled to a
  different class (inter-class noise).  Flips stay detectable precisely
  because their geometry still matches the original class.

``clean_embeddings`` stand in for features from a pretrained extractor and
drive the cleaning stage; ``features`` are a fixed random linear lift of the
embeddings plus small noise and are what candidate networks train on.

All generation is a pure function of (spec, seed): equal inputs produce
byte-identical datasets.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

TRUTH_CLEAN = 0
TRUTH_OUTLIER = 1
TRUTH_FLIP = 2

_TRUTH_NAMES = {TRUTH_CLEAN: "clean", TRUTH_OUTLIER: "outlier", TRUTH_FLIP: "flip"}

_MAGIC = b"FSDS"
_FORMAT_VERSION = 1

# scale of the additive noise applied to the lifted raw features
_LIFT_NOISE = 0.01


class InsufficientPairsError(ValueError):
    """Requested more verification pairs than the dataset can supply."""


@dataclass(frozen=True)
class DatasetSpec:
    """Generation parameters for one synthetic identity dataset."""

    n_classes: int
    samples_per_class: int
    feature_dim: int
    embed_dim: int
    intra_spread: float
    outlier_rate: float
    flip_rate: float
    seed: int
    embed_noise: float = 0.0  # optional corruption of the cleaning embeddings

    def __post_init__(self) -> None:
        if self.n_classes < 2 or self.feature_dim < 2 or self.embed_dim < 2:
            raise ValueError("n_classes, feature_dim and embed_dim must all be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0.0 <= self.outlier_rate <= 1.0 or not 0.0 <= self.flip_rate <= 1.0:
            raise ValueError("noise rates must lie in [0, 1]")
        if self.outlier_rate + self.flip_rate > 0.5:
            raise ValueError("outlier_rate + flip_rate must not exceed 0.5")
        if self.intra_spread < 0.0 or self.embed_noise < 0.0:
            raise ValueError("noise scales must be nonnegative")


@dataclass
class LabeledDataset:
    """Feature vectors with identity labels and ground-truth noise annotations.

    ``truth_kind`` holds TRUTH_CLEAN/TRUTH_OUTLIER/TRUTH_FLIP per sample;
    ``truth_original`` holds the class the sample really belongs to (-1 for
    outliers, the pre-flip class for flips, the label itself for clean rows).
    """

    features: np.ndarray
    labels: np.ndarray
    truth_kind: np.ndarray
    truth_original: np.ndarray
    clean_embeddings: np.ndarray
    n_classes: int

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def validate(self) -> None:
        n = self.n
        if not (
            len(self.labels) == len(self.truth_kind) == len(self.truth_original) == n
            and self.clean_embeddings.shape[0] == n
        ):
            raise ValueError("inconsistent array lengths")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels reference nonexistent classes")
        norms = np.linalg.norm(self.clean_embeddings, axis=1)
        if n and np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("clean_embeddings rows must be unit-norm")

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            truth_kind=self.truth_kind[idx].copy(),
            truth_original=self.truth_original[idx].copy(),
            clean_embeddings=self.clean_embeddings[idx].copy(),
            n_classes=self.n_classes,
        )


@dataclass
class PairSet:
    """Verification pairs: index pairs plus the ground-truth genuine flag."""

    a: np.ndarray
    b: np.ndarray
    is_genuine: np.ndarray

    def __len__(self) -> int:
        return len(self.a)

    def validate(self) -> None:
        if not len(self.a) == len(self.b) == len(self.is_genuine):
            raise ValueError("inconsistent pair arrays")
        if np.any(self.a == self.b):
            raise ValueError("self-pairs are not allowed")


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm row cannot be normalized")
    return m / norms


def true_identity(ds: LabeledDataset) -> np.ndarray:
    """Ground-truth identity per sample; outliers get unique negative ids."""
    ident = ds.truth_original.copy()
    out = ds.truth_kind == TRUTH_OUTLIER
    ident[out] = -1 - np.flatnonzero(out)
    return ident


def generate_dataset(spec: DatasetSpec) -> LabeledDataset:
    """Generate one dataset; identical spec (including seed) gives identical bytes."""
    rng = np.random.default_rng(spec.seed)
    k, m = spec.n_classes, spec.samples_per_class
    n = k * m

    directions = _unit_rows(rng.standard_normal((k, spec.embed_dim)))
    labels = np.repeat(np.arange(k, dtype=np.int64), m)
    emb = directions[labels]
    if spec.intra_spread > 0.0:
        emb = emb + spec.intra_spread * rng.standard_normal((n, spec.embed_dim))
    emb = _unit_rows(emb)

    truth_kind = np.full(n, TRUTH_CLEAN, dtype=np.int64)
    truth_original = labels.copy()

    n_out = int(round(spec.outlier_rate * n))
    n_flip = int(round(spec.flip_rate * n))
    noisy = rng.choice(n, size=n_out + n_flip, replace=False)
    out_idx, flip_idx = noisy[:n_out], noisy[n_out:]

    if n_out:
        emb[out_idx] = _unit_rows(rng.standard_normal((n_out, spec.embed_dim)))
        truth_kind[out_idx] = TRUTH_OUTLIER
        truth_original[out_idx] = -1
    if n_flip:
        # relabel to a uniformly chosen *different* class; geometry untouched
        shift = rng.integers(1, k, size=n_flip)
        labels[flip_idx] = (labels[flip_idx] + shift) % k
        truth_kind[flip_idx] = TRUTH_FLIP

    clean_embeddings = emb
    if spec.embed_noise > 0.0:
        clean_embeddings = _unit_rows(
            emb + spec.embed_noise * rng.standard_normal((n, spec.embed_dim))
        )

    lift = rng.standard_normal((spec.embed_dim, spec.feature_dim))
    features = emb @ lift + _LIFT_NOISE * rng.standard_normal((n, spec.feature_dim))

    ds = LabeledDataset(
        features=features,
        labels=labels,
        truth_kind=truth_kind,
        truth_original=truth_original,
        clean_embeddings=clean_embeddings,
        n_classes=k,
    )
    ds.validate()
    return ds


def max_interclass_cosine(ds: LabeledDataset) -> float:
    """Largest cosine between ground-truth class centroids.

    Tests use this to pick seeds whose classes are comfortably separated.
    """
    ident = true_identity(ds)
    keep = ident >= 0
    classes = np.unique(ident[keep])
    if len(classes) < 2:
        return -1.0
    cents = np.stack(
        [ds.clean_embeddings[keep][ident[keep] == c].mean(axis=0) for c in classes]
    )
    cents = _unit_rows(cents)
    sims = cents @ cents.T
    np.fill_diagonal(sims, -np.inf)
    return float(sims.max())


def split(
    ds: LabeledDataset, val_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class stratified sample split into (train, val)."""
    if not 0.0 < val_fraction < 0.5:
        raise ValueError("val_fraction must lie strictly between 0 and 0.5")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples; cannot split")
        n_val = int(np.floor(len(members) * val_fraction + 0.5))
        n_val = min(max(n_val, 1), len(members) - 1)
        perm = rng.permutation(members)
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    train = ds.subset(np.sort(np.concatenate(train_idx)))
    val = ds.subset(np.sort(np.concatenate(val_idx)))
    return train, val


def split_classes(
    ds: LabeledDataset, heldout_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Split by identity: (main, heldout) where heldout classes never overlap main.

    The heldout part keeps its original (non-compacted) labels; it is meant
    for verification pairs, which only consult ground-truth identities.  The
    main part is relabeled to a dense [0, K_main) range.
    """
    if not 0.0 < heldout_fraction < 1.0:
        raise ValueError("heldout_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    k = ds.n_classes
    n_held = min(max(int(np.floor(k * heldout_fraction + 0.5)), 1), k - 2)
    held_classes = np.sort(rng.choice(k, size=n_held, replace=False))
    held_mask = np.isin(ds.labels, held_classes)

    held = ds.subset(np.flatnonzero(held_mask))
    main = ds.subset(np.flatnonzero(~held_mask))

    main_classes = np.setdiff1d(np.arange(k), held_classes)
    remap = np.full(k, -1, dtype=np.int64)
    remap[main_classes] = np.arange(len(main_classes))
    main.labels = remap[main.labels]
    orig = main.truth_original
    main.truth_original = np.where(orig >= 0, remap[orig], -1)
    main.n_classes = len(main_classes)
    return main, held


def _genuine_counts(ident: np.ndarray) -> int:
    ids, counts = np.unique(ident[ident >= 0], return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def build_pairset(
    ds: LabeledDataset, n_genuine: int, n_impostor: int, seed: int
) -> PairSet:
    """Sample verification pairs without replacement.

    Genuine pairs share a ground-truth identity (flips pair by their original
    class); any pair involving an outlier is an impostor pair.
    """
    if n_genuine < 0 or n_impostor < 0:
        raise ValueError("pair counts must be nonnegative")
    n = ds.n
    ident = true_identity(ds)
    total_pairs = n * (n - 1) // 2
    avail_genuine = _genuine_counts(ident)
    avail_impostor = total_pairs - avail_genuine
    if n_genuine > avail_genuine:
        raise InsufficientPairsError(
            f"requested {n_genuine} genuine pairs, only {avail_genuine} exist"
        )
    if n_impostor > avail_impostor:
        raise InsufficientPairsError(
            f"requested {n_impostor} impostor pairs, only {avail_impostor} exist"
        )

    rng = np.random.default_rng(seed)
    if n <= 3000:
        ia, ib = np.triu_indices(n, k=1)
        genuine_mask = ident[ia] == ident[ib]
        gen_pool = np.flatnonzero(genuine_mask)
        imp_pool = np.flatnonzero(~genuine_mask)
        gen_pick = rng.choice(gen_pool, size=n_genuine, replace=False)
        imp_pick = rng.choice(imp_pool, size=n_impostor, replace=False)
        pick = np.concatenate([gen_pick, imp_pick])
        flags = np.concatenate(
            [np.ones(n_genuine, dtype=bool), np.zeros(n_impostor, dtype=bool)]
        )
        pairs = PairSet(a=ia[pick], b=ib[pick], is_genuine=flags)
    else:
        # large datasets: enumerate genuine pairs per identity, rejection-sample impostors
        gen_list: list[tuple[int, int]] = []
        for c in np.unique(ident[ident >= 0]):
            members = np.flatnonzero(ident == c)
            for i in range(len(members)):
                for j in range(i + 1, len(members)):
                    gen_list.append((members[i], members[j]))
        gen_pick = rng.choice(len(gen_list), size=n_genuine, replace=False)
        chosen = {(int(gen_list[g][0]), int(gen_list[g][1])) for g in gen_pick}
        imp: list[tuple[int, int]] = []
        seen: set[tuple[int, int]] = set()
        while len(imp) < n_impostor:
            i, j = (int(v) for v in rng.integers(0, n, size=2))
            if i == j:
                continue
            key = (min(i, j), max(i, j))
            if key in seen or ident[key[0]] == ident[key[1]]:
                continue
            seen.add(key)
            imp.append(key)
        a = np.array([p[0] for p in sorted(chosen)] + [p[0] for p in imp], dtype=np.int64)
        b = np.array([p[1] for p in sorted(chosen)] + [p[1] for p in imp], dtype=np.int64)
        flags = np.concatenate(
            [np.ones(n_genuine, dtype=bool), np.zeros(n_impostor, dtype=bool)]
        )
        pairs = PairSet(a=a, b=b, is_genuine=flags)

    pairs.validate()
    return pairs


def dataset_bytes(ds: LabeledDataset) -> bytes:
    """Binary dataset serialization (little-endian header, f64 matrices)."""
    ds.validate()
    header = _MAGIC + struct.pack(
        "<IQQQQ",
        _FORMAT_VERSION,
        ds.n,
        ds.features.shape[1],
        ds.clean_embeddings.shape[1],
        ds.n_classes,
    )
    parts = [
        header,
        np.ascontiguousarray(ds.features, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.clean_embeddings, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<i8").tobytes(),
        np.ascontiguousarray(ds.truth_kind, dtype="<i8").tobytes(),
        np.ascontiguousarray(ds.truth_original, dtype="<i8").tobytes(),
    ]
    return b"".join(parts)


def save_dataset(ds: LabeledDataset, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path: str) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    version, n, fdim, edim, k = struct.unpack("<IQQQQ", blob[4:40])
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {version}")
    off = 40

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
        off += arr.nbytes
        return arr

    features = take(n * fdim, "<f8").reshape(n, fdim)
    emb = take(n * edim, "<f8").reshape(n, edim)
    labels = take(n, "<i8")
    truth_kind = take(n, "<i8")
    truth_original = take(n, "<i8")
    ds = LabeledDataset(
        features=features,
        labels=labels,
        truth_kind=truth_kind,
        truth_original=truth_original,
        clean_embeddings=emb,
        n_classes=int(k),
    )
    ds.validate()
    return ds


def dataset_to_csv(ds: LabeledDataset, path: str) -> None:
    """Export as `id,label,truth,feat_0..`; truth is clean/outlier/flip:<orig>."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "label", "truth"] + [f"feat_{j}" for j in range(ds.features.shape[1])]
        )
        for i in range(ds.n):
            kind = _TRUTH_NAMES[int(ds.truth_kind[i])]
            if ds.truth_kind[i] == TRUTH_FLIP:
                kind = f"flip:{int(ds.truth_original[i])}"
            writer.writerow(
                [i, int(ds.labels[i]), kind] + [repr(float(v)) for v in ds.features[i]]
            )
