"""Candidate training and verification scoring.

A candidate couples cleaned data, loss parameters and an expanded network.
Training is plain SGD with momentum and weight decay over shuffled
mini-batches; the class-weight matrix of the loss is trained jointly with
the network.  Scoring is the weighted sum of TAR@FAR values over a list of
FAR targets, computed from cosine scores on a fixed verification pair set
with an exact step-function empirical ROC (no interpolation).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import backbone, marginloss
from .backbone import BaseArch, Network
from .marginloss import DegenerateEmbeddingError, LossParams
from .searchspace import Combination
from .synthdata import LabeledDataset, PairSet

logger = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainBudget:
    mode: str  # "proxy" (search-time scoring) or "full" (retraining)
    epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple[float, ...] = ()  # epoch fractions where lr decays
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("proxy", "full"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for f in self.milestones if epoch >= int(f * self.epochs))
        return self.lr * self.decay_factor**decays


@dataclass(frozen=True)
class EvalSpec:
    far_targets: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.far_targets) != len(self.weights) or not self.far_targets:
            raise ValueError("far_targets and weights must be same nonempty length")
        if any(not 0.0 < f < 1.0 for f in self.far_targets):
            raise ValueError("far targets must lie in (0, 1)")
        if any(b >= a for a, b in zip(self.far_targets, self.far_targets[1:])):
            raise ValueError("far targets must be strictly decreasing")
        if any(w <= 0.0 for w in self.weights):
            raise ValueError("weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @classmethod
    def desk_default(cls) -> "EvalSpec":
        """Two reachable FAR targets for small impostor pools."""
        return cls(far_targets=(1e-2, 1e-3), weights=(0.5, 0.5))

    @classmethod
    def three_far(cls) -> "EvalSpec":
        """The three-target weighting used at full benchmark scale."""
        return cls(far_targets=(1e-3, 1e-4, 1e-5), weights=(0.5, 0.25, 0.25))


@dataclass
class TrainedModel:
    network: Network
    class_weights: np.ndarray
    loss_trace: list[float]


def train_candidate(
    combination: Combination,
    train_ds: LabeledDataset,
    base_arch: BaseArch,
    budget: TrainBudget,
) -> TrainedModel:
    """SGD-train one candidate on an already-cleaned dataset."""
    if train_ds.n_classes < 2:
        raise ValueError("training requires at least 2 classes")
    ss = np.random.SeedSequence(budget.seed)
    net_seed, w_seed, shuffle_seed = ss.spawn(3)

    net = backbone.instantiate(
        base_arch, combination.depth_ratio, combination.width_ratio, net_seed
    )
    loss_params = LossParams(
        m1=combination.m1,
        m2=combination.m2,
        m3=combination.m3,
        s_p=combination.s_p,
        s_n=combination.s_n,
    )
    k, d = train_ds.n_classes, base_arch.embed_dim
    w_rng = np.random.default_rng(w_seed)
    class_weights = w_rng.uniform(-np.sqrt(6.0 / d), np.sqrt(6.0 / d), size=(k, d))

    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    vel_cw = np.zeros_like(class_weights)

    rng = np.random.default_rng(shuffle_seed)
    x_all, y_all = train_ds.features, train_ds.labels
    n = train_ds.n
    step = 0
    trace: list[float] = []
    for epoch in range(budget.epochs):
        lr = budget.lr_at(epoch)
        perm = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, budget.batch_size):
            idx = perm[start : start + budget.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            emb, cache = backbone.forward(net, xb)
            loss, _ = marginloss.loss_forward(emb, yb, class_weights, loss_params)
            if not np.isfinite(loss):
                raise DivergedError(step)
            grad_emb, grad_cw = marginloss.loss_backward(emb, yb, class_weights, loss_params)
            grad_w, grad_b = backbone.backward(net, cache, grad_emb)

            wd = budget.weight_decay
            for w, v, g in zip(net.weights, vel_w, grad_w):
                v *= budget.momentum
                v += g + wd * w
                w -= lr * v
            for b, v, g in zip(net.biases, vel_b, grad_b):
                v *= budget.momentum
                v += g + wd * b
                b -= lr * v
            vel_cw *= budget.momentum
            vel_cw += grad_cw + wd * class_weights
            class_weights -= lr * vel_cw

            epoch_losses.append(loss)
            step += 1
        trace.append(float(np.mean(epoch_losses)))
    return TrainedModel(network=net, class_weights=class_weights, loss_trace=trace)


def embed(model: TrainedModel | Network, features: np.ndarray) -> np.ndarray:
    """Unit-normalized embeddings of raw features."""
    net = model.network if isinstance(model, TrainedModel) else model
    raw, _ = backbone.forward(net, features)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("zero-norm embedding produced by the network")
    return raw / norms[:, None]


def evaluate_pairs(
    model: TrainedModel | Network, ds: LabeledDataset, pairset: PairSet
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores for every pair, split into (genuine, impostor)."""
    emb = embed(model, ds.features)
    scores = np.einsum("ij,ij->i", emb[pairset.a], emb[pairset.b])
    return scores[pairset.is_genuine], scores[~pairset.is_genuine]


def tar_at_far(
    genuine: np.ndarray, impostor: np.ndarray, far_target: float
) -> float:
    """True-accept rate at the most permissive threshold meeting the FAR target.

    The threshold is the smallest impostor score t with
    fraction(impostor >= t) <= far_target.  If even the largest impostor
    score fails the target, the threshold sits just above it and TAR counts
    genuine scores strictly greater than the impostor maximum.
    """
    genuine = np.asarray(genuine, dtype=float)
    impostor = np.asarray(impostor, dtype=float)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("score lists must be non-empty")
    if far_target * impostor.size < 1.0:
        logger.warning(
            "far target %g is below 1/%d; TAR will be resolution-limited",
            far_target,
            impostor.size,
        )
    imp_sorted = np.sort(impostor)
    candidates = np.unique(imp_sorted)
    # fraction of impostors >= each candidate threshold (decreasing)
    count_ge = impostor.size - np.searchsorted(imp_sorted, candidates, side="left")
    ok = count_ge / impostor.size <= far_target
    if np.any(ok):
        t = candidates[np.argmax(ok)]  # smallest qualifying impostor score
        return float(np.mean(genuine >= t))
    return float(np.mean(genuine > imp_sorted[-1]))


def acc_metric(
    model: TrainedModel | Network, ds: LabeledDataset, pairset: PairSet, spec: EvalSpec
) -> float:
    """Weighted TAR@FAR over the spec's targets."""
    gen, imp = evaluate_pairs(model, ds, pairset)
    return float(
        sum(w * tar_at_far(gen, imp, f) for f, w in zip(spec.far_targets, spec.weights))
    )
