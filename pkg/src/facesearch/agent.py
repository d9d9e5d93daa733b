"""Recurrent controller, weighted-product reward, and PPO search loop.

The controller is a single-layer gated recurrent cell (update/reset gates).
It emits one token per searched parameter, in the fixed order data cleaning
-> loss design -> architecture: step i consumes the embedding of the token
sampled at step i-1 (a learned start vector at step 0) and scores grid i's
values with a per-step linear head.

Candidates are scored with R = acc * (cost / target_cost) ** alpha, a
weighted-product scalarization of the accuracy/compute trade-off (alpha < 0
penalizes cost).  The policy maximizes expected reward with a clipped PPO
surrogate: advantages are rewards minus an exponential-moving-average
baseline, the ratio is clipped per step, an entropy bonus discourages early
collapse, and the update is an Adam-style ascent with exact gradients
backpropagated through the recurrent cell.

Candidate evaluation between sampling and update is embarrassingly parallel;
per-candidate RNG streams are derived from (global seed, sample index) so
results never depend on scheduling order.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, cleaner, traineval
from .backbone import BaseArch
from .cleaner import CleanParams, DegenerateDatasetError
from .marginloss import DegenerateEmbeddingError
from .searchspace import PARAM_NAMES, Combination, SearchSpace
from .synthdata import LabeledDataset, PairSet
from .traineval import DivergedError, EvalSpec, TrainBudget

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"FSCP"
_CKPT_VERSION = 1

_GRU_KEYS = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    update_epochs: int = 4
    lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    baseline_decay: float = 0.95
    entropy_coef: float = 0.01
    alpha: float = -0.07  # reward cost exponent
    target_cost: float | None = None  # defaults to FLOPs of the unscaled backbone

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.lr <= 0.0 or self.update_epochs < 1:
            raise ValueError("lr must be positive and update_epochs >= 1")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")


@dataclass
class Trajectory:
    tokens: tuple[int, ...]
    logprobs: np.ndarray  # (steps,)
    reward: float | None = None
    acc: float | None = None
    cost: float | None = None


@dataclass
class ControllerPolicy:
    """Parameter container for the recurrent controller."""

    params: dict[str, np.ndarray]
    hidden_size: int
    token_embed_dim: int
    grid_sizes: tuple[int, ...]

    @classmethod
    def create(
        cls,
        space: SearchSpace,
        hidden_size: int = 64,
        token_embed_dim: int = 16,
        seed=0,
    ) -> "ControllerPolicy":
        """Small random GRU/embedding weights; zero heads (uniform first step)."""
        rng = np.random.default_rng(seed)
        sizes = space.sizes
        e, h = token_embed_dim, hidden_size
        p: dict[str, np.ndarray] = {"start": rng.uniform(-0.1, 0.1, size=e)}
        for g, size in enumerate(sizes[:-1]):
            p[f"emb{g}"] = rng.uniform(-0.1, 0.1, size=(size, e))
        for key in _GRU_KEYS:
            if key.startswith("w"):
                p[key] = rng.uniform(-0.1, 0.1, size=(e, h))
            elif key.startswith("u"):
                p[key] = rng.uniform(-0.1, 0.1, size=(h, h))
            else:
                p[key] = np.zeros(h)
        for t, size in enumerate(sizes):
            p[f"head_w{t}"] = np.zeros((h, size))
            p[f"head_b{t}"] = np.zeros(size)
        return cls(params=p, hidden_size=h, token_embed_dim=e, grid_sizes=sizes)

    @property
    def n_steps(self) -> int:
        return len(self.grid_sizes)

    def clone(self) -> "ControllerPolicy":
        return ControllerPolicy(
            params={k: v.copy() for k, v in self.params.items()},
            hidden_size=self.hidden_size,
            token_embed_dim=self.token_embed_dim,
            grid_sizes=self.grid_sizes,
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gru_step(p: dict[str, np.ndarray], x: np.ndarray, h: np.ndarray):
    z = _sigmoid(x @ p["w_z"] + h @ p["u_z"] + p["b_z"])
    r = _sigmoid(x @ p["w_r"] + h @ p["u_r"] + p["b_r"])
    g = np.tanh(x @ p["w_h"] + (r * h) @ p["u_h"] + p["b_h"])
    h_new = (1.0 - z) * h + z * g
    return h_new, (x, h, z, r, g)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def _forced_forward(policy: ControllerPolicy, tokens: np.ndarray):
    """Run the cell along fixed token sequences; cache everything for BPTT."""
    p = policy.params
    bsz = tokens.shape[0]
    h = np.zeros((bsz, policy.hidden_size))
    x = np.broadcast_to(p["start"], (bsz, policy.token_embed_dim)).copy()
    caches, logps, hiddens = [], [], []
    for t in range(policy.n_steps):
        h, cache = _gru_step(p, x, h)
        caches.append(cache)
        hiddens.append(h)
        logits = h @ p[f"head_w{t}"] + p[f"head_b{t}"]
        logps.append(_log_softmax(logits))
        if t < policy.n_steps - 1:
            x = p[f"emb{t}"][tokens[:, t]]
    return logps, hiddens, caches


def sequence_logprobs(policy: ControllerPolicy, tokens: np.ndarray) -> np.ndarray:
    """Per-step log-probabilities of given token sequences, (B, steps)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    logps, _, _ = _forced_forward(policy, tokens)
    rows = np.arange(tokens.shape[0])
    return np.stack([lp[rows, tokens[:, t]] for t, lp in enumerate(logps)], axis=1)


def sequence_probability(policy: ControllerPolicy, tokens) -> float:
    """Probability that sampling emits exactly this token sequence."""
    lp = sequence_logprobs(policy, np.asarray([tokens], dtype=np.int64))
    return float(np.exp(lp.sum()))


def greedy_tokens(policy: ControllerPolicy) -> tuple[int, ...]:
    """Most likely token at every step, feeding each choice forward."""
    p = policy.params
    h = np.zeros((1, policy.hidden_size))
    x = p["start"][None, :]
    out = []
    for t in range(policy.n_steps):
        h, _ = _gru_step(p, x, h)
        logits = h @ p[f"head_w{t}"] + p[f"head_b{t}"]
        tok = int(np.argmax(logits[0]))
        out.append(tok)
        if t < policy.n_steps - 1:
            x = p[f"emb{t}"][[tok]]
    return tuple(out)


def sample_batch(
    policy: ControllerPolicy, space: SearchSpace, batch_size: int, seed
) -> list[Trajectory]:
    """Sample token sequences (deterministic under seed); rewards unfilled."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if space.sizes != policy.grid_sizes:
        raise ValueError("search space does not match the policy's heads")
    rng = np.random.default_rng(seed)
    p = policy.params
    h = np.zeros((batch_size, policy.hidden_size))
    x = np.broadcast_to(p["start"], (batch_size, policy.token_embed_dim)).copy()
    tokens = np.zeros((batch_size, policy.n_steps), dtype=np.int64)
    logprobs = np.zeros((batch_size, policy.n_steps))
    rows = np.arange(batch_size)
    for t in range(policy.n_steps):
        h, _ = _gru_step(p, x, h)
        logits = h @ p[f"head_w{t}"] + p[f"head_b{t}"]
        logp = _log_softmax(logits)
        probs = np.exp(logp)
        u = rng.random(batch_size)
        cum = np.cumsum(probs, axis=1)
        tok = np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)
        tokens[:, t] = tok
        logprobs[:, t] = logp[rows, tok]
        if t < policy.n_steps - 1:
            x = p[f"emb{t}"][tok]
    return [
        Trajectory(tokens=tuple(int(v) for v in tokens[j]), logprobs=logprobs[j])
        for j in range(batch_size)
    ]


def reward(acc: float, cost: float, cfg: PpoConfig) -> float:
    """Weighted-product reward acc * (cost/target)**alpha."""
    if cost <= 0.0:
        raise ValueError("cost must be positive")
    if cfg.target_cost is None or cfg.target_cost <= 0.0:
        raise ValueError("cfg.target_cost must be set and positive")
    if not 0.0 <= acc <= 1.0:
        raise ValueError("acc must lie in [0, 1]")
    return float(acc * (cost / cfg.target_cost) ** cfg.alpha)


@dataclass
class PpoState:
    """Optimizer and baseline state carried across updates."""

    baseline: float | None = None
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, policy: ControllerPolicy) -> "PpoState":
        return cls(
            adam_m={k: np.zeros_like(v) for k, v in policy.params.items()},
            adam_v={k: np.zeros_like(v) for k, v in policy.params.items()},
        )


def _backprop_steps(
    policy: ControllerPolicy,
    tokens: np.ndarray,
    caches: list,
    hiddens: list,
    dlogits: list[np.ndarray],
) -> dict[str, np.ndarray]:
    """BPTT through heads, cell, embeddings and the start vector."""
    p = policy.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh = np.zeros_like(hiddens[0])
    for t in range(policy.n_steps - 1, -1, -1):
        grads[f"head_w{t}"] += hiddens[t].T @ dlogits[t]
        grads[f"head_b{t}"] += dlogits[t].sum(axis=0)
        dh = dh + dlogits[t] @ p[f"head_w{t}"].T

        x, h_prev, z, r, g = caches[t]
        dz = dh * (g - h_prev)
        dg = dh * z
        dh_prev = dh * (1.0 - z)

        dg_pre = dg * (1.0 - g * g)
        grads["w_h"] += x.T @ dg_pre
        grads["u_h"] += (r * h_prev).T @ dg_pre
        grads["b_h"] += dg_pre.sum(axis=0)
        d_rh = dg_pre @ p["u_h"].T
        dr = d_rh * h_prev
        dh_prev = dh_prev + d_rh * r

        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        grads["w_z"] += x.T @ dz_pre
        grads["u_z"] += h_prev.T @ dz_pre
        grads["b_z"] += dz_pre.sum(axis=0)
        grads["w_r"] += x.T @ dr_pre
        grads["u_r"] += h_prev.T @ dr_pre
        grads["b_r"] += dr_pre.sum(axis=0)
        dh_prev = dh_prev + dz_pre @ p["u_z"].T + dr_pre @ p["u_r"].T

        dx = dz_pre @ p["w_z"].T + dr_pre @ p["w_r"].T + dg_pre @ p["w_h"].T
        if t == 0:
            grads["start"] += dx.sum(axis=0)
        else:
            np.add.at(grads[f"emb{t - 1}"], tokens[:, t - 1], dx)
        dh = dh_prev
    return grads


def _surrogate_terms(
    policy: ControllerPolicy,
    tokens: np.ndarray,
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    cfg: PpoConfig,
):
    logps, hiddens, caches = _forced_forward(policy, tokens)
    bsz = tokens.shape[0]
    rows = np.arange(bsz)
    new_lp = np.stack([lp[rows, tokens[:, t]] for t, lp in enumerate(logps)], axis=1)
    ratio = np.exp(new_lp - old_logprobs)
    adv = advantages[:, None]
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
    surr = np.minimum(ratio * adv, clipped * adv)
    probs = [np.exp(lp) for lp in logps]
    entropy = np.stack([-(pr * lp).sum(axis=1) for pr, lp in zip(probs, logps)], axis=1)
    objective = float((surr.sum() + cfg.entropy_coef * entropy.sum()) / bsz)
    return objective, (logps, hiddens, caches, ratio, adv, entropy, probs, new_lp)


def surrogate_objective(
    policy: ControllerPolicy,
    tokens: np.ndarray,
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    cfg: PpoConfig,
) -> float:
    """Clipped-surrogate-plus-entropy objective (mean over the batch)."""
    return _surrogate_terms(policy, tokens, old_logprobs, advantages, cfg)[0]


def surrogate_and_grads(
    policy: ControllerPolicy,
    tokens: np.ndarray,
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    cfg: PpoConfig,
):
    """Objective value, exact parameter gradients, and diagnostics."""
    objective, parts = _surrogate_terms(policy, tokens, old_logprobs, advantages, cfg)
    logps, hiddens, caches, ratio, adv, entropy, probs, _ = parts
    bsz = tokens.shape[0]
    rows = np.arange(bsz)

    # min(r*A, clip(r)*A) passes gradient only where the ratio is unclipped
    unclipped = np.where(
        adv >= 0.0, ratio <= 1.0 + cfg.clip_epsilon, ratio >= 1.0 - cfg.clip_epsilon
    )
    coef = adv * ratio * unclipped / bsz

    dlogits = []
    for t, (lp, pr) in enumerate(zip(logps, probs)):
        d = -pr * coef[:, t][:, None]
        d[rows, tokens[:, t]] += coef[:, t]
        if cfg.entropy_coef:
            d += (cfg.entropy_coef / bsz) * (-pr * (lp + entropy[:, t][:, None]))
        dlogits.append(d)

    grads = _backprop_steps(policy, tokens, caches, hiddens, dlogits)
    diag = {
        "objective": objective,
        "clip_fraction": float(1.0 - unclipped.mean()),
        "entropy": float(entropy.mean()),
    }
    return objective, grads, diag


def _adam_step(
    policy: ControllerPolicy, grads: dict[str, np.ndarray], state: PpoState, cfg: PpoConfig
) -> None:
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for k, g in grads.items():
        m = state.adam_m[k]
        v = state.adam_v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**state.t)
        v_hat = v / (1.0 - b2**state.t)
        # ascent: we maximize the surrogate
        policy.params[k] += cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def ppo_update(
    policy: ControllerPolicy,
    trajectories: list[Trajectory],
    cfg: PpoConfig,
    state: PpoState,
) -> dict:
    """One PPO update over a reward-filled batch; mutates policy and state."""
    if any(t.reward is None for t in trajectories):
        raise ValueError("all trajectories must have rewards before the update")
    rewards = np.array([t.reward for t in trajectories], dtype=float)
    tokens = np.array([t.tokens for t in trajectories], dtype=np.int64)
    old_lp = np.stack([t.logprobs for t in trajectories])

    if state.baseline is None:
        state.baseline = float(rewards.mean())
    advantages = rewards - state.baseline

    snapshot = {k: v.copy() for k, v in policy.params.items()}
    adam_snapshot = (
        {k: v.copy() for k, v in state.adam_m.items()},
        {k: v.copy() for k, v in state.adam_v.items()},
        state.t,
    )
    diag: dict = {"mean_reward": float(rewards.mean()), "baseline": state.baseline}
    for _ in range(cfg.update_epochs):
        objective, grads, inner = surrogate_and_grads(
            policy, tokens, old_lp, advantages, cfg
        )
        if not np.isfinite(objective) or any(
            not np.all(np.isfinite(g)) for g in grads.values()
        ):
            policy.params = snapshot
            state.adam_m, state.adam_v, state.t = adam_snapshot
            diag["aborted"] = True
            logger.warning("non-finite PPO objective; update dropped")
            break
        _adam_step(policy, grads, state, cfg)
        diag.update(inner)
    state.baseline = cfg.baseline_decay * state.baseline + (
        1.0 - cfg.baseline_decay
    ) * float(rewards.mean())
    return diag


# ---------------------------------------------------------------------------
# search loop
# ---------------------------------------------------------------------------


@dataclass
class SearchRecord:
    epoch: int
    candidate: int
    tokens: tuple[int, ...]
    combination: Combination
    acc: float
    cost: float
    reward: float
    wall_time: float = 0.0


_CSV_COLUMNS = ("epoch", "candidate", "tokens") + PARAM_NAMES + ("acc", "cost", "reward")


class SearchLog:
    """Append-only record of every sampled candidate, CSV round-trippable."""

    def __init__(self, records: list[SearchRecord] | None = None):
        self.records: list[SearchRecord] = records or []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: SearchRecord) -> None:
        self.records.append(record)

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=float)

    def moving_average(self, window: int) -> np.ndarray:
        r = self.rewards()
        if len(r) < window:
            return np.array([])
        kernel = np.ones(window) / window
        return np.convolve(r, kernel, mode="valid")

    def top_k(self, k: int) -> list[SearchRecord]:
        """Highest-reward records, deduplicated by token sequence."""
        best: dict[tuple[int, ...], SearchRecord] = {}
        for rec in self.records:
            cur = best.get(rec.tokens)
            if cur is None or rec.reward > cur.reward:
                best[rec.tokens] = rec
        ranked = sorted(
            best.values(), key=lambda r: (-r.reward, r.epoch, r.candidate)
        )
        return ranked[:k]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for r in self.records:
                combo = r.combination.as_dict()
                writer.writerow(
                    [r.epoch, r.candidate, "-".join(str(t) for t in r.tokens)]
                    + [repr(combo[name]) for name in PARAM_NAMES]
                    + [repr(r.acc), int(r.cost), repr(r.reward)]
                )

    @classmethod
    def read_csv(cls, path: str) -> "SearchLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != list(_CSV_COLUMNS):
                raise ValueError(f"{path}: unexpected search log columns")
            for row in reader:
                combo = Combination.from_dict({n: float(row[n]) for n in PARAM_NAMES})
                log.append(
                    SearchRecord(
                        epoch=int(row["epoch"]),
                        candidate=int(row["candidate"]),
                        tokens=tuple(int(t) for t in row["tokens"].split("-")),
                        combination=combo,
                        acc=float(row["acc"]),
                        cost=float(row["cost"]),
                        reward=float(row["reward"]),
                    )
                )
        return log


@dataclass
class SearchSetup:
    """Everything the sample-eval-update loop needs, already in memory."""

    space: SearchSpace
    train_ds: LabeledDataset  # uncleaned; cleaning is part of each candidate
    val_ds: LabeledDataset
    val_pairs: PairSet
    base_arch: BaseArch
    proxy_budget: TrainBudget
    eval_spec: EvalSpec
    ppo: PpoConfig
    epochs: int
    batch_size: int
    seed: int = 0
    threads: int = 0
    hidden_size: int = 64
    token_embed_dim: int = 16


@dataclass
class SearchResult:
    log: SearchLog
    policy: ControllerPolicy
    state: PpoState
    ppo: PpoConfig


def evaluate_candidate(
    combination: Combination, setup: SearchSetup, ppo_cfg: PpoConfig, seed: int
) -> tuple[float, float, float, str, float]:
    """Clean, train one proxy budget, score; failures score exactly zero."""
    t0 = time.perf_counter()
    try:
        cfg = backbone.expand(
            setup.base_arch, combination.depth_ratio, combination.width_ratio
        )
        cost = float(backbone.flops(cfg))
    except ValueError:
        return 0.0, 0.0, 0.0, "bad_arch", time.perf_counter() - t0
    try:
        cleaned, _ = cleaner.clean(
            setup.train_ds,
            CleanParams(combination.tau_intra, combination.tau_inter),
        )
        budget = replace(setup.proxy_budget, seed=seed)
        model = traineval.train_candidate(combination, cleaned, setup.base_arch, budget)
        acc = traineval.acc_metric(model, setup.val_ds, setup.val_pairs, setup.eval_spec)
        return acc, cost, reward(acc, cost, ppo_cfg), "ok", time.perf_counter() - t0
    except (DegenerateDatasetError, DivergedError, DegenerateEmbeddingError) as exc:
        logger.warning("candidate %s failed: %s", combination.as_tuple(), exc)
        return 0.0, cost, 0.0, type(exc).__name__, time.perf_counter() - t0


def _candidate_seed(global_seed: int, sample_index: int) -> int:
    return int(
        np.random.SeedSequence([global_seed, 2, sample_index]).generate_state(1)[0]
    )


def run_search(setup: SearchSetup) -> SearchResult:
    """Sample -> evaluate -> PPO-update for ``epochs`` rounds of ``batch_size``."""
    ppo_cfg = setup.ppo
    if ppo_cfg.target_cost is None:
        base_cfg = backbone.expand(setup.base_arch, 1.0, 1.0)
        ppo_cfg = replace(ppo_cfg, target_cost=float(backbone.flops(base_cfg)))

    policy = ControllerPolicy.create(
        setup.space,
        hidden_size=setup.hidden_size,
        token_embed_dim=setup.token_embed_dim,
        seed=np.random.SeedSequence([setup.seed, 0]),
    )
    state = PpoState.init(policy)
    log = SearchLog()
    counter = 0
    for epoch in range(1, setup.epochs + 1):
        trajs = sample_batch(
            policy, setup.space, setup.batch_size, np.random.SeedSequence([setup.seed, 1, epoch])
        )
        combos = [setup.space.decode(t.tokens) for t in trajs]
        seeds = [_candidate_seed(setup.seed, counter + j) for j in range(len(trajs))]

        if setup.threads and setup.threads > 1:
            with ThreadPoolExecutor(max_workers=setup.threads) as pool:
                results = list(
                    pool.map(
                        lambda args: evaluate_candidate(args[0], setup, ppo_cfg, args[1]),
                        zip(combos, seeds),
                    )
                )
        else:
            results = [
                evaluate_candidate(c, setup, ppo_cfg, s) for c, s in zip(combos, seeds)
            ]

        for j, (traj, combo, (acc, cost, rew, status, wall)) in enumerate(
            zip(trajs, combos, results)
        ):
            traj.reward, traj.acc, traj.cost = rew, acc, cost
            log.append(
                SearchRecord(
                    epoch=epoch,
                    candidate=j,
                    tokens=traj.tokens,
                    combination=combo,
                    acc=acc,
                    cost=cost,
                    reward=rew,
                    wall_time=wall,
                )
            )
        ppo_update(policy, trajs, ppo_cfg, state)
        counter += len(trajs)
    return SearchResult(log=log, policy=policy, state=state, ppo=ppo_cfg)


# ---------------------------------------------------------------------------
# controller checkpointing
# ---------------------------------------------------------------------------


def save_controller(
    policy: ControllerPolicy, state: PpoState, path: str, extra: dict | None = None
) -> None:
    """Versioned binary checkpoint: JSON header plus raw f64 parameter blobs."""
    keys = sorted(policy.params)
    header = {
        "hidden_size": policy.hidden_size,
        "token_embed_dim": policy.token_embed_dim,
        "grid_sizes": list(policy.grid_sizes),
        "keys": keys,
        "shapes": {k: list(policy.params[k].shape) for k in keys},
        "baseline": state.baseline,
        "adam_t": state.t,
        "extra": extra or {},
    }
    head_bytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for source in (policy.params, state.adam_m, state.adam_v):
            for k in keys:
                fh.write(np.ascontiguousarray(source[k], dtype="<f8").tobytes())


def load_controller(path: str) -> tuple[ControllerPolicy, PpoState, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a controller checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode())
    off = 12 + hlen
    stores: list[dict[str, np.ndarray]] = []
    for _ in range(3):
        store = {}
        for k in header["keys"]:
            shape = tuple(header["shapes"][k])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
            off += arr.nbytes
            store[k] = arr.reshape(shape).copy()
        stores.append(store)
    policy = ControllerPolicy(
        params=stores[0],
        hidden_size=int(header["hidden_size"]),
        token_embed_dim=int(header["token_embed_dim"]),
        grid_sizes=tuple(int(s) for s in header["grid_sizes"]),
    )
    state = PpoState(
        baseline=header["baseline"], adam_m=stores[1], adam_v=stores[2], t=int(header["adam_t"])
    )
    return policy, state, header.get("extra", {})
