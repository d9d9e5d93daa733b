"""Command-line orchestration.

Subcommands: gen-data, clean, train-one, search, retrain, analyze, eval.
All commands except `clean` read a JSON run config; `search` produces a
self-describing run directory (manifest + dataset + log + checkpoints) that
`retrain`, `analyze` and `eval` consume.  Evaluation parallelism is capped
by the FACESEARCH_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import agent, backbone, cleaner, marginloss, synthdata, traineval
from .agent import PpoConfig, SearchLog, SearchSetup
from .backbone import BaseArch
from .cleaner import CleanParams
from .searchspace import PARAM_NAMES, Combination, SearchSpace, default_space
from .synthdata import DatasetSpec, LabeledDataset
from .traineval import EvalSpec, TrainBudget

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def difficulty(c: Combination) -> tuple[float, float]:
    """Training-difficulty summaries of a combination.

    Data difficulty rises when less is filtered (low tau_intra) and more is
    merged (high tau_inter); loss difficulty grows with the margins and with
    the negative-over-positive scale ratio.
    """
    if c.s_p <= 0.0:
        raise ValueError("s_p must be positive")
    d_data = 1.0 - c.tau_intra + c.tau_inter
    d_loss = c.s_n * (c.m1 - 1.0 + c.m2 + c.m3) / c.s_p
    return d_data, d_loss


def _rankdata(values: list[float]) -> list[float]:
    order = sorted((v, i) for i, v in enumerate(values))
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i + 1
        while j < len(order) and order[j][0] == order[i][0]:
            j += 1
        avg = (i + j + 1) / 2.0
        for k in range(i, j):
            ranks[order[k][1]] = avg
        i = j
    return ranks


def spearman(x: list[float], y: list[float]) -> float:
    if len(x) != len(y) or len(x) < 2:
        return float("nan")
    rx, ry = np.array(_rankdata(x)), np.array(_rankdata(y))
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


def _pick(d: dict, keys: tuple[str, ...], where: str) -> dict:
    unknown = set(d) - set(keys)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


@dataclass
class RunConfig:
    raw: dict
    seed: int
    out_dir: Path
    dataset: DatasetSpec
    dataset_path: Path
    space: SearchSpace
    val_fraction: float
    test_class_fraction: float
    split_seed: int
    n_genuine: int
    n_impostor: int
    pairs_seed: int
    base_arch: BaseArch
    proxy_budget: TrainBudget
    full_budget: TrainBudget
    eval_spec: EvalSpec
    ppo: PpoConfig
    hidden_size: int
    token_embed_dim: int
    epochs: int
    batch_size: int
    top_k: int
    combination: Combination | None = None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported config schema_version: {raw.get('schema_version')!r}"
        )

    out_dir = Path(raw.get("out_dir", "out"))
    ds_raw = dict(raw["dataset"])
    dataset_path = Path(ds_raw.pop("path", out_dir / "dataset.fsds"))
    dataset = DatasetSpec(**ds_raw)

    space_path = raw.get("space_path")
    if space_path is None:
        space = default_space()
    else:
        sp = Path(space_path)
        if not sp.is_file():
            raise ConfigError(f"space file not found: {sp}")
        space = SearchSpace.from_json(sp.read_text())

    split_raw = _pick(
        raw.get("split", {}), ("val_fraction", "test_class_fraction", "seed"), "split"
    )
    pairs_raw = _pick(raw.get("pairs", {}), ("n_genuine", "n_impostor", "seed"), "pairs")

    ppo_raw = dict(raw.get("ppo", {}))
    hidden_size = int(ppo_raw.pop("hidden_size", 64))
    token_embed_dim = int(ppo_raw.pop("token_embed_dim", 16))
    ppo = PpoConfig(**ppo_raw)

    search_raw = _pick(
        raw.get("search", {}), ("epochs", "batch_size", "top_k"), "search"
    )
    epochs = int(search_raw.get("epochs", 125))
    batch_size = int(search_raw.get("batch_size", 8))
    top_k = int(search_raw.get("top_k", 5))
    if epochs < 0 or batch_size < 1:
        raise ConfigError("search.epochs must be >= 0 and search.batch_size >= 1")
    if epochs and top_k > epochs * batch_size:
        raise ConfigError("search.top_k cannot exceed epochs * batch_size")

    combination = None
    if "combination" in raw:
        combination = Combination.from_dict(raw["combination"])

    return RunConfig(
        raw=raw,
        seed=int(raw.get("seed", 0)),
        out_dir=out_dir,
        dataset=dataset,
        dataset_path=dataset_path,
        space=space,
        val_fraction=float(split_raw.get("val_fraction", 0.25)),
        test_class_fraction=float(split_raw.get("test_class_fraction", 0.25)),
        split_seed=int(split_raw.get("seed", 0)),
        n_genuine=int(pairs_raw.get("n_genuine", 300)),
        n_impostor=int(pairs_raw.get("n_impostor", 3000)),
        pairs_seed=int(pairs_raw.get("seed", 0)),
        base_arch=BaseArch(**raw["base_arch"]),
        proxy_budget=TrainBudget(**raw["proxy_budget"]),
        full_budget=TrainBudget(**raw["full_budget"]),
        eval_spec=EvalSpec(
            far_targets=tuple(raw["eval"]["far_targets"]),
            weights=tuple(raw["eval"]["weights"]),
        ),
        ppo=ppo,
        hidden_size=hidden_size,
        token_embed_dim=token_embed_dim,
        epochs=epochs,
        batch_size=batch_size,
        top_k=top_k,
        combination=combination,
    )


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class PreparedData:
    dataset: LabeledDataset
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    val_pairs: synthdata.PairSet
    test_pairs: synthdata.PairSet
    dataset_sha256: str = ""


def prepare_data(cfg: RunConfig, generate_missing: bool = True) -> PreparedData:
    """Load or generate the dataset, then derive the fixed splits and pairs.

    The test split holds out whole identities; its pairs rank retrained
    models and are never touched during search.
    """
    if cfg.dataset_path.is_file():
        ds = synthdata.load_dataset(str(cfg.dataset_path))
    elif generate_missing:
        ds = synthdata.generate_dataset(cfg.dataset)
        cfg.dataset_path.parent.mkdir(parents=True, exist_ok=True)
        synthdata.save_dataset(ds, str(cfg.dataset_path))
    else:
        raise ConfigError(f"dataset file not found: {cfg.dataset_path}")
    sha = hashlib.sha256(synthdata.dataset_bytes(ds)).hexdigest()

    main, test = synthdata.split_classes(
        ds, cfg.test_class_fraction, _derived_seed(cfg.split_seed, 0)
    )
    train, val = synthdata.split(main, cfg.val_fraction, _derived_seed(cfg.split_seed, 1))
    val_pairs = synthdata.build_pairset(
        val, cfg.n_genuine, cfg.n_impostor, _derived_seed(cfg.pairs_seed, 0)
    )
    test_pairs = synthdata.build_pairset(
        test, cfg.n_genuine, cfg.n_impostor, _derived_seed(cfg.pairs_seed, 1)
    )
    return PreparedData(
        dataset=ds,
        train=train,
        val=val,
        test=test,
        val_pairs=val_pairs,
        test_pairs=test_pairs,
        dataset_sha256=sha,
    )


def env_threads() -> int:
    raw = os.environ.get("FACESEARCH_THREADS", "")
    try:
        return max(int(raw), 0) if raw else 0
    except ValueError:
        return 0


# ---------------------------------------------------------------------------
# retraining
# ---------------------------------------------------------------------------


@dataclass
class RetrainReport:
    rows: list[dict] = field(default_factory=list)
    reward_vs_test_spearman: float = float("nan")

    def as_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rows": self.rows,
            "reward_vs_test_spearman": self.reward_vs_test_spearman,
        }


def retrain_topk(
    log: SearchLog,
    k: int,
    *,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    test_pairs: synthdata.PairSet,
    base_arch: BaseArch,
    full_budget: TrainBudget,
    eval_spec: EvalSpec,
    seed: int = 0,
) -> RetrainReport:
    """Fully retrain the K highest-reward combinations; rank by held-out ACC."""
    if len(log) < k:
        raise ValueError(f"log has {len(log)} entries, need at least {k}")
    report = RetrainReport()
    for i, rec in enumerate(log.top_k(k)):
        combo = rec.combination
        row = {
            "tokens": list(rec.tokens),
            **combo.as_dict(),
            "search_reward": rec.reward,
            "search_acc": rec.acc,
            "status": "ok",
            "test_acc": float("nan"),
        }
        try:
            cleaned, _ = cleaner.clean(
                train_ds, CleanParams(combo.tau_intra, combo.tau_inter)
            )
            budget = replace(full_budget, seed=_derived_seed(seed, 3, i))
            model = traineval.train_candidate(combo, cleaned, base_arch, budget)
            row["test_acc"] = traineval.acc_metric(model, test_ds, test_pairs, eval_spec)
        except (
            cleaner.DegenerateDatasetError,
            traineval.DivergedError,
            marginloss.DegenerateEmbeddingError,
        ) as exc:
            row["status"] = type(exc).__name__
            logger.warning("retraining failed for %s: %s", combo.as_tuple(), exc)
        report.rows.append(row)

    ok_rows = [r for r in report.rows if r["status"] == "ok"]
    report.rows.sort(
        key=lambda r: (-(r["test_acc"] if r["status"] == "ok" else -np.inf))
    )
    if len(ok_rows) >= 2:
        report.reward_vs_test_spearman = spearman(
            [r["search_reward"] for r in ok_rows], [r["test_acc"] for r in ok_rows]
        )
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    ds = synthdata.generate_dataset(cfg.dataset)
    cfg.dataset_path.parent.mkdir(parents=True, exist_ok=True)
    synthdata.save_dataset(ds, str(cfg.dataset_path))
    if args.csv:
        synthdata.dataset_to_csv(ds, str(cfg.dataset_path.with_suffix(".csv")))
    counts = {
        "clean": int((ds.truth_kind == synthdata.TRUTH_CLEAN).sum()),
        "outlier": int((ds.truth_kind == synthdata.TRUTH_OUTLIER).sum()),
        "flip": int((ds.truth_kind == synthdata.TRUTH_FLIP).sum()),
    }
    result = {
        "schema_version": SCHEMA_VERSION,
        "path": str(cfg.dataset_path),
        "n": ds.n,
        "n_classes": ds.n_classes,
        "truth_counts": counts,
        "max_interclass_cosine": synthdata.max_interclass_cosine(ds),
        "sha256": hashlib.sha256(synthdata.dataset_bytes(ds)).hexdigest(),
    }
    _write_json(cfg.out_dir / "gen_result.json", result)
    print(json.dumps(result, indent=2))
    return 0


def _cmd_clean(args) -> int:
    ds = synthdata.load_dataset(args.input)
    params = CleanParams(
        tau_intra=args.tau_intra,
        tau_inter=args.tau_inter,
        leave_one_out=args.leave_one_out,
    )
    cleaned, report = cleaner.clean(ds, params)
    synthdata.save_dataset(cleaned, args.output)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "tau_intra": args.tau_intra,
        "tau_inter": args.tau_inter,
        "n_in": ds.n,
        "n_out": cleaned.n,
        "n_classes_out": cleaned.n_classes,
        **report.as_dict(),
    }
    _write_json(Path(args.report), payload)
    print(f"kept {cleaned.n}/{ds.n} samples, {cleaned.n_classes} classes")
    return 0


def _cmd_train_one(args) -> int:
    cfg = load_config(args.config)
    if cfg.combination is None:
        raise ConfigError("train-one requires a 'combination' section in the config")
    data = prepare_data(cfg)
    combo = cfg.combination
    cleaned, clean_report = cleaner.clean(
        data.train, CleanParams(combo.tau_intra, combo.tau_inter)
    )
    budget = replace(cfg.full_budget, seed=_derived_seed(cfg.seed, 4))
    model = traineval.train_candidate(combo, cleaned, cfg.base_arch, budget)
    acc = traineval.acc_metric(model, data.val, data.val_pairs, cfg.eval_spec)
    model_path = cfg.out_dir / "model.fsnw"
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    backbone.save_network(model.network, str(model_path))
    result = {
        "schema_version": SCHEMA_VERSION,
        "combination": combo.as_dict(),
        "val_acc": acc,
        "final_train_loss": model.loss_trace[-1],
        "kept_fraction": len(clean_report.kept_indices) / data.train.n,
        "model_path": str(model_path),
    }
    _write_json(cfg.out_dir / "train_one_result.json", result)
    print(json.dumps(result, indent=2))
    return 0


def _cmd_search(args) -> int:
    cfg = load_config(args.config)
    data = prepare_data(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if not (out / "dataset.fsds").is_file():
        synthdata.save_dataset(data.dataset, str(out / "dataset.fsds"))

    setup = SearchSetup(
        space=cfg.space,
        train_ds=data.train,
        val_ds=data.val,
        val_pairs=data.val_pairs,
        base_arch=cfg.base_arch,
        proxy_budget=cfg.proxy_budget,
        eval_spec=cfg.eval_spec,
        ppo=cfg.ppo,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        threads=env_threads(),
        hidden_size=cfg.hidden_size,
        token_embed_dim=cfg.token_embed_dim,
    )
    result = agent.run_search(setup)
    result.log.to_csv(str(out / "search_log.csv"))
    agent.save_controller(
        result.policy,
        result.state,
        str(out / "controller.bin"),
        extra={"epochs_done": cfg.epochs, "samples": len(result.log)},
    )
    top = result.log.top_k(cfg.top_k)
    _write_json(
        out / "topk.json",
        {
            "schema_version": SCHEMA_VERSION,
            "top": [
                {
                    "tokens": list(r.tokens),
                    **r.combination.as_dict(),
                    "acc": r.acc,
                    "cost": r.cost,
                    "reward": r.reward,
                }
                for r in top
            ],
        },
    )
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.raw,
        "dataset_sha256": data.dataset_sha256,
        "space": json.loads(cfg.space.to_json()),
        "created_unix": time.time(),
    }
    _write_json(out / "manifest.json", manifest)
    rewards = result.log.rewards()
    summary = {
        "schema_version": SCHEMA_VERSION,
        "samples": len(result.log),
        "best_reward": float(rewards.max()) if len(rewards) else None,
        "mean_reward": float(rewards.mean()) if len(rewards) else None,
        "log": str(out / "search_log.csv"),
    }
    _write_json(out / "search_result.json", summary)
    print(json.dumps(summary, indent=2))
    return 0


def _load_run(run_dir: str | Path) -> tuple[RunConfig, dict]:
    run = Path(run_dir)
    manifest_path = run / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"no manifest.json under {run}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported manifest schema in {manifest_path}")
    cfg = parse_config(manifest["config"])
    # the run directory owns its dataset copy
    if (run / "dataset.fsds").is_file():
        cfg.dataset_path = run / "dataset.fsds"
    return cfg, manifest


def _cmd_retrain(args) -> int:
    run = Path(args.run)
    cfg, _ = _load_run(run)
    data = prepare_data(cfg, generate_missing=False)
    log = SearchLog.read_csv(str(run / "search_log.csv"))
    k = args.k or cfg.top_k
    report = retrain_topk(
        log,
        k,
        train_ds=data.train,
        test_ds=data.test,
        test_pairs=data.test_pairs,
        base_arch=cfg.base_arch,
        full_budget=cfg.full_budget,
        eval_spec=cfg.eval_spec,
        seed=cfg.seed,
    )
    _write_json(run / "retrain_report.json", report.as_dict())
    with open(run / "retrain_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["rank", "tokens"]
            + list(PARAM_NAMES)
            + ["search_reward", "search_acc", "test_acc", "status"]
        )
        for rank, row in enumerate(report.rows):
            writer.writerow(
                [rank, "-".join(str(t) for t in row["tokens"])]
                + [repr(row[n]) for n in PARAM_NAMES]
                + [
                    repr(row["search_reward"]),
                    repr(row["search_acc"]),
                    repr(row["test_acc"]),
                    row["status"],
                ]
            )
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def _cmd_analyze(args) -> int:
    rows = []
    for run_dir in args.run:
        cfg, _ = _load_run(run_dir)
        log = SearchLog.read_csv(str(Path(run_dir) / "search_log.csv"))
        for rec in log.records:
            d_data, d_loss = difficulty(rec.combination)
            net_cfg = backbone.expand(
                cfg.base_arch, rec.combination.depth_ratio, rec.combination.width_ratio
            )
            rows.append(
                {
                    "run": str(run_dir),
                    "epoch": rec.epoch,
                    "candidate": rec.candidate,
                    **rec.combination.as_dict(),
                    "difficulty_data": d_data,
                    "difficulty_loss": d_loss,
                    "flops": backbone.flops(net_cfg),
                    "acc": rec.acc,
                    "reward": rec.reward,
                }
            )
    out_path = Path(args.out) if args.out else Path(args.run[0]) / "difficulty.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cols = (
        ["run", "epoch", "candidate"]
        + list(PARAM_NAMES)
        + ["difficulty_data", "difficulty_loss", "flops", "acc", "reward"]
    )
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"wrote {len(rows)} rows to {out_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    data = prepare_data(cfg, generate_missing=False)
    net = backbone.load_network(args.model)
    ds, pairs = (
        (data.test, data.test_pairs) if args.split == "test" else (data.val, data.val_pairs)
    )
    gen, imp = traineval.evaluate_pairs(net, ds, pairs)
    tars = {
        repr(f): traineval.tar_at_far(gen, imp, f) for f in cfg.eval_spec.far_targets
    }
    acc = float(
        sum(
            w * traineval.tar_at_far(gen, imp, f)
            for f, w in zip(cfg.eval_spec.far_targets, cfg.eval_spec.weights)
        )
    )
    result = {
        "schema_version": SCHEMA_VERSION,
        "model": args.model,
        "split": args.split,
        "acc": acc,
        "tar_at_far": tars,
    }
    _write_json(cfg.out_dir / "eval_result.json", result)
    print(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facesearch",
        description="Joint search over data cleaning, margin loss and network width/depth.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--csv", action="store_true", help="also export a CSV copy")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("clean", help="clean a dataset file with fixed thresholds")
    p.add_argument("--tau-intra", type=float, required=True)
    p.add_argument("--tau-inter", type=float, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--leave-one-out", action="store_true")
    p.set_defaults(func=_cmd_clean)

    p = sub.add_parser("train-one", help="fully train one explicit combination")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train_one)

    p = sub.add_parser("search", help="run the PPO search loop")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("retrain", help="fully retrain the top-K of a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--k", type=int, default=0)
    p.set_defaults(func=_cmd_retrain)

    p = sub.add_parser("analyze", help="emit difficulty-vs-FLOPs CSV from run logs")
    p.add_argument("--run", action="append", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("eval", help="score a saved network on the held-out pairs")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
