"""End-to-end steps: generate data, pretrain, fine-tune, evaluate, ablate."""
from __future__ import annotations

import itertools
import logging
import os
from dataclasses import replace

import numpy as np

from grade.core import SessionArrays
from grade.grpo import TrainState, evaluate_policy, evaluate_weights, train_epoch
from grade.harness import plotting
from grade.harness.config import ConfigError, RunConfig
from grade.harness.metrics_io import MetricsWriter, format_table, read_metrics, write_table
from grade.ltr import pretrain
from grade.policy import AdamState, PolicyParams, load_checkpoint, save_checkpoint, snapshot
from grade.simenv import generate_dataset, load_dataset, oracle_grid_search, oracle_weights_for, save_dataset

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("method", "ndcg_ctr", "ndcg_cvr", "ndcg_opm", "ndcg_gpm", "post", "prior", "format", "total")

# substream tags derived from the master seed
_INIT_STREAM, _SHUFFLE_STREAM, _RANDOM_BASELINE_STREAM = 1, 2, 3


class MissingArtifact(FileNotFoundError):
    """A prerequisite file (dataset or checkpoint) does not exist."""


def _dirs(cfg: RunConfig):
    p = cfg.paths
    return (cfg.path(p.data_dir), cfg.path(p.checkpoint_dir), cfg.path(p.metrics_dir), cfg.path(p.report_dir))


def data_paths(cfg: RunConfig):
    d = cfg.path(cfg.paths.data_dir)
    return os.path.join(d, "train.jsonl"), os.path.join(d, "test.jsonl")


def checkpoint_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.path(cfg.paths.checkpoint_dir), name)


def metrics_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.path(cfg.paths.metrics_dir), name)


def report_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.path(cfg.paths.report_dir), name)


def run_gen_data(cfg: RunConfig):
    train, test = generate_dataset(cfg.env)
    tr, te = data_paths(cfg)
    os.makedirs(os.path.dirname(tr), exist_ok=True)
    save_dataset(train, tr)
    if test is not None:
        save_dataset(test, te)
    log.info("wrote %d train / %d test sessions to %s", len(train), 0 if test is None else len(test),
             os.path.dirname(tr))
    return train, test


def load_data(cfg: RunConfig, split: str = "train") -> SessionArrays:
    path = data_paths(cfg)[0 if split == "train" else 1]
    if not os.path.exists(path):
        raise MissingArtifact(f"dataset {path} not found; run gen-data first")
    return load_dataset(path)


def load_policy(path: str, cfg: RunConfig) -> PolicyParams:
    if not os.path.exists(path):
        raise MissingArtifact(f"checkpoint {path} not found")
    return load_checkpoint(path, expect_context_dim=cfg.env.context_dim)


def run_pretrain(cfg: RunConfig, train: SessionArrays | None = None) -> PolicyParams:
    train = train if train is not None else load_data(cfg, "train")
    init = PolicyParams.init(np.random.default_rng([cfg.seed, _INIT_STREAM]), train.context_dim,
                             cfg.policy.hidden, cfg.policy.experts)
    writer = MetricsWriter(metrics_path(cfg, "pretrain.csv"))

    def on_batch(epoch, it, loss):
        writer.write(phase="pretrain", epoch=epoch, iteration=it, loss=loss)

    result = pretrain(train, init, cfg.ltr, np.random.default_rng([cfg.seed, _SHUFFLE_STREAM]), on_batch)
    path = checkpoint_path(cfg, "sp.ckpt")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_checkpoint(result.params, path)
    for e, loss in enumerate(result.epoch_losses):
        log.info("pretrain epoch %d: mean LambdaLoss %.6f", e, loss)
    os.makedirs(cfg.path(cfg.paths.report_dir), exist_ok=True)
    plotting.plot_pretrain(read_metrics(writer.path), report_path(cfg, "pretrain.png"))
    return result.params


def run_train(cfg: RunConfig, train: SessionArrays | None = None, sp: PolicyParams | None = None,
              name: str = "train", checkpoint: str = "grade.ckpt") -> PolicyParams:
    """GRPO fine-tuning from the SP checkpoint; saves after every epoch."""
    train = train if train is not None else load_data(cfg, "train")
    sp = sp if sp is not None else load_policy(checkpoint_path(cfg, "sp.ckpt"), cfg)
    writer = MetricsWriter(metrics_path(cfg, f"{name}.csv"))
    state = TrainState(policy=snapshot(sp), ref=snapshot(sp), opt=AdamState.for_params(sp))
    out = checkpoint_path(cfg, checkpoint)
    os.makedirs(os.path.dirname(out), exist_ok=True)

    def on_iteration(m):
        writer.write(phase="train", epoch=m.epoch, iteration=m.iteration, objective=m.objective,
                     mean_reward=m.mean_reward, mean_post=m.mean_post, mean_prior=m.mean_prior,
                     mean_format=m.mean_format, mean_kl=m.mean_kl, clip_fraction=m.clip_fraction,
                     hat_alpha=m.hat_alpha)

    for _ in range(cfg.grpo.epochs):
        ms = train_epoch(train, state, cfg.grpo, cfg.reward, cfg.seed, cfg.workers, on_iteration)
        save_checkpoint(state.policy, out)
        log.info("%s epoch %d: mean reward %.5f", name, state.epoch - 1,
                 float(np.mean([m.mean_reward for m in ms])))
    if cfg.grpo.epochs == 0:
        save_checkpoint(state.policy, out)
    os.makedirs(os.path.dirname(report_path(cfg, f"{name}.png")), exist_ok=True)
    rows = read_metrics(writer.path)
    if rows:
        plotting.plot_train(rows, report_path(cfg, f"{name}.png"))
    return state.policy


def _method_name(path: str, taken: set) -> str:
    stem = os.path.splitext(os.path.basename(path))[0]
    name = {"sp": "SP", "grade": "GRADE"}.get(stem, stem)
    base, i = name, 2
    while name in taken:
        name, i = f"{base}#{i}", i + 1
    taken.add(name)
    return name


def baseline_rows(cfg: RunConfig, test: SessionArrays):
    """Random, Formula and Oracle rows plus the oracle itself."""
    oracle = oracle_grid_search(test, cfg.eval.oracle_grid_step, cfg.reward)
    rng = np.random.default_rng([cfg.seed, _RANDOM_BASELINE_STREAM])
    random_w = rng.dirichlet(np.ones(4), size=len(test))
    formula_w = (np.array(cfg.eval.formula_weights, dtype=np.float64) if cfg.eval.formula_weights
                 else oracle.population_weight)
    if formula_w.shape != (4,) or abs(formula_w.sum() - 1) > 1e-9 or np.any(formula_w < 0):
        raise ConfigError(f"formula weights must be a 4-d simplex point, got {formula_w}")
    rows = {
        "Random": evaluate_weights(test, random_w, cfg.reward),
        "Formula": evaluate_weights(test, formula_w, cfg.reward),
        "Oracle": evaluate_weights(test, oracle_weights_for(test, oracle), cfg.reward),
    }
    return rows, oracle, formula_w


def run_eval(cfg: RunConfig, checkpoints: list[str] | None = None, test: SessionArrays | None = None,
             echo=print) -> list[dict]:
    test = test if test is not None else load_data(cfg, "test")
    if checkpoints is None:
        checkpoints = [checkpoint_path(cfg, "sp.ckpt"), checkpoint_path(cfg, "grade.ckpt")]
    policies = [(p, load_policy(p, cfg)) for p in checkpoints]
    base, oracle, formula_w = baseline_rows(cfg, test)
    taken = {"Random", "Formula", "Oracle"}
    rows = [dict(method="Random", **base["Random"]), dict(method="Formula", **base["Formula"])]
    for path, params in policies:
        rows.append(dict(method=_method_name(path, taken), **evaluate_policy(test, params, cfg.reward)))
    rows.append(dict(method="Oracle", **base["Oracle"]))

    write_table(report_path(cfg, "eval.csv"), rows, EVAL_COLUMNS)
    oracle_rows = [
        {"latent_type": t, **{f"w_{k}": float(v) for k, v in zip(("ctr", "cvr", "opm", "gpm"), w)},
         "expected_post": oracle.expected_reward[t]}
        for t, w in sorted(oracle.weights.items())
    ]
    oracle_rows.append({"latent_type": "formula",
                        **{f"w_{k}": float(v) for k, v in zip(("ctr", "cvr", "opm", "gpm"), formula_w)},
                        "expected_post": base["Formula"]["post"]})
    write_table(report_path(cfg, "oracle.csv"), oracle_rows,
                ("latent_type", "w_ctr", "w_cvr", "w_opm", "w_gpm", "expected_post"))
    plotting.plot_eval(rows, report_path(cfg, "eval.png"))
    if echo is not None:
        echo(format_table(rows, EVAL_COLUMNS))
    return rows


def parse_sweep(sweep: str) -> list[dict]:
    """``"group_size=5,20; alpha=C,5; reward=full,post"`` -> list of variant dicts."""
    axes = []
    for part in filter(None, (p.strip() for p in sweep.replace(";", " ").split())):
        if "=" not in part:
            raise ConfigError(f"bad sweep term {part!r}")
        key, values = part.split("=", 1)
        key = key.strip().lower()
        if key in ("g", "group", "group_size"):
            key, vals = "group_size", [int(v) for v in values.split(",")]
        elif key in ("alpha", "hat_alpha"):
            key, vals = "alpha", [v.strip().upper() if v.strip().lower() in ("c", "cosine") else float(v)
                                  for v in values.split(",")]
        elif key == "reward":
            vals = [v.strip().lower() for v in values.split(",")]
            if any(v not in ("full", "post") for v in vals):
                raise ConfigError("reward variants are 'full' and 'post'")
        else:
            raise ConfigError(f"unknown sweep axis {key!r}")
        axes.append((key, vals))
    if not axes:
        raise ConfigError("empty sweep")
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in axes))]


def variant_config(cfg: RunConfig, variant: dict) -> tuple[RunConfig, str]:
    grpo, reward = cfg.grpo, cfg.reward
    parts = []
    if "group_size" in variant:
        grpo = replace(grpo, group_size=variant["group_size"])
    parts.append(f"G{grpo.group_size}")
    if "alpha" in variant:
        a = variant["alpha"]
        grpo = replace(grpo, fixed_alpha=None if a == "C" else float(a))
    parts.append("aC" if grpo.fixed_alpha is None else f"a{grpo.fixed_alpha:g}")
    if variant.get("reward") == "post":
        reward = replace(reward, lambda_prior=0.0, lambda_format=0.0)
        parts.append("post")
    else:
        parts.append("full")
    return replace(cfg, grpo=grpo, reward=reward), "_".join(parts)


ABLATION_COLUMNS = ("run", "group_size", "alpha", "reward") + EVAL_COLUMNS[1:]


def run_ablate(cfg: RunConfig, sweep: str, echo=print) -> list[dict]:
    variants = parse_sweep(sweep)
    train, test = load_data(cfg, "train"), load_data(cfg, "test")
    sp = load_policy(checkpoint_path(cfg, "sp.ckpt"), cfg)
    rows = []
    for v in variants:
        vcfg, name = variant_config(cfg, v)
        params = run_train(vcfg, train, sp, name=os.path.join("ablate", name),
                           checkpoint=os.path.join("ablate", f"{name}.ckpt"))
        # score every variant with the full composite reward so totals are comparable
        metrics = evaluate_policy(test, params, cfg.reward)
        rows.append(dict(run=name, group_size=vcfg.grpo.group_size,
                         alpha="C" if vcfg.grpo.fixed_alpha is None else vcfg.grpo.fixed_alpha,
                         reward=v.get("reward", "full"), **metrics))
    write_table(report_path(cfg, "ablation.csv"), rows, ABLATION_COLUMNS)
    plotting.plot_ablation(rows, report_path(cfg, "ablation.png"))
    if echo is not None:
        echo(format_table(rows, ABLATION_COLUMNS))
    return rows
