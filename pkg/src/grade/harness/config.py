"""Run configuration: flat ``key = value`` text with dotted section names.

Example::

    [run]
    seed = 7
    [grpo]
    group_size = 20
    alpha = cosine        ; or a fixed concentration such as 10
    [env.type.1]
    conv_intent = 2.5
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, replace

from grade.core import ContractError
from grade.dirichlet import AnnealSchedule
from grade.grpo import GrpoConfig
from grade.ltr import LtrConfig
from grade.reward import RewardConfig
from grade.simenv import EnvConfig, FeedbackModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 32
    experts: int = 4


@dataclass(frozen=True)
class EvalConfig:
    oracle_grid_step: float = 0.05
    formula_weights: tuple[float, ...] | None = None  # None: population-level oracle point


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    metrics_dir: str = "metrics"
    report_dir: str = "report"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ltr: LtrConfig = field(default_factory=LtrConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        dirs = [self.path(getattr(self.paths, f.name)) for f in dataclasses.fields(Paths)]
        if len(set(dirs)) != len(dirs):
            raise ConfigError("output paths must be distinct")
        if self.env.seed != self.seed:
            object.__setattr__(self, "env", replace(self.env, seed=self.seed))

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    def with_overrides(self, seed=None, workers=None, out=None) -> "RunConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = seed
        if workers is not None:
            kw["workers"] = workers
        if out is not None:
            kw["out"] = out
        return replace(self, **kw)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple) or default is None:
        if raw.lower() in ("", "none", "auto"):
            return None
        return tuple(float(x) for x in raw.split(","))
    return raw


def _update(obj, section: dict, name: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    kw = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            kw[key] = _parse_value(raw, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return replace(obj, **kw)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    try:
        run = dict(cp["run"]) if cp.has_section("run") else {}
        for key in run:
            if key not in ("seed", "workers", "out"):
                raise ConfigError(f"[run] unknown key {key!r}")
        top = {k: _parse_value(v, getattr(cfg, k)) for k, v in run.items()}

        env = cfg.env
        feedback = list(env.feedback)
        if cp.has_section("env"):
            env = _update(env, dict(cp["env"]), "env")
            feedback = list(env.feedback)
        for sec in cp.sections():
            if sec.startswith("env.type."):
                i = int(sec.rsplit(".", 1)[1])
                if i >= len(feedback):
                    raise ConfigError(f"[{sec}] no latent type {i}")
                feedback[i] = _update(feedback[i], dict(cp[sec]), sec)
        env = replace(env, feedback=tuple(feedback))

        grpo = cfg.grpo
        schedule = grpo.schedule
        if cp.has_section("anneal"):
            schedule = _update(schedule, dict(cp["anneal"]), "anneal")
        if cp.has_section("grpo"):
            sec = dict(cp["grpo"])
            alpha = sec.pop("alpha", "cosine").strip().lower()
            grpo = _update(grpo, sec, "grpo")
            fixed = None if alpha in ("cosine", "c") else float(alpha)
            grpo = replace(grpo, fixed_alpha=fixed)
        grpo = replace(grpo, schedule=schedule)

        sections = {
            "policy": cfg.policy, "ltr": cfg.ltr, "reward": cfg.reward,
            "eval": cfg.eval, "paths": cfg.paths,
        }
        known = set(sections) | {"run", "env", "grpo", "anneal"}
        for sec in cp.sections():
            if sec not in known and not sec.startswith("env.type."):
                raise ConfigError(f"unknown section [{sec}]")
        parts = {n: _update(obj, dict(cp[n]), n) if cp.has_section(n) else obj for n, obj in sections.items()}
        return RunConfig(**top, env=env, grpo=grpo, **parts)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Serialize every setting so the file reproduces the run exactly."""
    out = io.StringIO()

    def section(name, obj, skip=()):
        out.write(f"[{name}]\n")
        for f in dataclasses.fields(obj):
            if f.name not in skip:
                out.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
        out.write("\n")

    out.write(f"[run]\nseed = {cfg.seed}\nworkers = {cfg.workers}\nout = {cfg.out}\n\n")
    section("env", cfg.env, skip=("feedback", "seed"))
    for i, fm in enumerate(cfg.env.feedback):
        section(f"env.type.{i}", fm)
    section("policy", cfg.policy)
    section("ltr", cfg.ltr)
    out.write("[grpo]\n")
    out.write(f"alpha = {'cosine' if cfg.grpo.fixed_alpha is None else cfg.grpo.fixed_alpha}\n")
    for f in dataclasses.fields(cfg.grpo):
        if f.name not in ("schedule", "fixed_alpha"):
            out.write(f"{f.name} = {_fmt(getattr(cfg.grpo, f.name))}\n")
    out.write("\n")
    section("anneal", cfg.grpo.schedule)
    section("reward", cfg.reward)
    section("eval", cfg.eval)
    section("paths", cfg.paths)
    return out.getvalue()


__all__ = [
    "AnnealSchedule", "ConfigError", "EvalConfig", "FeedbackModel", "Paths", "PolicyConfig",
    "RunConfig", "dump_config", "load_config", "parse_config",
]
