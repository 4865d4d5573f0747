"""Run configuration: one YAML file, strict keys, dotted command-line overrides."""
from __future__ import annotations

import copy
import re
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .prior import PriorConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, dict | list] = {
    "paths": {
        "train": "data/train.tsv",
        "val": "data/val.tsv",
        "test": "data/test.tsv",
        "mono": "data/mono.txt",
        "vocab": "runs/vocab.txt",
        "checkpoint_dir": "runs",
    },
    "vocab": {"min_freq": 1, "max_size": None},
    "model": {"layers": 6, "hidden": 512, "heads": 8, "ffn_mult": 4, "dropout": 0.1, "max_len": 20},
    "prior": {"layers": 2, "hidden": 128, "heads": 4, "ffn_mult": 4, "dropout": 0.1,
              "lr": 1e-3, "batch_size": 64, "epochs": 10, "heldout_frac": 0.1},
    "optim": {"adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8, "grad_clip": 1.0},
    "pretrain": {"lr": 2e-4, "batch_size": 512, "max_epochs": 30, "mode": "ddl"},
    "finetune": {"lr": 2e-4, "batch_size": 512, "unlabelled_batch_size": None,
                 "max_epochs": 30, "mode": "semi", "prior": True},
    "tau": {"mode": "annealed", "start": 10.0, "end": 0.01, "fixed": 0.1},
    "topk": {"k": 10},
    "eval": {"alpha": 0.9, "bounds_seed": 1000, "batch_size": 256},
    "seeds": [1000, 2000, 3000],
}


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?[0-9][0-9_]*[eE][-+]?[0-9]+
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


class ConfigError(ValueError):
    """Bad key, bad value or missing file; the CLI maps it to exit code 2."""


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name!r} must be a mapping")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def parse_overrides(args: list[str]) -> dict:
    """``["--finetune.lr", "1e-4", ...]`` -> nested dict; values are parsed as YAML scalars."""
    out: dict = {}
    it = iter(args)
    for flag in it:
        if not flag.startswith("--") or len(flag) < 3:
            raise ConfigError(f"expected --key value, got {flag!r}")
        try:
            raw = next(it)
        except StopIteration:
            raise ConfigError(f"missing value for {flag}") from None
        node = out
        *parents, leaf = flag[2:].replace("-", "_").split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _yaml(raw)
    return out


class RunConfig:
    def __init__(self, data: dict | None = None, base_dir: str | Path = "."):
        self.data = _merge(DEFAULTS, data or {})
        self.base_dir = Path(base_dir)
        self._check()

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "RunConfig":
        data, base = {}, Path(".")
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                data = _yaml(path.read_text()) or {}
            except yaml.YAMLError as err:
                raise ConfigError(f"cannot parse {path}: {err}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path} must hold a mapping")
            base = path.parent
        cfg = cls(data, base)
        if overrides:
            cfg = cls(_merge(cfg.data, parse_overrides(overrides)), base)
        return cfg

    def _check(self) -> None:
        seeds = self.data["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        try:
            self.model_config(4)
            self.train_config("pretrain", seeds[0])
            self.train_config("finetune", seeds[0]).schedule(1)
            self.prior_config(4, seeds[0])
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None
        if self.data["pretrain"]["mode"] not in ("ddl", "single"):
            raise ConfigError("pretrain.mode must be 'ddl' or 'single'")
        if not 0.0 <= self.data["eval"]["alpha"] <= 1.0:
            raise ConfigError("eval.alpha must lie in [0, 1]")

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def path(self, key: str) -> Path:
        p = Path(self.data["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    def require(self, *keys: str) -> None:
        for key in keys:
            p = self.path(key)
            if not p.exists():
                raise ConfigError(f"paths.{key} does not exist: {p}")

    def artifact(self, name: str) -> Path:
        return self.path("checkpoint_dir") / name

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.data["model"])

    def prior_config(self, vocab_size: int, seed: int) -> PriorConfig:
        return PriorConfig(vocab_size=vocab_size, max_len=self.data["model"]["max_len"],
                           seed=seed, **self.data["prior"])

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        tau = {f"tau_{key}": value for key, value in self.data["tau"].items()}
        fields = {**self.data["optim"], **tau, "topk": self.data["topk"]["k"], **self.data[stage]}
        return TrainConfig(seed=seed, **fields)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)
