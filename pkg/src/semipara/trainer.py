"""Optimization loops for two-stage knowledge-reinforced training, plus checkpoints."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import torch

from .data import ParallelPair, SemiSplit, TokenSequence, batch_iter
from .model import ModelConfig, SharedSeq2Seq
from .objectives import LossBundle, ddl_loss, single_direction_loss, teacher_forced_logprob, vsar_loss
from .prior import PriorConfig, PriorLM
from .sampling import TemperatureSchedule, temperature_at

log = logging.getLogger(__name__)

MODES = ("ddl", "single", "vsar", "semi")


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    unlabelled_batch_size: int | None = None
    max_epochs: int = 30
    seed: int = 1000
    mode: str = "semi"
    prior: bool = True
    grad_clip: float = 1.0
    tau_mode: str = "annealed"
    tau_start: float = 10.0
    tau_end: float = 0.01
    tau_fixed: float = 0.1
    topk: int = 10

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 1 or (self.unlabelled_batch_size or 1) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self, total_steps: int) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_mode, self.tau_fixed, self.tau_start, self.tau_end,
                                   max(total_steps, 1))


@dataclass
class CheckpointMeta:
    params: dict | None
    model_config: dict
    epoch: int
    validation_l2: float
    seed: int
    stage: str
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    kind: str = "model"

    def build_model(self) -> SharedSeq2Seq:
        model = SharedSeq2Seq(ModelConfig(**self.model_config))
        model.load_state_dict(self.params)
        return model

    def header(self) -> dict:
        d = asdict(self)
        d.pop("params")
        return d


class JsonlLog:
    """Structured step records, kept in memory and optionally appended to a file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2),
                            eps=config.adam_eps)


def _step(model, opt, bundle: LossBundle, config: TrainConfig) -> None:
    objective = bundle.combined
    if not torch.isfinite(objective):
        raise TrainingDiverged(f"non-finite objective {float(objective.detach())}")
    opt.zero_grad()
    (-objective).backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    opt.step()


@torch.no_grad()
def validate_l2(model: SharedSeq2Seq, val: list[ParallelPair], batch_size: int = 256) -> float:
    """Per-token mean log p(t|s) + per-token mean log p(s|t) over the whole set."""
    if not val:
        raise ValueError("empty validation set")
    was = model.training
    model.eval()
    ts = st = n_t = n_s = 0.0
    for src, tgt in batch_iter(val, batch_size, seed=0, epoch=0):
        a, na = teacher_forced_logprob(model, src, tgt)
        b, nb = teacher_forced_logprob(model, tgt, src)
        ts, n_t = ts + float(a.sum()), n_t + float(na.sum())
        st, n_s = st + float(b.sum()), n_s + float(nb.sum())
    model.train(was)
    return ts / n_t + st / n_s


def cycle_batches(dataset, batch_size: int, seed: int) -> Iterator:
    epoch = 0
    while True:
        yield from batch_iter(dataset, batch_size, seed, epoch)
        epoch += 1


def _select(history: list[float], val: float, best: float) -> bool:
    history.append(val)
    return val > best


def krl_pretrain(split: SemiSplit, model_config: ModelConfig, config: TrainConfig,
                 logger: JsonlLog | None = None) -> CheckpointMeta:
    """Supervised stage: DDL updates (or single-direction with mode="single").

    After every epoch the dual likelihood on the validation pairs is computed
    and the best-scoring parameters are kept.
    """
    if not split.labelled:
        raise ValueError("no labelled pairs")
    logger = logger or JsonlLog()
    torch.manual_seed(config.seed)
    model = SharedSeq2Seq(model_config)
    model.train()
    opt = make_optimizer(model, config)
    loss_fn = single_direction_loss if config.mode == "single" else ddl_loss
    best, best_state, best_epoch, history, step = -math.inf, None, -1, [], 0
    for epoch in range(config.max_epochs):
        for src, tgt in batch_iter(split.labelled, config.batch_size, config.seed, epoch):
            bundle = loss_fn(model, src, tgt)
            _step(model, opt, bundle, config)
            logger.write({"stage": "pretrain", "epoch": epoch, "step": step, "kind": config.mode,
                          **bundle.record(), "lr": config.lr})
            step += 1
        val = validate_l2(model, split.val)
        logger.write({"stage": "pretrain", "epoch": epoch, "step": step, "validation_l2": val})
        if _select(history, val, best):
            best, best_state, best_epoch = val, copy.deepcopy(model.state_dict()), epoch
    return CheckpointMeta(best_state, model_config.to_dict(), best_epoch, best, config.seed,
                          "pretrain", config.to_dict(), history)


def krl_finetune(init: CheckpointMeta, split: SemiSplit, config: TrainConfig,
                 prior: PriorLM | None = None, logger: JsonlLog | None = None,
                 probe: Callable[[torch.Tensor, torch.Tensor], None] | None = None,
                 on_start: Callable[[SharedSeq2Seq], None] | None = None) -> CheckpointMeta:
    """Semi-supervised stage initialised from the best pretrained parameters.

    Each iteration takes one labelled DDL step then one unlabelled ELBO step.
    The smaller set is cycled until the larger one is exhausted, which
    defines an epoch. ``mode="ddl"`` skips the unlabelled step (control run).
    """
    if init is None or init.params is None:
        raise CheckpointError("fine-tuning needs a pretrained checkpoint")
    if init.stage != "pretrain":
        raise CheckpointError(f"expected a pretrain checkpoint, got stage {init.stage!r}")
    if config.prior and prior is None and config.mode != "ddl":
        raise ValueError("prior enabled but no prior model given")
    logger = logger or JsonlLog()
    torch.manual_seed(config.seed)
    model = init.build_model()
    for name, p in model.state_dict().items():
        if not torch.equal(p, init.params[name]):
            raise CheckpointError(f"initialisation mismatch at {name}")
    if on_start is not None:
        on_start(model)
    model.train()
    opt = make_optimizer(model, config)
    gen = torch.Generator().manual_seed(config.seed)
    use_prior = prior if config.prior else None
    bs_u = config.unlabelled_batch_size or config.batch_size
    do_ddl = config.mode in ("ddl", "semi") and bool(split.labelled)
    do_vsar = config.mode in ("vsar", "semi") and bool(split.unlabelled)
    # epoch length ignores the mode so a DDL-only control takes as many DDL steps
    iters = max(math.ceil(len(split.labelled) / config.batch_size),
                math.ceil(len(split.unlabelled) / bs_u))
    if iters == 0:
        raise ValueError("nothing to train on")
    schedule = config.schedule(iters * config.max_epochs)
    lab = cycle_batches(split.labelled, config.batch_size, config.seed) if do_ddl else None
    unl = cycle_batches(split.unlabelled, bs_u, config.seed + 1) if do_vsar else None
    best, best_state, best_epoch, history, step = -math.inf, None, -1, [], 0
    for epoch in range(config.max_epochs):
        for _ in range(iters):
            tau = temperature_at(schedule, step)
            if do_ddl:
                bundle = ddl_loss(model, *next(lab))
                _step(model, opt, bundle, config)
                logger.write({"stage": "finetune", "epoch": epoch, "step": step, "kind": "ddl",
                              **bundle.record(), "lr": config.lr})
            if do_vsar:
                bundle = vsar_loss(model, use_prior, next(unl), tau, config.topk, gen, probe=probe)
                _step(model, opt, bundle, config)
                logger.write({"stage": "finetune", "epoch": epoch, "step": step, "kind": "vsar",
                              **bundle.record(), "tau": tau, "lr": config.lr})
            step += 1
        val = validate_l2(model, split.val)
        logger.write({"stage": "finetune", "epoch": epoch, "step": step, "validation_l2": val})
        if _select(history, val, best):
            best, best_state, best_epoch = val, copy.deepcopy(model.state_dict()), epoch
    return CheckpointMeta(best_state, init.model_config, best_epoch, best, config.seed,
                          "finetune", config.to_dict(), history)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def sidecar(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(params: dict | torch.nn.Module, meta: CheckpointMeta, path: str | Path) -> None:
    """Write ``path`` (named-parameter map) and a JSON sidecar with metadata and checksum."""
    path = Path(path)
    if isinstance(params, torch.nn.Module):
        params = params.state_dict()
    # serialise in memory: torch names the archive root after the target file,
    # which would leak the random temp name into the bytes
    buf = io.BytesIO()
    torch.save(dict(params), buf)
    _atomic_write(path, lambda tmp: Path(tmp).write_bytes(buf.getvalue()))
    header = {**meta.header(), "sha256": _sha256(path)}
    _atomic_write(sidecar(path), lambda tmp: Path(tmp).write_text(json.dumps(header, indent=2)))


def load_checkpoint(path: str | Path) -> tuple[dict, CheckpointMeta]:
    path = Path(path)
    side = sidecar(path)
    if not path.exists() or not side.exists():
        raise CheckpointError(f"missing checkpoint file or sidecar for {path}")
    try:
        header = json.loads(side.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"integrity: unreadable sidecar {side}: {err}") from None
    digest = _sha256(path)
    if digest != header.pop("sha256", None):
        raise CheckpointError(f"integrity: sha256 mismatch for {path}")
    try:
        params = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:  # torch raises several unrelated types on corrupt archives
        raise CheckpointError(f"integrity: cannot read {path}: {err}") from None
    return params, CheckpointMeta(params=params, **header)


def load_model(path: str | Path) -> tuple[SharedSeq2Seq, CheckpointMeta]:
    params, meta = load_checkpoint(path)
    if meta.kind != "model":
        raise CheckpointError(f"{path} holds a {meta.kind!r} checkpoint, not a model")
    return meta.build_model(), meta


def save_prior(prior: PriorLM, config: PriorConfig, history: list[float], path: str | Path) -> None:
    meta = CheckpointMeta(None, config.model_fields(), len(history) - 1,
                          validation_l2=float("nan"), seed=config.seed, stage="prior",
                          config=config.to_dict(), history=history, kind="prior")
    save_checkpoint(prior.state_dict(), meta, path)


def load_prior(path: str | Path) -> PriorLM:
    params, meta = load_checkpoint(path)
    if meta.kind != "prior":
        raise CheckpointError(f"{path} holds a {meta.kind!r} checkpoint, not a prior")
    prior = PriorLM(**meta.model_config)
    prior.load_state_dict(params)
    prior.trained = True
    return prior.freeze()


def decode_sources(model: SharedSeq2Seq, sources: list[TokenSequence], batch_size: int = 256
                   ) -> list[list[int]]:
    out = []
    for i in range(0, len(sources), batch_size):
        out += model.greedy_decode(list(sources[i:i + batch_size]))
    return out
