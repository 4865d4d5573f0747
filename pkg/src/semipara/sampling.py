"""Gumbel TOP-k sampling, straight-through estimation and temperature schedules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .model import SoftTokens


@dataclass(frozen=True)
class TemperatureSchedule:
    mode: str = "annealed"
    fixed_value: float = 0.1
    start: float = 10.0
    end: float = 0.01
    total_steps: int = 1

    def __post_init__(self):
        if self.mode not in ("fixed", "annealed"):
            raise ValueError(f"unknown temperature mode {self.mode!r}")
        if self.mode == "fixed" and self.fixed_value <= 0:
            raise ValueError("fixed temperature must be positive")
        if self.mode == "annealed" and not self.start > self.end > 0:
            raise ValueError("annealing needs start > end > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def temperature_at(schedule: TemperatureSchedule, step: int) -> float:
    """Temperature at a global optimizer step.

    Annealing is geometric from ``start`` to ``end``; steps outside
    ``[0, total_steps]`` are clamped.
    """
    if schedule.mode == "fixed":
        return schedule.fixed_value
    frac = min(max(step, 0), schedule.total_steps) / schedule.total_steps
    if frac == 1.0:
        return schedule.end
    return schedule.start * (schedule.end / schedule.start) ** frac


class LatentSample(NamedTuple):
    """Relaxed TOP-k draw per position.

    ``candidate_ids`` (..., k) are sorted by perturbed score, so the hard
    choice is always candidate 0; ``weights`` is the tempered softmax over them.
    """

    candidate_ids: torch.Tensor
    weights: torch.Tensor
    hard_index: torch.Tensor

    @property
    def hard_ids(self) -> torch.Tensor:
        return self.candidate_ids.gather(-1, self.hard_index.unsqueeze(-1)).squeeze(-1)


# a single-position sample is the same structure with no leading dims
LatentToken = LatentSample


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32,
                 device=None) -> torch.Tensor:
    tiny = torch.finfo(dtype).tiny
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    return -torch.log(-torch.log(u.clamp(tiny, 1.0 - 1e-7)))


def gumbel_topk_sample(logits: torch.Tensor, tau: float, k: int,
                       generator: torch.Generator | None = None,
                       noise: torch.Tensor | None = None,
                       banned: torch.Tensor | None = None) -> LatentSample:
    """Perturb ``logits`` with Gumbel noise and keep the k best candidates.

    ``banned`` is a boolean vocab mask of ids that may never be drawn.
    Gradients flow from ``weights`` back into ``logits``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    vocab = logits.shape[-1]
    allowed = vocab - (int(banned.sum()) if banned is not None else 0)
    if not 1 <= k <= allowed:
        raise ValueError(f"k={k} outside [1, {allowed}]")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator, logits.dtype, logits.device)
    scores = logits + noise
    if banned is not None:
        scores = scores.masked_fill(banned, float("-inf"))
    cand = scores.detach().topk(k, dim=-1).indices
    weights = F.softmax(scores.gather(-1, cand) / tau, dim=-1)
    hard = torch.zeros(cand.shape[:-1], dtype=torch.long, device=cand.device)
    return LatentSample(cand, weights, hard)


def straight_through(sample: LatentSample) -> torch.Tensor:
    """One-hot at the hard choice in the forward pass, relaxed gradient backward."""
    hard = F.one_hot(sample.hard_index, sample.weights.shape[-1]).to(sample.weights.dtype)
    # w - w.detach() is exactly zero, so the forward value is exactly one-hot
    return hard + (sample.weights - sample.weights.detach())


def as_soft_tokens(sample: LatentSample) -> SoftTokens:
    return SoftTokens(sample.candidate_ids, straight_through(sample))
