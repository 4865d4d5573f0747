"""Autoregressive language-model prior over latent paraphrases, trained on source text."""
from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BOS, PAD, TokenSequence, batch_iter
from .model import Block, SoftTokens, causal_mask, embed, init_weights

log = logging.getLogger(__name__)


@dataclass
class PriorConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 128
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    max_len: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    heldout_frac: float = 0.1
    seed: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    def model_fields(self) -> dict:
        return {k: getattr(self, k) for k in
                ("vocab_size", "layers", "hidden", "heads", "ffn_mult", "dropout", "max_len")}


class PriorLM(nn.Module):
    """Decoder-only LM, parameter-disjoint from the paraphrase model."""

    def __init__(self, vocab_size: int, layers: int = 2, hidden: int = 128, heads: int = 4,
                 ffn_mult: int = 4, dropout: float = 0.1, max_len: int = 20):
        super().__init__()
        self.max_len = max_len
        self.tok = nn.Embedding(vocab_size, hidden)
        self.pos = nn.Embedding(max_len, hidden)
        self.blocks = nn.ModuleList(Block(hidden, heads, ffn_mult, dropout, cross=False)
                                    for _ in range(layers))
        self.norm = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, vocab_size)
        self.drop = nn.Dropout(dropout)
        self.trained = False
        init_weights(self)

    def forward(self, prefix: torch.Tensor | SoftTokens) -> torch.Tensor:
        n = (prefix.candidate_ids if isinstance(prefix, SoftTokens) else prefix).shape[1]
        if n > self.max_len:
            raise ValueError(f"prefix length {n} exceeds max_len={self.max_len}")
        pos = torch.arange(n, device=self.pos.weight.device)
        x = self.drop(embed(self.tok, prefix) + self.pos(pos))
        blocked = causal_mask(n, x.device).unsqueeze(0)
        for blk in self.blocks:
            x = blk(x, blocked)
        return self.out(self.norm(x))

    def freeze(self) -> "PriorLM":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def prior_token_logprobs(prior: PriorLM, prefix: torch.Tensor | SoftTokens,
                         strict: bool = True) -> torch.Tensor:
    """Next-token log-probabilities ``(B, L, V)`` after each prefix position."""
    if strict and not prior.trained:
        raise RuntimeError("prior has not been trained")
    if isinstance(prefix, SoftTokens):
        prefix.check_simplex()
        first = prefix.hard_ids[:, 0]
    else:
        first = prefix[:, 0]
    if (first != BOS).any():
        raise ValueError("prefix must begin with BOS")
    return F.log_softmax(prior(prefix), -1)


def _nll(prior: PriorLM, batch: torch.Tensor) -> tuple[float, int]:
    logits = prior(batch[:, :-1])
    gold = batch[:, 1:]
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gold.reshape(-1),
                           ignore_index=PAD, reduction="sum")
    return loss, int((gold != PAD).sum())


@torch.no_grad()
def perplexity(prior: PriorLM, seqs: list[TokenSequence], batch_size: int = 256) -> float:
    was = prior.training
    prior.eval()
    total, count = 0.0, 0
    for batch in batch_iter(seqs, batch_size, seed=0, epoch=0):
        loss, n = _nll(prior, batch)
        total += float(loss)
        count += n
    prior.train(was)
    return math.exp(total / count)


def train_prior(mono: list[TokenSequence], config: PriorConfig) -> tuple[PriorLM, list[float]]:
    """Next-token cross-entropy training; returns the best held-out checkpoint and ppl history."""
    if not mono:
        raise ValueError("empty corpus")
    torch.manual_seed(config.seed)
    prior = PriorLM(**config.model_fields())
    order = list(range(len(mono)))
    random.Random(config.seed).shuffle(order)
    n_held = int(len(mono) * config.heldout_frac)
    held = [mono[i] for i in order[:n_held]] or list(mono)
    train = [mono[i] for i in order[n_held:]] or list(mono)
    opt = torch.optim.Adam(prior.parameters(), lr=config.lr)
    best, best_state, history = math.inf, None, []
    for epoch in range(config.epochs):
        prior.train()
        for batch in batch_iter(train, config.batch_size, config.seed, epoch):
            loss, n = _nll(prior, batch)
            opt.zero_grad()
            (loss / n).backward()
            opt.step()
        ppl = perplexity(prior, held)
        history.append(ppl)
        log.info("prior epoch %d held-out ppl %.3f", epoch, ppl)
        if ppl < best:
            best, best_state = ppl, copy.deepcopy(prior.state_dict())
    prior.load_state_dict(best_state)
    prior.trained = True
    return prior.freeze(), history
