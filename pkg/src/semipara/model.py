"""Shared-parameter transformer: one encoder and one decoder serve every direction."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import BOS, EOS, PAD, TokenSequence, pad_batch


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 6
    hidden: int = 512
    heads: int = 8
    ffn_mult: int = 4
    dropout: float = 0.1
    max_len: int = 20

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")

    def to_dict(self) -> dict:
        return asdict(self)


class SoftTokens(NamedTuple):
    """Per-position convex mixtures over a few candidate token ids.

    ``candidate_ids`` is ``(B, L, k)`` and ``weights`` is ``(B, L, k)``;
    one-hot weights reproduce hard tokens exactly.
    """

    candidate_ids: torch.Tensor
    weights: torch.Tensor

    @property
    def hard_ids(self) -> torch.Tensor:
        idx = self.weights.argmax(-1, keepdim=True)
        return self.candidate_ids.gather(-1, idx).squeeze(-1)

    @classmethod
    def from_ids(cls, ids: torch.Tensor, dtype=torch.float32) -> "SoftTokens":
        return cls(ids.unsqueeze(-1), torch.ones(*ids.shape, 1, dtype=dtype))

    def check_simplex(self, tol: float = 1e-5) -> None:
        w = self.weights.detach()
        if (w < -tol).any() or ((w.sum(-1) - 1).abs() > tol).any():
            raise ValueError("soft token weights are off the simplex")


class ContextMemory(NamedTuple):
    hidden: torch.Tensor  # (B, L, d)
    pad_mask: torch.Tensor  # (B, L), True at PAD


def embed(table: nn.Embedding, tokens: torch.Tensor | SoftTokens) -> torch.Tensor:
    if isinstance(tokens, SoftTokens):
        vecs = table(tokens.candidate_ids)
        return (tokens.weights.unsqueeze(-1).to(vecs.dtype) * vecs).sum(-2)
    return table(tokens)


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).triu(1)


class Attention(nn.Module):
    def __init__(self, hidden: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.kv = nn.Linear(hidden, 2 * hidden)
        self.out = nn.Linear(hidden, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, blocked):
        # blocked: bool broadcastable to (B, Lq, Lk), True = no attention
        b, lq, d = x.shape
        lk = mem.shape[1]
        dh = d // self.heads
        q = self.q(x).view(b, lq, self.heads, dh).transpose(1, 2)
        k, v = self.kv(mem).view(b, lk, 2, self.heads, dh).unbind(2)
        k, v = k.transpose(1, 2), v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        scores = scores.masked_fill(blocked.unsqueeze(1), float("-inf"))
        att = self.drop(scores.softmax(-1))
        y = (att @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block; cross-attention only when ``cross`` is set."""

    def __init__(self, hidden: int, heads: int, ffn_mult: int, dropout: float, cross: bool):
        super().__init__()
        self.ln_self = nn.LayerNorm(hidden)
        self.self_att = Attention(hidden, heads, dropout)
        self.ln_cross = nn.LayerNorm(hidden) if cross else None
        self.cross_att = Attention(hidden, heads, dropout) if cross else None
        self.ln_ffn = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(nn.Linear(hidden, ffn_mult * hidden), nn.GELU(),
                                 nn.Linear(ffn_mult * hidden, hidden))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, self_blocked, mem=None, mem_blocked=None):
        h = self.ln_self(x)
        x = x + self.drop(self.self_att(h, h, self_blocked))
        if self.cross_att is not None:
            x = x + self.drop(self.cross_att(self.ln_cross(x), mem, mem_blocked))
        return x + self.drop(self.ffn(self.ln_ffn(x)))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)


class SharedSeq2Seq(nn.Module):
    """A single encoder and a single decoder used for s->t, t->s and the latent roles."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.enc_tok = nn.Embedding(c.vocab_size, c.hidden)
        self.enc_pos = nn.Embedding(c.max_len, c.hidden)
        self.enc_blocks = nn.ModuleList(
            Block(c.hidden, c.heads, c.ffn_mult, c.dropout, cross=False) for _ in range(c.layers))
        self.enc_norm = nn.LayerNorm(c.hidden)
        self.dec_tok = nn.Embedding(c.vocab_size, c.hidden)
        self.dec_pos = nn.Embedding(c.max_len, c.hidden)
        self.dec_blocks = nn.ModuleList(
            Block(c.hidden, c.heads, c.ffn_mult, c.dropout, cross=True) for _ in range(c.layers))
        self.dec_norm = nn.LayerNorm(c.hidden)
        self.out_proj = nn.Linear(c.hidden, c.vocab_size)
        self.drop = nn.Dropout(c.dropout)
        init_weights(self)

    def _check_len(self, n: int) -> None:
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len={self.config.max_len}")

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(("enc_",))]

    def decoder_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith(("dec_", "out_proj"))]

    def encode(self, tokens: torch.Tensor | SoftTokens, pad_mask: torch.Tensor | None = None
               ) -> ContextMemory:
        if isinstance(tokens, SoftTokens):
            tokens.check_simplex()
            ids = tokens.hard_ids
        else:
            ids = tokens
        b, n = ids.shape
        self._check_len(n)
        if pad_mask is None:
            pad_mask = ids == PAD
        pos = torch.arange(n, device=ids.device)
        x = self.drop(embed(self.enc_tok, tokens) + self.enc_pos(pos))
        blocked = pad_mask.unsqueeze(1)
        for blk in self.enc_blocks:
            x = blk(x, blocked)
        return ContextMemory(self.enc_norm(x), pad_mask)

    def _decode(self, memory: ContextMemory, prefix, n: int) -> torch.Tensor:
        self._check_len(n)
        pos = torch.arange(n, device=memory.hidden.device)
        x = self.drop(embed(self.dec_tok, prefix) + self.dec_pos(pos))
        self_blocked = causal_mask(n, x.device).unsqueeze(0)
        mem_blocked = memory.pad_mask.unsqueeze(1)
        for blk in self.dec_blocks:
            x = blk(x, self_blocked, memory.hidden, mem_blocked)
        return self.out_proj(self.dec_norm(x))

    def decode_logits(self, memory: ContextMemory, prefix: torch.Tensor) -> torch.Tensor:
        """Next-token logits ``(B, L, V)``; position i sees prefix[:i+1] only."""
        if prefix.dim() != 2 or prefix.shape[1] == 0:
            raise ValueError("empty prefix")
        if (prefix[:, 0] != BOS).any():
            raise ValueError("prefix must begin with BOS")
        return self._decode(memory, prefix, prefix.shape[1])

    def decode_soft(self, memory: ContextMemory, soft_prefix: SoftTokens) -> torch.Tensor:
        soft_prefix.check_simplex()
        n = soft_prefix.candidate_ids.shape[1]
        if n == 0:
            raise ValueError("empty prefix")
        return self._decode(memory, soft_prefix, n)

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        return self.decode_logits(self.encode(src), tgt_in)

    @torch.no_grad()
    def greedy_decode(self, source: torch.Tensor | TokenSequence | list, max_len: int | None = None
                      ) -> list[list[int]]:
        """Argmax decoding from BOS until EOS or ``max_len`` ids (BOS included)."""
        if isinstance(source, TokenSequence):
            source = pad_batch([source])
        elif isinstance(source, list):
            source = pad_batch(source)
        max_len = min(max_len or self.config.max_len, self.config.max_len)
        was_training = self.training
        self.eval()
        try:
            memory = self.encode(source)
            b = source.shape[0]
            out = torch.full((b, 1), BOS, dtype=torch.long, device=source.device)
            done = torch.zeros(b, dtype=torch.bool, device=source.device)
            while out.shape[1] < max_len and not done.all():
                logits = self.decode_logits(memory, out)[:, -1]
                logits[:, PAD] = float("-inf")
                logits[:, BOS] = float("-inf")
                nxt = logits.argmax(-1)
                nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
                out = torch.cat([out, nxt[:, None]], 1)
                done |= nxt == EOS
        finally:
            self.train(was_training)
        rows = []
        for row in out.tolist():
            if EOS in row:
                row = row[: row.index(EOS) + 1]
            rows.append(row)
        return rows


def teacher_forced_logprob(model: SharedSeq2Seq, src, tgt: torch.Tensor, memory=None
                           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sequence sum of log p(tgt | src) and the count of scored tokens.

    ``src`` may be hard ids or SoftTokens; ``tgt`` is a padded BOS..EOS batch.
    """
    if memory is None:
        memory = model.encode(src)
    logits = model.decode_logits(memory, tgt[:, :-1])
    gold = tgt[:, 1:]
    logp = F.log_softmax(logits, -1).gather(-1, gold.unsqueeze(-1)).squeeze(-1)
    keep = gold != PAD
    return (logp * keep).sum(-1), keep.sum(-1)
