"""Training objectives: latent-sequence ELBO, dual directional likelihood and their sum.

All log-likelihood quantities follow the "higher is better" convention and are
scaled as per-token means; the per-sequence sums are kept on the bundle for
exact checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .data import BOS, EOS, PAD, UNK
from .model import ContextMemory, SharedSeq2Seq, SoftTokens, teacher_forced_logprob
from .prior import PriorLM, prior_token_logprobs
from .sampling import LatentSample, gumbel_topk_sample, straight_through

LATENT_BANNED_IDS = (PAD, BOS, EOS, UNK)


def latent_banned(vocab_size: int, device=None) -> torch.Tensor:
    mask = torch.zeros(vocab_size, dtype=torch.bool, device=device)
    mask[list(LATENT_BANNED_IDS)] = True
    return mask


def seq_lengths(batch: torch.Tensor) -> torch.Tensor:
    return (batch != PAD).sum(-1)


@dataclass
class LossBundle:
    recon_nll: torch.Tensor | None = None
    kl: torch.Tensor | None = None
    l1: torch.Tensor | None = None
    l2_st: torch.Tensor | None = None
    l2_ts: torch.Tensor | None = None
    l2: torch.Tensor | None = None
    combined: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)

    def record(self) -> dict:
        """Float view for logging; absent terms are left out."""
        out = {}
        for name in ("l1", "l2_st", "l2_ts", "l2", "kl", "recon_nll", "combined"):
            v = getattr(self, name)
            if v is not None:
                out[name] = float(v.detach())
        return out


@torch.no_grad()
def weak_supervision_labels(model: SharedSeq2Seq, source: torch.Tensor,
                            memory: ContextMemory | None = None) -> torch.Tensor:
    """Greedy pseudo-targets with exactly the source's length.

    Each row is ``BOS, t*_1..t*_n, EOS`` padded like ``source``; special ids are
    never chosen for the n content positions. The result carries no graph.
    """
    was_training = model.training
    model.eval()
    try:
        if memory is None:
            memory = model.encode(source)
        memory = ContextMemory(memory.hidden.detach(), memory.pad_mask)
        b, width = source.shape
        lengths = seq_lengths(source)
        banned = latent_banned(model.config.vocab_size, source.device)
        out = torch.full((b, 1), BOS, dtype=torch.long, device=source.device)
        for _ in range(width - 2):
            logits = model.decode_logits(memory, out)[:, -1]
            nxt = logits.masked_fill(banned, float("-inf")).argmax(-1)
            out = torch.cat([out, nxt[:, None]], 1)
    finally:
        model.train(was_training)
    pos = torch.arange(width, device=source.device)
    pseudo = torch.full_like(source, PAD)
    pseudo[:, : out.shape[1]] = out
    pseudo = torch.where(pos[None] == lengths[:, None] - 1, torch.full_like(pseudo, EOS), pseudo)
    pseudo = torch.where(pos[None] >= lengths[:, None], torch.full_like(pseudo, PAD), pseudo)
    return pseudo


def content_mask(batch: torch.Tensor) -> torch.Tensor:
    """``(B, W-2)`` mask of the content positions 1..n of each BOS..EOS row."""
    lengths = seq_lengths(batch)
    pos = torch.arange(batch.shape[1] - 2, device=batch.device)
    return pos[None] < (lengths[:, None] - 2)


def latent_inference(model: SharedSeq2Seq, memory: ContextMemory, pseudo: torch.Tensor,
                     tau: float, k: int, generator: torch.Generator | None = None,
                     noise: torch.Tensor | None = None
                     ) -> tuple[torch.Tensor, LatentSample]:
    """Teacher-force the pseudo-prefix once and draw a TOP-k sample per content position.

    Returns the inference logits ``(B, n, V)`` and the sample over the same positions.
    """
    if pseudo.shape[0] != memory.hidden.shape[0]:
        raise ValueError("pseudo-targets and source batch are misaligned")
    logits = model.decode_logits(memory, pseudo[:, :-1])[:, : pseudo.shape[1] - 2]
    banned = latent_banned(logits.shape[-1], logits.device)
    sample = gumbel_topk_sample(logits, tau, k, generator, noise=noise, banned=banned)
    return logits, sample


def latent_tokens(pseudo: torch.Tensor, sample: LatentSample, weights: torch.Tensor | None = None
                  ) -> SoftTokens:
    """Full BOS..EOS soft sequence: sampled content, hard one-hot specials.

    ``weights`` defaults to the straight-through weights of ``sample``.
    """
    if weights is None:
        weights = straight_through(sample)
    b, width = pseudo.shape
    k = sample.candidate_ids.shape[-1]
    cand = torch.full((b, width, k), PAD, dtype=torch.long, device=pseudo.device)
    cand[..., 0] = pseudo
    base_w = torch.zeros(b, width, k, dtype=weights.dtype, device=pseudo.device)
    base_w[..., 0] = 1.0
    inner = content_mask(pseudo).unsqueeze(-1)
    mid_c = torch.where(inner, sample.candidate_ids, cand[:, 1:-1])
    mid_w = torch.where(inner, weights, base_w[:, 1:-1])
    cand = torch.cat([cand[:, :1], mid_c, cand[:, -1:]], 1)
    w = torch.cat([base_w[:, :1], mid_w, base_w[:, -1:]], 1)
    return SoftTokens(cand, w)


def reconstruction_logprob(model: SharedSeq2Seq, latent: SoftTokens, source: torch.Tensor,
                           pad_mask: torch.Tensor | None = None
                           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sequence log p(source | latent) and the number of scored tokens."""
    memory = model.encode(latent, pad_mask)
    return teacher_forced_logprob(model, None, source, memory=memory)


def categorical_kl(q: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    """KL(q || p) over the last axis, treating 0 log 0 as 0."""
    return (torch.xlogy(q, q) - q * log_p).sum(-1)


def kl_estimate(inference_logits: torch.Tensor, sample: LatentSample, prior: PriorLM,
                mask: torch.Tensor | None = None, strict: bool = True) -> torch.Tensor:
    """Per-sequence KL between the inference and prior distributions on the TOP-k support.

    At each position both distributions are renormalized over the k sampled
    candidates; the prior is conditioned on the hard latent prefix.
    """
    if prior is None:
        raise ValueError("a prior is required for the KL term")
    cand = sample.candidate_ids
    q = F.softmax(inference_logits.gather(-1, cand), -1)
    b = cand.shape[0]
    prefix = torch.cat([torch.full((b, 1), BOS, dtype=torch.long, device=cand.device),
                        sample.hard_ids[:, :-1]], 1)
    prior_lp = prior_token_logprobs(prior, prefix, strict=strict)
    log_p = F.log_softmax(prior_lp.gather(-1, cand), -1)
    kl = categorical_kl(q, log_p)
    if mask is not None:
        kl = kl * mask
    return kl.sum(-1)


def vsar_loss(model: SharedSeq2Seq, prior: PriorLM | None, source: torch.Tensor, tau: float,
              k: int, generator: torch.Generator | None = None,
              probe: Callable[[torch.Tensor, torch.Tensor], None] | None = None,
              strict_prior: bool = True) -> LossBundle:
    """Single-sample ELBO on unlabelled sources; ``prior=None`` drops the KL term."""
    if source.shape[0] == 0:
        raise ValueError("empty batch")
    memory = model.encode(source)
    pseudo = weak_supervision_labels(model, source, memory)
    if probe is not None:
        probe(source, pseudo)
    logits, sample = latent_inference(model, memory, pseudo, tau, k, generator)
    latent = latent_tokens(pseudo, sample)
    recon_seq, count = reconstruction_logprob(model, latent, source, pseudo == PAD)
    mask = content_mask(pseudo)
    if prior is not None:
        kl_seq = kl_estimate(logits, sample, prior, mask, strict=strict_prior)
    else:
        kl_seq = torch.zeros_like(recon_seq)
    tokens = count.sum()
    recon_nll = -recon_seq.sum() / tokens
    kl = kl_seq.sum() / tokens if prior is not None else None
    l1 = -recon_nll - kl if kl is not None else -recon_nll
    return LossBundle(recon_nll=recon_nll, kl=kl, l1=l1, combined=l1,
                      extras={"recon_seq": recon_seq, "kl_seq": kl_seq, "pseudo": pseudo,
                              "sample": sample, "tokens": count})


def direction_logprob(model: SharedSeq2Seq, src: torch.Tensor, tgt: torch.Tensor
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    total, count = teacher_forced_logprob(model, src, tgt)
    return total.sum(), count.sum()


def ddl_loss(model: SharedSeq2Seq, source: torch.Tensor, target: torch.Tensor) -> LossBundle:
    """Dual conditional log-likelihood with the one shared encoder/decoder."""
    if source.shape[0] == 0:
        raise ValueError("empty batch")
    ts, n_t = direction_logprob(model, source, target)
    st, n_s = direction_logprob(model, target, source)
    l2_ts, l2_st = ts / n_t, st / n_s
    l2 = l2_st + l2_ts
    return LossBundle(l2_st=l2_st, l2_ts=l2_ts, l2=l2, combined=l2)


def single_direction_loss(model: SharedSeq2Seq, source: torch.Tensor, target: torch.Tensor
                          ) -> LossBundle:
    """Plain s->t transformer objective (baseline)."""
    ts, n_t = direction_logprob(model, source, target)
    l2_ts = ts / n_t
    return LossBundle(l2_ts=l2_ts, combined=l2_ts)


def combined_loss(model: SharedSeq2Seq, prior: PriorLM | None,
                  pairs: tuple[torch.Tensor, torch.Tensor] | None, source: torch.Tensor | None,
                  tau: float, k: int, generator: torch.Generator | None = None,
                  strict_prior: bool = True) -> LossBundle:
    """L1 + L2 on a labelled and an unlabelled batch; either may be empty."""
    has_pairs = pairs is not None and pairs[0].shape[0] > 0
    has_mono = source is not None and source.shape[0] > 0
    if not (has_pairs or has_mono):
        raise ValueError("both batches are empty")
    out = LossBundle()
    if has_pairs:
        d = ddl_loss(model, *pairs)
        out.l2_st, out.l2_ts, out.l2 = d.l2_st, d.l2_ts, d.l2
    if has_mono:
        v = vsar_loss(model, prior, source, tau, k, generator, strict_prior=strict_prior)
        out.recon_nll, out.kl, out.l1, out.extras = v.recon_nll, v.kl, v.l1, v.extras
    if has_pairs and has_mono:
        out.combined = out.l1 + out.l2
    else:
        out.combined = out.l2 if has_pairs else out.l1
    return out
