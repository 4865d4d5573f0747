"""BLEU, self-BLEU, i-BLEU, ROUGE, bound rows and the Wilcoxon signed-rank test."""
from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

Tokens = Sequence[str]
BLEU_EPS = 1e-9
TABLE_COLUMNS = ("B-1", "B-2", "B-3", "B-4", "i-B", "R-1", "R-2", "R-L")


def _toks(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_aligned(a, b) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} candidates vs {len(b)} references")
    if not a:
        raise ValueError("no examples")


def corpus_bleu(candidates: Sequence, reference_lists: Sequence[Sequence], n: int = 4,
                eps: float = BLEU_EPS) -> float:
    """Corpus BLEU-n in [0, 100] with clipped counts and brevity penalty.

    A zero n-gram precision is replaced by ``eps / total`` so scores stay
    positive instead of collapsing. Orders for which the candidates hold no
    n-grams at all are vacuous and count as precision 1.
    """
    _check_aligned(candidates, reference_lists)
    match = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, reference_lists):
        cand = _toks(cand)
        refs = [_toks(r) for r in refs]
        if not refs:
            raise ValueError("example without references")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for m in range(1, n + 1):
            counts = ngrams(cand, m)
            best = Counter()
            for r in refs:
                best |= ngrams(r, m)
            match[m - 1] += sum(min(c, best[g]) for g, c in counts.items())
            total[m - 1] += max(len(cand) - m + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for hit, tot in zip(match, total):
        if tot == 0:
            continue
        p = hit / tot if hit > 0 else eps / tot
        log_p += math.log(p) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def sentence_bleu(candidate, references: Sequence, n: int = 4) -> float:
    return corpus_bleu([candidate], [references], n)


def self_bleu(candidates: Sequence, sources: Sequence) -> float:
    """BLEU-4 of candidates against their own sources."""
    _check_aligned(candidates, sources)
    return corpus_bleu(candidates, [[s] for s in sources], 4)


def i_bleu(bleu4: float, self_bleu4: float, alpha: float = 0.9) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * bleu4 - (1 - alpha) * self_bleu4


def _f1(hit: int, n_cand: int, n_ref: int) -> float:
    if hit == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = hit / n_cand, hit / n_ref
    return 2 * p * r / (p + r)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_n(cand: Tokens, ref: Tokens, n: int) -> float:
    c, r = ngrams(cand, n), ngrams(ref, n)
    return _f1(sum((c & r).values()), sum(c.values()), sum(r.values()))


def rouge_l(cand: Tokens, ref: Tokens) -> float:
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


def rouge_scores(candidates: Sequence, reference_lists: Sequence[Sequence]
                 ) -> tuple[float, float, float]:
    """Mean over examples of the best-reference ROUGE-1/2/L F1, each in [0, 100]."""
    _check_aligned(candidates, reference_lists)
    sums = [0.0, 0.0, 0.0]
    for cand, refs in zip(candidates, reference_lists):
        cand = _toks(cand)
        refs = [_toks(r) for r in refs]
        sums[0] += max(rouge_n(cand, r, 1) for r in refs)
        sums[1] += max(rouge_n(cand, r, 2) for r in refs)
        sums[2] += max(rouge_l(cand, r) for r in refs)
    k = len(candidates)
    return tuple(100.0 * s / k for s in sums)


@dataclass
class MetricsReport:
    bleu: dict
    self_bleu: float
    i_bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    n_examples: int

    def row(self) -> list[float]:
        return [self.bleu[1], self.bleu[2], self.bleu[3], self.bleu[4], self.i_bleu,
                self.rouge1, self.rouge2, self.rougeL]

    def to_json(self) -> str:
        d = asdict(self)
        d["bleu"] = {str(k): v for k, v in self.bleu.items()}
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["bleu"] = {int(k): v for k, v in d["bleu"].items()}
        return cls(**d)


def metrics_report(candidates: Sequence, reference_lists: Sequence[Sequence],
                   sources: Sequence, alpha: float = 0.9) -> MetricsReport:
    bleu = {n: corpus_bleu(candidates, reference_lists, n) for n in range(1, 5)}
    sb = self_bleu(candidates, sources)
    r1, r2, rl = rouge_scores(candidates, reference_lists)
    return MetricsReport(bleu, sb, i_bleu(bleu[4], sb, alpha), r1, r2, rl, len(candidates))


def format_table(rows: dict[str, MetricsReport], delimiter: str | None = None) -> str:
    """Aligned (or delimited) table with columns B-1..B-4, i-B, R-1, R-2, R-L."""
    if delimiter is not None:
        lines = [delimiter.join(("model",) + TABLE_COLUMNS)]
        for name, rep in rows.items():
            lines.append(delimiter.join([name] + [f"{v:.2f}" for v in rep.row()]))
        return "\n".join(lines) + "\n"
    width = max([len("model")] + [len(n) for n in rows])
    lines = [f"{'model':<{width}}" + "".join(f"{c:>8}" for c in TABLE_COLUMNS)]
    for name, rep in rows.items():
        lines.append(f"{name:<{width}}" + "".join(f"{v:>8.2f}" for v in rep.row()))
    return "\n".join(lines) + "\n"


def bounds_rows(sources: Sequence, reference_lists: Sequence[Sequence], seed: int = 1000,
                alpha: float = 0.9) -> tuple[MetricsReport, MetricsReport]:
    """Copy-source (upper) and random-select (lower) reference rows."""
    _check_aligned(sources, reference_lists)
    upper = metrics_report(sources, reference_lists, sources, alpha)
    rng = random.Random(seed)
    k = len(sources)
    picks = []
    for i in range(k):
        j = rng.randrange(k - 1) if k > 1 else 0
        if k > 1 and j >= i:
            j += 1
        picks.append(rng.choice(list(reference_lists[j])))
    lower = metrics_report(picks, reference_lists, sources, alpha)
    return upper, lower


def sentence_scores(candidates: Sequence, reference_lists: Sequence[Sequence],
                    n: int = 4) -> list[float]:
    """Per-example sentence BLEU-n, the paired scores fed to the signed-rank test."""
    _check_aligned(candidates, reference_lists)
    return [sentence_bleu(c, refs, n) for c, refs in zip(candidates, reference_lists)]


def evaluate_checkpoint(model, vocab, rows, alpha: float = 0.9, batch_size: int = 256
                        ) -> tuple[MetricsReport, list[str]]:
    """Greedy-decode every test source and score it against its references.

    ``rows`` holds ``(source TokenSequence, [reference text, ...])``. Returns
    the report and the decoded candidates.
    """
    from .data import decode_ids

    if not rows:
        raise ValueError("no examples")
    sources = [src for src, _ in rows]
    hyps = []
    for i in range(0, len(sources), batch_size):
        hyps += model.greedy_decode(sources[i:i + batch_size])
    candidates = [decode_ids(vocab, h) for h in hyps]
    source_text = [decode_ids(vocab, s.ids) for s in sources]
    return metrics_report(candidates, [refs for _, refs in rows], source_text, alpha), candidates


def _signed_ranks(a: Sequence[float], b: Sequence[float]) -> tuple[list[float], list[float]]:
    """Pratt handling: zeros are ranked with the rest, then dropped."""
    if len(a) != len(b):
        raise ValueError("score lists differ in length")
    if len(a) < 6:
        raise ValueError("need at least 6 paired scores")
    d = [x - y for x, y in zip(a, b)]
    if all(v == 0 for v in d):
        raise ValueError("all differences zero")
    order = sorted(range(len(d)), key=lambda i: abs(d[i]))
    ranks = [0.0] * len(d)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and abs(d[order[j + 1]]) == abs(d[order[i]]):
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2 + 1
        i = j + 1
    nz = [i for i in range(len(d)) if d[i] != 0]
    return [ranks[i] for i in nz], [math.copysign(1.0, d[i]) for i in nz]


def _exact_p(ranks: list[float], w_plus: float) -> float:
    # midranks are multiples of 1/2, so doubled ranks are integers
    doubled = [int(round(2 * r)) for r in ranks]
    total = sum(doubled)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled:
        for s in range(total, r - 1, -1):
            counts[s] += counts[s - r]
    w = int(round(2 * w_plus))
    n_all = 2 ** len(doubled)
    lower = sum(counts[: w + 1]) / n_all
    upper = sum(counts[w:]) / n_all
    return min(1.0, 2 * min(lower, upper))


def wilcoxon_signed_rank(scores_a: Sequence[float], scores_b: Sequence[float],
                         exact_max_n: int = 25) -> float:
    """Two-sided p-value; exact null distribution for n <= ``exact_max_n``."""
    ranks, signs = _signed_ranks(scores_a, scores_b)
    w_plus = sum(r for r, s in zip(ranks, signs) if s > 0)
    if len(scores_a) <= exact_max_n:
        return _exact_p(ranks, w_plus)
    mean = sum(ranks) / 2
    sd = math.sqrt(sum(r * r for r in ranks) / 4)
    z = (w_plus - mean) / sd
    return min(1.0, math.erfc(abs(z) / math.sqrt(2)))
