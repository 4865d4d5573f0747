"""Synthetic synonym-bijection language used for desk-scale experiments.

Every content word belongs to a synonym pair. A source sentence uses a random
member of each pair; its paraphrase swaps every content word for its partner
and keeps function words in place. The mapping is an involution, so source
and target text share one distribution.
"""
from __future__ import annotations

import random
from pathlib import Path

NOUNS = [("cat", "feline"), ("dog", "hound"), ("car", "auto"), ("house", "home"),
         ("boy", "lad"), ("girl", "lass"), ("road", "street"), ("stone", "rock"),
         ("ship", "boat")]
VERBS = [("sees", "spots"), ("likes", "enjoys"), ("takes", "grabs"),
         ("finds", "locates"), ("holds", "grips")]
ADJECTIVES = [("big", "large"), ("small", "little"), ("fast", "quick"),
              ("old", "aged"), ("happy", "glad"), ("red", "crimson")]
DETERMINERS = ("the", "a")
FUNCTION_WORDS = ("the", "a", "with", "and", "of")

SYNONYM = {}
for _a, _b in NOUNS + VERBS + ADJECTIVES:
    SYNONYM[_a], SYNONYM[_b] = _b, _a

VERB_WORDS = {w for pair in VERBS for w in pair}
MIN_WORDS, MAX_WORDS = 5, 12


def all_words() -> list[str]:
    return sorted(set(FUNCTION_WORDS) | set(SYNONYM))


def paraphrase(sentence: str) -> str:
    """Swap subject and object phrases, then every content word for its synonym."""
    words = sentence.split()
    verb = next(i for i, w in enumerate(words) if w in VERB_WORDS)
    end = next((i for i, w in enumerate(words) if w == "and"), len(words))
    words = words[verb + 1:end] + [words[verb]] + words[:verb] + words[end:]
    return " ".join(SYNONYM.get(w, w) for w in words)


def _pick(rng: random.Random, pairs, zipf: float) -> str:
    weights = [1.0 / (r + 1) ** zipf for r in range(len(pairs))]
    return rng.choice(rng.choices(pairs, weights)[0])


def _noun_phrase(rng: random.Random, allow_pp: bool, zipf: float) -> list[str]:
    words = [rng.choice(DETERMINERS)]
    words += [_pick(rng, ADJECTIVES, zipf) for _ in range(rng.choice((0, 0, 1, 1, 2)))]
    words.append(_pick(rng, NOUNS, zipf))
    if allow_pp and rng.random() < 0.3:
        words += [rng.choice(("with", "of")), rng.choice(DETERMINERS), _pick(rng, NOUNS, zipf)]
    return words


def sentence(rng: random.Random, zipf: float = 0.0) -> str:
    """One source sentence; ``zipf`` > 0 skews synonym-pair frequencies."""
    while True:
        words = (_noun_phrase(rng, True, zipf) + [_pick(rng, VERBS, zipf)]
                 + _noun_phrase(rng, True, zipf))
        if rng.random() < 0.25:
            words += ["and", _pick(rng, VERBS, zipf)] + _noun_phrase(rng, False, zipf)
        if MIN_WORDS <= len(words) <= MAX_WORDS:
            return " ".join(words)


def make_pairs(n: int, seed: int, zipf: float = 0.0) -> list[tuple[str, str]]:
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        s = sentence(rng, zipf)
        out.append((s, paraphrase(s)))
    return out


def write_tsv(pairs, path: str | Path) -> None:
    Path(path).write_text("".join(f"{s}\t{t}\n" for s, t in pairs), encoding="utf-8")
