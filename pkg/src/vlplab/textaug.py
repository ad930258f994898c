"""Caption augmentation: multi-caption sampling, stop-word removal and EDA edits."""

from __future__ import annotations

import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

TokenSequence = list[str]

_PUNCT = string.punctuation


class EmptyCaptionList(ValueError):
    pass


class EmptyCaption(ValueError):
    pass


def tokenize(caption: str) -> TokenSequence:
    """Lowercase, split on whitespace, strip punctuation at token boundaries."""
    tokens = [tok.strip(_PUNCT) for tok in caption.lower().split()]
    tokens = [tok for tok in tokens if tok]
    if not tokens:
        raise EmptyCaption(f"caption {caption!r} has no tokens")
    return tokens


def parse_stopwords(text: str) -> frozenset[str]:
    words = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            words.add(line)
    return frozenset(words)


def parse_thesaurus(text: str) -> dict[str, tuple[str, ...]]:
    table: dict[str, tuple[str, ...]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        word, sep, syns = line.partition("\t")
        if not sep:
            raise ValueError(f"thesaurus line {lineno}: expected word<TAB>synonyms")
        word = word.strip().lower()
        options = tuple(s.strip().lower() for s in syns.split(",") if s.strip() and s.strip().lower() != word)
        if options:
            table[word] = options
    return table


def _read(path: str | Path | None, default: str) -> str:
    if path is None:
        return resources.files("vlplab.data").joinpath(default).read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")


@lru_cache(maxsize=8)
def load_stopwords(path: str | None = None) -> frozenset[str]:
    return parse_stopwords(_read(path, "stopwords.txt"))


@lru_cache(maxsize=8)
def load_thesaurus(path: str | None = None) -> dict[str, tuple[str, ...]]:
    return parse_thesaurus(_read(path, "thesaurus.tsv"))


def remove_stopwords(tokens: Sequence[str], prob: float, rng: np.random.Generator,
                     stopwords: frozenset[str] | None = None) -> TokenSequence:
    """Drop each stop word independently with probability ``prob``.

    One coin is drawn per token, stop word or not. If every token would go,
    the first one is kept.
    """
    stop = load_stopwords() if stopwords is None else stopwords
    coins = rng.random(len(tokens))
    kept = [tok for tok, c in zip(tokens, coins) if not (tok in stop and c < prob)]
    return kept or [tokens[0]]


def eda_count(n_tokens: int, fraction: float = 0.1) -> int:
    return max(1, round(fraction * n_tokens))


def synonym_replacement(tokens: Sequence[str], n_replace: int, thesaurus: dict,
                        rng: np.random.Generator, stopwords: frozenset[str] | None = None) -> TokenSequence:
    stop = load_stopwords() if stopwords is None else stopwords
    out = list(tokens)
    candidates = [i for i, tok in enumerate(out) if tok not in stop and tok in thesaurus]
    if n_replace <= 0 or not candidates:
        return out
    order = rng.permutation(len(candidates))
    for j in order[:n_replace]:
        i = candidates[j]
        options = thesaurus[out[i]]
        out[i] = options[int(rng.integers(len(options)))]
    return out


def random_swap(tokens: Sequence[str], n_swaps: int, rng: np.random.Generator) -> TokenSequence:
    out = list(tokens)
    if len(out) < 2:
        return out
    for _ in range(max(0, n_swaps)):
        i, j = rng.choice(len(out), size=2, replace=False)
        out[i], out[j] = out[j], out[i]
    return out


def random_deletion(tokens: Sequence[str], prob: float, rng: np.random.Generator) -> TokenSequence:
    coins = rng.random(len(tokens))
    kept = [tok for tok, c in zip(tokens, coins) if c >= prob]
    if kept:
        return kept
    return [tokens[int(rng.integers(len(tokens)))]]


@dataclass(frozen=True)
class TextAugConfig:
    stopword_prob: float = 0.8
    eda_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)
    deletion_prob: float = 0.1
    eda_fraction: float = 0.1
    n_replace: int | None = None  # None: max(1, round(eda_fraction * len))
    n_swaps: int | None = None
    multi_caption: bool = True
    stopwords_path: str | None = None
    thesaurus_path: str | None = None


EDA_BRANCHES = ("synonym_replacement", "random_swap", "random_deletion")


def draw_eda_branch(rng: np.random.Generator, probs=(0.4, 0.4, 0.2)) -> int:
    return int(rng.choice(3, p=np.asarray(probs, dtype=np.float64)))


def augment_text(captions: Sequence[str], mode: str, cfg: TextAugConfig,
                 rng: np.random.Generator) -> TokenSequence:
    """Weak: sample a caption and drop stop words. Strong: also one EDA edit.

    RNG order: caption index, stop-word coins, then (strong only) the EDA
    branch and the branch's own draws.
    """
    if not captions:
        raise EmptyCaptionList("sample has no captions")
    if mode not in ("weak", "strong"):
        raise ValueError(f"mode must be 'weak' or 'strong', got {mode!r}")
    idx = int(rng.integers(len(captions)))
    caption = captions[idx] if cfg.multi_caption else captions[0]
    stop = load_stopwords(cfg.stopwords_path)
    tokens = remove_stopwords(tokenize(caption), cfg.stopword_prob, rng, stop)
    if mode == "weak":
        return tokens
    branch = draw_eda_branch(rng, cfg.eda_probs)
    if branch == 0:
        n = cfg.n_replace if cfg.n_replace is not None else eda_count(len(tokens), cfg.eda_fraction)
        return synonym_replacement(tokens, n, load_thesaurus(cfg.thesaurus_path), rng, stop)
    if branch == 1:
        n = cfg.n_swaps if cfg.n_swaps is not None else eda_count(len(tokens), cfg.eda_fraction)
        return random_swap(tokens, n, rng)
    return random_deletion(tokens, cfg.deletion_prob, rng)
