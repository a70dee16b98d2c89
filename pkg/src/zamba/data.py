"""Bundled training text and a synthetic high-quality split for annealing runs.

The bundled corpus is public-domain Milton (Paradise Lost, Paradise Regained,
Areopagitica and the shorter poems), about 0.9 MB of UTF-8 text.
"""

from __future__ import annotations

import gzip
from functools import lru_cache
from importlib import resources

import numpy as np

from .corpus import byte_tokenize

__all__ = ["bundled_text", "bundled_tokens", "split_tokens", "synthetic_text", "synthetic_tokens"]


@lru_cache(maxsize=1)
def bundled_text() -> str:
    raw = resources.files("zamba").joinpath("data/milton.txt.gz").read_bytes()
    return gzip.decompress(raw).decode("utf-8")


def bundled_tokens() -> np.ndarray:
    return byte_tokenize(bundled_text(), specials=False)


def split_tokens(tokens: np.ndarray, val_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous train/validation split; validation is the tail."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    cut = int(round(len(tokens) * (1 - val_fraction)))
    return tokens[:cut], tokens[cut:]


_NAMES = ["Ada", "Brook", "Cyril", "Dana", "Elin", "Farid", "Gwen", "Hugo", "Iris", "Jonas",
          "Kira", "Lev", "Mina", "Nils", "Orla", "Pavel"]
_THINGS = ["apples", "books", "coins", "lamps", "maps", "pens", "shells", "stones"]
_PLACES = ["the market", "the library", "the harbour", "the garden", "the mill", "the school"]
_NUMBERS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
            "ten", "eleven", "twelve"]


def _sentence(rng: np.random.Generator) -> str:
    a, b = rng.choice(len(_NAMES), size=2, replace=False)
    who, other = _NAMES[a], _NAMES[b]
    thing = _THINGS[rng.integers(len(_THINGS))]
    kind = rng.integers(4)
    if kind == 0:
        n = int(rng.integers(2, 13))
        k = int(rng.integers(1, n + 1))
        return (f"{who} has {_NUMBERS[n]} {thing}. {who} gives {_NUMBERS[k]} to {other}. "
                f"Now {who} has {_NUMBERS[n - k]} {thing}.")
    if kind == 1:
        x, y = (int(v) for v in rng.integers(0, 7, size=2))
        return f"{_NUMBERS[x].capitalize()} plus {_NUMBERS[y]} is {_NUMBERS[x + y]}."
    if kind == 2:
        place = _PLACES[rng.integers(len(_PLACES))]
        return f"In the morning {who} walks to {place}, and {other} walks home from {place}."
    n = int(rng.integers(1, 13))
    return f"{who} counts {_NUMBERS[n]} {thing} and writes the number {n} in a notebook."


def synthetic_text(n_chars: int, seed: int = 0) -> str:
    """Clean templated prose: small vocabulary, consistent arithmetic, regular syntax."""
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    size = 0
    while size < n_chars:
        para = " ".join(_sentence(rng) for _ in range(int(rng.integers(3, 7))))
        parts.append(para)
        size += len(para) + 2
    return "\n\n".join(parts)[:n_chars]


def synthetic_tokens(n_chars: int, seed: int = 0) -> np.ndarray:
    return byte_tokenize(synthetic_text(n_chars, seed), specials=False)
