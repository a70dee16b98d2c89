"""Corpus preparation: quality filters, 13-gram MinHash, LSH dedup, byte tokenizer."""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "DataError",
    "Document",
    "FilterVerdict",
    "FILTER_RULES",
    "FILTERED_SOURCES",
    "filter_doc",
    "shingle_13grams",
    "minhash",
    "MinHashSignature",
    "LshIndex",
    "candidate_probability",
    "DedupRecord",
    "DedupReport",
    "dedup_corpora",
    "BOS",
    "EOS",
    "VOCAB_SIZE",
    "byte_tokenize",
    "detokenize",
    "detokenize_bytes",
    "read_jsonl",
    "write_jsonl",
]

FILTER_RULES = ("min_length", "mean_word_short", "mean_word_long", "non_alnum_frac", "numeric_frac")
FILTERED_SOURCES = frozenset({"pile", "c4"})
UNPROCESSED_SOURCES = frozenset({"cosmopedia"})

MIN_CHARS = 100
MEAN_WORD_MIN, MEAN_WORD_MAX = 3, 12
# fractions as integer ratios so boundary checks are exact
NON_ALNUM_MAX = (3, 10)
NUMERIC_MAX = (2, 10)

SHINGLE_WORDS = 13
NUM_PERM = 128
BANDS, ROWS = 25, 5


class DataError(ValueError):
    """Malformed or unreadable corpus input."""


@dataclass(frozen=True)
class Document:
    id: str
    source: str
    text: str


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    failed_rule: str | None = None

    def __post_init__(self):
        if self.keep != (self.failed_rule is None):
            raise ValueError("keep must be True exactly when failed_rule is None")


KEEP = FilterVerdict(True)


def filter_doc(doc: Document | str) -> FilterVerdict:
    """Quality heuristics; thresholds are inclusive on the keep side.

    Only ``pile`` and ``c4`` documents are checked; other sources always pass.
    A bare string is checked unconditionally.
    """
    if isinstance(doc, Document):
        if doc.source not in FILTERED_SOURCES:
            return KEEP
        text = doc.text
    else:
        text = doc
    n = len(text)
    if n < MIN_CHARS:
        return FilterVerdict(False, "min_length")
    words = text.split()
    word_chars = sum(len(w) for w in words)
    if not words or word_chars < MEAN_WORD_MIN * len(words):
        return FilterVerdict(False, "mean_word_short")
    if word_chars > MEAN_WORD_MAX * len(words):
        return FilterVerdict(False, "mean_word_long")
    digits = sum(c.isdecimal() for c in text)
    alnum = sum(c.isalpha() for c in text) + digits
    num, den = NON_ALNUM_MAX
    if (n - alnum) * den > num * n:
        return FilterVerdict(False, "non_alnum_frac")
    num, den = NUMERIC_MAX
    if digits * den > num * n:
        return FilterVerdict(False, "numeric_frac")
    return KEEP


# --------------------------------------------------------------------------
# shingling and minhash


def _hash64(s: str) -> int:
    return int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")


def shingle_13grams(text: str, n: int = SHINGLE_WORDS) -> frozenset[int]:
    """64-bit hashes of every contiguous ``n``-word window (lowercased, whitespace split).

    Texts with fewer than ``n`` words give a single shingle of all their words.
    """
    words = text.lower().split()
    if not words:
        raise DataError("cannot shingle an empty text")
    if len(words) < n:
        return frozenset({_hash64(" ".join(words))})
    return frozenset(_hash64(" ".join(words[i:i + n])) for i in range(len(words) - n + 1))


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _salts(seed: int, num_perm: int) -> np.ndarray:
    base = np.arange(num_perm, dtype=np.uint64) + np.uint64(seed % 2**64) * np.uint64(num_perm)
    return _splitmix64(_splitmix64(base))


@dataclass(frozen=True)
class MinHashSignature:
    slots: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.slots.dtype != np.uint64 or self.slots.ndim != 1:
            raise ValueError("signature slots must be a 1-d uint64 array")

    def __len__(self) -> int:
        return len(self.slots)

    def __eq__(self, other) -> bool:
        return isinstance(other, MinHashSignature) and np.array_equal(self.slots, other.slots)

    def __hash__(self) -> int:
        return hash(self.slots.tobytes())

    def match_fraction(self, other: MinHashSignature) -> float:
        return float(np.mean(self.slots == other.slots))


def minhash(shingles: Iterable[int], seed: int = 1, num_perm: int = NUM_PERM) -> MinHashSignature:
    """Slot ``i`` is the minimum over shingles of ``splitmix64(shingle ^ salt_i)``."""
    sh = np.fromiter(shingles, dtype=np.uint64)
    if sh.size == 0:
        raise DataError("minhash of an empty shingle set")
    salts = _salts(seed, num_perm)
    out = np.full(num_perm, np.iinfo(np.uint64).max, dtype=np.uint64)
    for i in range(0, sh.size, 4096):
        np.minimum(out, _splitmix64(salts[:, None] ^ sh[None, i:i + 4096]).min(axis=1), out=out)
    return MinHashSignature(out)


def candidate_probability(s: float, bands: int = BANDS, rows: int = ROWS) -> float:
    return 1.0 - (1.0 - s ** rows) ** bands


class LshIndex:
    """Banded LSH over MinHash signatures; band ``b`` keys on slots ``[rows*b, rows*b + rows)``."""

    def __init__(self, bands: int = BANDS, rows: int = ROWS):
        self.bands = bands
        self.rows = rows
        self.tables: list[dict[bytes, list[str]]] = [defaultdict(list) for _ in range(bands)]
        self._keys: dict[str, list[bytes]] = {}

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, id_) -> bool:
        return id_ in self._keys

    def _band_keys(self, sig: MinHashSignature) -> list[bytes]:
        need = self.bands * self.rows
        if len(sig) < need:
            raise ValueError(f"signature has {len(sig)} slots, banding needs {need}")
        s = sig.slots
        return [s[b * self.rows:(b + 1) * self.rows].tobytes() for b in range(self.bands)]

    def insert(self, id_: str, sig: MinHashSignature) -> None:
        """Add ``id_``. Re-inserting the same id with the same signature is a no-op;
        with a different signature it is an error."""
        keys = self._band_keys(sig)
        if id_ in self._keys:
            if self._keys[id_] != keys:
                raise KeyError(f"id {id_!r} already indexed with a different signature")
            return
        self._keys[id_] = keys
        for table, key in zip(self.tables, keys):
            table[key].append(id_)

    def query(self, sig: MinHashSignature) -> set[str]:
        out: set[str] = set()
        for table, key in zip(self.tables, self._band_keys(sig)):
            hit = table.get(key)
            if hit:
                out.update(hit)
        return out


def lsh_insert(index: LshIndex, id_: str, sig: MinHashSignature) -> None:
    index.insert(id_, sig)


def lsh_query(index: LshIndex, sig: MinHashSignature) -> set[str]:
    return index.query(sig)


# --------------------------------------------------------------------------
# dedup driver


@dataclass
class DedupRecord:
    doc: Document
    verdict: FilterVerdict
    duplicate: bool = False
    matched_id: str | None = None

    @property
    def kept(self) -> bool:
        return self.verdict.keep and not self.duplicate

    def to_json(self) -> dict:
        return {"id": self.doc.id, "source": self.doc.source, "text": self.doc.text,
                "verdict": "keep" if self.verdict.keep else self.verdict.failed_rule,
                "duplicate": self.duplicate, "matched_id": self.matched_id}


@dataclass
class SourceStats:
    documents: int = 0
    filtered: int = 0
    duplicates: int = 0
    inserted: int = 0
    query_only: bool = False

    @property
    def duplicate_pct(self) -> float:
        checked = self.documents - self.filtered
        return 100.0 * self.duplicates / checked if checked else 0.0


@dataclass
class DedupReport:
    sources: dict[str, SourceStats] = field(default_factory=dict)
    index_size: int = 0

    def to_json(self) -> dict:
        return {
            "index_size": self.index_size,
            "sources": {k: {"documents": v.documents, "filtered": v.filtered,
                            "duplicates": v.duplicates, "inserted": v.inserted,
                            "query_only": v.query_only,
                            "duplicate_pct": round(v.duplicate_pct, 4)}
                        for k, v in self.sources.items()},
        }


def dedup_corpora(corpora: Sequence[tuple[str, Iterable[Document]]],
                  query_only: Iterable[str] = ("refinedweb",), *, seed: int = 1,
                  index: LshIndex | None = None) -> tuple[list[DedupRecord], DedupReport]:
    """Filter and fuzzy-dedup corpora in the given order.

    ``corpora`` is a sequence of ``(label, documents)``; statistics and the
    query-only set are keyed by each document's source tag. A document is a duplicate when the index returns any candidate for it.
    Surviving documents of insert-mode corpora are then added to the index;
    query-only corpora never insert. ``cosmopedia`` passes through untouched.
    """
    index = LshIndex() if index is None else index
    query_only = frozenset(query_only)
    seen_ids: set[str] = set()
    records: list[DedupRecord] = []
    report = DedupReport()
    for _, docs in corpora:
        for doc in docs:
            stats = report.sources.setdefault(doc.source, SourceStats(query_only=doc.source in query_only))
            if doc.id in seen_ids:
                raise DataError(f"document id {doc.id!r} is not unique")
            seen_ids.add(doc.id)
            stats.documents += 1
            verdict = filter_doc(doc)
            rec = DedupRecord(doc, verdict)
            records.append(rec)
            if not verdict.keep:
                stats.filtered += 1
                continue
            if doc.source in UNPROCESSED_SOURCES or not doc.text.split():
                continue
            sig = minhash(shingle_13grams(doc.text), seed=seed)
            hits = index.query(sig)
            if hits:
                rec.duplicate = True
                rec.matched_id = min(hits)
                stats.duplicates += 1
            elif doc.source not in query_only:
                index.insert(doc.id, sig)
                stats.inserted += 1
    report.index_size = len(index)
    return records, report


# --------------------------------------------------------------------------
# byte tokenizer

BOS = 256
EOS = 257
VOCAB_SIZE = 258


def byte_tokenize(text: str | bytes, *, specials: bool = True) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    body = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if not specials:
        return body
    return np.concatenate([[BOS], body, [EOS]]).astype(np.int64)


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)


def detokenize(ids: Iterable[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


# --------------------------------------------------------------------------
# JSONL io


def read_jsonl(path) -> Iterator[Document]:
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield Document(id=str(rec["id"]), source=str(rec["source"]), text=str(rec["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from exc


def write_jsonl(path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
