import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (
    banding_probability,
    binomial_halfwidth,
    filter_boundary_fixtures,
    jaccard,
    sets_with_jaccard,
    signature_pair_with_similarity,
)
from zamba.corpus import (
    BOS,
    EOS,
    FILTER_RULES,
    DataError,
    Document,
    FilterVerdict,
    LshIndex,
    MinHashSignature,
    byte_tokenize,
    candidate_probability,
    dedup_corpora,
    detokenize,
    detokenize_bytes,
    filter_doc,
    minhash,
    read_jsonl,
    shingle_13grams,
    write_jsonl,
)


def random_words(rng, n, vocab=5000):
    return [f"w{i}" for i in rng.integers(0, vocab, n)]


# --- filters ----------------------------------------------------------------

@pytest.mark.parametrize("name,text,rule", filter_boundary_fixtures(),
                         ids=[f[0] for f in filter_boundary_fixtures()])
def test_filter_boundaries(name, text, rule):
    v = filter_doc(Document("x", "pile", text))
    assert v.failed_rule == rule
    assert v.keep == (rule is None)


def test_filter_examples():
    assert filter_doc("a" * 99).failed_rule == "min_length"
    assert filter_doc(" ".join(["aa"] * 40)).failed_rule == "mean_word_short"
    assert filter_doc("a" * 100).failed_rule == "mean_word_long"
    assert filter_doc("").failed_rule == "min_length"
    assert filter_doc(" " * 120).failed_rule == "mean_word_short"


def test_first_failing_rule_reported():
    # short, long-worded and all digits: length is checked first
    assert filter_doc("1" * 50).failed_rule == "min_length"
    # mean word too long and too numeric: word rules come before character fractions
    assert filter_doc("1" * 120).failed_rule == "mean_word_long"
    assert filter_doc("ab,, " * 30).failed_rule == "non_alnum_frac"
    assert list(FILTER_RULES) == ["min_length", "mean_word_short", "mean_word_long", "non_alnum_frac",
                                  "numeric_frac"]


def test_characters_are_code_points():
    # 100 code points, 200 UTF-8 bytes
    text = "éééé " * 20
    assert filter_doc(text).keep
    assert filter_doc(text[:-1]).failed_rule == "min_length"


def test_only_pile_and_c4_are_filtered():
    bad = "short"
    for src in ("pile", "c4"):
        assert not filter_doc(Document("x", src, bad)).keep
    for src in ("refinedweb", "pes2o", "arxiv", "cosmopedia"):
        assert filter_doc(Document("x", src, bad)).keep


def test_verdict_invariant():
    with pytest.raises(ValueError):
        FilterVerdict(True, "min_length")
    with pytest.raises(ValueError):
        FilterVerdict(False)


@given(st.text(min_size=0, max_size=300))
def test_verdict_is_consistent_for_any_text(text):
    v = filter_doc(text)
    assert v.keep == (v.failed_rule is None)
    assert v.failed_rule is None or v.failed_rule in FILTER_RULES


# --- shingles and minhash -----------------------------------------------------

def test_shingle_counts():
    words = [f"t{i}" for i in range(20)]
    assert len(shingle_13grams(" ".join(words[:13]))) == 1
    assert len(shingle_13grams(" ".join(words))) == 8
    assert len(shingle_13grams("only three words")) == 1


def test_shingles_deterministic_and_case_folded():
    text = "The quick brown fox jumps over the lazy dog and then the quick cat sleeps"
    assert shingle_13grams(text) == shingle_13grams(text)
    assert shingle_13grams(text) == shingle_13grams(text.upper().replace(" ", "\t "))


def test_empty_text_rejected():
    with pytest.raises(DataError):
        shingle_13grams("   ")
    with pytest.raises(DataError):
        minhash(set())


def test_identical_sets_identical_signatures():
    s = set(range(1000))
    a, b = minhash(s), minhash(set(s))
    assert a == b and len(a) == 128
    assert a.slots.dtype == np.uint64


def test_seed_changes_hash_family():
    s = set(range(50))
    assert minhash(s, seed=1) != minhash(s, seed=2)


def test_slot_is_minimum_over_shingles():
    s = {5, 17, 99, 1234}
    full = minhash(s).slots
    per = np.stack([minhash({x}).slots for x in s])
    np.testing.assert_array_equal(full, per.min(axis=0))


@pytest.mark.parametrize("s", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_match_fraction_concentrates_on_jaccard(s):
    rng = np.random.default_rng(int(s * 100))
    a, b = sets_with_jaccard(rng, s, union=1000)
    j = jaccard(a, b)
    f = minhash(a).match_fraction(minhash(b))
    assert abs(f - j) <= 4 * np.sqrt(j * (1 - j) / 128)


def test_minhash_unbiased_over_200_pairs():
    rng = np.random.default_rng(7)
    diffs = []
    for _ in range(200):
        s = rng.uniform(0.05, 0.95)
        a, b = sets_with_jaccard(rng, s, union=300)
        diffs.append(minhash(a).match_fraction(minhash(b)) - jaccard(a, b))
    diffs = np.array(diffs)
    # each diff has variance <= 1/(4*128); the mean of 200 must sit near zero
    assert abs(diffs.mean()) <= 3 * np.sqrt(0.25 / 128 / 200)


def test_disjoint_sets_rarely_match():
    rng = np.random.default_rng(3)
    fracs = [minhash(set(rng.integers(0, 2 ** 60, 200).tolist())).match_fraction(
        minhash(set(rng.integers(2 ** 61, 2 ** 62, 200).tolist()))) for _ in range(20)]
    assert max(fracs) == 0.0


# --- LSH --------------------------------------------------------------------

def test_candidate_probability_formula():
    for s in (0.0, 0.2, 0.5, 0.8, 1.0):
        assert candidate_probability(s) == pytest.approx(banding_probability(s), rel=1e-15)
    assert candidate_probability(0.5) == pytest.approx(0.5478392215509674, rel=1e-12)
    assert round(candidate_probability(0.5), 3) == 0.548
    assert candidate_probability(0.8) > 0.9999


def test_identical_signature_always_candidate():
    idx = LshIndex()
    sig = minhash({1, 2, 3})
    idx.insert("a", sig)
    assert idx.query(sig) == {"a"}


def test_band_uses_first_125_slots_only():
    idx = LshIndex()
    rng = np.random.default_rng(0)
    a = rng.integers(0, 2 ** 63, 128, dtype=np.uint64)
    b = rng.integers(0, 2 ** 63, 128, dtype=np.uint64)
    b[125:] = a[125:]
    idx.insert("a", MinHashSignature(a))
    assert idx.query(MinHashSignature(b)) == set()
    b[:5] = a[:5]
    assert idx.query(MinHashSignature(b)) == {"a"}


def test_insert_idempotent_and_duplicate_id_rejected():
    idx = LshIndex()
    s1, s2 = minhash({1}), minhash({2})
    idx.insert("a", s1)
    idx.insert("a", s1)
    assert len(idx) == 1 and "a" in idx
    with pytest.raises(KeyError):
        idx.insert("a", s2)


@pytest.mark.parametrize("s", [0.2, 0.5, 0.8])
def test_idealised_pairs_match_banding_formula(s):
    rng = np.random.default_rng(11)
    n = 2000
    hits = 0
    for i in range(n):
        a, b = signature_pair_with_similarity(rng, s)
        idx = LshIndex()
        idx.insert("a", MinHashSignature(a))
        hits += bool(idx.query(MinHashSignature(b)))
    p = banding_probability(s)
    assert abs(hits / n - p) <= max(binomial_halfwidth(p, n), 3 / n)


# --- dedup driver -----------------------------------------------------------

def docs(source, texts, prefix=None):
    prefix = prefix or source
    return [Document(f"{prefix}-{i}", source, t) for i, t in enumerate(texts)]


def long_text(rng, n=80):
    return " ".join(random_words(rng, n))


def test_identical_documents_self_dedup():
    t = long_text(np.random.default_rng(0))
    records, report = dedup_corpora([("pes2o", docs("pes2o", [t] * 5))])
    assert [r.kept for r in records] == [True, False, False, False, False]
    assert all(r.matched_id == "pes2o-0" for r in records[1:])
    assert report.sources["pes2o"].duplicate_pct == 80.0
    assert report.index_size == 1


def test_query_only_corpus_never_inserts():
    rng = np.random.default_rng(1)
    texts = [long_text(rng) for _ in range(10)]
    records, report = dedup_corpora([("pile", docs("pes2o", texts)), ("rw", docs("refinedweb", texts))])
    assert report.index_size == 10
    assert report.sources["refinedweb"].duplicate_pct == 100.0
    assert report.sources["refinedweb"].inserted == 0
    assert report.sources["refinedweb"].query_only


def test_query_only_does_not_self_dedup():
    t = long_text(np.random.default_rng(2))
    records, report = dedup_corpora([("rw", docs("refinedweb", [t, t]))])
    assert all(r.kept for r in records) and report.index_size == 0


def test_insertion_order_decides_survivor():
    t = long_text(np.random.default_rng(3))
    recs, _ = dedup_corpora([("c4", docs("pes2o", [t], "first")), ("x", docs("arxiv", [t], "second"))])
    assert recs[0].kept and recs[1].duplicate and recs[1].matched_id == "first-0"


def test_filtered_documents_skip_dedup():
    t = "tiny"
    recs, report = dedup_corpora([("pile", docs("pile", [t, t]))])
    assert [r.verdict.failed_rule for r in recs] == ["min_length"] * 2
    assert report.index_size == 0 and report.sources["pile"].duplicate_pct == 0.0


def test_cosmopedia_untouched():
    t = long_text(np.random.default_rng(4))
    recs, report = dedup_corpora([("a", docs("pes2o", [t])), ("b", docs("cosmopedia", [t, "x"]))])
    assert all(r.kept for r in recs[1:])
    assert report.index_size == 1


def test_non_unique_ids_rejected():
    with pytest.raises(DataError):
        dedup_corpora([("a", [Document("x", "arxiv", "a b c"), Document("x", "arxiv", "d e f")])])


def test_planted_duplicates_detected():
    rng = np.random.default_rng(5)
    originals, near, unrelated = [], [], []
    for _ in range(150):
        words = random_words(rng, 200, vocab=50_000)
        originals.append(" ".join(words))
        edited = list(words)
        edited[100] = "CHANGED"
        near.append(" ".join(edited))
        unrelated.append(" ".join(random_words(rng, 200, vocab=50_000)))
    assert all(jaccard(shingle_13grams(a), shingle_13grams(b)) >= 0.8 for a, b in zip(originals, near))
    recs, _ = dedup_corpora([("pes2o", docs("pes2o", originals)), ("rw", docs("refinedweb", near)),
                             ("rw2", docs("refinedweb", unrelated, "u"))])
    near_recs = recs[150:300]
    unrelated_recs = recs[300:]
    assert np.mean([r.duplicate for r in near_recs]) >= 0.99
    assert np.mean([r.duplicate for r in unrelated_recs]) <= 0.02


def test_dedup_deterministic():
    rng = np.random.default_rng(6)
    base = [long_text(rng) for _ in range(20)]
    texts = base + base[:7]
    marks = [[r.duplicate for r in dedup_corpora([("a", docs("arxiv", texts))])[0]] for _ in range(2)]
    assert marks[0] == marks[1] == [False] * 20 + [True] * 7


def test_report_json_shape():
    _, report = dedup_corpora([("a", docs("arxiv", ["one two three"]))])
    j = report.to_json()
    assert j["index_size"] == 1
    assert set(j["sources"]["arxiv"]) == {"documents", "filtered", "duplicates", "inserted", "query_only",
                                          "duplicate_pct"}


# --- tokenizer and io -------------------------------------------------------

def test_tokenizer_examples():
    assert byte_tokenize("").tolist() == [BOS, EOS]
    assert byte_tokenize("ab").tolist() == [BOS, 97, 98, EOS]
    assert byte_tokenize("ab", specials=False).tolist() == [97, 98]


@given(st.binary(max_size=200))
def test_byte_roundtrip(raw):
    assert detokenize_bytes(byte_tokenize(raw)) == raw


@given(st.text(max_size=100))
def test_text_roundtrip(text):
    assert detokenize(byte_tokenize(text)) == text


def test_jsonl_roundtrip(tmp_path):
    p = tmp_path / "in.jsonl"
    write_jsonl(p, [{"id": 1, "source": "c4", "text": "héllo"}, {"id": "b", "source": "pile", "text": ""}])
    got = list(read_jsonl(p))
    assert got == [Document("1", "c4", "héllo"), Document("b", "pile", "")]


def test_jsonl_errors(tmp_path):
    with pytest.raises(DataError):
        list(read_jsonl(tmp_path / "missing.jsonl"))
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"id": 1, "source": "c4", "text": "ok"}) + "\n{not json\n")
    with pytest.raises(DataError, match=":2:"):
        list(read_jsonl(p))
    p.write_text(json.dumps({"id": 1, "text": "no source"}) + "\n")
    with pytest.raises(DataError, match=":1:"):
        list(read_jsonl(p))
