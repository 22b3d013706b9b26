import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedngram.counting import ExpectedCounts, expected_counts, expected_counts_multi
from fedngram.ngram import NGramTopology
from fedngram.symbols import EOS_ID, SymbolTable

from helpers import (FunctionTeacher, alphabet, naive_counts, random_corpus, random_model,
                     random_teacher, random_topology)


def _new_york():
    sym = SymbolTable(["New", "York", "Jersey"])
    new, york = sym.id("New"), sym.id("York")

    def fn(prefix):
        p = np.zeros(len(sym))
        if prefix and prefix[-1] == new:
            p[york] = 0.5
            p[sym.id("Jersey")] = 0.5
        else:
            p[1:] = 1.0 / (len(sym) - 1)
        return p
    top = NGramTopology.from_ngrams(sym, 2, [(new, york)])
    return sym, FunctionTeacher(sym, fn), top


def test_new_york_count():
    sym, teacher, top = _new_york()
    counts = expected_counts(teacher, top, [["New", "York"], ["Jersey", "New", "Jersey"]])
    assert counts.get(top.index[(sym.id("New"),)], sym.id("York")) == pytest.approx(1.0)


def test_empty_sample_set():
    _, teacher, top = _new_york()
    counts = expected_counts(teacher, top, [])
    assert counts.total() == 0.0
    assert not counts.backoff.any()


def test_alphabet_mismatch():
    _, teacher, _ = _new_york()
    with pytest.raises(ValueError):
        expected_counts(teacher, NGramTopology(alphabet(2), 2, []), [])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_naive_sum(seed):
    rng = np.random.default_rng(seed)
    sym = alphabet(int(rng.integers(1, 4)))  # at most 5 symbols after start
    order = int(rng.integers(1, 3))
    top = random_topology(rng, sym, order, int(rng.integers(0, 8)))
    teacher = random_teacher(sym, seed)
    samples = random_corpus(rng, sym, int(rng.integers(0, 51)), max_len=4)
    counts = expected_counts(teacher, top, samples, batch_size=7)
    entry, backoff = naive_counts(teacher, top, samples)
    np.testing.assert_allclose(counts.entry, entry, rtol=0, atol=1e-10)
    np.testing.assert_allclose(counts.backoff, backoff, rtol=0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_teacher_mass_is_conserved(seed):
    rng = np.random.default_rng(seed)
    sym = alphabet(5)
    top = random_topology(rng, sym, 3, 12)
    samples = random_corpus(rng, sym, 20)
    counts = expected_counts(random_teacher(sym, seed), top, samples)
    assert counts.total() + counts.dropped == pytest.approx(
        sum(len(s) + 1 for s in samples), abs=1e-9)
    assert counts.dropped == 0.0  # n-gram roots hold every label
    assert counts.visits.sum() == pytest.approx(sum(len(s) + 1 for s in samples), abs=1e-9)


def test_ngram_teacher_and_weights():
    rng = np.random.default_rng(3)
    sym = alphabet(4)
    teacher = random_model(rng, sym, 3)
    top = random_topology(rng, sym, 2, 6)
    samples = random_corpus(rng, sym, 12)
    entry, backoff = naive_counts(teacher, top, samples)
    c = expected_counts(teacher, top, samples)
    np.testing.assert_allclose(c.entry, entry, atol=1e-12)
    doubled = expected_counts(teacher, top, samples, weights=np.full(len(samples), 2.0))
    np.testing.assert_allclose(doubled.entry, 2 * entry, atol=1e-12)
    np.testing.assert_allclose(c.scaled(2.0).backoff, doubled.backoff, atol=1e-12)


def test_multi_equals_single():
    rng = np.random.default_rng(4)
    sym = alphabet(4)
    teacher = random_teacher(sym, 9)
    tops = [random_topology(rng, sym, o, 8) for o in (1, 2, 3)]
    samples = random_corpus(rng, sym, 15)
    multi = expected_counts_multi(teacher, tops, samples)
    for t, c in zip(tops, multi):
        np.testing.assert_array_equal(c.entry, expected_counts(teacher, t, samples).entry)


def test_end_counts_and_addition():
    _, teacher, top = _new_york()
    c = expected_counts(teacher, top, [["New"]])
    ends = c.end_counts()
    mask = top.entry_label == EOS_ID
    assert ends.sum() == pytest.approx(c.entry[mask].sum())
    both = c + c
    assert both.total() == pytest.approx(2 * c.total())
    with pytest.raises(ValueError):
        c + ExpectedCounts(NGramTopology(top.symbols, 2, []))
    assert math.isclose(sum(float(x.split("\t")[2]) for x in c.dump().splitlines()), c.total())
