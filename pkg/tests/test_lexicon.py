import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedngram.counting import ExpectedCounts, expected_counts
from fedngram.lexicon import (LexiconError, build_lexicon, compose, expected_counts_composed,
                              piece_symbols, transfer_counts)
from fedngram.ngram import NGramTopology
from fedngram.symbols import EOS_ID, UNK_ID, SymbolTable
from fedngram.wordpiece import WordPieceInventory, segment

from helpers import (accepts, bounded_word_teacher, piece_teacher, random_teacher,
                     random_topology, sentence_probability)


def _ab_ac():
    vocab = SymbolTable(["ab", "ac"])
    inv = WordPieceInventory({"a": 0.4, "b": 0.3, "c": 0.3})
    return vocab, inv, build_lexicon(vocab, inv)


def test_ab_ac_lexicon_shape():
    vocab, _, m = _ab_ac()
    pcs = m.pieces
    a, b, c = pcs.id("a"), pcs.id("b"), pcs.id("c")
    assert m.num_states == 2
    assert m.arcs[0][a] == (1, -1)  # shared prefix, no output
    assert m.arcs[1][b] == (0, vocab.id("ab"))
    assert m.arcs[1][c] == (0, vocab.id("ac"))
    assert m.arcs[0][UNK_ID] == (0, UNK_ID)


def test_single_word_lexicon():
    vocab = SymbolTable(["a"])
    m = build_lexicon(vocab, WordPieceInventory({"a": 1.0}))
    assert m.num_states == 1
    assert m.arcs[0][m.pieces.id("a")] == (0, vocab.id("a"))


def test_lexicon_transduces_canonical_segmentations():
    rng = np.random.default_rng(0)
    words = sorted({"".join(rng.choice(list("abcd"), size=int(rng.integers(1, 7))))
                    for _ in range(40)})[:30]
    vocab = SymbolTable(words)
    inv = WordPieceInventory({"a": .1, "b": .1, "c": .1, "d": .1, "_": .1, "ab": .1,
                              "cd_": .1, "a_": .1, "bc": .1}, marker="_")
    m = build_lexicon(vocab, inv)
    for w in words:
        seg = [m.pieces.id(p) for p in segment(w, inv)]
        assert m.transduce(seg) == [vocab.id(w)]
    with pytest.raises(LexiconError):
        m.transduce([m.pieces.id("a")])


def test_prefix_segmentations_need_a_marker():
    vocab = SymbolTable(["a", "ab"])
    with pytest.raises(LexiconError):
        build_lexicon(vocab, WordPieceInventory({"a": 0.5, "b": 0.5}))


def test_unsegmentable_vocabulary():
    with pytest.raises(LexiconError, match="zz"):
        build_lexicon(SymbolTable(["a", "zz"]), WordPieceInventory({"a": 1.0}))


def _piece_language(top, pieces, depth):
    alphabet = [x for x in range(3, len(pieces))]
    out = set()
    for n in range(depth + 1):
        for seq in itertools.product(alphabet, repeat=n):
            if accepts(top, seq):
                out.add(seq)
    return out


def _segmentation_image(m, word_top, depth):
    out = set()
    for n in range(depth + 1):
        for ws in itertools.product(range(3, len(m.words)), repeat=n):
            if accepts(word_top, ws):
                seq = tuple(m.encode_words(ws))
                if len(seq) <= depth:
                    out.add(seq)
    return out


def test_ab_ac_composition():
    vocab, _, m = _ab_ac()
    a_top = NGramTopology(vocab, 1, [])
    b = compose(m, a_top)
    assert b.num_states == 2
    pcs = m.pieces
    lang = _piece_language(b, pcs, 6)
    ab = (pcs.id("a"), pcs.id("b"))
    ac = (pcs.id("a"), pcs.id("c"))
    want = {sum(c, ()) for n in range(4) for c in itertools.product([ab, ac], repeat=n)}
    assert lang == want
    # backoff arcs never change the lexicon state
    for s, (q1, q2) in enumerate(b.pairs):
        if b.backoff[s] >= 0:
            assert b.pairs[b.backoff[s]][0] == q1


def test_single_piece_words_compose_to_relabeled_topology():
    vocab = SymbolTable(["a"])
    m = build_lexicon(vocab, WordPieceInventory({"a": 1.0}))
    word_top = NGramTopology.from_ngrams(vocab, 2, [(0, 3), (3, 3), (3, EOS_ID)])
    b = compose(m, word_top)
    assert b.num_states == word_top.num_states
    assert b.num_entries == word_top.num_entries
    assert sorted(b.entry_label.tolist()) == sorted(word_top.entry_label.tolist())


def _random_instance(rng):
    letters = "ab"
    words = sorted({"".join(rng.choice(list(letters), size=int(rng.integers(1, 3))))
                    for _ in range(4)})
    vocab = SymbolTable(words)
    probs = {"a": 1.0, "b": 1.0, "_": 1.0}
    for w in words:
        if rng.random() < 0.5:
            probs[w + "_"] = 1.0
    inv = WordPieceInventory({k: 1.0 / len(probs) for k in probs}, marker="_")
    m = build_lexicon(vocab, inv)
    word_top = random_topology(rng, vocab, int(rng.integers(1, 4)), int(rng.integers(0, 8)))
    return vocab, m, word_top


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composed_language_is_segmentation_image(seed):
    rng = np.random.default_rng(seed)
    _, m, word_top = _random_instance(rng)
    b = compose(m, word_top)
    assert _piece_language(b, m.pieces, 4) == _segmentation_image(m, word_top, 4)


def test_transfer_single_arc():
    vocab, _, m = _ab_ac()
    a_top = NGramTopology(vocab, 1, [])
    b = compose(m, a_top)
    counts = ExpectedCounts(b)
    s = b.index[(1, 0)]
    counts.entry[b.find(s, m.pieces.id("b"))] = 1.0
    word = transfer_counts(counts, b)
    assert word.get(0, vocab.id("ab")) == 1.0
    assert word.total() == 1.0
    assert transfer_counts(ExpectedCounts(b), b).total() == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_count_transfer_round_trip(seed):
    rng = np.random.default_rng(seed)
    vocab, m, word_top = _random_instance(rng)
    word_teacher = bounded_word_teacher(vocab, seed, 2)
    pieces = piece_teacher(word_teacher, m)
    # every sentence the teacher can produce, so prefix weights are exact marginals
    ids = [UNK_ID] + list(range(3, len(vocab)))
    sents = [list(s) for n in range(3) for s in itertools.product(ids, repeat=n)]
    weights = [sentence_probability(word_teacher, s) for s in sents]
    direct = expected_counts(word_teacher, word_top, sents, weights=weights)
    b = compose(m, word_top)
    piece_samples = [m.encode_words(s) for s in sents]
    (on_b,) = expected_counts_composed(pieces, [b], piece_samples, weights=weights)
    back = transfer_counts(on_b, b)
    np.testing.assert_allclose(back.entry, direct.entry, rtol=0, atol=1e-9)
    np.testing.assert_allclose(back.backoff, direct.backoff, rtol=0, atol=1e-9)
    np.testing.assert_allclose(back.visits, direct.visits, rtol=0, atol=1e-9)


def test_unreadable_word_counts_as_unknown():
    vocab = SymbolTable(["ab"])
    inv = WordPieceInventory({"a": 0.25, "b": 0.25, "_": 0.25, "ab_": 0.25}, marker="_")
    m = build_lexicon(vocab, inv)
    word_top = NGramTopology.from_ngrams(vocab, 2, [(UNK_ID, 3)])
    b = compose(m, word_top)
    pcs = m.pieces
    teacher = random_teacher(pcs, 0)
    # "b_" is not a lexicon path: it is skipped and counted as the unknown word
    sample = [pcs.id("b"), pcs.id("_"), pcs.id("ab_")]
    (c,) = expected_counts_composed(teacher, [b], [sample])
    assert np.isfinite(c.entry).all()
    word = transfer_counts(c, b)
    unk_state = word_top.index[(UNK_ID,)]
    assert word.visits[unk_state] == pytest.approx(1.0)


def test_piece_symbols_reserve_boundaries():
    inv = WordPieceInventory({"a": 0.5, "<unk>": 0.5})
    sym = piece_symbols(inv)
    assert sym.id("<unk>") == UNK_ID
    assert sym.id("a") == 3
