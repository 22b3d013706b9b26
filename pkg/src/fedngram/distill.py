"""Sampling-based approximation of a teacher LM by backoff n-gram models.

The pipeline samples sentences from the teacher, accumulates the teacher's
conditionals on one or more topologies (optionally reweighted into cased
vocabulary, optionally at word-piece level through a composed topology),
and fits backoff weights by KL minimization.  :func:`gen` chains these
steps into the four models ``A_e`` (supplement topology), ``A_i``
(self-inferred topology), ``A_m`` (their interpolation) and ``A_r``
(refit on the interpolated topology).
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .casing import CapModel, lowercase
from .counting import CountAccumulator, ExpectedCounts, TeacherModel, expected_counts_multi
from .counting import prefix_batches
from .klmin import kl_minimize
from .lexicon import LexiconFst, compose, expected_counts_composed, transfer_counts
from .ngram import BackoffNGramModel, NGramTopology, extract_topology, interpolate
from .symbols import BOS_ID, EOS_ID, UNK, SymbolTable
from .wordpiece import split_words

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    """Settings of the approximation.

    ``min_counts`` are the per-order thresholds of topology inference;
    ``max_iter``, ``tol`` and ``count_floor`` drive the KL optimizer.
    """

    k: int = 1000
    max_len: int = 50
    seed: int = 0
    order: int = 3
    min_counts: tuple[int, ...] = (1,)
    max_iter: int = 200
    tol: float = 1e-8
    count_floor: float = 1e-9
    cap_floor: float = 1e-6
    batch_size: int = 256
    mix: float = 0.5
    resample_word_teacher: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.tol <= 0 or self.count_floor <= 0 or self.cap_floor <= 0:
            raise ValueError("tolerances and floors must be positive")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must lie in [0, 1]")


def sample_corpus(teacher: TeacherModel, config: DistillConfig) -> list[list[str]]:
    """``config.k`` ancestral samples, truncated at ``config.max_len`` tokens."""
    rng = np.random.default_rng(config.seed)
    tok = teacher.symbols.token
    out: list[list[str]] = []
    for start in range(0, config.k, config.batch_size):
        n = min(config.batch_size, config.k - start)
        sents: list[list[int]] = [[] for _ in range(n)]
        active = np.arange(n)
        state = teacher.begin(n)
        for _ in range(config.max_len + 1):
            probs = np.asarray(teacher.probs(state), dtype=np.float64)
            probs[:, BOS_ID] = 0.0
            cum = np.cumsum(probs, axis=1)
            u = rng.random(len(active)) * cum[:, -1]
            picks = np.minimum((cum <= u[:, None]).sum(axis=1), probs.shape[1] - 1)
            going = []
            for j, (r, x) in enumerate(zip(active.tolist(), picks.tolist())):
                if x == EOS_ID or len(sents[r]) >= config.max_len:
                    continue
                sents[r].append(x)
                going.append(j)
            if not going:
                break
            keep = np.array(going, dtype=np.int64)
            # rows at max_len stop here: truncated, no end token
            cont = [j for j in keep.tolist() if len(sents[active[j]]) < config.max_len]
            if not cont:
                break
            cont = np.array(cont, dtype=np.int64)
            state = teacher.select(state, cont)
            state = teacher.advance(state, [sents[active[j]][-1] for j in cont.tolist()])
            active = active[cont]
        out.extend([tok(x) for x in s] for s in sents)
    return out


def write_samples(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(" ".join(s) + "\n")


def read_samples(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f]


def infer_topology(samples, order: int, symbols: SymbolTable,
                   min_counts: Sequence[int] | int = 1) -> NGramTopology:
    """Topology of the n-grams seen in the samples (reaching the thresholds)."""
    return extract_topology(samples, order, symbols, min_counts)


def expected_counts(teacher: TeacherModel, topology, samples, weights=None,
                    batch_size: int = 256) -> ExpectedCounts:
    """Counting step; see :mod:`fedngram.counting`."""
    return expected_counts_multi(teacher, [topology], samples, weights, batch_size)[0]


def cased_teacher_probs(p_nn: np.ndarray, cap: CapModel, cap_states, column: np.ndarray
                        ) -> np.ndarray:
    """``p~(y|ctx) = p_nn(u(y)|u(ctx)) * p_cap(y|ctx) / sum_{u(y')=u(y)} p_cap(y'|ctx)``.

    ``column[y]`` is the teacher column of ``u(y)`` or ``-1`` when the
    teacher has no such word.
    """
    ratio = cap.ratios(cap_states)
    ok = column >= 0
    out = np.zeros((len(p_nn), len(column)))
    out[:, ok] = p_nn[:, column[ok]] * ratio[:, ok]
    return out


def _teacher_columns(teacher: TeacherModel, cap: CapModel) -> np.ndarray:
    col = np.full(len(cap.symbols), -1, dtype=np.int64)
    tsym = teacher.symbols
    for y, tok in enumerate(cap.symbols.tokens):
        if y == BOS_ID:
            continue
        low = lowercase(tok)
        if low in tsym:
            col[y] = tsym.id(low)
    return col


def truecase_samples(cap: CapModel, samples) -> list[list[str]]:
    return [cap.truecase(list(s)) for s in samples]


def expected_counts_cased_multi(teacher: TeacherModel, cap: CapModel,
                                topologies: Sequence[NGramTopology], samples,
                                weights=None, batch_size: int = 256, truecased=None
                                ) -> list[ExpectedCounts]:
    """Capitalization-reweighted counting on cased topologies.

    ``samples`` are the teacher's (uncased) sentences; they are truecased
    with ``cap`` and the cased states are tracked along the result.
    """
    for top in topologies:
        if top.symbols != cap.symbols:
            raise ValueError("cased topology and capitalization model alphabets differ")
    col = _teacher_columns(teacher, cap)
    tsym = teacher.symbols
    ids = [[tsym.lookup(t) if isinstance(t, str) else int(t) for t in s] for s in samples]
    if truecased is None:
        truecased = truecase_samples(cap, [tsym.decode(s) for s in ids])
    cased = [cap.symbols.encode(s) for s in truecased]
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    accs = [CountAccumulator(t) for t in topologies]
    states = [np.full(len(ids), t.initial, dtype=np.int64) for t in topologies]
    cap_top = cap.model.topology
    cap_states = np.full(len(ids), cap_top.initial, dtype=np.int64)
    for rows, i, probs in prefix_batches(teacher, ids, batch_size):
        pt = cased_teacher_probs(np.asarray(probs), cap, cap_states[rows], col)
        for acc, st in zip(accs, states):
            acc.add(st[rows], pt, None if w is None else w[rows])
        for r in rows.tolist():
            if len(cased[r]) > i:
                y = cased[r][i]
                cap_states[r] = cap_top.next_state(int(cap_states[r]), y)
                for top, st in zip(topologies, states):
                    st[r] = top.next_state(int(st[r]), y)
    return [a.result() for a in accs]


def expected_counts_cased(teacher_uncased: TeacherModel, cap: CapModel,
                          topology_cased: NGramTopology, samples_uncased,
                          weights=None, batch_size: int = 256) -> ExpectedCounts:
    return expected_counts_cased_multi(teacher_uncased, cap, [topology_cased],
                                       samples_uncased, weights, batch_size)[0]


def lowercase_topology(top: NGramTopology, uncased: SymbolTable) -> NGramTopology:
    """Image of a cased topology under case erasure."""
    low = [uncased.id(lowercase(t)) for t in top.symbols.tokens]
    grams = {tuple(low[t] for t in g) for g in top.ngrams()}
    return NGramTopology.from_ngrams(uncased, top.order, grams)


def pieces_to_words(m: LexiconFst, pieces: Sequence[str]) -> list[str]:
    """Word sentence spelled by a piece sample; unknown words become ``<unk>``.

    Without a word marker the piece stream is transduced until the lexicon
    rejects a piece.
    """
    words = m.words
    if m.marker:
        out, buf = [], []
        for p in pieces:
            if p == UNK and not buf:
                out.append(UNK)
                continue
            buf.append(p)
            done, _ = split_words(buf, m.marker)
            if done:
                out.append(done[0] if done[0] in words else UNK)
                buf = []
        return out
    q, out = 0, []
    for p in pieces:
        arc = m.arcs[q].get(m.pieces.id(p)) if p in m.pieces else None
        if arc is None:
            break
        q, o = arc
        if o >= 0:
            out.append(words.token(o))
    return out


class GenResult(NamedTuple):
    a_e: BackoffNGramModel | None
    a_i: BackoffNGramModel
    a_m: BackoffNGramModel
    a_r: BackoffNGramModel


def _fit(top, counts, config):
    return kl_minimize(top, counts, config)


def _union(a: NGramTopology, b: NGramTopology) -> NGramTopology:
    return NGramTopology(a.symbols, max(a.order, b.order), a.ngrams() | b.ngrams())


def uapprox(teacher: TeacherModel, topologies: Sequence[NGramTopology | None],
            cap: CapModel | None, config: DistillConfig, samples=None
            ) -> list[BackoffNGramModel]:
    """Approximate ``teacher`` on each topology from one shared sample set.

    ``None`` in ``topologies`` asks for a topology inferred from the
    (truecased) samples.  Without ``cap`` the teacher's own alphabet is used.
    """
    if samples is None:
        samples = sample_corpus(teacher, config)
    if cap is None:
        alphabet = teacher.symbols
        cased = samples
    else:
        alphabet = cap.symbols
        cased = truecase_samples(cap, samples)
    tops = [t if t is not None else
            infer_topology(cased, config.order, alphabet, config.min_counts)
            for t in topologies]
    if cap is None:
        counts = expected_counts_multi(teacher, tops, samples, batch_size=config.batch_size)
    else:
        counts = expected_counts_cased_multi(teacher, cap, tops, samples,
                                             batch_size=config.batch_size, truecased=cased)
    return [_fit(t, c, config) for t, c in zip(tops, counts)]


def gen(teacher: TeacherModel, supplement: BackoffNGramModel | None, cap: CapModel | None,
        mode: str = "word", config: DistillConfig | None = None, *,
        lexicon: LexiconFst | None = None, word_a_i=None, samples=None) -> GenResult:
    """Approximate ``teacher`` with and without a supplemental topology.

    Word mode: ``A_e`` on the supplement topology, ``A_i`` on a topology
    inferred from the samples, ``A_m`` their interpolation and ``A_r`` the
    refit on ``A_m``'s topology.  Without a supplement ``A_e`` is ``None``
    and ``A_m`` and ``A_r`` are ``A_i``.

    Word-piece mode (``teacher`` over pieces): each target word model ``A``
    is lowercased, composed with ``lexicon``, counted at piece level and
    transferred back, fitted, and the uncased result is re-approximated on
    ``A`` with capitalization from ``A`` itself.  ``word_a_i`` is the
    word-mode ``A_i`` (model or topology) and takes the place of the
    self-inferred topology.
    """
    config = config or DistillConfig()
    if mode not in ("word", "wordpiece"):
        raise ValueError(f"unknown mode {mode!r}")
    if samples is None:
        samples = sample_corpus(teacher, config)
    if mode == "word":
        return _gen_word(teacher, supplement, cap, config, samples)
    if lexicon is None or word_a_i is None:
        raise ValueError("word-piece mode needs a lexicon and the word-mode A_i")
    return _gen_wordpiece(teacher, supplement, cap, config, lexicon, word_a_i, samples)


def _gen_word(teacher, supplement, cap, config, samples) -> GenResult:
    alphabet = teacher.symbols if cap is None else cap.symbols
    cased = samples if cap is None else truecase_samples(cap, samples)
    top_i = infer_topology(cased, config.order, alphabet, config.min_counts)
    if supplement is None:
        (a_i,) = _count_and_fit(teacher, cap, [top_i], samples, cased, config)
        return GenResult(None, a_i, a_i, a_i)
    top_e = supplement.topology
    top_u = _union(top_e, top_i)
    a_e, a_i, a_r = _count_and_fit(teacher, cap, [top_e, top_i, top_u], samples, cased, config)
    a_m = interpolate(a_e, a_i, config.mix)
    return GenResult(a_e, a_i, a_m, a_r)


def _count_and_fit(teacher, cap, tops, samples, cased, config):
    if cap is None:
        counts = expected_counts_multi(teacher, tops, samples, batch_size=config.batch_size)
    else:
        counts = expected_counts_cased_multi(teacher, cap, tops, samples,
                                             batch_size=config.batch_size, truecased=cased)
    return [_fit(t, c, config) for t, c in zip(tops, counts)]


def _gen_wordpiece(teacher, supplement, cap, config, m: LexiconFst, word_a_i, samples
                   ) -> GenResult:
    uncased = m.words
    top_i = getattr(word_a_i, "topology", word_a_i)
    targets = [top_i] if supplement is None else [supplement.topology, top_i]
    if supplement is not None:
        targets.append(_union(targets[0], top_i))
    low = [lowercase_topology(t, uncased) if cap is not None else t for t in targets]
    composed = [compose(m, t) for t in low]
    counts_b = expected_counts_composed(teacher, composed, samples,
                                        batch_size=config.batch_size)
    word_teachers = [_fit(t, transfer_counts(c, b, t), config)
                     for t, b, c in zip(low, composed, counts_b)]
    word_samples = [pieces_to_words(m, s) for s in samples]

    def stage2(target: NGramTopology, word_teacher: BackoffNGramModel,
               cap_source: BackoffNGramModel | None):
        if config.resample_word_teacher:
            ws = sample_corpus(word_teacher, config)
        else:
            ws = word_samples
        if cap is None:
            c = expected_counts_multi(word_teacher, [target], ws, batch_size=config.batch_size)
            return _fit(target, c[0], config)
        cm = CapModel(cap_source, config.cap_floor)
        return _count_and_fit(word_teacher, cm, [target], ws, None, config)[0]

    if supplement is None:
        src_i = word_a_i if isinstance(word_a_i, BackoffNGramModel) else cap and cap.model
        a_i = stage2(top_i, word_teachers[0], src_i)
        return GenResult(None, a_i, a_i, a_i)
    src_i = word_a_i if isinstance(word_a_i, BackoffNGramModel) else supplement
    a_e = stage2(targets[0], word_teachers[0], supplement)
    a_i = stage2(top_i, word_teachers[1], src_i)
    a_m = interpolate(a_e, a_i, config.mix)
    a_r = stage2(targets[2], word_teachers[2], a_m)
    return GenResult(a_e, a_i, a_m, a_r)
