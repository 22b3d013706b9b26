"""Backoff n-gram models as deterministic weighted automata.

A topology is the unweighted skeleton: states, explicit transitions (an
"entry" is one ``(state, label)`` pair) and one backoff arc per non-bottom
state.  Sentence end is an ordinary entry whose label is ``</s>`` and whose
destination is ``-1``; its weight is the state's final weight.

A :class:`BackoffNGramModel` attaches a probability to every entry and a
backoff weight to every state.  Probabilities of labels missing at a state are
obtained by following backoff arcs::

    p(x | q) = w_q[x]                      if x is explicit at q
             = w_q[phi] * p(x | backoff(q))  otherwise
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Sequence
from typing import NamedTuple

import numpy as np

from .symbols import BOS_ID, EOS_ID, UNK_ID, SymbolTable


class TopologyError(ValueError):
    pass


class BackoffTopology:
    """Deterministic automaton with backoff arcs, stored as flat arrays.

    Entries are sorted by ``(state, label)``; the entries of state ``q`` are
    ``offsets[q]:offsets[q + 1]``.
    """

    def __init__(self, symbols: SymbolTable, num_states: int, entry_state,
                 entry_label, entry_dest, backoff, initial: int):
        entry_state = np.asarray(entry_state, dtype=np.int64)
        entry_label = np.asarray(entry_label, dtype=np.int64)
        entry_dest = np.asarray(entry_dest, dtype=np.int64)
        order = np.lexsort((entry_label, entry_state))
        self.symbols = symbols
        self.num_states = int(num_states)
        self.entry_state = entry_state[order]
        self.entry_label = entry_label[order]
        self.entry_dest = entry_dest[order]
        self.backoff = np.asarray(backoff, dtype=np.int64)
        self.initial = int(initial)
        if self.backoff.shape != (self.num_states,):
            raise TopologyError("one backoff slot per state required")
        self.offsets = np.searchsorted(
            self.entry_state, np.arange(self.num_states + 1)).astype(np.int64)
        self._arcs: list[dict[int, int]] = []
        labels = self.entry_label.tolist()
        for q in range(self.num_states):
            lo, hi = int(self.offsets[q]), int(self.offsets[q + 1])
            arcs = dict(zip(labels[lo:hi], range(lo, hi)))
            if len(arcs) != hi - lo:
                raise TopologyError(f"state {q} has duplicate labels")
            self._arcs.append(arcs)
        if np.any(self.entry_label == BOS_ID):
            raise TopologyError("sentence start cannot be a transition label")
        bad = (self.entry_label == EOS_ID) != (self.entry_dest < 0)
        if np.any(bad):
            raise TopologyError("only sentence-end entries may lack a destination")
        self.depth = self._backoff_depths()

    def _backoff_depths(self) -> np.ndarray:
        depth = np.full(self.num_states, -1, dtype=np.int64)
        for q in range(self.num_states):
            path = []
            s = q
            while s >= 0 and depth[s] < 0:
                if len(path) > self.num_states:
                    raise TopologyError("backoff arcs contain a cycle")
                path.append(s)
                s = int(self.backoff[s])
            base = -1 if s < 0 else int(depth[s])
            for s in reversed(path):
                base += 1
                depth[s] = base
        return depth

    @property
    def num_entries(self) -> int:
        return len(self.entry_label)

    def check_state(self, q: int) -> None:
        if not 0 <= q < self.num_states:
            raise IndexError(f"no state {q} (topology has {self.num_states})")

    def labels(self, q: int) -> np.ndarray:
        return self.entry_label[self.offsets[q]:self.offsets[q + 1]]

    def arcs(self, q: int) -> dict[int, int]:
        """``label -> entry index`` for the explicit transitions of ``q``."""
        return self._arcs[q]

    def find(self, q: int, label: int) -> int:
        return self._arcs[q].get(label, -1)

    def chain(self, q: int) -> list[int]:
        out = []
        while q >= 0:
            out.append(q)
            q = int(self.backoff[q])
        return out

    def reading_entry(self, q: int, label: int) -> int:
        """Entry at the first state on the backoff path of ``q`` reading ``label``."""
        while q >= 0:
            e = self._arcs[q].get(label)
            if e is not None:
                return e
            q = int(self.backoff[q])
        return -1

    def next_state(self, q: int, label: int) -> int:
        e = self.reading_entry(q, label)
        if e < 0:
            raise KeyError(f"label {label} unreadable from state {q}")
        return int(self.entry_dest[e])

    def parent_entries(self) -> np.ndarray:
        """Entry with the same label at the backoff state, or -1 at bottom states.

        Raises if some state has a label its backoff state lacks; the KL
        optimizer relies on that nesting.
        """
        parent = np.full(self.num_entries, -1, dtype=np.int64)
        bo = self.backoff[self.entry_state]
        for e in np.nonzero(bo >= 0)[0].tolist():
            p = self._arcs[int(bo[e])].get(int(self.entry_label[e]))
            if p is None:
                raise TopologyError(
                    f"label {self.entry_label[e]} of state {self.entry_state[e]} "
                    "is missing at its backoff state")
            parent[e] = p
        return parent

    def describe_state(self, q: int) -> str:
        return str(q)


class NGramTopology(BackoffTopology):
    """Topology whose states are n-gram contexts (tuples of token ids).

    States are the empty context, the sentence-start context and every
    context that has at least one explicit continuation.  The backoff of a
    context drops its oldest token, and a transition leads to the longest
    state that is a suffix of ``context + (label,)``.
    """

    def __init__(self, symbols: SymbolTable, order: int, ngrams: Iterable[tuple]):
        if order < 1:
            raise TopologyError("order must be >= 1")
        self.order = order
        grams = set()
        for g in ngrams:
            g = tuple(int(t) for t in g)
            if not 1 <= len(g) <= order:
                raise TopologyError(f"n-gram {g} outside order {order}")
            grams.add(g)
        n_sym = len(symbols)
        for x in range(1, n_sym):
            grams.add((x,))
        self._check_closed(grams)

        ctxs = {()}
        if order >= 2:
            ctxs.add((BOS_ID,))
        for g in grams:
            if len(g) >= 2:
                ctxs.add(g[:-1])
        contexts = sorted(ctxs, key=lambda c: (len(c), c))
        index = {c: i for i, c in enumerate(contexts)}
        self.contexts = contexts
        self.index = index

        e_state, e_label, e_dest = [], [], []
        for g in grams:
            ctx, x = g[:-1], g[-1]
            e_state.append(index[ctx])
            e_label.append(x)
            e_dest.append(-1 if x == EOS_ID else self._longest_state(ctx + (x,)))
        backoff = [-1] + [index[c[1:]] for c in contexts[1:]]
        super().__init__(symbols, len(contexts), e_state, e_label, e_dest,
                         backoff, index[(BOS_ID,)] if order >= 2 else 0)

    def _check_closed(self, grams: set) -> None:
        for g in grams:
            if g[-1] == BOS_ID or BOS_ID in g[1:] or EOS_ID in g[:-1]:
                raise TopologyError(f"misplaced boundary token in {g}")
            if len(g) >= 2:
                if g[1:] not in grams:
                    raise TopologyError(f"n-gram {g} lacks its suffix {g[1:]}")
                h = g[:-1]
                if h != (BOS_ID,) and h not in grams:
                    raise TopologyError(f"n-gram {g} lacks its prefix {h}")

    def _longest_state(self, seq: tuple) -> int:
        if self.order == 1:
            return 0
        seq = seq[-(self.order - 1):]
        for i in range(len(seq)):
            s = self.index.get(seq[i:])
            if s is not None:
                return s
        return 0

    @staticmethod
    def close(grams: Iterable[tuple]) -> set:
        """Smallest prefix- and suffix-closed superset of ``grams``."""
        out = set()
        stack = [tuple(g) for g in grams]
        while stack:
            g = stack.pop()
            if g in out:
                continue
            out.add(g)
            if len(g) >= 2:
                stack.append(g[1:])
                if g[:-1] != (BOS_ID,):
                    stack.append(g[:-1])
        return out

    @classmethod
    def from_ngrams(cls, symbols, order, ngrams, close=True) -> "NGramTopology":
        return cls(symbols, order, cls.close(ngrams) if close else ngrams)

    def ngram(self, e: int) -> tuple:
        return self.contexts[self.entry_state[e]] + (int(self.entry_label[e]),)

    def ngrams(self) -> set:
        return {self.ngram(e) for e in range(self.num_entries)}

    def state_for_context(self, context: Sequence[int]) -> int:
        """Longest state that is a suffix of ``context``."""
        return self._longest_state(tuple(context)) if context else 0

    def describe_state(self, q: int) -> str:
        return " ".join(self.symbols.decode(self.contexts[q]))

    def __eq__(self, other) -> bool:
        return (isinstance(other, NGramTopology) and self.order == other.order
                and self.symbols == other.symbols and self.ngrams() == other.ngrams())

    __hash__ = None


class Resolution(NamedTuple):
    state: int  # first state on the backoff path where the label is explicit
    prob: float
    next_state: int  # destination, -1 for sentence end


class BackoffNGramModel:
    """Probabilities on a topology: one weight per entry, one backoff weight per state."""

    def __init__(self, topology: BackoffTopology, weights, backoff_weights):
        self.topology = topology
        self.symbols = topology.symbols
        self.weights = np.array(weights, dtype=np.float64)
        self.backoff_weights = np.array(backoff_weights, dtype=np.float64)
        if self.weights.shape != (topology.num_entries,):
            raise ValueError("one weight per entry required")
        if self.backoff_weights.shape != (topology.num_states,):
            raise ValueError("one backoff weight per state required")
        self.weights.setflags(write=False)
        self.backoff_weights.setflags(write=False)
        self._dist_cache: dict[int, np.ndarray] = {}

    @classmethod
    def from_probabilities(cls, topology: BackoffTopology, weights) -> "BackoffNGramModel":
        """Model with the given explicit probabilities and normalizing backoff weights."""
        weights = np.asarray(weights, dtype=np.float64)
        if np.any(weights <= 0) or np.any(weights > 1 + 1e-12):
            raise ValueError("explicit probabilities must lie in (0, 1]")
        top = topology
        bows = np.ones(top.num_states)
        model = cls(top, weights, bows)
        bows = np.array(bows)
        n_labels = len(top.symbols) - 1
        for q in np.argsort(top.depth, kind="stable").tolist():
            b = int(top.backoff[q])
            if b < 0:
                continue
            lo, hi = top.offsets[q], top.offsets[q + 1]
            num = 1.0 - math.fsum(weights[lo:hi])
            if hi - lo == n_labels:
                if abs(num) > 1e-9:
                    raise ValueError(f"complete state {top.describe_state(q)!r} "
                                     f"has mass {1.0 - num}")
                bows[q] = 1.0
                continue
            lower = math.fsum(model._prob_with(bows, b, int(x))
                              for x in top.entry_label[lo:hi])
            den = 1.0 - lower
            if num <= 0.0 or den <= 0.0:
                raise ValueError(
                    f"state {top.describe_state(q)!r} leaves no mass for backoff")
            bows[q] = num / den
        return cls(top, weights, bows)

    def _prob_with(self, bows, q: int, x: int) -> float:
        top = self.topology
        mult = 1.0
        while q >= 0:
            e = top._arcs[q].get(x)
            if e is not None:
                return mult * self.weights[e]
            mult *= bows[q]
            q = int(top.backoff[q])
        return 0.0

    # -- queries ---------------------------------------------------------

    def _label(self, x) -> int:
        if isinstance(x, str):
            x = self.symbols.lookup(x)
        x = int(x)
        if x == BOS_ID:
            raise ValueError("sentence start is not a predictable label")
        if not 0 <= x < len(self.symbols):
            return UNK_ID
        return x

    def resolve(self, q: int, x) -> Resolution:
        """Reading state, probability and destination of label ``x`` from ``q``."""
        top = self.topology
        top.check_state(q)
        x = self._label(x)
        mult = 1.0
        s = q
        while s >= 0:
            e = top._arcs[s].get(x)
            if e is not None:
                return Resolution(s, mult * float(self.weights[e]), int(top.entry_dest[e]))
            mult *= float(self.backoff_weights[s])
            s = int(top.backoff[s])
        # only reachable on topologies without a complete bottom state
        return Resolution(-1, 0.0, -1)

    def prob(self, q: int, x) -> float:
        return self.resolve(q, x).prob

    def final_weight(self, q: int) -> float:
        return self.resolve(q, EOS_ID).prob

    def distribution(self, q: int) -> np.ndarray:
        """Dense ``p(. | q)`` indexed by token id (sentence start gets 0)."""
        d = self._dist_cache.get(q)
        if d is not None:
            return d
        top = self.topology
        b = int(top.backoff[q])
        if b >= 0:
            d = self.distribution(b) * self.backoff_weights[q]
        else:
            d = np.zeros(len(self.symbols))
        lo, hi = top.offsets[q], top.offsets[q + 1]
        d[top.entry_label[lo:hi]] = self.weights[lo:hi]
        d.setflags(write=False)
        if len(self._dist_cache) > 4096:
            self._dist_cache.clear()
        self._dist_cache[q] = d
        return d

    def state_for_context(self, context: Sequence[int]) -> int:
        return self.topology.state_for_context(context)

    def prob_context(self, context: Sequence[int], x) -> float:
        return self.prob(self.state_for_context(context), x)

    def next_state(self, q: int, x) -> int:
        return self.resolve(q, x).next_state

    def check_normalization(self) -> float:
        """Largest deviation of ``sum_x p(x|q)`` from 1 over all states."""
        worst = 0.0
        for q in range(self.topology.num_states):
            worst = max(worst, abs(math.fsum(self.distribution(q)) - 1.0))
        return worst

    # -- teacher protocol (batched prefixes) -------------------------------

    def begin(self, n: int) -> np.ndarray:
        return np.full(n, self.topology.initial, dtype=np.int64)

    def advance(self, states: np.ndarray, tokens) -> np.ndarray:
        return np.array([self.next_state(int(q), int(x)) for q, x in zip(states, tokens)],
                        dtype=np.int64)

    def probs(self, states: np.ndarray) -> np.ndarray:
        return np.stack([self.distribution(int(q)) for q in states]) if len(states) \
            else np.zeros((0, len(self.symbols)))

    def select(self, states: np.ndarray, rows) -> np.ndarray:
        return states[rows]

    def __repr__(self) -> str:
        order = getattr(self.topology, "order", "?")
        return (f"BackoffNGramModel(order={order}, states={self.topology.num_states}, "
                f"entries={self.topology.num_entries})")


def seq_logprob(model: BackoffNGramModel, sentence: Sequence) -> float:
    """Natural-log probability of a sentence including its end."""
    q = model.topology.initial
    total = 0.0
    for tok in sentence:
        r = model.resolve(q, tok)
        total += math.log(r.prob)
        q = r.next_state
    return total + math.log(model.final_weight(q))


def count_ngrams(corpus: Iterable[Sequence[int]], order: int) -> Counter:
    """Counts of every n-gram (orders 1..n) in boundary-padded id sentences."""
    counts: Counter = Counter()
    for sent in corpus:
        seq = (BOS_ID, *sent, EOS_ID)
        for i in range(1, len(seq)):
            for k in range(1, order + 1):
                if i - k + 1 < 0:
                    break
                counts[seq[i - k + 1:i + 1]] += 1
    return counts


def extract_topology(corpus: Iterable[Sequence], order: int, symbols: SymbolTable,
                     min_counts: Sequence[int] | int = 1) -> NGramTopology:
    """N-grams of the corpus whose count reaches the per-order threshold.

    ``min_counts[k - 1]`` is the threshold for order ``k`` (unigrams are
    always present).  The result is closed under prefixes and suffixes.
    """
    if order < 1:
        raise TopologyError("order must be >= 1")
    if isinstance(min_counts, int):
        min_counts = [min_counts] * order
    min_counts = list(min_counts) + [min_counts[-1]] * (order - len(min_counts))
    ids = ([symbols.lookup(t) if isinstance(t, str) else int(t) for t in s]
           for s in corpus)
    counts = count_ngrams(ids, order)
    keep = [g for g, c in counts.items() if len(g) >= 2 and c >= min_counts[len(g) - 1]]
    return NGramTopology.from_ngrams(symbols, order, keep)


def interpolate(a: BackoffNGramModel, b: BackoffNGramModel, mix: float) -> BackoffNGramModel:
    """Linear mixture ``mix * a + (1 - mix) * b`` on the union topology."""
    if a.symbols != b.symbols:
        raise ValueError("interpolated models must share a symbol table")
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    ta, tb = a.topology, b.topology
    top = NGramTopology(a.symbols, max(ta.order, tb.order), ta.ngrams() | tb.ngrams())
    w = np.empty(top.num_entries)
    for e in range(top.num_entries):
        ctx = top.contexts[top.entry_state[e]]
        x = int(top.entry_label[e])
        w[e] = mix * a.prob_context(ctx, x) + (1.0 - mix) * b.prob_context(ctx, x)
    return BackoffNGramModel.from_probabilities(top, w)


def context_prob(model: BackoffNGramModel, context: Sequence[int]) -> float:
    """Probability of reaching ``context`` by the chain rule (sentence start free)."""
    p = 1.0
    start = 1 if context and context[0] == BOS_ID else 0
    for i in range(start, len(context)):
        p *= model.prob_context(context[:i], context[i])
    return p


def relative_entropy_scores(model: BackoffNGramModel) -> np.ndarray:
    """KL increase caused by dropping each non-unigram entry on its own.

    Unigram entries get ``inf``.  The score of ``(h, x)`` is
    ``P(h) * KL(p(.|h) || p'(.|h))`` where ``p'`` routes ``x`` through the
    backoff and renormalizes.
    """
    top = model.topology
    scores = np.full(top.num_entries, np.inf)
    history = {}
    for e in range(top.num_entries):
        q = int(top.entry_state[e])
        b = int(top.backoff[q])
        if b < 0:
            continue
        lo, hi = top.offsets[q], top.offsets[q + 1]
        if q not in history:
            num = 1.0 - math.fsum(model.weights[lo:hi])
            den = 1.0 - math.fsum(model.prob(b, int(y)) for y in top.labels(q))
            history[q] = (context_prob(model, top.contexts[q]), num, den)
        ph, num, den = history[q]
        x = int(top.entry_label[e])
        p = float(model.weights[e])
        p_low = model.prob(b, x)
        alpha = float(model.backoff_weights[q])
        alpha_new = (num + p) / (den + p_low)
        d = p * (math.log(p_low) + math.log(alpha_new) - math.log(p))
        if num > 0:
            d += (math.log(alpha_new) - math.log(alpha)) * num
        scores[e] = max(-ph * d, 0.0)
    return scores


def prune(model: BackoffNGramModel, max_ngrams: int,
          max_unigrams: int | None = None) -> BackoffNGramModel:
    """Drop the least useful n-grams until at most ``max_ngrams`` entries remain.

    Entries are ranked by :func:`relative_entropy_scores`; an entry needed by
    a kept longer n-gram (as its prefix or suffix) inherits that n-gram's
    score so the result stays closed.  Ties keep shorter n-grams first, then
    order by context and label strings.  Unigram entries are never removed.
    """
    top = model.topology
    root_entries = int(top.offsets[1] - top.offsets[0])
    if max_unigrams is not None and root_entries > max_unigrams:
        raise ValueError(f"{root_entries} unigrams exceed the unigram budget {max_unigrams}")
    if root_entries > max_ngrams:
        raise ValueError(f"{root_entries} unigrams exceed the n-gram budget {max_ngrams}")
    if top.num_entries <= max_ngrams:
        return model

    scores = relative_entropy_scores(model)
    grams = [top.ngram(e) for e in range(top.num_entries)]
    eff = dict(zip(grams, scores.tolist()))
    for g in sorted(grams, key=len, reverse=True):
        if len(g) < 3:
            continue
        s = eff[g]
        for dep in (g[1:], g[:-1]):
            if dep in eff and len(dep) >= 2 and eff[dep] < s:
                eff[dep] = s
    tok = model.symbols.token
    ranked = sorted(
        (g for g in grams if len(g) >= 2),
        key=lambda g: (-eff[g], len(g), [tok(t) for t in g[:-1]], tok(g[-1])))
    kept = ranked[:max_ngrams - root_entries]
    new_top = NGramTopology(model.symbols, top.order,
                            kept + [g for g in grams if len(g) == 1])
    w = np.array([model.weights[top.find(top.index[g[:-1]], g[-1])]
                  for g in map(new_top.ngram, range(new_top.num_entries))])
    return BackoffNGramModel.from_probabilities(new_top, w)
