"""Count-trained backoff models (interpolated Kneser-Ney) on a fixed topology.

These are the conventional baselines: the supplemental-corpus model, the
cased model behind truecasing, and the reference the distilled models are
compared against.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Sequence

import numpy as np

from .ngram import BackoffNGramModel, NGramTopology, count_ngrams, extract_topology
from .symbols import BOS_ID, SymbolTable


def _discount(eff: dict) -> float:
    n1 = sum(1 for c in eff.values() if c == 1)
    n2 = sum(1 for c in eff.values() if c == 2)
    if n1 == 0 or n2 == 0:
        return 0.75
    return min(max(n1 / (n1 + 2.0 * n2), 0.05), 0.95)


def kneser_ney(topology: NGramTopology, corpus: Iterable[Sequence]) -> BackoffNGramModel:
    """Interpolated Kneser-Ney estimates for the n-grams of ``topology``.

    Lower orders use continuation counts except for n-grams that start at
    the sentence start.  Discounts per order follow ``n1 / (n1 + 2 n2)``.
    Labels never seen fall back to a uniform share at the unigram level.
    """
    symbols = topology.symbols
    n = topology.order
    ids = [[symbols.lookup(t) if isinstance(t, str) else int(t) for t in s] for s in corpus]
    raw = count_ngrams(ids, n)
    eff: list[dict] = [dict() for _ in range(n + 1)]
    for g, c in raw.items():
        if len(g) == n or g[0] == BOS_ID:
            eff[len(g)][g] = eff[len(g)].get(g, 0) + c
    for g in raw:
        # continuation count: distinct left extensions
        if len(g) >= 2 and len(g) - 1 < n and g[1] != BOS_ID:
            low = g[1:]
            if low[0] != BOS_ID:
                eff[len(low)][low] = eff[len(low)].get(low, 0) + 1
    disc = [0.0] + [_discount(eff[k]) for k in range(1, n + 1)]
    denom = defaultdict(float)
    types = defaultdict(int)
    for k in range(1, n + 1):
        for g, c in eff[k].items():
            denom[g[:-1]] += c
            types[g[:-1]] += 1
    n_labels = len(symbols) - 1
    memo: dict = {}

    def prob(h: tuple, x: int) -> float:
        key = (h, x)
        v = memo.get(key)
        if v is not None:
            return v
        if not h:
            d = disc[1]
            tot = denom[()]
            if tot == 0:
                v = 1.0 / n_labels
            else:
                c = eff[1].get((x,), 0)
                v = max(c - d, 0.0) / tot + d * types[()] / tot / n_labels
        else:
            tot = denom[h]
            lower = prob(h[1:], x)
            if tot == 0:
                v = lower
            else:
                d = disc[len(h) + 1]
                c = eff[len(h) + 1].get(h + (x,), 0)
                v = max(c - d, 0.0) / tot + d * types[h] / tot * lower
        memo[key] = v
        return v

    w = np.empty(topology.num_entries)
    for e in range(topology.num_entries):
        g = topology.ngram(e)
        w[e] = prob(g[:-1], g[-1])
    return BackoffNGramModel.from_probabilities(topology, w)


def train_ngram(corpus: Sequence[Sequence[str]], order: int, symbols: SymbolTable | None = None,
                min_counts: Sequence[int] | int = 1) -> BackoffNGramModel:
    """Extract a topology from ``corpus`` and fit Kneser-Ney weights on it."""
    if symbols is None:
        symbols = SymbolTable(t for s in corpus for t in s)
    top = extract_topology(corpus, order, symbols, min_counts)
    return kneser_ney(top, corpus)
