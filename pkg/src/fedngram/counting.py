"""The counting step: teacher conditionals attributed to backoff-resolved states.

For every prefix of every sample the automaton state ``q'`` reached by the
prefix is tracked, and the teacher's probability of each label ``x`` is
added to the entry that reads ``x`` first on the backoff path of ``q'``.
Besides these entry counts, each state records how much mass passed
through its backoff arc; the KL objective needs both.
"""

from __future__ import annotations

from collections.abc import Sequence
from typing import Protocol

import numpy as np

from .ngram import BackoffTopology
from .symbols import BOS_ID, SymbolTable


class TeacherModel(Protocol):
    """Conditional next-token distributions over a batch of prefixes.

    ``probs`` returns one row per prefix indexed by token id of ``symbols``;
    the sentence-start column is zero and each row sums to one.
    """

    symbols: SymbolTable

    def begin(self, n: int): ...

    def advance(self, state, tokens): ...

    def probs(self, state) -> np.ndarray: ...

    def select(self, state, rows): ...


class ExpectedCounts:
    """Accumulated counts keyed to the entries and states of one topology."""

    def __init__(self, topology: BackoffTopology, entry=None, backoff=None,
                 dropped: float = 0.0, visits=None):
        self.topology = topology
        self.entry = (np.zeros(topology.num_entries) if entry is None
                      else np.asarray(entry, dtype=np.float64))
        self.backoff = (np.zeros(topology.num_states) if backoff is None
                        else np.asarray(backoff, dtype=np.float64))
        self.dropped = float(dropped)
        # total teacher mass of prefixes whose automaton state is q
        self.visits = (np.zeros(topology.num_states) if visits is None
                       else np.asarray(visits, dtype=np.float64))

    def get(self, q: int, x: int) -> float:
        e = self.topology.find(q, x)
        return float(self.entry[e]) if e >= 0 else 0.0

    def end_counts(self) -> np.ndarray:
        """Sentence-end count per state."""
        out = np.zeros(self.topology.num_states)
        top = self.topology
        mask = top.entry_label == 1
        np.add.at(out, top.entry_state[mask], self.entry[mask])
        return out

    def total(self) -> float:
        return float(self.entry.sum())

    def scaled(self, factor: float) -> "ExpectedCounts":
        return ExpectedCounts(self.topology, self.entry * factor, self.backoff * factor,
                              self.dropped * factor, self.visits * factor)

    def __add__(self, other: "ExpectedCounts") -> "ExpectedCounts":
        if other.topology is not self.topology:
            raise ValueError("counts belong to different topologies")
        return ExpectedCounts(self.topology, self.entry + other.entry,
                              self.backoff + other.backoff, self.dropped + other.dropped,
                              self.visits + other.visits)

    def dump(self) -> str:
        """``context<TAB>label<TAB>count`` lines for non-zero entries."""
        top = self.topology
        tok = top.symbols.token
        lines = []
        for e in np.nonzero(self.entry)[0].tolist():
            q = int(top.entry_state[e])
            lines.append(f"{top.describe_state(q)}\t{tok(int(top.entry_label[e]))}\t"
                         f"{float(self.entry[e])!r}")
        return "\n".join(lines) + ("\n" if lines else "")


class _Plan:
    __slots__ = ("labels", "entries", "step", "states", "dense_bottom", "bottom")

    def __init__(self, top: BackoffTopology, origin: int, full: int):
        chain = top.chain(origin)
        seen: set[int] = set()
        labels, entries, step, states = [], [], [], []
        last = len(chain) - 1
        self.bottom = chain[-1]
        self.dense_bottom = (top.offsets[self.bottom + 1] - top.offsets[self.bottom]) == full
        for k, s in enumerate(chain):
            if k == last and self.dense_bottom:
                break
            for x, e in top.arcs(s).items():
                if x not in seen:
                    seen.add(x)
                    labels.append(x)
                    entries.append(e)
                    step.append(k)
            if k < last:
                states.append(s)
        self.labels = np.array(labels, dtype=np.int64)
        self.entries = np.array(entries, dtype=np.int64)
        self.step = np.array(step, dtype=np.int64)
        self.states = np.array(states, dtype=np.int64)


class CountAccumulator:
    """Adds batches of ``(origin state, distribution)`` pairs into counts."""

    def __init__(self, topology: BackoffTopology):
        self.topology = topology
        self._full = len(topology.symbols) - 1
        self._plans: dict[int, _Plan] = {}
        self._entry = np.zeros(topology.num_entries)
        self._backoff = np.zeros(topology.num_states)
        self._dense: dict[int, np.ndarray] = {}
        self._dropped = 0.0
        self._visits = np.zeros(topology.num_states)

    def _plan(self, q: int) -> _Plan:
        p = self._plans.get(q)
        if p is None:
            p = self._plans[q] = _Plan(self.topology, q, self._full)
        return p

    def add(self, origins: Sequence[int], probs: np.ndarray, weights=None) -> None:
        probs = np.asarray(probs, dtype=np.float64)
        if weights is not None:
            probs = probs * np.asarray(weights, dtype=np.float64)[:, None]
        n = len(origins)
        if n == 0:
            return
        plans = [self._plan(int(q)) for q in origins]
        totals = probs.sum(axis=1) - probs[:, BOS_ID]
        self._visits += np.bincount(np.asarray(origins, dtype=np.int64), weights=totals,
                                    minlength=len(self._visits))
        lens = np.array([len(p.labels) for p in plans])
        rows = np.repeat(np.arange(n), lens)
        labels = np.concatenate([p.labels for p in plans])
        entries = np.concatenate([p.entries for p in plans])
        vals = probs[rows, labels]
        self._entry += np.bincount(entries, weights=vals, minlength=len(self._entry))

        # backoff mass of chain step k = row total minus labels claimed at steps <= k
        n_steps = np.array([len(p.states) for p in plans])
        step_base = np.concatenate([[0], np.cumsum(n_steps)[:-1]])
        gsteps = np.concatenate([p.step for p in plans]) + np.repeat(step_base, lens)
        keep = np.concatenate([p.step < len(p.states) for p in plans])
        per_step = np.bincount(gsteps[keep], weights=vals[keep], minlength=int(n_steps.sum()))
        if len(per_step):
            cum = np.cumsum(per_step)
            before = np.concatenate([[0.0], cum])[step_base]
            cum_in_row = cum - np.repeat(before, n_steps)
            mass = np.repeat(totals, n_steps) - cum_in_row
            st = np.concatenate([p.states for p in plans])
            self._backoff += np.bincount(st, weights=np.maximum(mass, 0.0),
                                         minlength=len(self._backoff))

        dense = np.array([p.dense_bottom for p in plans])
        claimed = np.bincount(rows, weights=vals, minlength=n)
        if dense.any():
            rest = probs.copy()
            rest[rows, labels] = 0.0
            rest[:, BOS_ID] = 0.0
            for b in {p.bottom for p, d in zip(plans, dense) if d}:
                sel = np.array([p.bottom == b and d for p, d in zip(plans, dense)])
                acc = self._dense.get(b)
                add = rest[sel].sum(axis=0)
                self._dense[b] = add if acc is None else acc + add
        if not dense.all():
            self._dropped += float((totals - claimed)[~dense].sum())

    def result(self) -> ExpectedCounts:
        entry = self._entry.copy()
        top = self.topology
        for b, acc in self._dense.items():
            lo, hi = top.offsets[b], top.offsets[b + 1]
            entry[lo:hi] += acc[top.entry_label[lo:hi]]
        return ExpectedCounts(top, entry, self._backoff.copy(), self._dropped,
                              self._visits.copy())


def encode_samples(symbols: SymbolTable, samples) -> list[list[int]]:
    return [[symbols.lookup(t) if isinstance(t, str) else int(t) for t in s]
            for s in samples]


def prefix_batches(teacher: TeacherModel, sentences: Sequence[Sequence[int]],
                   batch_size: int = 256):
    """Yield ``(sentence indices, position, probs)`` for every prefix.

    A sentence of length ``m`` has prefixes at positions ``0..m``; the last
    one is the distribution that should have produced the sentence end.
    """
    n = len(sentences)
    lens = np.array([len(s) for s in sentences], dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        active = np.arange(len(idx))
        state = teacher.begin(len(idx))
        i = 0
        while len(active):
            yield idx[active], i, teacher.probs(state)
            keep = np.nonzero(lens[idx[active]] > i)[0]
            if len(keep) == 0:
                break
            state = teacher.select(state, keep)
            active = active[keep]
            state = teacher.advance(state, [sentences[j][i] for j in idx[active]])
            i += 1


def expected_counts(teacher: TeacherModel, topology: BackoffTopology, samples,
                    weights=None, batch_size: int = 256) -> ExpectedCounts:
    """Counting step of the approximation on one topology."""
    return expected_counts_multi(teacher, [topology], samples, weights, batch_size)[0]


def expected_counts_multi(teacher: TeacherModel, topologies: Sequence[BackoffTopology],
                          samples, weights=None, batch_size: int = 256) -> list[ExpectedCounts]:
    """Count several topologies from one pass over the teacher's prefixes."""
    for top in topologies:
        if top.symbols != teacher.symbols:
            raise ValueError("teacher and topology alphabets differ")
    ids = encode_samples(teacher.symbols, samples)
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    accs = [CountAccumulator(t) for t in topologies]
    states = [np.full(len(ids), t.initial, dtype=np.int64) for t in topologies]
    for rows, i, probs in prefix_batches(teacher, ids, batch_size):
        for acc, st in zip(accs, states):
            acc.add(st[rows], probs, None if w is None else w[rows])
        for top, st in zip(topologies, states):
            for r in rows.tolist():
                if len(ids[r]) > i:
                    st[r] = top.next_state(int(st[r]), ids[r][i])
    return [a.result() for a in accs]
