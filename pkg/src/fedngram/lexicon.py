"""Piece-to-word lexicon transducer, composition with a word topology, count transfer.

The lexicon ``M`` is a trie over canonical segmentations.  Every arc reads
one piece; the arc reading the last piece of a word emits that word and
returns to the root, all other arcs emit nothing.  ``R[q]`` is the set of
words that can still be completed from trie state ``q``.

Composing ``M`` with a word topology ``A`` gives a piece-level backoff
topology ``B`` whose states are pairs ``(q1, q2)``.  Backoff arcs only
change the word-level component.  Because every word is completed by a
single arc, counts collected on ``B`` map back onto ``A`` entry by entry.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Sequence

import numpy as np

from .counting import CountAccumulator, ExpectedCounts, TeacherModel, prefix_batches
from .ngram import BackoffTopology
from .symbols import EOS_ID, UNK, UNK_ID, SymbolTable
from .wordpiece import MARKER, SegmentationError, WordPieceInventory, _ends_word, segment


class LexiconError(ValueError):
    pass


class LexiconFst:
    """Sequential transducer from piece ids to word ids.

    ``arcs[q]`` maps a piece id to ``(destination, output word id or -1)``.
    State 0 is both initial and final.
    """

    def __init__(self, pieces: SymbolTable, words: SymbolTable,
                 segmentations: dict[int, tuple[int, ...]], marker: str | None = None):
        self.pieces = pieces
        self.words = words
        self.marker = marker
        self.segmentations = dict(segmentations)
        self.arcs: list[dict[int, tuple[int, int]]] = [{}]
        self.depth = [0]
        prefix_state: dict[tuple[int, ...], int] = {(): 0}
        self.word_arc: dict[int, tuple[int, int]] = {}
        conflicts = []
        for y, seg in self.segmentations.items():
            q = 0
            for k, x in enumerate(seg[:-1]):
                nxt = prefix_state.get(seg[:k + 1])
                if nxt is None:
                    if x in self.arcs[q]:
                        conflicts.append(y)
                        break
                    nxt = len(self.arcs)
                    self.arcs.append({})
                    self.depth.append(k + 1)
                    prefix_state[seg[:k + 1]] = nxt
                    self.arcs[q][x] = (nxt, -1)
                q = nxt
            else:
                x = seg[-1]
                if x in self.arcs[q] or seg in prefix_state:
                    conflicts.append(y)
                    continue
                self.arcs[q][x] = (0, y)
                self.word_arc[y] = (q, x)
        if conflicts:
            names = sorted(words.token(y) for y in conflicts)
            raise LexiconError(
                f"segmentations are not prefix-free for words {names[:10]}; "
                "use an inventory with a word marker")
        self._check_prefix_free(prefix_state)
        self.num_states = len(self.arcs)
        self.reach = self._reachable_outputs()

    def _check_prefix_free(self, prefix_state) -> None:
        bad = [y for y, seg in self.segmentations.items() if seg in prefix_state]
        if bad:
            raise LexiconError(f"segmentations of {sorted(self.words.token(y) for y in bad)[:10]} "
                               "are prefixes of other segmentations")

    def _reachable_outputs(self) -> list[frozenset[int]]:
        reach: list[set[int]] = [set() for _ in self.arcs]
        for q in sorted(range(len(self.arcs)), key=lambda s: -self.depth[s]):
            for d, o in self.arcs[q].values():
                if o >= 0:
                    reach[q].add(o)
                else:
                    reach[q] |= reach[d]
        return [frozenset(r) for r in reach]

    def transduce(self, piece_ids: Sequence[int]) -> list[int]:
        q, out = 0, []
        for x in piece_ids:
            arc = self.arcs[q].get(int(x))
            if arc is None:
                raise LexiconError(f"piece {self.pieces.token(int(x))!r} not accepted")
            q, o = arc
            if o >= 0:
                out.append(o)
        if q != 0:
            raise LexiconError("piece sequence ends inside a word")
        return out

    def encode_words(self, word_ids: Sequence[int]) -> list[int]:
        return [x for y in word_ids for x in self.segmentations[int(y)]]


def piece_symbols(inventory: WordPieceInventory) -> SymbolTable:
    return SymbolTable(p for p in inventory.pieces if p != UNK)


def build_lexicon(vocab: SymbolTable, inventory: WordPieceInventory,
                  pieces: SymbolTable | None = None) -> LexiconFst:
    """Lexicon mapping each word's canonical segmentation to the word.

    The unknown word is spelled by the reserved unknown piece.
    """
    pieces = piece_symbols(inventory) if pieces is None else pieces
    segs: dict[int, tuple[int, ...]] = {UNK_ID: (UNK_ID,)}
    bad = []
    for y, w in enumerate(vocab.tokens):
        if y <= UNK_ID:
            continue
        try:
            seg = segment(w, inventory)
        except SegmentationError:
            bad.append(w)
            continue
        missing = [p for p in seg if p not in pieces]
        if missing:
            raise LexiconError(f"pieces {missing} of {w!r} missing from the piece table")
        segs[y] = tuple(pieces.id(p) for p in seg)
    if bad:
        raise LexiconError(f"unsegmentable words: {bad[:10]}")
    return LexiconFst(pieces, vocab, segs, inventory.marker)


class ComposedTopology(BackoffTopology):
    """Piece-level topology ``B = M o A`` with pair states.

    ``pairs[s]`` is the ``(lexicon state, word state)`` of state ``s`` and
    ``outputs[e]`` the word emitted by entry ``e`` (``-1`` for none).
    """

    def __init__(self, m: LexiconFst, a: BackoffTopology):
        if len(m.words) > len(a.symbols) or m.words.tokens != a.symbols.tokens[:len(m.words)]:
            raise ValueError("lexicon outputs must be a prefix of the word alphabet")
        self.lexicon = m
        self.word_topology = a
        pairs: list[tuple[int, int]] = []
        index: dict[tuple[int, int], int] = {}

        def state(p):
            s = index.get(p)
            if s is None:
                s = index[p] = len(pairs)
                pairs.append(p)
                queue.append(p)
            return s

        queue: deque = deque()
        initial = state((0, a.initial))
        e_state, e_label, e_dest, e_out = [], [], [], []
        while queue:
            q1, q2 = queue.popleft()
            s = index[(q1, q2)]
            for x, (d, o) in self._arcs_at(q1, q2):
                dest = (0, int(a.entry_dest[a.find(q2, o)])) if o >= 0 else (d, q2)
                e_state.append(s)
                e_label.append(x)
                e_dest.append(state(dest))
                e_out.append(o)
            if q1 == 0 and a.find(q2, EOS_ID) >= 0:
                e_state.append(s)
                e_label.append(EOS_ID)
                e_dest.append(-1)
                e_out.append(EOS_ID)
            b = int(a.backoff[q2])
            if b >= 0:
                state((q1, b))
        backoff = [index.get((q1, int(a.backoff[q2])), -1) if a.backoff[q2] >= 0 else -1
                   for q1, q2 in pairs]
        e_state = np.asarray(e_state, dtype=np.int64)
        e_label = np.asarray(e_label, dtype=np.int64)
        order = np.lexsort((e_label, e_state))
        self.pairs = pairs
        self.index = index
        self.outputs = np.asarray(e_out, dtype=np.int64)[order]
        super().__init__(m.pieces, len(pairs), e_state[order], e_label[order],
                         np.asarray(e_dest, dtype=np.int64)[order], backoff, initial)

    def _arcs_at(self, q1: int, q2: int):
        """Lexicon arcs at ``q1`` that lead to a word explicit at ``q2``."""
        m, a = self.lexicon, self.word_topology
        labels = a.arcs(q2)
        reach = m.reach[q1]
        if len(reach) <= len(labels):
            words = [y for y in reach if y in labels]
        else:
            words = [y for y in labels if y in reach]
        depth = m.depth[q1]
        pieces = sorted({m.segmentations[y][depth] for y in words})
        return [(x, m.arcs[q1][x]) for x in pieces]

    def describe_state(self, q: int) -> str:
        q1, q2 = self.pairs[q]
        return f"({q1}, {self.word_topology.describe_state(q2)})"


def compose(m: LexiconFst, a) -> ComposedTopology:
    """Backoff-aware composition of a lexicon with a word topology or model."""
    return ComposedTopology(m, getattr(a, "topology", a))


def transfer_counts(counts: ExpectedCounts, b: ComposedTopology,
                    a: BackoffTopology | None = None) -> ExpectedCounts:
    """Word-level counts on ``a`` read off the word-completing arcs of ``b``.

    The backoff mass of a word state is recomputed as the mass of
    word-boundary prefixes below it minus the counts read below it.
    """
    a = b.word_topology if a is None else a
    if a is not b.word_topology:
        raise ValueError("b was not composed from this word topology")
    if counts.topology is not b:
        raise ValueError("counts are keyed to a different topology")
    entry = np.zeros(a.num_entries)
    q2 = np.array([p[1] for p in b.pairs], dtype=np.int64)
    q1 = np.array([p[0] for p in b.pairs], dtype=np.int64)
    sel = np.nonzero(b.outputs >= 0)[0]
    src = q2[b.entry_state[sel]]
    target = np.array([a.find(int(s), int(o)) for s, o in zip(src, b.outputs[sel])],
                      dtype=np.int64)
    if np.any(target < 0):
        raise LexiconError("word-completing arc without a matching word entry")
    np.add.at(entry, target, counts.entry[sel])
    visits = np.zeros(a.num_states)
    boundary = q1 == 0
    np.add.at(visits, q2[boundary], counts.visits[boundary])
    return ExpectedCounts(a, entry, _backoff_mass(a, entry, visits), counts.dropped, visits)


def _backoff_mass(a: BackoffTopology, entry: np.ndarray, visits: np.ndarray) -> np.ndarray:
    read = np.bincount(a.entry_state, weights=entry, minlength=a.num_states)
    sub_v, sub_r = visits.copy(), read.copy()
    for q in np.argsort(-a.depth, kind="stable").tolist():
        b = int(a.backoff[q])
        if b >= 0:
            sub_v[b] += sub_v[q]
            sub_r[b] += sub_r[q]
    mass = np.maximum(sub_v - sub_r, 0.0)
    mass[a.backoff < 0] = 0.0
    return mass


def expected_counts_composed(teacher: TeacherModel, tops: Sequence[ComposedTopology],
                             samples, weights=None, batch_size: int = 256
                             ) -> list[ExpectedCounts]:
    """Counting step on piece-level topologies for piece samples.

    A piece that the lexicon cannot read at the current position starts an
    unreadable word.  With a word marker its prefixes are skipped up to the
    end of the word, which then advances the word state by the unknown
    word; without a marker tracking of that sample stops.
    """
    if not tops:
        return []
    m = tops[0].lexicon
    for t in tops:
        if t.symbols != teacher.symbols or t.lexicon is not m:
            raise ValueError("all topologies must share the teacher alphabet and lexicon")
    ids = [[teacher.symbols.lookup(t) if isinstance(t, str) else int(t) for t in s]
           for s in samples]
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    accs = [CountAccumulator(t) for t in tops]
    states = [np.full(len(ids), t.initial, dtype=np.int64) for t in tops]
    # per sample: None while tracking, else the pieces of the unreadable word so far
    skipping: list[list[str] | None] = [None] * len(ids)
    starts = [st.copy() for st in states]
    dead = np.zeros(len(ids), dtype=bool)
    tok = teacher.symbols.token
    for rows, i, probs in prefix_batches(teacher, ids, batch_size):
        live = np.array([skipping[r] is None and not dead[r] for r in rows.tolist()],
                        dtype=bool)
        if live.any():
            lr = rows[live]
            for acc, st in zip(accs, states):
                acc.add(st[lr], probs[live], None if w is None else w[lr])
        for r in rows.tolist():
            if len(ids[r]) <= i or dead[r]:
                continue
            x = ids[r][i]
            if skipping[r] is None:
                t0 = tops[0]
                if t0.reading_entry(int(states[0][r]), x) >= 0:
                    for t, st, ws in zip(tops, states, starts):
                        st[r] = t.next_state(int(st[r]), x)
                        if t.pairs[st[r]][0] == 0:
                            ws[r] = st[r]
                    continue
                if m.marker is None:
                    dead[r] = True
                    continue
                skipping[r] = []
            skipping[r].append(tok(x))
            if _ends_word("".join(skipping[r]), m.marker or MARKER):
                skipping[r] = None
                # the unreadable word counts as the unknown word from its start state
                for t, st, ws in zip(tops, states, starts):
                    st[r] = ws[r] = t.next_state(int(ws[r]), UNK_ID)
    return [acc.result() for acc in accs]
