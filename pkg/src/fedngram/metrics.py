"""Evaluation metrics shared by n-gram and neural models.

Every model is driven through its teacher interface (``begin``, ``advance``,
``probs``), so the same code scores backoff models and the LSTM.  Word
sequences can be scored by a word-piece model by passing the inventory;
pieces of OOV words are then excluded together with their word.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .counting import TeacherModel
from .symbols import BOS_ID, EOS_ID, UNK, UNK_ID
from .wordpiece import WordPieceInventory, segment_sentence


def _vocab_set(lm: TeacherModel, vocab: Iterable[str] | None) -> frozenset:
    if vocab is None:
        return frozenset(lm.symbols.words())
    return frozenset(vocab)


def _positions(lm, corpus, vocab, inventory):
    """Per sentence: model ids and an in-vocabulary flag per position."""
    out = []
    for words in corpus:
        words = list(words)
        flags = [w in vocab for w in words]
        if inventory is None:
            toks, keep = words, flags
        else:
            toks, owner = segment_sentence(words, inventory, unk_piece=UNK)
            keep = [flags[i] for i in owner]
        ids = [lm.symbols.lookup(t) for t in toks]
        out.append((ids, keep))
    return out


def _scored(lm: TeacherModel, sentences: Sequence[Sequence[int]], batch_size: int = 256):
    """Yield ``(sentence index, position, probability row)`` including the end position."""
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        rows = list(range(len(chunk)))
        state = lm.begin(len(rows))
        t = 0
        while rows:
            p = lm.probs(state)
            for i, r in enumerate(rows):
                yield start + r, t, p[i]
            # sentences whose end was just scored drop out of the batch
            keep = [i for i, r in enumerate(rows) if len(chunk[r]) > t]
            if len(keep) < len(rows):
                rows = [rows[i] for i in keep]
                if not rows:
                    break
                state = lm.select(state, keep)
            state = lm.advance(state, [chunk[r][t] for r in rows])
            t += 1


def sentence_logprobs(lm: TeacherModel, corpus: Sequence[Sequence[str]],
                      vocab: Iterable[str] | None = None,
                      inventory: WordPieceInventory | None = None):
    """Per sentence: ``(SLL^e, end log-probability, in-vocabulary count)``."""
    vocab = _vocab_set(lm, vocab)
    data = _positions(lm, corpus, vocab, inventory)
    sll = [[] for _ in data]
    end = [0.0] * len(data)
    with np.errstate(divide="ignore"):
        for r, t, p in _scored(lm, [d[0] for d in data]):
            ids, keep = data[r]
            if t == len(ids):
                end[r] = float(np.log(p[EOS_ID]))
            elif keep[t]:
                sll[r].append(float(np.log(p[ids[t]])))
    return [(math.fsum(s), end[r], len(s)) for r, s in enumerate(sll)]


def sll_excl_oov(lm: TeacherModel, corpus: Sequence[Sequence[str]],
                 vocab: Iterable[str] | None = None,
                 inventory: WordPieceInventory | None = None) -> float:
    """Mean over sentences of the summed log-probability of in-vocabulary positions.

    Contexts advance through OOV positions (as the unknown token); the
    sentence end is not scored.  ``vocab`` defaults to the model's words.
    """
    rows = sentence_logprobs(lm, corpus, vocab, inventory)
    if not rows:
        raise ValueError("empty corpus")
    return math.fsum(r[0] for r in rows) / len(rows)


def perplexity(lm: TeacherModel, corpus: Sequence[Sequence[str]],
               vocab: Iterable[str] | None = None,
               inventory: WordPieceInventory | None = None) -> float:
    """``exp`` of the mean negative log-probability over in-vocabulary
    positions and sentence ends."""
    rows = sentence_logprobs(lm, corpus, vocab, inventory)
    n = sum(r[2] + 1 for r in rows)
    if n == 0:
        raise ValueError("empty corpus")
    return math.exp(-math.fsum(r[0] + r[1] for r in rows) / n)


def next_word_accuracy(lm: TeacherModel, corpus: Sequence[Sequence[str]], k: int = 1,
                       vocab: Iterable[str] | None = None) -> float:
    """Fraction of in-vocabulary positions whose word is among the top ``k``.

    Candidates exclude the reserved symbols; ties go to the smaller id.
    """
    return next_word_accuracies(lm, corpus, (k,), vocab)[k]


def next_word_accuracies(lm: TeacherModel, corpus: Sequence[Sequence[str]],
                         ks: Sequence[int] = (1,), vocab: Iterable[str] | None = None
                         ) -> dict[int, float]:
    if not corpus or not any(len(s) for s in corpus):
        raise ValueError("empty corpus")
    if min(ks) < 1:
        raise ValueError("k must be positive")
    vocab = _vocab_set(lm, vocab)
    data = _positions(lm, corpus, vocab, None)
    hits = dict.fromkeys(ks, 0)
    n = 0
    for r, t, p in _scored(lm, [d[0] for d in data]):
        ids, keep = data[r]
        if t == len(ids) or not keep[t]:
            continue
        y = ids[t]
        q = p.copy()
        q[[BOS_ID, EOS_ID, UNK_ID]] = -np.inf
        # rank under descending probability, ties to the smaller id
        rank = int(np.count_nonzero(q > q[y]) + np.count_nonzero(q[:y] == q[y]))
        n += 1
        for k in ks:
            hits[k] += rank < k
    if n == 0:
        return dict.fromkeys(ks, 0.0)
    return {k: hits[k] / n for k in ks}


def oov_rate(corpus: Sequence[Sequence[str]], vocab: Iterable[str]) -> float:
    vocab = frozenset(vocab)
    total = sum(len(s) for s in corpus)
    if total == 0:
        raise ValueError("empty corpus")
    return sum(w not in vocab for s in corpus for w in s) / total


@dataclass(frozen=True)
class EvalReport:
    """Summary metrics of one model on one corpus."""

    name: str
    sll_e: float
    perplexity: float
    accuracy: dict
    oov_rate: float
    tokens: int
    sentences: int

    def text(self) -> str:
        acc = "  ".join(f"top{k}={v:.4f}" for k, v in sorted(self.accuracy.items()))
        return (f"{self.name}: SLL^e={self.sll_e:.4f}  ppl={self.perplexity:.3f}  {acc}  "
                f"oov={self.oov_rate:.4f}  tokens={self.tokens}  sentences={self.sentences}")

    def csv_row(self) -> dict:
        row = asdict(self)
        acc = row.pop("accuracy")
        for k, v in sorted(acc.items()):
            row[f"top{k}"] = v
        return row


def evaluate(name: str, lm: TeacherModel, corpus: Sequence[Sequence[str]],
             vocab: Iterable[str] | None = None, ks: Sequence[int] = (1, 3),
             inventory: WordPieceInventory | None = None) -> EvalReport:
    vocab = _vocab_set(lm, vocab)
    rows = sentence_logprobs(lm, corpus, vocab, inventory)
    n = sum(r[2] + 1 for r in rows)
    if inventory is None:
        acc = next_word_accuracies(lm, corpus, ks, vocab)
    else:
        acc = {}
    return EvalReport(name, math.fsum(r[0] for r in rows) / len(rows),
                      math.exp(-math.fsum(r[0] + r[1] for r in rows) / n), acc,
                      oov_rate(corpus, vocab), sum(len(s) for s in corpus), len(corpus))
