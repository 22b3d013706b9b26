"""Capitalization model: case erasure, cased probability ratios and truecasing."""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np
from scipy import sparse

from .estimate import train_ngram
from .ngram import BackoffNGramModel
from .symbols import BOS, BOS_ID, EOS, UNK, UNK_ID, SymbolTable

_RESERVED = (BOS, EOS, UNK)
DEFAULT_FLOOR = 1e-6


def lowercase(token: str) -> str:
    """Case erasure ``u``; reserved tokens are left alone."""
    return token if token in _RESERVED else token.lower()


class CapModel:
    """A cased backoff model plus the grouping of its tokens by lowercase form.

    Parameters
    ----------
    model : BackoffNGramModel
        Cased model supplying ``p_cap(y | cased context)``.
    floor : float
        Probability given to a variant the cased model assigns zero,
        before the ratio is normalized.
    """

    def __init__(self, model: BackoffNGramModel, floor: float = DEFAULT_FLOOR):
        if floor <= 0:
            raise ValueError("floor must be positive")
        self.model = model
        self.symbols = model.symbols
        self.floor = floor
        self.uncased = SymbolTable()
        groups: dict[int, list[int]] = {}
        u_ids = np.empty(len(self.symbols), dtype=np.int64)
        for y, tok in enumerate(self.symbols.tokens):
            x = self.uncased.add(lowercase(tok))
            u_ids[y] = x
            groups.setdefault(x, []).append(y)
        self.u_ids = u_ids
        self._groups = groups
        n_c, n_u = len(self.symbols), len(self.uncased)
        self._indicator = sparse.csr_matrix(
            (np.ones(n_c), (np.arange(n_c), u_ids)), shape=(n_c, n_u))

    @classmethod
    def train(cls, corpus: Sequence[Sequence[str]], order: int = 3,
              symbols: SymbolTable | None = None, floor: float = DEFAULT_FLOOR) -> "CapModel":
        return cls(train_ngram(corpus, order, symbols), floor)

    def variants(self, token: str) -> list[int]:
        """Cased ids whose lowercase form is ``u(token)``."""
        x = self.uncased._ids.get(lowercase(token))
        return [] if x is None else list(self._groups[x])

    def cap_probs(self, states: Sequence[int]) -> np.ndarray:
        """Floored ``p_cap(. | q)`` rows for cased states."""
        pc = self.model.probs(np.asarray(states, dtype=np.int64)).copy()
        pc[pc <= 0] = self.floor
        pc[:, BOS_ID] = 0.0
        return pc

    def ratios(self, states: Sequence[int]) -> np.ndarray:
        """``p_cap(y|q) / sum_{y': u(y') = u(y)} p_cap(y'|q)`` per cased ``y``."""
        pc = self.cap_probs(states)
        den = np.asarray(pc @ self._indicator)
        den_y = den[:, self.u_ids]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = pc / den_y
        r[:, BOS_ID] = 0.0
        if not np.all(np.isfinite(r)):
            raise FloatingPointError("zero capitalization denominator")
        return r

    def truecase(self, tokens: Sequence[str]) -> list[str]:
        """Most probable cased variants of ``tokens`` under the cased model.

        The input's own capitalization is ignored, so the first word of a
        sentence is not evidence for anything.  Tokens without a cased
        variant are returned lowercased.
        """
        model = self.model
        top = model.topology
        beams: dict[int, tuple[float, tuple]] = {top.initial: (0.0, ())}
        for tok in tokens:
            cands = self.variants(tok)
            fixed = None if cands else lowercase(tok)
            if fixed is not None:
                cands = [UNK_ID]
            nxt: dict[int, tuple[float, tuple]] = {}
            for q in sorted(beams):
                lp, seq = beams[q]
                for y in cands:
                    r = model.resolve(q, y)
                    score = lp + math.log(max(r.prob, self.floor))
                    cand = (score, seq + (y if fixed is None else fixed,))
                    old = nxt.get(r.next_state)
                    if old is None or _better(cand, old):
                        nxt[r.next_state] = cand
            beams = nxt
        best = None
        for q in sorted(beams):
            lp, seq = beams[q]
            cand = (lp + math.log(max(model.final_weight(q), self.floor)), seq)
            if best is None or _better(cand, best):
                best = cand
        return [s if isinstance(s, str) else self.symbols.token(s) for s in best[1]]


def _better(a: tuple, b: tuple) -> bool:
    if a[0] != b[0]:
        return a[0] > b[0]
    return [str(t) for t in a[1]] < [str(t) for t in b[1]]
