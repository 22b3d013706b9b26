"""Server-side assembly of the desk pipeline.

The federated side supplies an uncased vocabulary and an uncased teacher.
The server adds a cased supplemental corpus, from which it builds the cased
alphabet, the supplement model whose topology becomes ``A_e`` and the
capitalization model used for truecasing and cased counting.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from .casing import CapModel, lowercase
from .estimate import kneser_ney
from .ngram import BackoffNGramModel, NGramTopology, extract_topology
from .symbols import SymbolTable


def cased_symbols(uncased: SymbolTable, cased_corpus: Iterable[Sequence[str]]) -> SymbolTable:
    """Every uncased word plus the cased spellings seen in ``cased_corpus``.

    Spellings whose lowercase form is out of vocabulary are left out, so
    each cased symbol erases to exactly one uncased symbol.
    """
    extra = sorted({t for s in cased_corpus for t in s
                    if t != lowercase(t) and lowercase(t) in uncased})
    return SymbolTable(list(uncased.words()) + extra)


@dataclass
class ServerModels:
    symbols: SymbolTable
    supplement: BackoffNGramModel
    cap: CapModel


def server_models(uncased: SymbolTable, cased_corpus: Sequence[Sequence[str]],
                  order: int = 4, cap_order: int = 3, min_counts: Sequence[int] | int = 1,
                  cap_floor: float = 1e-6) -> ServerModels:
    """Supplement model (``order``) and capitalization model (``cap_order``)."""
    symbols = cased_symbols(uncased, cased_corpus)
    top = extract_topology(cased_corpus, order, symbols, min_counts)
    supplement = kneser_ney(top, cased_corpus)
    cap_top = extract_topology(cased_corpus, cap_order, symbols, 1)
    cap = CapModel(kneser_ney(cap_top, cased_corpus), cap_floor)
    return ServerModels(symbols, supplement, cap)


def count_baseline(topology: NGramTopology, corpus: Sequence[Sequence[str]]) -> BackoffNGramModel:
    """Kneser-Ney model trained on ``corpus`` with the n-grams of ``topology``."""
    return kneser_ney(topology, corpus)
