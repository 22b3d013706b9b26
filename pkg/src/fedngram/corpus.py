"""Access to the bundled desk corpus.

The corpus is built from the public-domain Project Gutenberg Shakespeare
texts by ``scripts/prepare_corpus.py``.  Each speaker of a play is one
client.  User text is stored cased and lowercased on load, as a device
would report it; the supplemental corpus and the test set stay cased.
"""

from __future__ import annotations

import gzip
from collections import Counter
from importlib import resources
from pathlib import Path

from .casing import lowercase
from .fedsim import ClientShard
from .symbols import SymbolTable

VOCAB_SIZE = 10_000
ORDER = 4


def _lines(name: str) -> list[str]:
    with resources.files(__package__).joinpath("data").joinpath(name).open("rb") as raw:
        with gzip.open(raw, "rt", encoding="utf-8") as f:
            return [ln.rstrip("\n") for ln in f if ln.strip()]


def user_sentences(cased: bool = False) -> list[tuple[str, list[str]]]:
    """``(client id, tokens)`` pairs in file order."""
    out = []
    for ln in _lines("users.txt.gz"):
        cid, text = ln.split("\t", 1)
        toks = text.split()
        out.append((cid, toks if cased else [lowercase(t) for t in toks]))
    return out


def user_shards(cased: bool = False) -> list[ClientShard]:
    shards: dict[str, ClientShard] = {}
    for cid, toks in user_sentences(cased):
        shards.setdefault(cid, ClientShard(cid)).sentences.append(toks)
    return [shards[k] for k in sorted(shards)]


def supplement() -> list[list[str]]:
    """Cased supplemental (server-side) corpus."""
    return [ln.split() for ln in _lines("supplement.txt.gz")]


def test_set() -> list[list[str]]:
    """Cased held-out sentences drawn from the same speakers as the users."""
    return [ln.split() for ln in _lines("test.txt.gz")]


def uncased_vocabulary(size: int = VOCAB_SIZE) -> SymbolTable:
    """Most frequent lowercased user words (ties broken alphabetically)."""
    counts = Counter(t for _, s in user_sentences() for t in s)
    return SymbolTable.from_counts(counts, size)


def teacher_path() -> Path:
    """Checkpoint of the federated CIFG teacher trained on the user shards."""
    path = Path(str(resources.files(__package__).joinpath("data").joinpath("teacher.npz")))
    if not path.is_file():
        raise FileNotFoundError(f"bundled teacher not found at {path}")
    return path
