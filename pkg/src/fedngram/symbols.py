"""Token <-> id mapping shared by every model in the package."""

from __future__ import annotations

from collections.abc import Iterable, Sequence

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

BOS_ID = 0
EOS_ID = 1
UNK_ID = 2


class SymbolTable:
    """Dense bijection between token strings and ids ``0..len-1``.

    Ids 0, 1 and 2 are always the sentence-start, sentence-end and unknown
    tokens.  The table is append-only while it is being built and should be
    treated as immutable once a model refers to it.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = [BOS, EOS, UNK]
        self._ids: dict[str, int] = {BOS: BOS_ID, EOS: EOS_ID, UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"invalid token {token!r}")
        idx = self._ids.get(token)
        if idx is None:
            idx = len(self._tokens)
            self._tokens.append(token)
            self._ids[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __iter__(self):
        return iter(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolTable) and self._tokens == other._tokens

    def __hash__(self):
        return hash(tuple(self._tokens))

    def __repr__(self) -> str:
        return f"SymbolTable({len(self)} tokens)"

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def words(self) -> list[str]:
        """All tokens except the three reserved ones."""
        return self._tokens[3:]

    def id(self, token: str) -> int:
        return self._ids[token]

    def lookup(self, token: str) -> int:
        """Id of ``token``, or the unknown-token id if it is not in the table."""
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    def is_oov(self, token: str) -> bool:
        return token not in self._ids

    @classmethod
    def from_counts(cls, counts, size: int | None = None) -> "SymbolTable":
        """Most frequent ``size`` tokens, ties broken by token string."""
        ranked = sorted(
            (t for t in counts if t not in (BOS, EOS, UNK)),
            key=lambda t: (-counts[t], t),
        )
        if size is not None:
            ranked = ranked[:size]
        return cls(ranked)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._tokens[3:]:
                f.write(tok + "\n")

    @classmethod
    def read(cls, path) -> "SymbolTable":
        with open(path, encoding="utf-8") as f:
            return cls(line.strip() for line in f if line.strip())
