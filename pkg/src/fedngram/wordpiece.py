"""Word-piece inventories and Viterbi segmentation.

An inventory is a set of piece strings with unigram probabilities.  When it
uses a word marker, every word is spelled as ``escape(word) + "_"`` before
segmentation, so the last piece of each word carries the marker and piece
streams can be split back into words without a lexicon.  Literal
underscores and backslashes inside words are escaped with a backslash.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence

MARKER = "_"
ESCAPE = "\\"


class SegmentationError(ValueError):
    pass


def escape_word(word: str) -> str:
    return word.replace(ESCAPE, ESCAPE + ESCAPE).replace(MARKER, ESCAPE + MARKER)


def unescape_word(text: str) -> str:
    out = []
    it = iter(text)
    for c in it:
        out.append(next(it, "") if c == ESCAPE else c)
    return "".join(out)


class WordPieceInventory:
    """Pieces with unigram probabilities.

    Parameters
    ----------
    probs : mapping piece -> probability
        Probabilities must be positive and sum to at most one.
    marker : str or None
        End-of-word marker appended to every word before segmentation.
    """

    def __init__(self, probs: Mapping[str, float], marker: str | None = None):
        if not probs:
            raise ValueError("empty inventory")
        total = math.fsum(probs.values())
        if any(p <= 0 or not math.isfinite(p) for p in probs.values()):
            raise ValueError("piece probabilities must be positive and finite")
        if total > 1 + 1e-9:
            raise ValueError(f"piece probabilities sum to {total} > 1")
        for piece in probs:
            if not piece or any(c.isspace() for c in piece):
                raise ValueError(f"invalid piece {piece!r}")
        self.probs = dict(probs)
        self.marker = marker
        self.log_probs = {k: math.log(v) for k, v in self.probs.items()}
        self.max_len = max(len(k) for k in self.probs)
        self.chars = frozenset(k for k in self.probs if len(k) == 1)

    def __len__(self) -> int:
        return len(self.probs)

    def __contains__(self, piece: str) -> bool:
        return piece in self.probs

    @property
    def pieces(self) -> list[str]:
        return list(self.probs)

    def spell(self, word: str) -> str:
        """String that is segmented for ``word`` (escaped and marked if needed)."""
        return escape_word(word) + self.marker if self.marker else word

    def covers(self, word: str) -> bool:
        return all(c in self.chars for c in self.spell(word))

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for piece, p in self.probs.items():
                f.write(f"{piece}\t{math.log(p)!r}\n")

    @classmethod
    def read(cls, path) -> "WordPieceInventory":
        """Load ``piece<TAB>logprob`` lines; a bare ``_`` piece switches the marker on."""
        probs = {}
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{n}: expected piece<TAB>logprob")
                try:
                    lp = float(parts[1])
                except ValueError:
                    raise ValueError(f"{path}:{n}: bad log probability {parts[1]!r}") from None
                if parts[0] in probs:
                    raise ValueError(f"{path}:{n}: duplicate piece {parts[0]!r}")
                probs[parts[0]] = math.exp(lp)
        return cls(probs, MARKER if MARKER in probs else None)


def _viterbi(text: str, log_probs: Mapping[str, float], max_len: int) -> list[str]:
    # best[i] = key of the best segmentation of text[:i]: (-logp, pieces, sequence);
    # scores are correctly rounded sums so that reordered pieces tie exactly
    n = len(text)
    best: list[tuple | None] = [None] * (n + 1)
    best[0] = (0.0, 0, (), ())
    for i in range(n):
        cur = best[i]
        if cur is None:
            continue
        _, count, seq, lps = cur
        for j in range(i + 1, min(n, i + max_len) + 1):
            lp = log_probs.get(text[i:j])
            if lp is None:
                continue
            terms = lps + (lp,)
            cand = (-math.fsum(terms), count + 1, seq + (text[i:j],), terms)
            if best[j] is None or cand < best[j]:
                best[j] = cand
    if best[n] is None:
        raise SegmentationError(f"cannot segment {text!r}")
    return list(best[n][2])


def segment(word: str, inventory: WordPieceInventory) -> list[str]:
    """Most probable segmentation; ties go to fewer pieces, then lexicographic order."""
    text = inventory.spell(word)
    for c in text:
        if c not in inventory.chars:
            raise SegmentationError(f"character {c!r} of {word!r} has no piece")
    return _viterbi(text, inventory.log_probs, inventory.max_len)


def segment_sentence(words: Sequence[str], inventory: WordPieceInventory,
                     unk_piece: str | None = None) -> tuple[list[str], list[int]]:
    """Pieces of a sentence and, per piece, the index of the word it spells.

    Words with uncovered characters become ``unk_piece`` when given and
    raise otherwise.
    """
    pieces, owner = [], []
    for i, w in enumerate(words):
        if unk_piece is not None and not inventory.covers(w):
            seg = [unk_piece]
        else:
            seg = segment(w, inventory)
        pieces += seg
        owner += [i] * len(seg)
    return pieces, owner


def split_words(pieces: Iterable[str], marker: str = MARKER) -> tuple[list[str], str]:
    """Split a marked piece stream into words.

    Returns the complete words and whatever trails the last marker.
    """
    words, buf = [], []
    for piece in pieces:
        buf.append(piece)
        text = "".join(buf)
        if _ends_word(text, marker):
            words.append(unescape_word(text[:-len(marker)]))
            buf = []
    return words, "".join(buf)


def _ends_word(text: str, marker: str) -> bool:
    if not text.endswith(marker):
        return False
    # the marker is literal when preceded by an odd run of escapes
    k = len(text) - len(marker)
    run = 0
    while k - 1 - run >= 0 and text[k - 1 - run] == ESCAPE:
        run += 1
    return run % 2 == 0


def build_inventory(unigrams: Mapping[str, float], target_size: int,
                    marker: str | None = None, max_piece_len: int = 8,
                    rounds: int = 4, seed_factor: int = 4) -> WordPieceInventory:
    """Unigram-LM style inventory of at most ``target_size`` pieces.

    Seeds with every character plus the ``seed_factor * target_size`` most
    frequent substrings (length 2 to ``max_piece_len``), runs ``rounds``
    rounds of Viterbi re-estimation over the weighted word list, then keeps
    all characters and the most probable other pieces and re-estimates once
    more.
    """
    words = {w: float(c) for w, c in unigrams.items() if c > 0}
    if not words:
        raise ValueError("no words with positive count")
    spelled = {}
    for w, c in words.items():
        s = escape_word(w) + marker if marker else w
        spelled[s] = spelled.get(s, 0.0) + c
    char_freq: Counter = Counter()
    sub_freq: Counter = Counter()
    for s, c in spelled.items():
        for ch in s:
            char_freq[ch] += c
        for i in range(len(s)):
            for j in range(i + 2, min(len(s), i + max_piece_len) + 1):
                sub_freq[s[i:j]] += c
    chars = sorted(char_freq)
    if target_size < len(chars):
        raise ValueError(f"target size {target_size} is below the {len(chars)} "
                         "characters that need their own piece")
    n_seed = seed_factor * target_size
    seeds = sorted(sub_freq, key=lambda k: (-sub_freq[k], k))[:n_seed]
    freq = {ch: char_freq[ch] for ch in chars}
    freq.update({k: sub_freq[k] for k in seeds})

    def normalize(counts: Mapping[str, float]) -> dict[str, float]:
        tot = math.fsum(counts.values())
        return {k: v / tot for k, v in counts.items()}

    def reestimate(probs: Mapping[str, float]) -> dict[str, float]:
        lps = {k: math.log(v) for k, v in probs.items()}
        longest = max(len(k) for k in lps)
        counts = {k: 0.0 for k in probs}
        for s, c in spelled.items():
            for piece in _viterbi(s, lps, longest):
                counts[piece] += c
        # characters stay in the inventory even when no Viterbi path uses them
        floor = min(c for c in spelled.values())
        kept = {k: v for k, v in counts.items() if v > 0}
        for ch in chars:
            if ch not in kept:
                kept[ch] = 0.5 * floor
        return normalize(kept)

    probs = normalize(freq)
    for _ in range(rounds):
        probs = reestimate(probs)
    others = sorted((k for k in probs if len(k) > 1), key=lambda k: (-probs[k], k))
    keep = set(chars) | set(others[:target_size - len(chars)])
    probs = reestimate(normalize({k: probs[k] for k in probs if k in keep}))
    order = sorted(probs, key=lambda k: (-probs[k], k))
    return WordPieceInventory({k: probs[k] for k in order}, marker)
