"""ARPA text serialization of backoff n-gram models (log10 weights)."""

from __future__ import annotations

import math
import re

import numpy as np

from .ngram import BackoffNGramModel, NGramTopology, TopologyError
from .symbols import BOS, BOS_ID, SymbolTable

PRECISION = 10
_NGRAM_COUNT = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION = re.compile(r"^\\(\d+)-grams:$")


class ArpaFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def _fmt(v: float, precision: int) -> str:
    return f"{math.log10(v):.{precision}f}"


def write_arpa(model: BackoffNGramModel, precision: int = PRECISION) -> str:
    top = model.topology
    if not isinstance(top, NGramTopology):
        raise TypeError("ARPA output needs an n-gram topology")
    tok = model.symbols.token
    by_order: list[list[str]] = [[] for _ in range(top.order)]
    if top.order >= 2:
        q = top.index[(BOS_ID,)]
        by_order[0].append(f"-99\t{BOS}\t{_fmt(model.backoff_weights[q], precision)}")
    for e in range(top.num_entries):
        g = top.ngram(e)
        line = f"{_fmt(model.weights[e], precision)}\t{' '.join(tok(t) for t in g)}"
        q = top.index.get(g)
        if q is not None and len(g) < top.order:
            line += f"\t{_fmt(model.backoff_weights[q], precision)}"
        by_order[len(g) - 1].append(line)
    out = ["\\data\\"]
    out += [f"ngram {k + 1}={len(lines)}" for k, lines in enumerate(by_order)]
    for k, lines in enumerate(by_order):
        out += ["", f"\\{k + 1}-grams:"] + lines
    out += ["", "\\end\\", ""]
    return "\n".join(out)


def _float(field: str, lineno: int) -> float:
    try:
        v = float(field)
    except ValueError:
        raise ArpaFormatError(lineno, f"not a number: {field!r}") from None
    if not math.isfinite(v):
        raise ArpaFormatError(lineno, f"non-finite log probability {field!r}")
    return v


def read_arpa(text: str) -> BackoffNGramModel:
    lines = text.splitlines()
    i = 0
    while i < len(lines) and not lines[i].strip():
        i += 1
    if i == len(lines) or lines[i].strip() != "\\data\\":
        raise ArpaFormatError(i + 1, "expected \\data\\ header")
    i += 1
    declared: dict[int, int] = {}
    while i < len(lines):
        s = lines[i].strip()
        m = _NGRAM_COUNT.match(s)
        if m:
            declared[int(m.group(1))] = int(m.group(2))
        elif s:
            break
        i += 1
    order = len(declared)
    if order == 0 or sorted(declared) != list(range(1, order + 1)):
        raise ArpaFormatError(i + 1, "missing or non-contiguous 'ngram N=count' lines")

    entries: dict[tuple[str, ...], tuple[float, float | None]] = {}
    where: dict[tuple[str, ...], int] = {}
    expect = 1
    ended = False
    while i < len(lines):
        s = lines[i].strip()
        if not s:
            i += 1
            continue
        if s == "\\end\\":
            ended = True
            break
        m = _SECTION.match(s)
        if not m or int(m.group(1)) != expect:
            raise ArpaFormatError(i + 1, f"expected \\{expect}-grams: section header")
        header = i + 1
        i += 1
        n = 0
        while i < len(lines):
            s = lines[i].strip()
            if not s:
                i += 1
                continue
            if s.startswith("\\"):
                break
            fields = s.split()
            if len(fields) not in (expect + 1, expect + 2):
                raise ArpaFormatError(i + 1, f"malformed {expect}-gram entry")
            lp = float("-inf") if fields[0] == "-99" else _float(fields[0], i + 1)
            bo = _float(fields[-1], i + 1) if len(fields) == expect + 2 else None
            key = tuple(fields[1:expect + 1])
            if key in entries:
                raise ArpaFormatError(i + 1, f"duplicate n-gram {' '.join(key)}")
            entries[key] = (lp, bo)
            where[key] = i + 1
            n += 1
            i += 1
        if n != declared[expect]:
            raise ArpaFormatError(
                header, f"\\{expect}-grams: declares {declared[expect]} entries, found {n}")
        expect += 1
    if not ended:
        raise ArpaFormatError(len(lines), "missing \\end\\")
    if expect != order + 1:
        raise ArpaFormatError(i + 1, f"missing \\{expect}-grams: section")

    symbols = SymbolTable(k[0] for k in entries if len(k) == 1 and k[0] != BOS)
    grams = {}
    for key, (lp, _) in entries.items():
        if key == (BOS,):
            continue
        if lp == float("-inf"):
            raise ArpaFormatError(where[key], f"zero probability for {' '.join(key)}")
        try:
            grams[tuple(symbols.id(t) for t in key)] = lp
        except KeyError as err:
            raise ArpaFormatError(
                where[key], f"n-gram {' '.join(key)} uses unknown token {err}") from None
    missing = [symbols.token(x) for x in range(1, len(symbols)) if (x,) not in grams]
    if missing:
        raise ArpaFormatError(0, f"unigrams missing for {missing[:5]}")
    try:
        top = NGramTopology(symbols, order, grams)
    except TopologyError as err:
        raise ArpaFormatError(0, str(err)) from None
    weights = np.array([10.0 ** grams[top.ngram(e)] for e in range(top.num_entries)])
    bows = np.ones(top.num_states)
    for q, ctx in enumerate(top.contexts):
        if ctx:
            bo = entries.get(tuple(symbols.decode(ctx)), (0.0, None))[1]
            if bo is not None:
                bows[q] = 10.0 ** bo
    return BackoffNGramModel(top, weights, bows)


def save_arpa(model: BackoffNGramModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(write_arpa(model))


def load_arpa(path) -> BackoffNGramModel:
    with open(path, encoding="utf-8") as f:
        return read_arpa(f.read())
