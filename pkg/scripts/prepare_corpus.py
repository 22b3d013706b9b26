"""Build the bundled desk corpus from the Project Gutenberg Shakespeare texts.

Usage: python scripts/prepare_corpus.py TEXT_DIR OUT_DIR

TEXT_DIR holds the ``*_gut.txt`` files of the ``shakespeare`` PyPI sdist
(public domain).  Every speaker of every play becomes one client; 5% of
each client's sentences (seeded) go to the test set.  The poems and the
plays in ``SUPPLEMENT_PLAYS`` form the cased supplemental corpus.  Output
files are gzipped text, one sentence per line; user lines are prefixed
with the client id and a tab.  Text keeps its case.
"""

from __future__ import annotations

import gzip
import re
import sys
from pathlib import Path

import numpy as np

POEMS = {"sonnets", "rape_of_lucrece", "lovers_complaint", "passionate_pilgrim",
         "phoenix_and_the_turtle"}
SUPPLEMENT_PLAYS = {"pericles", "timon_of_athens", "troilus_and_cressida"}
TEST_FRACTION = 0.05
MAX_WORDS = 50
SEED = 20240101

WORD = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)*'?|'[A-Za-z]+(?:'[A-Za-z]+)*")
SPEAKER = re.compile(r"^([A-Z][A-Za-z']*(?: [A-Za-z][A-Za-z']*){0,3})\.$")
FIRST_ACT = re.compile(r"^(ACT|Act) (I|1|FIRST)\b")
HEADING = re.compile(r"^(ACT|Act|SCENE|Scene)\b")
SENTENCE_END = re.compile(r"(?<=[.!?])\s+|--+")


def sentences(text: str) -> list[list[str]]:
    out = []
    for chunk in SENTENCE_END.split(text):
        words = WORD.findall(chunk)
        if words:
            out.append(words[:MAX_WORDS])
    return out


def strip_directions(lines: list[str]) -> list[str]:
    text = "\n".join(lines)
    text = re.sub(r"\[[^\]]*\]", " ", text)
    return text.split("\n")


def parse_play(path: Path) -> dict[str, list[list[str]]]:
    lines = strip_directions(path.read_text(encoding="latin-1").splitlines())
    start = next(i for i, ln in enumerate(lines) if FIRST_ACT.match(ln.strip()))
    speeches: dict[str, list[str]] = {}
    speaker, buf = None, []
    prev_blank = True

    def flush():
        if speaker and buf:
            speeches.setdefault(speaker, []).append(" ".join(buf))

    for raw in lines[start:]:
        ln = raw.strip()
        m = SPEAKER.match(ln)
        if not ln:
            prev_blank = True
            continue
        if HEADING.match(ln):
            flush()
            speaker, buf = None, []
        elif m and prev_blank:
            flush()
            speaker, buf = m.group(1), []
        elif speaker:
            buf.append(ln)
        prev_blank = False
    flush()
    return {spk: [s for sp in texts for s in sentences(sp)] for spk, texts in speeches.items()}


def parse_poem(path: Path) -> list[list[str]]:
    lines = path.read_text(encoding="latin-1").splitlines()
    return sentences(" ".join(ln.strip() for ln in lines[2:]))


def client_id(play: str, speaker: str) -> str:
    return f"{play}.{re.sub(r'[^A-Za-z]+', '_', speaker).strip('_')}"


def _write(path: Path, lines) -> None:
    # fixed mtime keeps the archives byte-identical across runs
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
        for line in lines:
            gz.write((line + "\n").encode("utf-8"))


def main(src: str, dst: str) -> None:
    src_dir, out = Path(src), Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)
    users, test, supplement = [], [], []
    for path in sorted(src_dir.glob("*_gut.txt")):
        name = path.name[:-len("_gut.txt")]
        if name in POEMS:
            supplement += parse_poem(path)
            continue
        play = parse_play(path)
        if name in SUPPLEMENT_PLAYS:
            supplement += [s for spk in sorted(play) for s in play[spk]]
            continue
        for spk in sorted(play):
            cid = client_id(name, spk)
            for s in play[spk]:
                (test if rng.random() < TEST_FRACTION else users).append((cid, s))
    _write(out / "users.txt.gz", (f"{cid}\t{' '.join(s)}" for cid, s in users))
    _write(out / "test.txt.gz", (" ".join(s) for _, s in test))
    _write(out / "supplement.txt.gz", (" ".join(s) for s in supplement))
    n_clients = len({c for c, _ in users})
    print(f"clients={n_clients} user_sentences={len(users)} "
          f"user_tokens={sum(len(s) for _, s in users)} test_sentences={len(test)} "
          f"supplement_sentences={len(supplement)} "
          f"supplement_tokens={sum(len(s) for s in supplement)}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
