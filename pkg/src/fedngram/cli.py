"""Command-line driver for the federated n-gram pipeline.

Subcommands: collect-unigrams, build-inventory, train-fed, distill,
compose, gen, eval and truecase.  Settings come from an INI file
(``--config``) whose sections are ``run``, ``data``, ``model``, ``fed``,
``distill`` and ``eval``; the common flags override it.  Data paths may be
``bundled`` to use the corpus shipped with the package.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from . import corpus as bundled
from .arpa import ArpaFormatError, load_arpa, save_arpa
from .casing import CapModel, lowercase
from .distill import DistillConfig, gen, read_samples, sample_corpus, uapprox, write_samples
from .estimate import kneser_ney
from .fedsim import FedConfig, collect_unigrams, read_shards, run_fedavg
from .lexicon import LexiconError, build_lexicon, compose, piece_symbols
from .metrics import evaluate, sll_excl_oov
from .neural import CifgConfig, CifgLstmLM
from .ngram import TopologyError, extract_topology
from .pipeline import server_models
from .symbols import UNK, SymbolTable
from .wordpiece import SegmentationError, WordPieceInventory, build_inventory, segment_sentence

log = logging.getLogger("fedngram")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- settings
class Settings:
    """Config file values with command-line overrides."""

    def __init__(self, args: argparse.Namespace):
        self.cp = configparser.ConfigParser()
        if args.config:
            if not Path(args.config).is_file():
                raise UsageError(f"config file {args.config} not found")
            try:
                self.cp.read(args.config, encoding="utf-8")
            except configparser.Error as e:
                raise UsageError(f"invalid config: {e}") from None
        self.args = args

    def get(self, section: str, key: str, kind=str, default=None, flag: str | None = None):
        value = getattr(self.args, flag or key, None)
        if value is not None:
            return value
        if self.cp.has_option(section, key):
            raw = self.cp.get(section, key)
            try:
                if kind is bool:
                    return self.cp.getboolean(section, key)
                return kind(raw)
            except ValueError:
                raise UsageError(f"[{section}] {key}: invalid value {raw!r}") from None
        return default

    def seed(self) -> int:
        seed = self.get("run", "seed", int)
        if seed is None:
            raise UsageError("a seed is required (--seed or [run] seed)")
        return seed

    def out(self) -> Path:
        out = self.get("run", "out", str)
        if out is None:
            raise UsageError("an output directory is required (--out or [run] out)")
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def distill_config(self) -> DistillConfig:
        mc = self.get("distill", "min_counts", str, "1")
        try:
            min_counts = tuple(int(x) for x in mc.replace(",", " ").split())
        except ValueError:
            raise UsageError(f"[distill] min_counts: invalid value {mc!r}") from None
        return DistillConfig(
            k=self.get("distill", "samples", int, 1000),
            max_len=self.get("distill", "max_len", int, 50),
            seed=self.seed(),
            order=self.get("distill", "order", int, 4),
            min_counts=min_counts,
            max_iter=self.get("distill", "max_iter", int, 200),
            tol=self.get("distill", "tol", float, 1e-8),
            mix=self.get("distill", "mix", float, 0.5),
            batch_size=self.get("distill", "batch_size", int, 256),
            cap_floor=self.get("distill", "cap_floor", float, 1e-6),
            resample_word_teacher=self.get("distill", "resample_word_teacher", bool, False),
        )


# ------------------------------------------------------------------ data io
def _read_corpus(spec: str, which: str) -> list[list[str]]:
    if spec == "bundled":
        return bundled.test_set() if which == "test" else bundled.supplement()
    with open(spec, encoding="utf-8") as f:
        return [ln.split() for ln in f if ln.strip()]


def _shards(spec: str):
    return bundled.user_shards() if spec == "bundled" else read_shards(spec)


def _teacher(s: Settings) -> tuple[str, CifgLstmLM]:
    path = s.get("data", "teacher", str)
    if path is None:
        raise UsageError("--teacher is required")
    if path == "bundled":
        path = str(bundled.teacher_path())
    return path, CifgLstmLM.load(path)


def _load_lm(path: str):
    if path.endswith(".npz"):
        return CifgLstmLM.load(path)
    return load_arpa(path)


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_unigrams(counts, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for w, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
            f.write(f"{w}\t{c!r}\n")


def _read_unigrams(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, ln in enumerate(f, 1):
            parts = ln.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected word<TAB>count")
            out[parts[0]] = float(parts[1])
    return out


# ------------------------------------------------------------- subcommands
def cmd_collect_unigrams(s: Settings) -> int:
    lam = s.get("data", "lambda", float, 1.0, flag="lam")
    if not lam > 0:
        raise UsageError("--lambda must be positive")
    shards = _shards(s.get("data", "shards", str, "bundled"))
    acc, stats = collect_unigrams(shards, None, lam,
                                  group_size=s.get("data", "group_size", int, 500),
                                  seed=s.seed(), window=s.get("data", "window", int, 10))
    out = s.out()
    _write_unigrams(acc.counts, out / "unigrams.tsv")
    size = s.get("data", "vocab_size", int, bundled.VOCAB_SIZE)
    SymbolTable.from_counts(acc.counts, size).write(out / "vocab.txt")
    stats.write_csv(out / "convergence.csv")
    print(f"clients={len(acc)} unigrams={len(acc.counts)} vocab={min(size, len(acc.counts))}")
    return EXIT_OK


def cmd_build_inventory(s: Settings) -> int:
    unigrams = s.get("data", "unigrams", str)
    if unigrams is None:
        raise UsageError("--unigrams is required")
    size = s.get("data", "inventory_size", int, 4000, flag="size")
    inv = build_inventory(_read_unigrams(unigrams), size, marker="_")
    out = s.out()
    inv.write(out / "inventory.tsv")
    print(f"pieces={len(inv)}")
    return EXIT_OK


def _piece_corpus(shards, inv: WordPieceInventory):
    for shard in shards:
        shard.sentences = [segment_sentence(sent, inv, unk_piece=UNK)[0]
                           for sent in shard.sentences]
    return shards


def cmd_train_fed(s: Settings) -> int:
    seed = s.seed()
    vocab_path = s.get("data", "vocab", str)
    if vocab_path is None:
        raise UsageError("--vocab is required")
    shards = _shards(s.get("data", "shards", str, "bundled"))
    inv_path = s.get("data", "inventory", str)
    if inv_path:
        inv = WordPieceInventory.read(inv_path)
        symbols = piece_symbols(inv)
        shards = _piece_corpus(shards, inv)
    else:
        symbols = SymbolTable.read(vocab_path)
    mcfg = CifgConfig(n_layers=s.get("model", "n_layers", int, 1),
                      n_hidden=s.get("model", "n_hidden", int, 64),
                      n_embed=s.get("model", "n_embed", int, 32),
                      layer_norm=s.get("model", "layer_norm", bool, False),
                      residual=s.get("model", "residual", bool, False),
                      groups=s.get("model", "groups", int, 1))
    fcfg = FedConfig(clients_per_round=s.get("fed", "clients_per_round", int, 10),
                     server_lr=s.get("fed", "server_lr", float, 1.0),
                     client_lr=s.get("fed", "client_lr", float, 0.5),
                     momentum=s.get("fed", "momentum", float, 0.9),
                     batch_size=s.get("fed", "batch_size", int, 8),
                     local_epochs=s.get("fed", "local_epochs", int, 1),
                     rounds=s.get("fed", "rounds", int, 10),
                     max_local_steps=s.get("fed", "max_local_steps", int, None),
                     seed=seed)
    out = s.out()
    init = s.get("model", "init", str)
    model = CifgLstmLM.load(init) if init else CifgLstmLM(symbols, mcfg, seed=seed)
    heldout_spec = s.get("data", "heldout", str)
    evaluate_fn = None
    if heldout_spec:

        held = [[lowercase(t) for t in sent] for sent in _read_corpus(heldout_spec, "test")]
        held = held[:s.get("data", "heldout_size", int, 500)]
        if inv_path:
            held = [segment_sentence(x, inv, unk_piece=UNK)[0] for x in held]
        evaluate_fn = lambda m: sll_excl_oov(m, held)  # noqa: E731

    rows = []
    save_every = s.get("fed", "checkpoint_every", int, 0)

    def logger(m):
        rows.append(m)
        log.info("round %d examples %d sll_e %s", m.round, m.examples, m.sll_e)
        if save_every and m.round % save_every == 0:
            model.save(out / "teacher.npz")

    run_fedavg(model, shards, fcfg, evaluate=evaluate_fn, log=logger,
               eval_every=s.get("fed", "eval_every", int, 1))
    model.save(out / "teacher.npz")
    with open(out / "rounds.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["round", "examples", "sll_e"])
        for m in rows:
            w.writerow([m.round, m.examples, "" if m.sll_e is None else repr(m.sll_e)])
    print(f"parameters={model.num_parameters()} rounds={len(rows)}")
    return EXIT_OK


def _samples(s: Settings, teacher_path: str, teacher, cfg: DistillConfig, out: Path):
    """Samples cached in ``out`` and reused when teacher and settings match."""
    key = {"teacher": _file_digest(teacher_path), "k": cfg.k, "seed": cfg.seed,
           "max_len": cfg.max_len}
    meta, path = out / "samples.json", out / "samples.txt"
    if meta.is_file() and path.is_file():
        if json.loads(meta.read_text(encoding="utf-8")) == key:
            return read_samples(path)
    samples = sample_corpus(teacher, cfg)
    write_samples(samples, path)
    meta.write_text(json.dumps(key, sort_keys=True), encoding="utf-8")
    return samples


def _server(s: Settings, uncased: SymbolTable, cfg: DistillConfig):
    supp = _read_corpus(s.get("data", "supplement", str, "bundled"), "supplement")
    return server_models(uncased, supp, order=cfg.order,
                         cap_order=s.get("distill", "cap_order", int, 3),
                         cap_floor=cfg.cap_floor)


def cmd_distill(s: Settings) -> int:
    cfg = s.distill_config()
    teacher_path, teacher = _teacher(s)
    out = s.out()
    samples = _samples(s, teacher_path, teacher, cfg, out)
    topo_path = s.get("data", "topology", str)
    cap = None
    if s.get("distill", "cased", bool, False):
        cap = _server(s, teacher.symbols, cfg).cap
    top = load_arpa(topo_path).topology if topo_path else None
    if top is not None and cap is not None and top.symbols != cap.symbols:
        raise ValueError("topology alphabet does not match the cased alphabet")
    (model,) = uapprox(teacher, [top], cap, cfg, samples=samples)
    save_arpa(model, out / "model.arpa")
    print(f"entries={model.topology.num_entries}")
    return EXIT_OK


def cmd_compose(s: Settings) -> int:
    inv_path, vocab_path, arpa = (s.get("data", k, str) for k in ("inventory", "vocab", "arpa"))
    if not (inv_path and vocab_path and arpa):
        raise UsageError("--inventory, --vocab and --arpa are required")
    inv = WordPieceInventory.read(inv_path)
    word_model = load_arpa(arpa)
    m = build_lexicon(word_model.symbols, inv)
    b = compose(m, word_model.topology)
    out = s.out()
    tok = m.pieces.token
    with open(out / "composed.txt", "w", encoding="utf-8") as f:
        f.write(f"# states={b.num_states} entries={b.num_entries} initial={b.initial}\n")
        for q in range(b.num_states):
            f.write(f"state\t{q}\t{b.describe_state(q)}\tbackoff={int(b.backoff[q])}\n")
            for x, e in sorted(b.arcs(q).items()):
                f.write(f"arc\t{q}\t{tok(x)}\t{int(b.entry_dest[e])}\n")
    print(f"states={b.num_states} entries={b.num_entries}")
    return EXIT_OK


def cmd_gen(s: Settings) -> int:
    cfg = s.distill_config()
    teacher_path, teacher = _teacher(s)
    mode = s.get("distill", "mode", str, "word")
    out = s.out()
    samples = _samples(s, teacher_path, teacher, cfg, out)
    if mode == "word":
        server = _server(s, teacher.symbols, cfg)
        res = gen(teacher, server.supplement, server.cap, "word", cfg, samples=samples)
    elif mode == "wordpiece":
        paths = [s.get("data", k, str) for k in ("inventory", "vocab", "word_a_i")]
        if not all(paths):
            raise UsageError("word-piece mode needs --inventory, --vocab and --word-a-i")
        inv = WordPieceInventory.read(paths[0])
        vocab = SymbolTable.read(paths[1])
        word_a_i = load_arpa(paths[2])
        server = _server(s, vocab, cfg)
        lex = build_lexicon(vocab, inv, teacher.symbols)
        res = gen(teacher, server.supplement, server.cap, "wordpiece", cfg,
                  lexicon=lex, word_a_i=word_a_i, samples=samples)
    else:
        raise UsageError(f"unknown mode {mode!r}")
    server.symbols.write(out / "cased_vocab.txt")
    for name, model in res._asdict().items():
        if model is not None:
            save_arpa(model, out / f"{name.upper()}.arpa")
    print(" ".join(f"{k.upper()}={v.topology.num_entries}" for k, v in res._asdict().items()
                   if v is not None))
    return EXIT_OK


def cmd_eval(s: Settings) -> int:
    models = s.args.model or []
    if not models:
        raise UsageError("at least one --model is required")
    data = _read_corpus(s.get("data", "corpus", str, "bundled"), "test")
    if s.get("eval", "lowercase", bool, False):
        data = [[lowercase(t) for t in x] for x in data]
    vocab_path = s.get("data", "vocab", str)
    vocab = SymbolTable.read(vocab_path).words() if vocab_path else None
    inv_path = s.get("data", "inventory", str)
    inv = WordPieceInventory.read(inv_path) if inv_path else None
    ks = tuple(int(k) for k in s.get("eval", "ks", str, "1 3").replace(",", " ").split())
    reports = []
    for path in models:
        lm = _load_lm(path)
        reports.append(evaluate(Path(path).name, lm, data, vocab, ks, inventory=inv))
    out = s.out()
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        rows = [r.csv_row() for r in reports]
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    text = "\n".join(r.text() for r in reports) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_truecase(s: Settings) -> int:
    cap_corpus = _read_corpus(s.get("data", "cap_corpus", str, "bundled"), "supplement")
    order = s.get("distill", "cap_order", int, 3, flag="order")
    cap = CapModel(kneser_ney(extract_topology(cap_corpus, order,
                                               SymbolTable(t for x in cap_corpus for t in x)),
                              cap_corpus))
    src = s.get("data", "input", str)
    lines = (open(src, encoding="utf-8").read() if src else sys.stdin.read()).splitlines()
    text = "".join(" ".join(cap.truecase(ln.split())) + "\n" for ln in lines)
    out = s.get("run", "out", str)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "truecased.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "collect-unigrams": cmd_collect_unigrams,
    "build-inventory": cmd_build_inventory,
    "train-fed": cmd_train_fed,
    "distill": cmd_distill,
    "compose": cmd_compose,
    "gen": cmd_gen,
    "eval": cmd_eval,
    "truecase": cmd_truecase,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lam", type=float, help="L1 clipping threshold")
    common.add_argument("--order", type=int, help="n-gram order")
    common.add_argument("--samples", type=int, help="number of teacher samples")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="fedngram", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("collect-unigrams", parents=[common])
    p.add_argument("--shards", help="client shard directory or 'bundled'")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p = sub.add_parser("build-inventory", parents=[common])
    p.add_argument("--unigrams")
    p.add_argument("--size", type=int)
    p = sub.add_parser("train-fed", parents=[common])
    p.add_argument("--shards")
    p.add_argument("--vocab")
    p.add_argument("--inventory")
    p.add_argument("--heldout")
    p.add_argument("--rounds", type=int)
    p = sub.add_parser("distill", parents=[common])
    p.add_argument("--teacher")
    p.add_argument("--topology", help="ARPA file whose topology is fitted")
    p.add_argument("--supplement")
    p.add_argument("--cased", action="store_true", default=None)
    p = sub.add_parser("compose", parents=[common])
    p.add_argument("--inventory")
    p.add_argument("--vocab")
    p.add_argument("--arpa")
    p = sub.add_parser("gen", parents=[common])
    p.add_argument("--teacher")
    p.add_argument("--supplement")
    p.add_argument("--mode", choices=["word", "wordpiece"])
    p.add_argument("--inventory")
    p.add_argument("--vocab")
    p.add_argument("--word-a-i", dest="word_a_i")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--model", action="append", help="ARPA file or .npz checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--inventory")
    p.add_argument("--lowercase", action="store_true", default=None)
    p = sub.add_parser("truecase", parents=[common])
    p.add_argument("--cap-corpus", dest="cap_corpus")
    p.add_argument("--input")
    return parser


def _validate_flags(args: argparse.Namespace) -> None:
    if getattr(args, "samples", None) is not None and args.samples < 1:
        raise UsageError("--samples must be positive")
    if getattr(args, "order", None) is not None and args.order < 1:
        raise UsageError("--order must be positive")
    if getattr(args, "rounds", None) is not None and args.rounds < 0:
        raise UsageError("--rounds must be non-negative")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _validate_flags(args)
        settings = Settings(args)
        return COMMANDS[args.command](settings)
    except UsageError as e:
        print(f"fedngram: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"fedngram: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, ArpaFormatError, LexiconError,
            SegmentationError, TopologyError) as e:
        print(f"fedngram: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
