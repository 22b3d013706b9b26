import pytest

from fedngram.arpa import load_arpa
from fedngram.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from fedngram.fedsim import ClientShard, write_shards
from fedngram.neural import CifgConfig, CifgLstmLM
from fedngram.symbols import SymbolTable
from fedngram.wordpiece import WordPieceInventory, segment

SUPPLEMENT = ["She lives in York", "the cat sat", "The cat is in York", "she sat"]


@pytest.fixture
def shards_dir(tmp_path):
    d = tmp_path / "shards"
    write_shards([ClientShard("u1", [["a", "b", "a"]]),
                  ClientShard("u2", [["b", "c"], ["c"]]),
                  ClientShard("u3", [["a"]])], d)
    return d


def _read_tsv(path):
    out = {}
    for ln in path.read_text(encoding="utf-8").splitlines():
        w, c = ln.split("\t")
        out[w] = float(c)
    return out


def test_collect_unigrams_with_unit_lambda(tmp_path, shards_dir):
    out = tmp_path / "out"
    assert main(["collect-unigrams", "--shards", str(shards_dir), "--lambda", "1",
                 "--seed", "0", "--out", str(out)]) == EXIT_OK
    got = _read_tsv(out / "unigrams.tsv")
    want = {"a": 2 / 3 + 1.0, "b": 1 / 3 + 1 / 3, "c": 2 / 3}
    assert got.keys() == want.keys()
    for w in want:
        assert got[w] == pytest.approx(want[w], abs=1e-15)
    assert (out / "convergence.csv").is_file()
    assert SymbolTable.read(out / "vocab.txt").words() == ["a", "b", "c"]


def test_missing_seed_is_a_usage_error(tmp_path, shards_dir, capsys):
    rc = main(["collect-unigrams", "--shards", str(shards_dir), "--out", str(tmp_path)])
    assert rc == EXIT_USAGE
    assert "seed" in capsys.readouterr().err


def test_bad_flag_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["collect-unigrams", "--lambda", "many"])
    assert e.value.code == EXIT_USAGE
    assert main(["collect-unigrams", "--seed", "0", "--out", str(tmp_path), "--lambda",
                 "0"]) == EXIT_USAGE
    assert main(["eval", "--config", str(tmp_path / "nope.ini")]) == EXIT_USAGE


def test_missing_data_is_a_data_error(tmp_path):
    rc = main(["eval", "--model", str(tmp_path / "missing.arpa"), "--out", str(tmp_path)])
    assert rc == EXIT_DATA


def _tiny_teacher(path, seed=0, scale=None):
    words = sorted({t.lower() for s in SUPPLEMENT for t in s.split()})
    cfg = CifgConfig(n_hidden=6, n_embed=4) if scale is None else CifgConfig(
        n_hidden=6, n_embed=4, init_scale=scale)
    CifgLstmLM(SymbolTable(words), cfg, seed=seed).save(path)
    return path


def test_divergent_training_is_a_numeric_failure(tmp_path, shards_dir):
    ini = tmp_path / "run.ini"
    vocab = tmp_path / "vocab.txt"
    SymbolTable(["a", "b", "c"]).write(vocab)
    ini.write_text("[run]\nseed = 0\n[model]\nn_hidden = 4\nn_embed = 3\n"
                   "[fed]\nclients_per_round = 3\nclient_lr = 1e300\nrounds = 3\n",
                   encoding="utf-8")
    rc = main(["train-fed", "--config", str(ini), "--shards", str(shards_dir), "--vocab",
               str(vocab), "--out", str(tmp_path / "o")])
    assert rc == EXIT_NUMERIC


def test_train_fed_writes_checkpoint(tmp_path, shards_dir):
    vocab = tmp_path / "vocab.txt"
    SymbolTable(["a", "b", "c"]).write(vocab)
    out = tmp_path / "o"
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nn_hidden = 4\nn_embed = 3\n[fed]\nclients_per_round = 2\n",
                   encoding="utf-8")
    assert main(["train-fed", "--config", str(ini), "--seed", "1", "--shards", str(shards_dir),
                 "--vocab", str(vocab), "--rounds", "2", "--out", str(out)]) == EXIT_OK
    m = CifgLstmLM.load(out / "teacher.npz")
    assert m.symbols.words() == ["a", "b", "c"]
    assert (out / "rounds.csv").read_text().count("\n") == 3


@pytest.fixture
def gen_run(tmp_path):
    supp = tmp_path / "supp.txt"
    supp.write_text("\n".join(SUPPLEMENT) + "\n", encoding="utf-8")
    teacher = _tiny_teacher(tmp_path / "t.npz")
    out = tmp_path / "gen"
    rc = main(["gen", "--teacher", str(teacher), "--supplement", str(supp), "--seed", "0",
               "--order", "2", "--samples", "50", "--out", str(out)])
    return rc, out, supp, teacher


def test_gen_writes_four_readable_models(gen_run):
    rc, out, _, _ = gen_run
    assert rc == EXIT_OK
    for name in ("A_E", "A_I", "A_M", "A_R"):
        m = load_arpa(out / f"{name}.arpa")
        assert m.check_normalization() < 1e-6
    assert load_arpa(out / "A_R.arpa").symbols.id("York") >= 3


def test_eval_is_byte_identical(gen_run, tmp_path):
    _, out, supp, _ = gen_run
    texts = []
    for run in ("e1", "e2"):
        d = tmp_path / run
        assert main(["eval", "--model", str(out / "A_R.arpa"), "--model",
                     str(out / "A_E.arpa"), "--corpus", str(supp), "--out", str(d)]) == EXIT_OK
        texts.append(((d / "report.csv").read_bytes(), (d / "report.txt").read_bytes()))
    assert texts[0] == texts[1]


def test_samples_are_cached(gen_run):
    rc, out, supp, teacher = gen_run
    before = (out / "samples.txt").stat().st_mtime_ns
    assert main(["distill", "--teacher", str(teacher), "--supplement", str(supp), "--seed", "0",
                 "--order", "2", "--samples", "50", "--out", str(out)]) == EXIT_OK
    assert (out / "samples.txt").stat().st_mtime_ns == before
    assert load_arpa(out / "model.arpa").check_normalization() < 1e-6


def test_truecase_command(tmp_path, capsys):
    corpus = tmp_path / "cap.txt"
    corpus.write_text("She lives in New York\nHe went to New York\nthe new car\n",
                      encoding="utf-8")
    src = tmp_path / "in.txt"
    src.write_text("she lives in new york\n", encoding="utf-8")
    assert main(["truecase", "--cap-corpus", str(corpus), "--input", str(src),
                 "--order", "3"]) == EXIT_OK
    assert capsys.readouterr().out == "She lives in New York\n"


def test_build_inventory_command(tmp_path):
    uni = tmp_path / "u.tsv"
    uni.write_text("abc\t50.0\nab\t3.0\n", encoding="utf-8")
    out = tmp_path / "o"
    assert main(["build-inventory", "--unigrams", str(uni), "--size", "6", "--seed", "0",
                 "--out", str(out)]) == EXIT_OK
    inv = WordPieceInventory.read(out / "inventory.tsv")
    assert inv.marker == "_"
    assert segment("abc", inv) in (["abc_"], ["abc", "_"])
