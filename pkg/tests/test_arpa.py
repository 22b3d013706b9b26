import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedngram.arpa import ArpaFormatError, load_arpa, read_arpa, save_arpa, write_arpa

from helpers import alphabet, random_model

TWO_UNIGRAMS = """\\data\\
ngram 1=2

\\1-grams:
-0.30103\t</s>
-0.30103\t<unk>

\\end\\
"""


def _round(x):
    return np.array([10.0 ** float(f"{np.log10(v):.10f}") for v in x])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_round_trip(seed, order):
    rng = np.random.default_rng(seed)
    m = random_model(rng, alphabet(int(rng.integers(1, 6))), order)
    back = read_arpa(write_arpa(m))
    assert back.symbols == m.symbols
    assert back.topology == m.topology
    perm = [m.topology.find(m.topology.index[g[:-1]], g[-1])
            for g in map(back.topology.ngram, range(back.topology.num_entries))]
    np.testing.assert_array_equal(back.weights, _round(m.weights[perm]))
    # and a second trip is exact
    assert write_arpa(read_arpa(write_arpa(back))) == write_arpa(back)


def test_file_round_trip(tmp_path):
    m = random_model(np.random.default_rng(0), alphabet(3), 2)
    save_arpa(m, tmp_path / "m.arpa")
    assert write_arpa(load_arpa(tmp_path / "m.arpa")) == write_arpa(m)


def test_hand_written_unigrams():
    m = read_arpa(TWO_UNIGRAMS)
    assert len(m.symbols) == 3
    np.testing.assert_allclose(m.weights, [0.5, 0.5], atol=1e-6)


def test_count_mismatch_names_section_line():
    text = TWO_UNIGRAMS.replace("ngram 1=2", "ngram 1=3")
    with pytest.raises(ArpaFormatError) as err:
        read_arpa(text)
    assert err.value.lineno == 4
    assert "line 4" in str(err.value)


@pytest.mark.parametrize("bad, line", [
    (TWO_UNIGRAMS.replace("\\1-grams:", "\\2-grams:"), 4),
    (TWO_UNIGRAMS.replace("-0.30103\t<unk>", "nan\t<unk>"), 6),
    (TWO_UNIGRAMS.replace("-0.30103\t<unk>", "x\t<unk>"), 6),
    (TWO_UNIGRAMS.replace("\\data\\", "data"), 1),
])
def test_malformed_input(bad, line):
    with pytest.raises(ArpaFormatError) as err:
        read_arpa(bad)
    assert err.value.lineno == line


def test_missing_end_marker():
    with pytest.raises(ArpaFormatError):
        read_arpa(TWO_UNIGRAMS.replace("\\end\\", ""))


def test_missing_prefix_is_rejected():
    text = """\\data\\
ngram 1=3
ngram 2=1

\\1-grams:
-0.5\t</s>
-0.5\t<unk>
-0.5\ta

\\2-grams:
-0.1\ta a </s>

\\end\\
"""
    with pytest.raises(ArpaFormatError):
        read_arpa(text)
