import numpy as np
import pytest

from fedngram.neural import (CifgConfig, CifgLstmLM, TrainState, grad_check, nesterov_update,
                             train_batch)
from fedngram.symbols import BOS_ID, EOS_ID

from helpers import alphabet

TINY = CifgConfig(n_hidden=4, n_embed=3)
BATCH = [["a", "b", "c"], ["b"], [], ["c", "c", "a", "b"]]


def _model(config=TINY, n_words=3, seed=0):
    return CifgLstmLM(alphabet(n_words), config, seed=seed)


def test_parameter_count_matches_arrays():
    for cfg in (CifgConfig(), CifgConfig(n_layers=3, n_hidden=8, n_embed=4, groups=2,
                                         layer_norm=True, residual=True)):
        m = _model(cfg)
        assert m.num_parameters() == sum(v.size for v in m.params.values())
        assert m.params["embedding"].shape == (len(m.symbols), cfg.n_embed)
        assert m.params["projection"].shape == (cfg.n_hidden, cfg.n_embed)


def test_invalid_configs():
    with pytest.raises(ValueError):
        CifgConfig(n_hidden=6, groups=4)
    with pytest.raises(ValueError):
        CifgConfig(n_layers=0)


def test_zero_parameters_give_uniform_output():
    m = _model()
    for v in m.params.values():
        v[...] = 0.0
    p = m.next_distribution(["a", "b"])
    assert p[BOS_ID] == 0.0
    np.testing.assert_allclose(p[1:], 1.0 / (len(m.symbols) - 1), atol=1e-15)


def test_distributions_are_normalized():
    m = _model(CifgConfig(n_layers=2, n_hidden=6, n_embed=4, layer_norm=True, residual=True,
                          groups=2, init_scale=0.5))
    for prefix in ([], ["a"], ["c", "b", "a", "a"]):
        p = m.next_distribution(prefix)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(p >= 0)


def test_batched_protocol_matches_single_prefix():
    m = _model(CifgConfig(n_hidden=4, n_embed=3, init_scale=0.5))
    state = m.begin(2)
    state = m.advance(state, [m.symbols.id("a"), m.symbols.id("b")])
    rows = m.probs(state)
    np.testing.assert_allclose(rows[0], m.next_distribution(["a"]), atol=1e-14)
    np.testing.assert_allclose(rows[1], m.next_distribution(["b"]), atol=1e-14)
    one = m.select(state, [1])
    np.testing.assert_allclose(m.probs(one)[0], rows[1], atol=1e-14)


def test_loss_matches_sequence_probabilities():
    m = _model(CifgConfig(n_hidden=4, n_embed=3, init_scale=0.5))
    total, count = 0.0, 0
    for s in BATCH:
        for i in range(len(s) + 1):
            x = m.symbols.id(s[i]) if i < len(s) else EOS_ID
            total -= np.log(m.next_distribution(s[:i])[x])
            count += 1
    assert m.loss(BATCH) == pytest.approx(total / count, rel=1e-12)


def test_gradient_check_default_geometry():
    m = _model(CifgConfig(n_hidden=8, n_embed=4))
    assert grad_check(m, BATCH) <= 1e-4


@pytest.mark.parametrize("cfg", [
    CifgConfig(n_hidden=4, n_embed=3, layer_norm=True, init_scale=0.5),
    CifgConfig(n_layers=2, n_hidden=4, n_embed=3, residual=True, init_scale=0.5),
    CifgConfig(n_hidden=4, n_embed=3, groups=2, init_scale=0.5),
    CifgConfig(n_layers=2, n_hidden=4, n_embed=3, layer_norm=True, residual=True, groups=2,
               init_scale=0.5),
], ids=["layer-norm", "residual", "grouped", "all"])
def test_gradient_check_optional_features(cfg):
    assert grad_check(_model(cfg), BATCH) <= 1e-4


def test_gradient_check_detects_sign_flip():
    m = _model(CifgConfig(n_hidden=4, n_embed=3, init_scale=0.5))
    _, grads = m.loss_and_grad(BATCH)
    grads["W0"] = -grads["W0"]
    assert grad_check(m, BATCH, grads=grads, names=["W0"]) > 1e-1


def test_zero_model_gradients_match_differences():
    m = _model()
    for v in m.params.values():
        v[...] = 0.0
    assert grad_check(m, BATCH) <= 1e-4


def test_lr_zero_leaves_parameters():
    m = _model()
    before = {k: v.copy() for k, v in m.params.items()}
    loss = train_batch(TrainState(m), BATCH, 0.0)
    assert np.isfinite(loss)
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])


def test_momentum_zero_is_plain_gradient_step():
    m = _model()
    before = {k: v.copy() for k, v in m.params.items()}
    _, g = m.loss_and_grad(BATCH)
    train_batch(TrainState(m, momentum=0.0), BATCH, 0.3)
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k] - 0.3 * g[k])


def test_nesterov_update_rule():
    p = {"w": np.array([1.0])}
    buf = {"w": np.zeros(1)}
    nesterov_update(p, buf, {"w": np.array([2.0])}, 0.1, 0.5)
    assert buf["w"][0] == 2.0
    assert p["w"][0] == pytest.approx(1.0 - 0.1 * (2.0 + 0.5 * 2.0))


def test_loss_decreases_when_overfitting():
    m = _model(CifgConfig(n_hidden=8, n_embed=4), seed=1)
    state = TrainState(m, momentum=0.9)
    losses = [train_batch(state, BATCH[:2], 0.5) for _ in range(51)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_overfit_single_sentence():
    m = _model(CifgConfig(n_hidden=8, n_embed=4), seed=0)
    state = TrainState(m, momentum=0.9)
    for _ in range(200):
        train_batch(state, [["a", "b"]], 0.5)
    p = m.next_distribution(["a"])
    assert p[m.symbols.id("b")] >= 0.9


def test_non_finite_loss_halts():
    m = _model()
    m.params["embedding"][...] = np.nan
    with pytest.raises(FloatingPointError):
        train_batch(TrainState(m), BATCH, 0.1)


def _ending_model():
    m = _model()
    for v in m.params.values():
        v[...] = 0.0
    m.params["b0"][...] = 5.0
    m.params["projection"][...] = 1.0
    m.params["embedding"][EOS_ID] = 100.0
    return m


def test_sampling_immediate_end():
    m = _ending_model()
    assert m.next_distribution([])[EOS_ID] > 1 - 1e-12
    assert m.sample_sentence(0) == []


def test_sampling_is_seeded():
    m = _model(CifgConfig(n_hidden=4, n_embed=3, init_scale=0.5))
    assert m.sample_sentence(5, max_len=20) == m.sample_sentence(5, max_len=20)


def test_first_token_frequencies():
    m = CifgLstmLM(alphabet(2), CifgConfig(n_hidden=4, n_embed=3, init_scale=1.0), seed=3)
    p = m.next_distribution([])
    n = 10_000
    counts = np.zeros(len(p))
    for s in range(n):
        toks = m.sample_sentence(s, max_len=1)
        counts[m.symbols.id(toks[0]) if toks else EOS_ID] += 1
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)


def test_save_load_round_trip(tmp_path):
    m = _model(CifgConfig(n_layers=2, n_hidden=4, n_embed=3, layer_norm=True, groups=2))
    m.save(tmp_path / "m.npz")
    back = CifgLstmLM.load(tmp_path / "m.npz")
    assert back.config == m.config
    assert back.symbols == m.symbols
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])


def test_load_rejects_other_files(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValueError):
        CifgLstmLM.load(tmp_path / "x.npz")
