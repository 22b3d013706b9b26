"""A CIFG LSTM language model in numpy with hand-written backpropagation.

The input and output embeddings are shared.  Each layer computes

    i = sigma(W_i x + U_i h + b_i),  f = 1 - i
    c = f * c_prev + i * tanh(W_c x + U_c h + b_c)
    o = sigma(W_o x + U_o h + b_o),  h = o * tanh(c)

and the top hidden state is projected to the embedding size before the
tied softmax.  Gate pre-activations are stored side by side in the order
``[i, c, o]``.  Optional layer normalization acts on those pre-activations,
residual connections add a layer's input to its output from the second
layer on, and grouped recurrence splits ``U`` into ``k`` diagonal blocks.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .symbols import BOS_ID, EOS_ID, SymbolTable

CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5


@dataclass(frozen=True)
class CifgConfig:
    """Geometry and optional features of a :class:`CifgLstmLM`."""

    n_layers: int = 1
    n_hidden: int = 64
    n_embed: int = 32
    layer_norm: bool = False
    residual: bool = False
    groups: int = 1
    init_scale: float = 0.05

    def __post_init__(self):
        if min(self.n_layers, self.n_hidden, self.n_embed, self.groups) < 1:
            raise ValueError("layer count, sizes and group count must be positive")
        if self.n_hidden % self.groups:
            raise ValueError("hidden size must be divisible by the group count")
        if self.init_scale < 0:
            raise ValueError("init_scale must be non-negative")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class CifgLstmLM:
    """CIFG LSTM language model over the ids of ``symbols``.

    The softmax covers every symbol except the sentence start, whose
    probability is pinned to zero; the sentence end is an ordinary output.

    Parameters
    ----------
    symbols : SymbolTable
        Vocabulary including the reserved symbols.
    config : CifgConfig
    params : dict, optional
        Parameter arrays; drawn from ``uniform(-s, s)`` with zero biases
        (and unit layer-norm gains) when omitted.
    seed : int
    """

    def __init__(self, symbols: SymbolTable, config: CifgConfig | None = None,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.symbols = symbols
        self.config = config or CifgConfig()
        shapes = self.param_shapes()
        if params is None:
            params = self._init(shapes, seed)
        missing = set(shapes) ^ set(params)
        if missing:
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        self.params = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            self.params[name] = arr

    # ----------------------------------------------------------- structure
    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        h, k = cfg.n_hidden, cfg.groups
        shapes: dict[str, tuple[int, ...]] = {"embedding": (len(self.symbols), cfg.n_embed)}
        for layer in range(cfg.n_layers):
            d_in = cfg.n_embed if layer == 0 else h
            shapes[f"W{layer}"] = (d_in, 3 * h)
            shapes[f"U{layer}"] = (h, 3 * h) if k == 1 else (k, h // k, 3, h // k)
            shapes[f"b{layer}"] = (3 * h,)
            if cfg.layer_norm:
                shapes[f"ln_gain{layer}"] = (3 * h,)
                shapes[f"ln_bias{layer}"] = (3 * h,)
        shapes["projection"] = (h, cfg.n_embed)
        return shapes

    def num_parameters(self) -> int:
        """Closed-form parameter count; the tied embedding counts once."""
        cfg = self.config
        v, h, e, k, n = len(self.symbols), cfg.n_hidden, cfg.n_embed, cfg.groups, cfg.n_layers
        per_layer_rec = 3 * h * h // k
        ln = 6 * h if cfg.layer_norm else 0
        inputs = e * 3 * h + (n - 1) * h * 3 * h
        total = v * e + inputs + n * (per_layer_rec + 3 * h + ln) + h * e
        assert total == sum(a.size for a in self.params.values())
        return total

    def _init(self, shapes, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        s = self.config.init_scale
        out = {}
        for name, shape in shapes.items():
            if name.startswith("b") or name.startswith("ln_bias"):
                out[name] = np.zeros(shape)
            elif name.startswith("ln_gain"):
                out[name] = np.ones(shape)
            else:
                out[name] = rng.uniform(-s, s, size=shape)
        return out

    def copy(self) -> "CifgLstmLM":
        return CifgLstmLM(self.symbols, self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ------------------------------------------------------------- forward
    def _recurrent(self, layer: int, h: np.ndarray) -> np.ndarray:
        u = self.params[f"U{layer}"]
        if u.ndim == 2:
            return h @ u
        k, g = u.shape[0], u.shape[1]
        hg = h.reshape(len(h), k, g)
        out = np.einsum("bkg,kgjm->bjkm", hg, u)
        return out.reshape(len(h), 3 * k * g)

    def _cell(self, layer: int, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
        p = self.params
        nh = self.config.n_hidden
        z = x @ p[f"W{layer}"] + self._recurrent(layer, h_prev) + p[f"b{layer}"]
        ln = None
        if self.config.layer_norm:
            mu = z.mean(axis=1, keepdims=True)
            sd = np.sqrt(z.var(axis=1, keepdims=True) + _LN_EPS)
            zn = (z - mu) / sd
            a = zn * p[f"ln_gain{layer}"] + p[f"ln_bias{layer}"]
            ln = (zn, sd)
        else:
            a = z
        i = _sigmoid(a[:, :nh])
        g = np.tanh(a[:, nh:2 * nh])
        o = _sigmoid(a[:, 2 * nh:])
        c = (1.0 - i) * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        out = h + x if (self.config.residual and layer > 0) else h
        return h, c, out, (x, h_prev, c_prev, i, g, o, tc, ln)

    def _step(self, hs, cs, tokens: np.ndarray):
        x = self.params["embedding"][tokens]
        new_h, new_c, caches = [], [], []
        for layer in range(self.config.n_layers):
            h, c, x, cache = self._cell(layer, x, hs[layer], cs[layer])
            new_h.append(h)
            new_c.append(c)
            caches.append(cache)
        return new_h, new_c, x, caches

    def _logits(self, top: np.ndarray) -> np.ndarray:
        proj = top @ self.params["projection"]
        logits = proj @ self.params["embedding"].T
        logits[:, BOS_ID] = -np.inf
        return logits

    @staticmethod
    def _softmax(logits: np.ndarray) -> np.ndarray:
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        return e / e.sum(axis=1, keepdims=True)

    def _zeros(self, n: int):
        nh = self.config.n_hidden
        return ([np.zeros((n, nh)) for _ in range(self.config.n_layers)],
                [np.zeros((n, nh)) for _ in range(self.config.n_layers)])

    # ----------------------------------------------------- teacher protocol
    def begin(self, n: int):
        """States of ``n`` fresh sentences (sentence start consumed)."""
        hs, cs = self._zeros(n)
        hs, cs, top, _ = self._step(hs, cs, np.full(n, BOS_ID, dtype=np.int64))
        return hs, cs, top

    def advance(self, state, tokens):
        hs, cs, _ = state
        hs, cs, top, _ = self._step(hs, cs, np.asarray(tokens, dtype=np.int64))
        return hs, cs, top

    def probs(self, state) -> np.ndarray:
        return self._softmax(self._logits(state[2]))

    @staticmethod
    def select(state, rows):
        hs, cs, top = state
        return [h[rows] for h in hs], [c[rows] for c in cs], top[rows]

    def encode(self, tokens: Sequence) -> list[int]:
        return [int(t) if not isinstance(t, str) else self.symbols.lookup(t) for t in tokens]

    def next_distribution(self, prefix: Sequence) -> np.ndarray:
        """``p(. | prefix)`` over all ids; the sentence-start entry is zero."""
        state = self.begin(1)
        for t in self.encode(prefix):
            state = self.advance(state, [t])
        return self.probs(state)[0]

    def sample_sentence(self, seed, max_len: int = 50) -> list[str]:
        """Ancestral sample until the sentence end or ``max_len`` tokens."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        state = self.begin(1)
        out: list[str] = []
        while len(out) < max_len:
            p = self.probs(state)[0]
            y = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"),
                        len(p) - 1))
            while p[y] == 0:
                y -= 1
            if y == EOS_ID:
                break
            out.append(self.symbols.token(y))
            state = self.advance(state, [y])
        return out

    # ------------------------------------------------------------ training
    def _batch_arrays(self, batch: Sequence[Sequence]):
        seqs = [self.encode(s) for s in batch]
        n, t = len(seqs), max(len(s) for s in seqs) + 1
        inputs = np.full((n, t), EOS_ID, dtype=np.int64)
        targets = np.full((n, t), EOS_ID, dtype=np.int64)
        mask = np.zeros((n, t))
        for r, s in enumerate(seqs):
            inputs[r, 0] = BOS_ID
            inputs[r, 1:len(s) + 1] = s
            targets[r, :len(s)] = s
            targets[r, len(s)] = EOS_ID
            mask[r, :len(s) + 1] = 1.0
        return inputs, targets, mask

    def loss(self, batch: Sequence[Sequence]) -> float:
        """Mean per-token cross-entropy, sentence end included."""
        return self.loss_and_grad(batch, need_grad=False)[0]

    def loss_and_grad(self, batch: Sequence[Sequence], need_grad: bool = True):
        if not batch:
            raise ValueError("empty batch")
        inputs, targets, mask = self._batch_arrays(batch)
        n, steps = inputs.shape
        p = self.params
        hs, cs = self._zeros(n)
        caches, tops = [], []
        for t in range(steps):
            hs, cs, top, cache = self._step(hs, cs, inputs[:, t])
            tops.append(top)
            caches.append(cache)
        # the softmax runs once over every scored position
        where = np.nonzero(mask.T)
        flat_top = np.stack(tops)[where]
        flat_tgt = targets.T[where]
        pt = flat_top @ p["projection"]
        pr = self._softmax(self._logits(flat_top))
        rows = np.arange(len(flat_tgt))
        with np.errstate(divide="ignore"):
            value = -float(np.sum(np.log(pr[rows, flat_tgt]))) / len(rows)
        if not need_grad:
            return value, None
        cfg = self.config
        nh = cfg.n_hidden
        grads = self.zero_like()
        emb, proj = p["embedding"], p["projection"]
        dlog = pr
        dlog[rows, flat_tgt] -= 1.0
        dlog /= len(rows)
        grads["embedding"] += dlog.T @ pt
        dpt = dlog @ emb
        grads["projection"] += flat_top.T @ dpt
        dtop = np.zeros((steps, n, proj.shape[0]))
        dtop[where] = dpt @ proj.T
        dh_next = [np.zeros((n, nh)) for _ in range(cfg.n_layers)]
        dc_next = [np.zeros((n, nh)) for _ in range(cfg.n_layers)]
        for t in reversed(range(steps)):
            dout = dtop[t]
            for layer in reversed(range(cfg.n_layers)):
                x, h_prev, c_prev, i, g, o, tc, ln = caches[t][layer]
                dh = dout + dh_next[layer]
                dc = dh * o * (1.0 - tc * tc) + dc_next[layer]
                da = np.concatenate([dc * (g - c_prev) * i * (1.0 - i),
                                     dc * i * (1.0 - g * g),
                                     dh * tc * o * (1.0 - o)], axis=1)
                dc_next[layer] = dc * (1.0 - i)
                if ln is not None:
                    zn, sd = ln
                    grads[f"ln_gain{layer}"] += np.sum(da * zn, axis=0)
                    grads[f"ln_bias{layer}"] += np.sum(da, axis=0)
                    dzn = da * p[f"ln_gain{layer}"]
                    dz = (dzn - dzn.mean(axis=1, keepdims=True)
                          - zn * np.mean(dzn * zn, axis=1, keepdims=True)) / sd
                else:
                    dz = da
                grads[f"b{layer}"] += dz.sum(axis=0)
                grads[f"W{layer}"] += x.T @ dz
                self._recurrent_grad(layer, h_prev, dz, grads)
                dh_next[layer] = self._recurrent_back(layer, dz)
                dx = dz @ p[f"W{layer}"].T
                if cfg.residual and layer > 0:
                    dx = dx + dout
                dout = dx
            np.add.at(grads["embedding"], inputs[:, t], dout)
        return value, grads

    def _recurrent_grad(self, layer, h_prev, dz, grads) -> None:
        u = self.params[f"U{layer}"]
        if u.ndim == 2:
            grads[f"U{layer}"] += h_prev.T @ dz
            return
        k, g = u.shape[0], u.shape[1]
        hg = h_prev.reshape(len(h_prev), k, g)
        dzg = dz.reshape(len(dz), 3, k, g)
        grads[f"U{layer}"] += np.einsum("bkg,bjkm->kgjm", hg, dzg)

    def _recurrent_back(self, layer, dz) -> np.ndarray:
        u = self.params[f"U{layer}"]
        if u.ndim == 2:
            return dz @ u.T
        k, g = u.shape[0], u.shape[1]
        dzg = dz.reshape(len(dz), 3, k, g)
        return np.einsum("bjkm,kgjm->bkg", dzg, u).reshape(len(dz), k * g)

    # ---------------------------------------------------------- checkpoint
    def save(self, path) -> None:
        """Write an ``.npz`` archive: a JSON header plus one array per parameter.

        The header holds the format version, the configuration and the
        vocabulary.  Arrays are stored as little-endian float64 in row-major
        order under their parameter names.
        """
        header = {"format": "fedngram-cifg", "version": CHECKPOINT_VERSION,
                  "config": asdict(self.config), "vocab": list(self.symbols.tokens)}
        arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in self.params.items()}
        with open(path, "wb") as f:
            np.savez(f, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "CifgLstmLM":
        with np.load(path, allow_pickle=False) as data:
            if "__header__" not in data.files:
                raise ValueError(f"{path}: not a CIFG checkpoint")
            header = json.loads(str(data["__header__"]))
            if header.get("format") != "fedngram-cifg":
                raise ValueError(f"{path}: not a CIFG checkpoint")
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
            params = {k: data[k] for k in data.files if k != "__header__"}
        symbols = SymbolTable(header["vocab"][3:])
        if symbols.tokens != tuple(header["vocab"]):
            raise ValueError(f"{path}: reserved symbols out of place")
        return cls(symbols, CifgConfig(**header["config"]), params)


@dataclass
class TrainState:
    """Model parameters with Nesterov momentum buffers."""

    model: CifgLstmLM
    momentum: float = 0.9
    step: int = 0
    seed: int = 0
    buffers: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.buffers is None:
            self.buffers = self.model.zero_like()
        for k, v in self.model.params.items():
            if self.buffers[k].shape != v.shape:
                raise ValueError(f"momentum buffer {k} does not match its parameter")


def nesterov_update(params, buffers, grads, lr: float, momentum: float) -> None:
    """In-place Nesterov step: ``v = mu v + g``; ``p -= lr (g + mu v)``."""
    for k, g in grads.items():
        v = buffers[k]
        v *= momentum
        v += g
        params[k] -= lr * (g + momentum * v)


def train_batch(state: TrainState, batch: Sequence[Sequence], lr: float) -> float:
    """One Nesterov-SGD step on ``batch``; returns the loss before the step."""
    loss, grads = state.model.loss_and_grad(batch)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise FloatingPointError(f"non-finite loss {loss} at step {state.step}; "
                                 f"non-finite gradients in {bad}")
    if lr != 0:
        nesterov_update(state.model.params, state.buffers, grads, lr, state.momentum)
    state.step += 1
    return loss


def grad_check(model: CifgLstmLM, batch: Sequence[Sequence], eps: float = 1e-5,
               names: Sequence[str] | None = None, grads=None, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Every entry of every parameter (or of ``names``) is perturbed.  The
    error of one entry is ``|a - n| / max(|a| + |n|, floor)``.  ``grads``
    overrides the analytic gradient, which is how a corrupted gradient is
    tested.
    """
    if grads is None:
        _, grads = model.loss_and_grad(batch)
    worst = 0.0
    for name in names or list(model.params):
        arr = model.params[name]
        flat = arr.reshape(-1)
        ga = grads[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = model.loss(batch)
            flat[j] = keep - eps
            down = model.loss(batch)
            flat[j] = keep
            num = (up - down) / (2 * eps)
            err = abs(ga[j] - num) / max(abs(ga[j]) + abs(num), floor)
            worst = max(worst, err)
    return worst
