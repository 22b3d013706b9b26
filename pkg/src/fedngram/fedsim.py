"""Simulated federated training and federated unigram collection.

Clients are plain in-memory shards.  Training runs FederatedAveraging with
Nesterov-momentum SGD on each client and example-weighted averaging of the
returned deltas at the server.  Unigram collection clips each client's
contribution to L1 mass ``lam`` and tracks how quickly the aggregate
distribution settles.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neural import CifgLstmLM, nesterov_update


@dataclass
class ClientShard:
    """Sentences held by one client."""

    client_id: str
    sentences: list[list[str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sentences)

    def unigram_counts(self) -> Counter:
        return Counter(t for s in self.sentences for t in s)


def read_shards(directory) -> list[ClientShard]:
    """One shard per file; the file name is the client id, one sentence per line."""
    shards = []
    for path in sorted(Path(directory).iterdir()):
        if path.is_file():
            with open(path, encoding="utf-8") as f:
                shards.append(ClientShard(path.name, [ln.split() for ln in f if ln.strip()]))
    ids = [s.client_id for s in shards]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    return shards


def write_shards(shards: Iterable[ClientShard], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for shard in shards:
        with open(directory / shard.client_id, "w", encoding="utf-8") as f:
            for s in shard.sentences:
                f.write(" ".join(s) + "\n")


@dataclass(frozen=True)
class FedConfig:
    """FederatedAveraging hyperparameters."""

    clients_per_round: int = 10
    server_lr: float = 1.0
    client_lr: float = 0.5
    momentum: float = 0.9
    batch_size: int = 8
    local_epochs: int = 1
    rounds: int = 10
    seed: int = 0
    max_local_steps: int | None = None

    def __post_init__(self):
        if self.server_lr <= 0 or self.client_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.clients_per_round < 1 or self.batch_size < 1:
            raise ValueError("clients per round and batch size must be positive")
        if self.local_epochs < 0 or self.rounds < 0:
            raise ValueError("epochs and rounds must be non-negative")


Delta = dict[str, np.ndarray]


def _client_seed(seed: int, round_no: int, client_id: str) -> np.random.SeedSequence:
    key = [int(b) for b in client_id.encode("utf-8")]
    return np.random.SeedSequence([seed, round_no, len(key), *key])


def client_update(model: CifgLstmLM, shard: ClientShard, config: FedConfig,
                  seed=0) -> tuple[Delta, int]:
    """Train a copy of ``model`` on ``shard``; return the parameter delta and example count.

    Momentum buffers start at zero on every call.  The shard is reshuffled
    each local epoch with a generator seeded by ``seed``.
    """
    if len(shard) == 0:
        return model.zero_like(), 0
    if config.local_epochs == 0:
        return model.zero_like(), len(shard)
    local = model.copy()
    buffers = local.zero_like()
    rng = np.random.default_rng(seed)
    steps = 0
    for _ in range(config.local_epochs):
        order = rng.permutation(len(shard))
        for start in range(0, len(order), config.batch_size):
            if config.max_local_steps is not None and steps >= config.max_local_steps:
                break
            batch = [shard.sentences[j] for j in order[start:start + config.batch_size]]
            loss, grads = local.loss_and_grad(batch)
            if not np.isfinite(loss):
                raise FloatingPointError(f"client {shard.client_id}: non-finite loss")
            nesterov_update(local.params, buffers, grads, config.client_lr, config.momentum)
            steps += 1
    delta = {k: local.params[k] - model.params[k] for k in model.params}
    return delta, len(shard)


def aggregate_and_apply(model: CifgLstmLM, updates: Sequence[tuple[str, Delta, int]],
                        config: FedConfig) -> CifgLstmLM:
    """Apply ``server_lr`` times the example-weighted mean delta.

    ``updates`` holds ``(client id, delta, example count)``; the sum runs in
    sorted client-id order so the result does not depend on list order.
    """
    if not updates:
        raise ValueError("no client updates")
    total = sum(n for _, _, n in updates)
    if total == 0:
        return model
    acc = model.zero_like()
    for _, delta, n in sorted(updates, key=lambda u: u[0]):
        if n:
            for k in acc:
                acc[k] += n * delta[k]
    for k, v in acc.items():
        model.params[k] += config.server_lr * (v / total)
    return model


@dataclass
class RoundMetrics:
    round: int
    clients: list[str]
    examples: int
    sll_e: float | None = None


def run_fedavg(model: CifgLstmLM, shards: Sequence[ClientShard], config: FedConfig,
               evaluate: Callable[[CifgLstmLM], float] | None = None,
               log: Callable[[RoundMetrics], None] | None = None,
               eval_every: int = 1) -> tuple[CifgLstmLM, list[RoundMetrics]]:
    """Run ``config.rounds`` rounds of FederatedAveraging in place on ``model``.

    Each round samples ``clients_per_round`` shards without replacement
    with a generator seeded by ``config.seed``.  ``evaluate`` is called on
    the model after every ``eval_every``-th round and after the last one
    (typically held-out SLL^e).
    """
    if not shards:
        raise ValueError("empty client population")
    if config.clients_per_round > len(shards):
        raise ValueError(f"{config.clients_per_round} clients per round but only "
                         f"{len(shards)} clients")
    rng = np.random.default_rng(config.seed)
    history = []
    for r in range(1, config.rounds + 1):
        chosen = sorted(rng.choice(len(shards), config.clients_per_round, replace=False))
        updates = []
        for j in chosen:
            shard = shards[j]
            delta, n = client_update(model, shard, config,
                                     _client_seed(config.seed, r, shard.client_id))
            updates.append((shard.client_id, delta, n))
        aggregate_and_apply(model, updates, config)
        m = RoundMetrics(r, [shards[j].client_id for j in chosen], sum(u[2] for u in updates),
                         evaluate(model) if evaluate and (r % eval_every == 0
                                                          or r == config.rounds) else None)
        history.append(m)
        if log:
            log(m)
    return model, history


# ------------------------------------------------------------------ unigrams
def clip_weight(total: float, lam: float) -> float:
    """``lam / max(lam, total)``."""
    return lam / max(lam, total)


def clipped_mass(total: float, lam: float) -> float:
    """L1 mass a client contributes, ``min(total, lam)``, without rounding."""
    return lam * total / max(lam, total) if total > 0 else 0.0


def _settle_mass(part: dict[str, float], mass: float) -> None:
    """Move one entry by a few ulps so the correctly rounded sum is exactly ``mass``.

    Scaling by ``mass / total`` leaves the sum within a few ulps of ``mass``.
    The largest entries are tried in turn; a sum sitting on a rounding tie
    for one entry is usually reachable through another.
    """
    for x in sorted(part, key=lambda x: (-part[x], x))[:8]:
        base = part[x]
        start = mass - math.fsum(part.values())
        if start == 0.0:
            return
        for _ in range(32):
            part[x] = math.nextafter(part[x], math.copysign(math.inf, start))
            err = mass - math.fsum(part.values())
            if err == 0.0:
                return
            if math.copysign(1.0, err) != math.copysign(1.0, start):
                break
        part[x] = base


class UnigramAccumulator:
    """Clipped unigram counts summed over clients.

    Parameters
    ----------
    whitelist : iterable of str or None
        Words that may be counted; anything else is discarded on the client
        before its total is taken.  ``None`` admits every word.
    lam : float
        Clipping threshold.
    """

    def __init__(self, whitelist: Iterable[str] | None, lam: float):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        self.whitelist = None if whitelist is None else frozenset(whitelist)
        self.lam = float(lam)
        self._parts: dict[str, dict[str, float]] = {}
        self._counts: dict[str, float] | None = None

    def _filter(self, counts: Mapping[str, float]) -> dict[str, float]:
        return {w: float(c) for w, c in counts.items()
                if c > 0 and (self.whitelist is None or w in self.whitelist)}

    def add_client(self, client_id: str, counts: Mapping[str, float]) -> float:
        """Record one client's raw counts; returns its weight ``w_i``."""
        if client_id in self._parts:
            raise ValueError(f"client {client_id!r} already added")
        kept = self._filter(counts)
        total = math.fsum(kept.values())
        w = clip_weight(total, self.lam)
        part = {x: c * w for x, c in kept.items()}
        if w < 1.0:
            _settle_mass(part, self.lam)
        self._parts[client_id] = part
        self._counts = None
        return w

    def client_contribution(self, client_id: str) -> dict[str, float]:
        return dict(self._parts[client_id])

    @property
    def counts(self) -> dict[str, float]:
        """``U``: summed weighted counts, in sorted client order."""
        if self._counts is None:
            parts: dict[str, list[float]] = {}
            for cid in sorted(self._parts):
                for x, v in self._parts[cid].items():
                    parts.setdefault(x, []).append(v)
            self._counts = {x: math.fsum(v) for x, v in sorted(parts.items())}
        return self._counts

    def __len__(self) -> int:
        return len(self._parts)


def collect_unigrams(shards: Sequence[ClientShard], whitelist: Iterable[str] | None,
                     lam: float, group_size: int | None = None, seed: int = 0,
                     window: int = 10) -> tuple[UnigramAccumulator, "ConvergenceStats"]:
    """Clipped federated unigram counts plus per-round convergence statistics.

    Clients are shuffled with ``seed`` and visited in rounds of
    ``group_size`` (all at once when ``None``).  The grouping only shapes
    the statistics; ``U`` is the same for every grouping and client order.
    """
    acc = UnigramAccumulator(whitelist, lam)
    stats = ConvergenceStats(window)
    order = np.random.default_rng(seed).permutation(len(shards))
    size = group_size or max(len(shards), 1)
    for start in range(0, len(order), size):
        round_counts: dict[str, float] = {}
        for j in order[start:start + size]:
            shard = shards[j]
            acc.add_client(shard.client_id, shard.unigram_counts())
            for x, v in acc.client_contribution(shard.client_id).items():
                round_counts[x] = round_counts.get(x, 0.0) + v
        stats.update(round_counts)
    return acc, stats


def z_statistic(half: Mapping[str, float], full: Mapping[str, float]) -> float:
    """Two-sample homogeneity statistic between two count maps.

    ``sum_x (a_x/A - b_x/B)^2 / ((a_x + b_x)/(A + B))`` over the union of
    supports, skipping cells where both counts are zero.
    """
    a_tot = math.fsum(v for v in half.values())
    b_tot = math.fsum(v for v in full.values())
    if a_tot <= 0 and b_tot <= 0:
        raise ValueError("both count maps are empty")
    if a_tot <= 0 or b_tot <= 0:
        raise ValueError("one count map is empty")
    n = a_tot + b_tot
    terms = []
    for x in sorted(set(half) | set(full)):
        a, b = half.get(x, 0.0), full.get(x, 0.0)
        if a + b <= 0:
            continue
        d = a / a_tot - b / b_tot
        terms.append(d * d / ((a + b) / n))
    return math.fsum(terms)


@dataclass
class NoveltyResult:
    indicator: list[int]
    moving_average: list[float]
    unique_counts: list[int]


def novelty_tracker(round_sets: Iterable[Iterable[str]], window: int = 10) -> NoveltyResult:
    """Per round: 1 if an unseen unigram appears, its trailing moving average
    over ``window`` rounds, and the cumulative number of unique unigrams."""
    if window < 1:
        raise ValueError("window must be positive")
    seen: set[str] = set()
    ind, ma, uniq = [], [], []
    for words in round_sets:
        words = set(words)
        ind.append(int(bool(words - seen)))
        seen |= words
        recent = ind[-window:]
        ma.append(sum(recent) / len(recent))
        uniq.append(len(seen))
    return NoveltyResult(ind, ma, uniq)


class ConvergenceStats:
    """Running statistics of federated unigram collection.

    After round ``k`` the cumulative counts are compared with those after
    round ``k // 2``.  Cumulative snapshots are kept at power-of-two rounds.
    """

    def __init__(self, window: int = 10):
        if window < 1:
            raise ValueError("window must be positive")
        self.window = window
        self._rounds: list[dict[str, float]] = []
        self._full: dict[str, float] = {}
        self._half: dict[str, float] = {}
        self._half_round = 0
        self._novel: list[int] = []
        self.z_stats: list[float] = []
        self.unique_counts: list[int] = []
        self.novelty_ma: list[float] = []
        self.snapshots: dict[int, dict[str, float]] = {}
        self.sll_e: list[float | None] = []

    @property
    def rounds(self) -> int:
        return len(self._rounds)

    def update(self, round_counts: Mapping[str, float], sll_e: float | None = None) -> None:
        counts = {x: float(v) for x, v in round_counts.items() if v > 0}
        self._rounds.append(counts)
        k = len(self._rounds)
        novel = any(x not in self._full for x in counts)
        for x, v in counts.items():
            self._full[x] = self._full.get(x, 0.0) + v
        while self._half_round < k // 2:
            for x, v in self._rounds[self._half_round].items():
                self._half[x] = self._half.get(x, 0.0) + v
            self._half_round += 1
        if self._half and self._full:
            self.z_stats.append(z_statistic(self._half, self._full))
        else:
            self.z_stats.append(math.nan)
        self._novel.append(int(novel))
        recent = self._novel[-self.window:]
        self.novelty_ma.append(sum(recent) / len(recent))
        self.unique_counts.append(len(self._full))
        self.sll_e.append(sll_e)
        if k & (k - 1) == 0:
            self.snapshots[k] = dict(self._full)

    def rows(self) -> list[dict]:
        return [{"round": k + 1, "z_stat": self.z_stats[k],
                 "unique_unigrams": self.unique_counts[k],
                 "novelty_ma": self.novelty_ma[k], "sll_e": self.sll_e[k]}
                for k in range(self.rounds)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["round", "z_stat", "unique_unigrams", "novelty_ma", "sll_e"])
            for r in self.rows():
                w.writerow([r["round"], repr(r["z_stat"]), r["unique_unigrams"],
                            repr(r["novelty_ma"]), "" if r["sll_e"] is None else repr(r["sll_e"])])
