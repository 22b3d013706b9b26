"""Fit backoff weights to expected counts by minimizing the count-weighted KL.

With counts ``C`` at reading entries and backoff masses ``N`` per state the
objective is::

    F = sum_e C_e * -log w_e  +  sum_q N_q * -log bow_q,
    bow_q = (1 - S_q) / (1 - D_q)

where ``S_q`` is the explicit mass of ``q`` and ``D_q`` the mass its labels
carry at the backoff state.  When every state's labels are also explicit at
its backoff state (true for suffix-closed n-gram topologies), ``D_q`` only
involves the parent's weights and ``F`` splits into one block per state::

    F_q(w) = -sum_x C_x log w_x - N_q log(1 - sum_x w_x)
             + sum_{t: backoff(t) = q} N_t log(1 - sum_{x in L[t]} w_x)

The last sum is concave, the rest convex.  Each iteration linearizes the
concave part (``lambda_x`` is its negated gradient) and solves the convex
surrogate exactly: ``w_x = C_x / (mu - lambda_x)`` with the scalar ``mu``
from a one-dimensional monotone equation.  The surrogate majorizes
``F_q``, so the objective never increases.
"""

from __future__ import annotations

import logging

import numpy as np

from .counting import ExpectedCounts
from .ngram import BackoffNGramModel, BackoffTopology

log = logging.getLogger(__name__)


class _Problem:
    def __init__(self, top: BackoffTopology, counts: ExpectedCounts, floor: float):
        if counts.topology is not top:
            raise ValueError("counts are keyed to a different topology")
        C = np.asarray(counts.entry, dtype=np.float64)
        N = np.asarray(counts.backoff, dtype=np.float64).copy()
        if np.any(C < 0) or np.any(N < 0):
            raise ValueError("counts must be non-negative")
        self.top = top
        self.state = top.entry_state
        self.parent = top.parent_entries()
        self.bottom = top.backoff < 0
        N[self.bottom] = 0.0
        # a state listing every label cannot back off; whatever mass the
        # accumulator left there is rounding residue
        size = np.diff(top.offsets)
        self.complete = ~self.bottom & (size >= len(top.symbols) - 1)
        N[self.complete] = 0.0
        mass = np.bincount(self.state, weights=C, minlength=top.num_states) + N
        self.mass = mass
        self.visited = mass > 0
        C = np.where(self.visited[self.state],
                     np.maximum(C, floor * mass[self.state]), 0.0)
        # backoff mass is a difference of sums; drop its rounding residue,
        # then floor it like the entry counts so every backoff weight is positive
        can_back_off = self.visited & ~self.bottom & ~self.complete
        N = np.where(N <= 1e-10 * mass, 0.0, N)
        N = np.where(can_back_off, np.maximum(N, floor * mass), N)
        self.C = C
        self.N = N
        self.total = np.bincount(self.state, weights=C, minlength=top.num_states) + N
        self.child = np.nonzero(self.parent >= 0)[0]
        # only children that actually back off constrain their parent
        self.child = self.child[N[self.state[self.child]] > 0]
        self.nonbottom = np.nonzero(~self.bottom)[0]

    def lower_mass(self, w: np.ndarray) -> np.ndarray:
        """``D_q``: mass of ``q``'s labels at its backoff state."""
        top = self.top
        has_parent = self.parent >= 0
        return np.bincount(self.state[has_parent], weights=w[self.parent[has_parent]],
                           minlength=top.num_states)

    def lambdas(self, w: np.ndarray) -> np.ndarray:
        D = self.lower_mass(w)
        coef = np.zeros(self.top.num_states)
        st = np.unique(self.state[self.child])
        coef[st] = self.N[st] / np.maximum(1.0 - D[st], 1e-300)
        return np.bincount(self.parent[self.child], weights=coef[self.state[self.child]],
                           minlength=len(w))

    def solve(self, lam: np.ndarray) -> np.ndarray:
        """Minimize the convex surrogate of every visited state at once.

        Stationarity gives ``w_x = C_x / (mu - lambda_x)`` with ``mu`` the
        root of ``sum_x C_x / (mu - lambda_x) + N / mu = 1``.  The root is
        sought as ``t = mu - max lambda`` so that the smallest denominators
        do not suffer cancellation.
        """
        top = self.top
        S, C, N = self.state, self.C, self.N
        n = top.num_states
        pos = C > 0
        lam_max = np.full(n, -np.inf)
        np.maximum.at(lam_max, S[pos], lam[pos])
        lam_max = np.where(np.isfinite(lam_max), lam_max, 0.0)
        delta = np.where(pos, lam_max[S] - lam, 0.0)
        lo = np.zeros(n)
        hi = self.total.copy()
        t = hi.copy()
        live = self.visited.copy()
        for _ in range(200):
            d = np.where(pos, t[S] + delta, 1.0)
            mu = t + lam_max
            term = np.where(pos, C / d, 0.0)
            dterm = np.where(pos, C / (d * d), 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                g = (np.bincount(S, weights=term, minlength=n)
                     + np.where(N > 0, N / mu, 0.0) - 1.0)
                dg = (-np.bincount(S, weights=dterm, minlength=n)
                      - np.where(N > 0, N / mu**2, 0.0))
            g = np.where(live, g, 0.0)
            lo = np.where(g > 0, t, lo)
            hi = np.where(g < 0, t, hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = t - g / dg
            ok = (newton > lo) & (newton < hi) & np.isfinite(newton)
            new = np.where(ok, newton, 0.5 * (lo + hi))
            new = np.where(live & (g != 0), new, t)
            step = np.abs(new - t)
            t = new
            if np.all(step <= 4e-16 * t) or np.all((g == 0) | ~live):
                break
        return np.where(pos, C / np.where(pos, t[S] + delta, 1.0), 0.0)

    def fill_unvisited(self, w: np.ndarray) -> np.ndarray:
        """States without evidence copy their backoff state's probabilities."""
        top = self.top
        w = w.copy()
        root_like = self.bottom & ~self.visited
        for q in np.nonzero(root_like)[0]:
            lo, hi = top.offsets[q], top.offsets[q + 1]
            w[lo:hi] = 1.0 / max(hi - lo, 1)
        order = np.argsort(top.depth, kind="stable")
        for q in order[~self.visited[order] & ~self.bottom[order]].tolist():
            lo, hi = top.offsets[q], top.offsets[q + 1]
            w[lo:hi] = w[self.parent[lo:hi]]
        return w

    def backoff_weights(self, w: np.ndarray) -> np.ndarray:
        top = self.top
        S = np.bincount(self.state, weights=w, minlength=top.num_states)
        D = self.lower_mass(w)
        with np.errstate(divide="ignore", invalid="ignore"):
            bow = (1.0 - S) / (1.0 - D)
        bad = self.bottom | self.complete | ~np.isfinite(bow) | (bow <= 0)
        return np.where(bad, 1.0, bow)

    def feasible(self, w: np.ndarray) -> bool:
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            return False
        S = np.bincount(self.state, weights=w, minlength=self.top.num_states)
        D = self.lower_mass(w)
        nb = ~self.bottom & ~self.complete
        return bool(np.all(S[nb] < 1) and np.all(D[nb] < 1) and np.all(S[self.bottom] <= 1 + 1e-9))

    def change(self, w0: np.ndarray, w1: np.ndarray) -> float:
        """``objective(w1) - objective(w0)`` computed from differences.

        Near the optimum the change is far below the rounding error of the
        objective itself, so it is accumulated from log ratios instead.
        """
        pos = self.C > 0
        dw = w1 - w0
        f = -np.sum(self.C[pos] * np.log1p(dw[pos] / w0[pos]))
        n = self.top.num_states
        S0 = np.bincount(self.state, weights=w0, minlength=n)
        dS = np.bincount(self.state, weights=dw, minlength=n)
        D0 = self.lower_mass(w0)
        dD = self.lower_mass(dw)
        b = self.N > 0
        f -= np.sum(self.N[b] * (np.log1p(-dS[b] / (1 - S0[b])) - np.log1p(-dD[b] / (1 - D0[b]))))
        return float(f)

    def objective(self, w: np.ndarray) -> float:
        pos = self.C > 0
        f = -np.sum(self.C[pos] * np.log(w[pos]))
        S = np.bincount(self.state, weights=w, minlength=self.top.num_states)
        D = self.lower_mass(w)
        b = self.N > 0
        f -= np.sum(self.N[b] * (np.log1p(-S[b]) - np.log1p(-D[b])))
        return float(f)


class KLResult:
    def __init__(self, model: BackoffNGramModel, objectives: list[float]):
        self.model = model
        self.objectives = objectives

    @property
    def objective(self) -> float:
        return self.objectives[-1]


def kl_minimize(topology: BackoffTopology, counts: ExpectedCounts, config=None,
                return_history: bool = False, accelerate: bool = True):
    """Backoff model on ``topology`` that minimizes the KL objective of ``counts``.

    ``config`` supplies ``max_iter``, ``tol`` and ``count_floor`` (a
    :class:`~fedngram.distill.DistillConfig` or anything with those
    attributes).  Iteration stops once the relative objective improvement
    drops below ``tol``.  With ``accelerate`` every pair of iterations is
    followed by a squared-extrapolation step that is kept only when it
    lowers the objective further.
    """
    max_iter = getattr(config, "max_iter", 200)
    tol = getattr(config, "tol", 1e-8)
    floor = getattr(config, "count_floor", 1e-9)
    prob = _Problem(topology, counts, floor)

    def step(w):
        return prob.fill_unvisited(prob.solve(prob.lambdas(w)))

    w_full = prob.fill_unvisited(prob.solve(np.zeros(topology.num_entries)))
    history = [prob.objective(w_full)]
    it = 0
    while it < max_iter and len(prob.child):
        w1 = step(w_full)
        w2 = step(w1)
        it += 2
        cand, df = w2, prob.change(w_full, w2)
        if accelerate:
            # squared extrapolation of the fixed-point map, kept only if it helps
            r = w1 - w_full
            v = w2 - w1 - r
            nv = np.linalg.norm(v)
            if nv > 0:
                alpha = min(-np.linalg.norm(r) / nv, -1.0)
                w3 = w_full - 2 * alpha * r + alpha * alpha * v
                if prob.feasible(w3):
                    w4 = step(w3)
                    it += 1
                    if prob.feasible(w4):
                        df4 = prob.change(w_full, w4)
                        if np.isfinite(df4) and df4 <= df:
                            cand, df = w4, df4
        if not np.isfinite(df) or df > 0:
            log.debug("iteration %d rejected (change %g)", it, df)
            break
        moved = float(np.max(np.abs(cand - w_full)))
        w_full = cand
        history.append(history[-1] + df)
        if -df <= tol * max(abs(history[-1]), 1e-300) or moved == 0.0:
            break
    model = BackoffNGramModel(topology, w_full, prob.backoff_weights(w_full))
    if return_history:
        return KLResult(model, history)
    return model


def kl_objective(model: BackoffNGramModel, counts: ExpectedCounts) -> float:
    """Count-weighted cross entropy of ``model`` (no count floor)."""
    C = counts.entry
    pos = C > 0
    f = -np.sum(C[pos] * np.log(model.weights[pos]))
    b = counts.backoff > 0
    f -= np.sum(counts.backoff[b] * np.log(model.backoff_weights[b]))
    return float(f)
