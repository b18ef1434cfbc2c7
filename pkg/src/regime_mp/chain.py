"""Continuous-time finite-state Markov chains and their counting processes."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng

ROW_TOL = 1e-12


class RegimeGenerator:
    """Generator matrix of a Markov chain on regimes 0..D-1.

    Args:
        matrix: (D, D) array with nonnegative off-diagonal entries and zero row sums.
    """

    def __init__(self, matrix):
        q = np.array(matrix, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise ValueError(f"generator must be a square matrix, got shape {q.shape}")
        off = q - np.diag(np.diag(q))
        bad = np.argwhere(off < 0)
        if bad.size:
            i, j = bad[0]
            raise ValueError(f"generator row {i}: off-diagonal entry ({i},{j}) = {q[i, j]} is negative")
        scale = max(1.0, float(np.abs(q).max()))
        sums = q.sum(axis=1)
        for i, s in enumerate(sums):
            if abs(s) > ROW_TOL * scale:
                raise ValueError(f"generator row {i} sums to {s:.3e}, expected 0")
        self.matrix = q
        self.matrix.setflags(write=False)

    @property
    def n_regimes(self) -> int:
        return self.matrix.shape[0]

    @property
    def rates(self) -> np.ndarray:
        """Total leaving rate of each regime."""
        return -np.diag(self.matrix)

    @property
    def intensities(self) -> np.ndarray:
        """(D, D) array; row i holds the jump intensity toward each j (zero on the diagonal)."""
        return self.matrix - np.diag(np.diag(self.matrix))

    def intensity(self, regime) -> np.ndarray:
        """Intensity vectors for an array of current regimes, shape (..., D)."""
        return self.intensities[np.asarray(regime)]

    def __repr__(self) -> str:
        return f"RegimeGenerator({self.matrix.tolist()})"


@dataclass(frozen=True)
class ChainPath:
    """One chain trajectory on [0, horizon]; states[k] is the regime entered at times[k]."""

    initial_state: int
    times: np.ndarray
    states: np.ndarray
    horizon: float

    def state_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right")
        seq = np.concatenate([[self.initial_state], self.states]).astype(int)
        return seq[k]

    @property
    def from_states(self) -> np.ndarray:
        seq = np.concatenate([[self.initial_state], self.states]).astype(int)
        return seq[:-1]


@dataclass(frozen=True)
class ChainBatch:
    """Many chain paths stored as flat event arrays sorted by (path, time)."""

    initial: np.ndarray
    offsets: np.ndarray
    times: np.ndarray
    states: np.ndarray
    from_states: np.ndarray
    horizon: float
    generator: RegimeGenerator = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.initial.shape[0]

    @property
    def event_path(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_paths), np.diff(self.offsets))

    def path(self, i: int) -> ChainPath:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return ChainPath(int(self.initial[i]), self.times[lo:hi].copy(), self.states[lo:hi].copy(), self.horizon)

    def state_at(self, t: float) -> np.ndarray:
        """Regime of every path at time t (right-continuous)."""
        out = self.initial.copy()
        mask = self.times <= t
        last = np.full(self.n_paths, -1, dtype=np.int64)
        np.maximum.at(last, self.event_path[mask], np.flatnonzero(mask))
        have = last >= 0
        out[have] = self.states[last[have]]
        return out


@dataclass(frozen=True)
class CountingData:
    """Counting, compensator and compensated processes sampled at given times."""

    times: np.ndarray
    counts: np.ndarray
    compensator: np.ndarray

    @property
    def compensated(self) -> np.ndarray:
        return self.counts - self.compensator


def _sample_block(q_int, rates, initial, horizon, gen):
    b = initial.shape[0]
    d = q_int.shape[0]
    state = initial.copy()
    t = np.zeros(b)
    active = rates[state] > 0
    cum = np.cumsum(q_int / np.where(rates > 0, rates, 1.0)[:, None], axis=1)
    ev_path, ev_time, ev_to, ev_from = [], [], [], []
    while active.any():
        u = gen.random((b, 2))
        r = rates[state]
        with np.errstate(divide="ignore"):
            hold = np.where(r > 0, -np.log1p(-u[:, 0]) / np.where(r > 0, r, 1.0), np.inf)
        t_new = t + hold
        jump = active & (t_new <= horizon)
        rows = np.flatnonzero(jump)
        if rows.size:
            nxt = (u[rows, 1][:, None] >= cum[state[rows]]).sum(axis=1)
            nxt = np.minimum(nxt, d - 1)
            # never land on the current state through rounding in the cumulative sum
            probs = q_int[state[rows], nxt]
            bad = probs <= 0
            if bad.any():
                nxt[bad] = np.argmax(q_int[state[rows[bad]]], axis=1)
            ev_path.append(rows)
            ev_time.append(t_new[rows])
            ev_to.append(nxt)
            ev_from.append(state[rows].copy())
            state[rows] = nxt
            t[rows] = t_new[rows]
        active = jump & (rates[state] > 0)
    if ev_path:
        p = np.concatenate(ev_path)
        tt = np.concatenate(ev_time)
        to = np.concatenate(ev_to)
        fr = np.concatenate(ev_from)
        order = np.lexsort((tt, p))
        return p[order], tt[order], to[order], fr[order]
    e = np.zeros(0, dtype=np.int64)
    return e, np.zeros(0), e, e


def sample_chains(
    generator: RegimeGenerator,
    initial,
    horizon: float,
    n_paths: int,
    seed: int,
    workers: int = 1,
) -> ChainBatch:
    """Sample independent chain paths with exact exponential holding times.

    Args:
        generator: regime generator.
        initial: initial regime (int) or array of per-path initial regimes.
        horizon: terminal time T.
        n_paths: number of paths.
        seed: integer seed.
        workers: thread count; output does not depend on it.

    Returns:
        ChainBatch with events sorted by (path, time).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    init = np.broadcast_to(np.asarray(initial, dtype=np.int64), (n_paths,)).copy()
    d = generator.n_regimes
    if init.size and (init.min() < 0 or init.max() >= d):
        raise ValueError(f"initial regime out of range 0..{d - 1}")
    q_int = generator.intensities
    rates = generator.rates

    def work(args):
        b, lo, hi = args
        full = np.zeros(rng.BLOCK, dtype=np.int64)
        full[: hi - lo] = init[lo:hi]
        p, tt, to, fr = _sample_block(q_int, rates, full, horizon, rng.stream(seed, "chain", b))
        keep = p < hi - lo
        return p[keep] + lo, tt[keep], to[keep], fr[keep]

    jobs = list(rng.blocks(n_paths))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(work, jobs))
    else:
        parts = [work(j) for j in jobs]
    if parts:
        p = np.concatenate([x[0] for x in parts])
        tt = np.concatenate([x[1] for x in parts])
        to = np.concatenate([x[2] for x in parts])
        fr = np.concatenate([x[3] for x in parts])
    else:
        p = to = fr = np.zeros(0, dtype=np.int64)
        tt = np.zeros(0)
    offsets = np.zeros(n_paths + 1, dtype=np.int64)
    np.add.at(offsets, p + 1, 1)
    offsets = np.cumsum(offsets)
    return ChainBatch(init, offsets, tt, to.astype(np.int64), fr.astype(np.int64), float(horizon), generator)


def sample_chain(generator: RegimeGenerator, initial: int, horizon: float, seed: int) -> ChainPath:
    """Single chain path (path index 0 of the seeded stream)."""
    return sample_chains(generator, initial, horizon, 1, seed).path(0)


def occupation_times(path: ChainPath, t: float, n_regimes: int) -> np.ndarray:
    """Time spent in each regime during [0, t]."""
    knots = np.concatenate([[0.0], path.times[path.times < t], [t]])
    seq = np.concatenate([[path.initial_state], path.states[path.times < t]]).astype(int)
    out = np.zeros(n_regimes)
    np.add.at(out, seq, np.diff(knots))
    return out


def counting_data(path: ChainPath, generator: RegimeGenerator, times) -> CountingData:
    """Exact counting process, compensator and compensated martingale at given times.

    The counting component j counts entries into regime j; its compensator is
    the integral of lambda_{alpha(s-), j} ds, computed exactly from the
    piecewise-constant path.
    """
    times = np.asarray(times, dtype=float)
    d = generator.n_regimes
    lam = generator.intensities
    counts = np.zeros((times.size, d))
    comp = np.zeros((times.size, d))
    for k, t in enumerate(times):
        sel = path.times <= t
        np.add.at(counts[k], path.states[sel].astype(int), 1.0)
        occ = occupation_times(path, t, d)
        comp[k] = occ @ lam
    return CountingData(times, counts, comp)


def transition_probability(generator: RegimeGenerator, t: float, tol: float = 1e-15) -> np.ndarray:
    """exp(t Q) by scaling and squaring of a truncated Taylor series."""
    q = generator.matrix * float(t)
    norm = float(np.abs(q).sum(axis=1).max())
    s = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    a = q / 2.0**s
    term = np.eye(q.shape[0])
    out = term.copy()
    for k in range(1, 40):
        term = term @ a / k
        out = out + term
        if np.abs(term).max() < tol:
            break
    for _ in range(s):
        out = out @ out
    return out


def export_chain_csv(path: ChainPath) -> str:
    """CSV text with columns time,state_index (1-based), initial row plus one row per jump."""
    lines = ["time,state_index", f"{0.0!r},{path.initial_state + 1}"]
    for t, s in zip(path.times, path.states):
        lines.append(f"{float(t)!r},{int(s) + 1}")
    return "\n".join(lines) + "\n"
