"""Least-squares conditional expectations on polynomial bases with martingale-increment columns."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

EIG_RATIO = 1e-12
RIDGE = 1e-8


def monomials(dim: int, degree: int):
    """Exponent tuples of all monomials in dim variables of total degree <= degree."""
    out = [()]
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(dim), deg))
    return out


@dataclass
class Basis:
    """Standardised polynomial basis fitted to one regime's sample at one time."""

    mean: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    terms: list

    @staticmethod
    def fit(x: np.ndarray, degree: int, n_rows: int) -> "Basis":
        mean = x.mean(axis=0) if x.shape[0] else np.zeros(x.shape[1])
        std = x.std(axis=0) if x.shape[0] > 1 else np.zeros(x.shape[1])
        active = np.flatnonzero(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
        scale = np.where(std > 0, std, 1.0)
        deg = degree if active.size else 0
        terms = monomials(active.size, deg)
        # keep the system overdetermined when few rows are available
        while len(terms) > 1 and len(terms) * 4 > n_rows:
            deg -= 1
            terms = monomials(active.size, deg)
        return Basis(mean, scale, active, terms)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, self.active] - self.mean[self.active]) / self.scale[self.active]
        cols = [np.ones(x.shape[0])]
        for term in self.terms[1:]:
            c = z[:, term[0]].copy()
            for i in term[1:]:
                c *= z[:, i]
            cols.append(c)
        return np.stack(cols, axis=1)

    def describe(self) -> str:
        return f"{len(self.terms)} terms over coordinates {self.active.tolist()}"


def solve_normal(X: np.ndarray, Y: np.ndarray):
    """Least squares via normalised Gram matrix; ridge fallback when near-singular.

    Returns coefficients (K, m) and a flag telling whether ridge was used.
    """
    norms = np.sqrt((X**2).sum(axis=0))
    norms = np.where(norms > 0, norms, 1.0)
    Xs = X / norms
    G = Xs.T @ Xs
    rhs = Xs.T @ Y
    w = np.linalg.eigvalsh(G)
    flagged = bool(w[0] <= EIG_RATIO * max(w[-1], 1e-300))
    if flagged:
        G = G + RIDGE * np.trace(G) / G.shape[0] * np.eye(G.shape[0])
    try:
        c = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        c = np.linalg.lstsq(G, rhs, rcond=None)[0]
        flagged = True
    return c / norms[:, None], flagged


JUMP_ROWS_PER_TERM = 10


def _truncation(basis: Basis, rows: int) -> int:
    """Number of leading basis terms (complete degrees) supported by `rows` jump rows.

    Ten jump rows per term, except that the constant term needs four; with
    fewer than four the block is dropped.
    """
    if rows < 4:
        return 0
    deg = max((len(t) for t in basis.terms), default=0)
    while deg > 0 and len(monomials(basis.active.size, deg)) * JUMP_ROWS_PER_TERM > rows:
        deg -= 1
    return len(monomials(basis.active.size, deg))


def joint_projection(x, dw, dpt, y, degree, jumps=None):
    """Regress y on [phi(x), phi(x) dW_l, phi(x) dPhiTilde_j] jointly.

    The block of target j keeps only the basis terms of the degrees supported
    by the number of rows in which a jump into j occurred; with fewer than
    four such rows kappa_j is set to zero.

    Args:
        x: (n, L) regression state.
        dw: (n, d) Brownian increments.
        dpt: (n, J) compensated counting increments of admissible targets.
        y: (n, m) targets.
        degree: polynomial degree.
        jumps: (n, J) jump counts; when omitted every row counts as informative.

    Returns:
        cond (n, m), z (n, m, d), kappa (n, m, J), ridge flag, basis.
    """
    n = x.shape[0]
    d = dw.shape[1]
    J = dpt.shape[1]
    basis = Basis.fit(x, degree, n // (1 + d))
    phi = basis(x)
    K = phi.shape[1]
    counts = np.full(J, n) if jumps is None else (jumps > 0).sum(axis=0)
    kj = [min(K, _truncation(basis, int(c))) for c in counts]
    blocks = [phi] + [phi * dw[:, [l]] for l in range(d)] + [phi[:, : kj[j]] * dpt[:, [j]] for j in range(J)]
    X = np.concatenate(blocks, axis=1)
    coef, flagged = solve_normal(X, y)
    m = y.shape[1]
    cond = phi @ coef[:K]
    z = np.empty((n, m, d))
    for l in range(d):
        z[:, :, l] = phi @ coef[K * (1 + l) : K * (2 + l)]
    kap = np.empty((n, m, J))
    s = K * (1 + d)
    for j in range(J):
        kap[:, :, j] = phi[:, : kj[j]] @ coef[s : s + kj[j]]
        s += kj[j]
    return cond, z, kap, flagged, basis
