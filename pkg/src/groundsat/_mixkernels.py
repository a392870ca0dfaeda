"""Compiled inner loops for the low-rank MAXSAT relaxation solver.

Layout conventions shared with mixsat.py:
  V   (B, cols, r)  row c is the unit vector for relaxation column c;
                    column 0 of the r-axis is the truth-direction coordinate
                    because the truth vector is pinned to e_0.
  Om  (cols, cols)  Gram matrix S^T S of the clause weights.
  free (B, nf_max)  int32 indices of the columns updated per board; the
                    first nf[b] entries are valid.

The backward kernel consumes the forward trace (pre-update column values
and gradient norms per update) and unwinds V in place back to its initial
state while scattering gradients into dV and per-board dOm accumulators.
The update g = sum_{c != i} Om[i,c] v_c has zero net dependence on the old
v_i and on Om[i,i] (the two diagonal terms cancel), so neither receives a
gradient contribution.
"""

import numpy as np
from numba import njit, prange

DEGENERATE_NORM = 1e-12  # below this the column is left unchanged


@njit(parallel=True, fastmath=True, cache=True)
def mix_forward(V, Om, free, nf, max_sweeps, tol, vold_tr, gn_tr, nsweeps, want_trace):
    B, cols, r = V.shape
    for b in prange(B):
        used = max_sweeps
        g = np.empty(r)
        for s in range(max_sweeps):
            maxmove = 0.0
            for t in range(nf[b]):
                i = free[b, t]
                for j in range(r):
                    g[j] = 0.0
                for c in range(cols):
                    w = Om[i, c]
                    for j in range(r):
                        g[j] += w * V[b, c, j]
                wii = Om[i, i]
                gn = 0.0
                for j in range(r):
                    g[j] -= wii * V[b, i, j]
                    gn += g[j] * g[j]
                gn = np.sqrt(gn)
                if want_trace:
                    for j in range(r):
                        vold_tr[b, s, t, j] = V[b, i, j]
                    gn_tr[b, s, t] = gn
                if gn < DEGENERATE_NORM:
                    continue
                move = 0.0
                for j in range(r):
                    nv = -g[j] / gn
                    d = nv - V[b, i, j]
                    move += d * d
                    V[b, i, j] = nv
                if move > maxmove:
                    maxmove = move
            if np.sqrt(maxmove) < tol:
                used = s + 1
                break
        nsweeps[b] = used


@njit(parallel=True, fastmath=True, cache=True)
def mix_backward(V, dV, Om, free, nf, nsweeps, vold_tr, gn_tr, dOm):
    B, cols, r = V.shape
    for b in prange(B):
        dg = np.empty(r)
        for s in range(nsweeps[b] - 1, -1, -1):
            for t in range(nf[b] - 1, -1, -1):
                i = free[b, t]
                gn = gn_tr[b, s, t]
                if gn < DEGENERATE_NORM:
                    continue  # column never moved; value gradient passes through
                dot = 0.0
                for j in range(r):
                    dot += V[b, i, j] * dV[b, i, j]
                for j in range(r):
                    dg[j] = (V[b, i, j] * dot - dV[b, i, j]) / gn
                    dV[b, i, j] = 0.0
                for c in range(cols):
                    if c == i:
                        continue
                    w = Om[i, c]
                    acc = 0.0
                    for j in range(r):
                        dV[b, c, j] += w * dg[j]
                        acc += V[b, c, j] * dg[j]
                    dOm[b, c, i] += acc
                for j in range(r):
                    V[b, i, j] = vold_tr[b, s, t, j]


def reference_forward(V0, Om, free_idx, max_sweeps, tol, check_invariants=False):
    """Single-board numpy mirror of mix_forward, used as a test oracle.

    With check_invariants=True every sweep asserts the unit-norm invariant
    on updated columns and that the relaxation objective <Om, V^T V> did
    not increase (1e-10 slack).
    """
    V = V0.copy()
    sweeps = 0
    objective = float(((V @ V.T) * Om).sum()) if check_invariants else 0.0
    for _ in range(max_sweeps):
        maxmove = 0.0
        for i in free_idx:
            g = Om[i] @ V - Om[i, i] * V[i]
            gn = float(np.linalg.norm(g))
            if gn < DEGENERATE_NORM:
                continue
            vnew = -g / gn
            maxmove = max(maxmove, float(np.linalg.norm(vnew - V[i])))
            V[i] = vnew
        sweeps += 1
        if check_invariants:
            norms = np.linalg.norm(V[free_idx], axis=1)
            assert np.all(np.abs(norms[norms > 0] - 1.0) < 1e-9), "unit-norm invariant broken"
            new_objective = float(((V @ V.T) * Om).sum())
            assert new_objective <= objective + 1e-10, (
                f"objective increased: {objective} -> {new_objective}")
            objective = new_objective
        if maxmove < tol:
            break
    return V, sweeps
