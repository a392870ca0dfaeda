"""Differentiable MAXSAT layer via low-rank semidefinite relaxation.

The layer holds a learnable clause matrix S acting on columns
[truth | N*K one-hot variables | n_aux auxiliaries]. A forward pass embeds
input probabilities as fixed unit vectors on the truth/orthogonal plane,
runs block coordinate descent on the free columns (the mixing update
g_i = V S^T s_i - |s_i|^2 v_i, v_i <- -g_i/|g_i|), and decodes output
probabilities as z_i = acos(-v_i . v_truth)/pi. The backward pass unrolls
the recorded descent trace; see _mixkernels for the compiled loops.

Also provides CNF encoding into S, an exhaustive MAXSAT oracle for
validation, block permutation of the variable columns, and binary
checkpoint IO.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _mixkernels, containers
from .autodiff import EPS, Function, Tensor
from .errors import ContractError, ShapeError

ACOS_CLIP = 1.0 - 1e-12


@dataclass
class MaxsatProblem:
    """Weighted CNF over m variables, optionally partitioned input/output.

    Clauses are tuples of nonzero 1-based literals (negative = negated).
    When k_in is given, variables 1..k_in are the fixed inputs and the
    rest are outputs.
    """

    m: int
    clauses: list
    weights: list = None
    k_in: int = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = [1.0] * len(self.clauses)
        if len(self.weights) != len(self.clauses):
            raise ShapeError("one weight per clause required")
        if self.k_in is not None and not 1 <= self.k_in <= self.m:
            raise ContractError(f"k_in must be in [1, m], got {self.k_in}")
        for clause in self.clauses:
            if len(clause) == 0:
                raise ContractError("empty clause")
            for lit in clause:
                if lit == 0 or abs(lit) > self.m:
                    raise ContractError(f"literal {lit} out of range for m={self.m}")
        if any(w < 0 for w in self.weights):
            raise ContractError("clause weights must be nonnegative")


def satisfied_weight(problem, assignment):
    """Total weight of clauses satisfied by a boolean assignment (index 0 = var 1)."""
    total = 0.0
    for clause, w in zip(problem.clauses, problem.weights):
        for lit in clause:
            val = assignment[abs(lit) - 1]
            if (lit > 0) == bool(val):
                total += w
                break
    return total


def brute_force_maxsat(problem, fixed=None):
    """Exhaustive MAXSAT oracle; ties broken by lexicographically smallest assignment.

    `fixed` maps 1-based variable indices to booleans. Refuses more than 22
    free variables.
    """
    fixed = dict(fixed or {})
    free_vars = [v for v in range(1, problem.m + 1) if v not in fixed]
    nf = len(free_vars)
    if nf > 22:
        raise ContractError(f"{nf} free variables exceed the brute-force limit of 22")
    n = 1 << nf
    codes = np.arange(n, dtype=np.int64)
    values = np.empty((problem.m, n), dtype=bool)
    for v, val in fixed.items():
        values[v - 1] = val
    # var order: earlier free variable = more significant bit, so ascending
    # code order is lexicographic order with False < True
    for pos, v in enumerate(free_vars):
        values[v - 1] = (codes >> (nf - 1 - pos)) & 1
    total = np.zeros(n)
    for clause, w in zip(problem.clauses, problem.weights):
        sat = np.zeros(n, dtype=bool)
        for lit in clause:
            sat |= values[abs(lit) - 1] if lit > 0 else ~values[abs(lit) - 1]
        total += w * sat
    best = int(np.argmax(total))  # first max = lexicographically smallest
    assignment = tuple(bool(values[v - 1][best]) for v in range(1, problem.m + 1))
    return assignment, float(total[best])


@dataclass
class ClauseWeights:
    """Learnable relaxation matrix S plus its block structure.

    Columns: 1 truth direction, then n_cells blocks of n_classes variable
    columns, then n_aux auxiliary columns.
    """

    S: np.ndarray
    rank: int
    n_aux: int
    n_cells: int
    n_classes: int = 1

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.rank < 2:
            raise ContractError(f"relaxation rank must be >= 2, got {self.rank}")
        if not np.all(np.isfinite(self.S)):
            raise ContractError("clause weights contain non-finite entries")
        if self.S.ndim != 2 or self.S.shape[1] != self.n_columns:
            raise ShapeError(
                f"S has shape {self.S.shape}, expected (*, {self.n_columns})")

    @property
    def n_vars(self):
        return self.n_cells * self.n_classes

    @property
    def n_columns(self):
        return 1 + self.n_vars + self.n_aux

    @property
    def n_clauses(self):
        return self.S.shape[0]


def default_rank(n_columns):
    """Relaxation dimension: ceil(sqrt(2 * columns)) + 1."""
    return int(math.ceil(math.sqrt(2.0 * n_columns))) + 1


def random_weights(n_clauses, n_cells, n_classes, n_aux, seed=0):
    """Gaussian-initialized clause weights, sigma = 1/sqrt(columns)."""
    cols = 1 + n_cells * n_classes + n_aux
    rng = np.random.default_rng(seed)
    S = rng.normal(0.0, 1.0 / math.sqrt(cols), size=(n_clauses, cols))
    return ClauseWeights(S, default_rank(cols), n_aux, n_cells, n_classes)


def encode_cnf(problem, rank=None, n_aux=0):
    """Map an explicit CNF into relaxation weights.

    Each clause becomes one row with entries sign/sqrt(4*len) at its
    literal columns and -1/sqrt(4*len) in the truth column, scaled by the
    square root of the clause weight.
    """
    if not problem.clauses:
        raise ContractError("clause list is empty")
    cols = 1 + problem.m + n_aux
    S = np.zeros((len(problem.clauses), cols))
    for row, (clause, w) in enumerate(zip(problem.clauses, problem.weights)):
        scale = math.sqrt(w) / math.sqrt(4.0 * len(clause))
        S[row, 0] = -scale
        for lit in clause:
            S[row, abs(lit)] = scale if lit > 0 else -scale
    if rank is None:
        rank = default_rank(cols)
    return ClauseWeights(S, rank, n_aux, problem.m, 1)


def permute_blocks(weights, P, n_cells):
    """Reorder the class columns of every cell block by permutation matrix P.

    Truth and auxiliary columns are untouched. Together with the same
    permutation applied to the one-hot input blocks this leaves the layer's
    outputs equivariant.
    """
    P = np.asarray(P, dtype=np.float64)
    K = P.shape[0]
    if P.shape != (K, K):
        raise ShapeError(f"P must be square, got {P.shape}")
    if not (np.all((P == 0) | (P == 1))
            and np.all(P.sum(axis=0) == 1) and np.all(P.sum(axis=1) == 1)):
        raise ContractError("P is not a permutation matrix")
    cols = weights.S.shape[1]
    if cols != 1 + n_cells * K + weights.n_aux:
        raise ShapeError(
            f"column count {cols} != 1 + {n_cells}*{K} + {weights.n_aux}")
    S = weights.S.copy()
    for c in range(n_cells):
        lo = 1 + c * K
        S[:, lo:lo + K] = S[:, lo:lo + K] @ P
    return ClauseWeights(S, weights.rank, weights.n_aux, n_cells, K)


class SolveTrace:
    """Unrolled forward record consumed exactly once by the backward pass."""

    def __init__(self, V, x_raw, free, nf, nsweeps, vold, gnorms, z_in, fixed_mask, layer):
        self.V = V
        self.x_raw = x_raw
        self.free = free
        self.nf = nf
        self.nsweeps = nsweeps
        self.vold = vold
        self.gnorms = gnorms
        self.z_in = z_in
        self.fixed_mask = fixed_mask
        self.layer = layer
        self.consumed = False


class MixingLayer:
    """Differentiable MAXSAT layer around a ClauseWeights matrix.

    Init vectors are derived deterministically from `seed`: each cell gets
    one unit vector orthogonal to the truth direction, shared by its K
    columns so that relabeling classes permutes solutions exactly; each
    auxiliary column gets its own.
    """

    def __init__(self, weights, max_iters=40, tol=1e-4, seed=0):
        if tol <= 0:
            raise ContractError(f"tol must be positive, got {tol}")
        if not np.all(np.isfinite(weights.S)):
            raise ContractError("clause weights contain non-finite entries")
        self.weights = weights
        self.max_iters = max_iters
        self.tol = tol
        self.seed = seed
        r = weights.rank
        rng = np.random.default_rng(seed)
        basis = rng.normal(size=(weights.n_cells + weights.n_aux, r - 1))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        self.unit_cell = np.zeros((weights.n_cells, r))
        self.unit_cell[:, 1:] = basis[:weights.n_cells]
        self.unit_aux = np.zeros((weights.n_aux, r))
        self.unit_aux[:, 1:] = basis[weights.n_cells:]

    # -- plumbing ------------------------------------------------------

    def _build_state(self, z_in, fixed_mask):
        w = self.weights
        B, nv = z_in.shape
        cols, r = w.n_columns, w.rank
        K = w.n_classes
        V = np.zeros((B, cols, r))
        V[:, 0, 0] = 1.0  # truth direction pinned to e_0
        cell_units = np.repeat(self.unit_cell, K, axis=0)  # (nv, r)
        V[:, 1:1 + nv, :] = cell_units[None, :, :]
        if w.n_aux:
            V[:, 1 + nv:, :] = self.unit_aux[None, :, :]
        ang = np.pi * z_in
        sin, cos = np.sin(ang), np.cos(ang)
        fm = fixed_mask
        V[:, 1:1 + nv, :] = np.where(fm[:, :, None],
                                     sin[:, :, None] * cell_units[None, :, :],
                                     V[:, 1:1 + nv, :])
        V[:, 1:1 + nv, 0] = np.where(fm, -cos, V[:, 1:1 + nv, 0])
        # free columns: variable columns of non-given cells, then all aux
        nf = (~fm).sum(axis=1) + w.n_aux
        nf_max = int(nf.max()) if B else 0
        free = np.zeros((B, max(nf_max, 1)), dtype=np.int32)
        for b in range(B):
            idx = np.flatnonzero(~fm[b]) + 1
            free[b, :idx.size] = idx
            free[b, idx.size:idx.size + w.n_aux] = np.arange(1 + nv, cols, dtype=np.int32)
        return V, free, nf.astype(np.int64)

    def _decode(self, V):
        nv = self.weights.n_vars
        x = -V[:, 1:1 + nv, 0]
        z = np.arccos(np.clip(x, -ACOS_CLIP, ACOS_CLIP)) / np.pi
        return z, x

    # -- forward / backward ---------------------------------------------

    def solve(self, z_in, input_mask, want_trace=False, max_iters=None, tol=None):
        """Run the relaxation; returns (z_out, trace-or-None).

        z_in: probabilities, shape (nv,) or (B, nv); input_mask: booleans of
        the same shape marking the fixed variables.
        """
        z_in = np.asarray(z_in, dtype=np.float64)
        squeeze = z_in.ndim == 1
        if squeeze:
            z_in = z_in[None, :]
        fixed = np.asarray(input_mask, dtype=bool)
        if fixed.ndim == 1:
            fixed = np.broadcast_to(fixed[None, :], z_in.shape).copy()
        if z_in.shape != fixed.shape or z_in.shape[1] != self.weights.n_vars:
            raise ShapeError(f"z_in {z_in.shape} / mask {fixed.shape} / "
                             f"n_vars {self.weights.n_vars}")
        if np.any((z_in < 0) | (z_in > 1)) or not np.all(np.isfinite(z_in)):
            raise ContractError("z_in entries must lie in [0, 1]")
        max_iters = self.max_iters if max_iters is None else max_iters
        tol = self.tol if tol is None else tol
        if tol <= 0:
            raise ContractError(f"tol must be positive, got {tol}")

        V, free, nf = self._build_state(z_in, fixed)
        B, cols, r = V.shape
        Om = self.weights.S.T @ self.weights.S
        nsweeps = np.zeros(B, dtype=np.int64)
        if want_trace:
            vold = np.zeros((B, max_iters, free.shape[1], r))
            gnorms = np.zeros((B, max_iters, free.shape[1]))
        else:
            vold = np.zeros((1, 1, 1, 1))
            gnorms = np.zeros((1, 1, 1))
        _mixkernels.mix_forward(V, Om, free, nf, max_iters, tol,
                                vold, gnorms, nsweeps, want_trace)
        z, x_raw = self._decode(V)
        trace = None
        if want_trace:
            trace = SolveTrace(V, x_raw, free, nf, nsweeps, vold, gnorms,
                               z_in, fixed, self)
        return (z[0] if squeeze else z), trace

    def backward(self, trace, dz):
        """Gradients of sum(dz * z_out) w.r.t. z_in and S, from an unrolled trace."""
        if trace is None or trace.consumed:
            raise ContractError("forward trace was discarded or already consumed")
        trace.consumed = True
        w = self.weights
        dz = np.asarray(dz, dtype=np.float64)
        squeeze = dz.ndim == 1
        if squeeze:
            dz = dz[None, :]
        B, cols, r = trace.V.shape
        nv = w.n_vars
        # seed dV from the acos decode: dz/dV[c,0] = 1/(pi*sqrt(1-x^2)) inside the clip
        dV = np.zeros_like(trace.V)
        x = trace.x_raw
        inside = np.abs(x) < ACOS_CLIP
        dV[:, 1:1 + nv, 0] = np.where(inside, dz / (np.pi * np.sqrt(1.0 - x * x)), 0.0)
        Om = w.S.T @ w.S
        dOm = np.zeros((B, cols, cols))
        _mixkernels.mix_backward(trace.V, dV, Om, trace.free, trace.nf,
                                 trace.nsweeps, trace.vold, trace.gnorms, dOm)
        dOm_total = dOm.sum(axis=0)
        dS = w.S @ (dOm_total + dOm_total.T)
        # fixed-column init: v = -cos(pi z) e0 + sin(pi z) u_cell
        K = w.n_classes
        cell_units = np.repeat(self.unit_cell, K, axis=0)
        ang = np.pi * trace.z_in
        d_e0 = np.pi * np.sin(ang) * dV[:, 1:1 + nv, 0]
        d_u = np.pi * np.cos(ang) * np.einsum("bvr,vr->bv", dV[:, 1:1 + nv, 1:],
                                              cell_units[:, 1:])
        dz_in = np.where(trace.fixed_mask, d_e0 + d_u, 0.0)
        return (dz_in[0] if squeeze else dz_in), dS

    def __call__(self, z_in, input_mask):
        """Autodiff entry point: z_in is a Tensor, S participates as a parameter."""
        return _MixsatFn.apply(z_in, self._s_tensor(), input_mask, self)

    def _s_tensor(self):
        if not hasattr(self, "_param"):
            self._param = Tensor(self.weights.S, requires_grad=True)
        self._param.data = self.weights.S  # stays aliased
        return self._param

    @property
    def parameter(self):
        return self._s_tensor()


class _MixsatFn(Function):
    def forward(self, z_in, S, input_mask, layer):
        self.layer = layer
        z, self.trace = layer.solve(z_in, input_mask, want_trace=True)
        return z

    def backward(self, grad):
        dz_in, dS = self.layer.backward(self.trace, grad)
        return dz_in, dS


def forward(z_in, input_mask, weights, max_iters=40, tol=1e-4, seed=0,
            check_invariants=False):
    """One-shot functional front end over MixingLayer.solve.

    check_invariants routes through the numpy reference solver, asserting
    unit norms and per-sweep objective monotonicity.
    """
    layer = MixingLayer(weights, max_iters=max_iters, tol=tol, seed=seed)
    if not check_invariants:
        z, _ = layer.solve(z_in, input_mask)
        return z
    z_in = np.asarray(z_in, dtype=np.float64)
    if z_in.ndim != 1:
        raise ShapeError("check_invariants path expects a single instance")
    V, free, nf = layer._build_state(z_in[None, :], np.asarray(input_mask, bool)[None, :])
    Om = weights.S.T @ weights.S
    Vout, _ = _mixkernels.reference_forward(V[0], Om, free[0, :nf[0]], max_iters, tol,
                                            check_invariants=True)
    z, _ = layer._decode(Vout[None])
    return z[0]


def save_weights(path, weights):
    containers.write_container(
        path, containers.MAGIC_WEIGHTS,
        [weights.n_clauses, weights.n_cells, weights.n_classes, weights.n_aux,
         weights.rank],
        weights.S.ravel())


def load_weights(path):
    dims, payload = containers.read_container(path, containers.MAGIC_WEIGHTS)
    n_clauses, n_cells, n_classes, n_aux, rank = dims
    cols = 1 + n_cells * n_classes + n_aux
    S = payload.reshape(n_clauses, cols)
    return ClauseWeights(S, int(rank), int(n_aux), int(n_cells), int(n_classes))
