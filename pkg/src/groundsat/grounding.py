"""Symbol grounding: aligning cluster-space predictions with label space.

The classifier and the constraint layer operate in an arbitrary cluster
basis (pre-trained encoding, PTE) while dataset labels live in the true
class basis (label encoding, LE); the two are related by an unknown K x K
permutation. The grounding loss

    1 - mean_i( approxmax_j( exp[-BCE(y(j), yhat(i))] ) )

is minimized exactly when the prediction columns are a permutation of the
label columns, and the inner matrix exp[-BCE] is itself the permutation
estimate. All quantities are computed over labeled (output-mask) rows
only, so input-cell labels can never leak through this path.
"""

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import EPS, Tensor
from .errors import ConfigError, ContractError, ShapeError

PTE = "PTE"
LE = "LE"


@dataclass
class EncodedPredictions:
    """N x K probability matrix tagged with its encoding basis.

    `mask` marks the rows that carry labels (the output cells).
    """

    values: np.ndarray
    encoding: str
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.encoding not in (PTE, LE):
            raise ContractError(f"encoding must be PTE or LE, got {self.encoding!r}")
        if self.values.ndim != 2 or self.mask.shape != (self.values.shape[0],):
            raise ShapeError(f"values {self.values.shape} vs mask {self.mask.shape}")
        if not self.mask.any():
            raise ContractError("output mask is empty")
        if np.any((self.values < 0) | (self.values > 1)) or not np.all(np.isfinite(self.values)):
            raise ContractError("prediction entries must lie in [0, 1]")


@dataclass
class PermutationEstimate:
    """Soft estimate P_hat plus its row-argmax rounding."""

    P_hat: np.ndarray
    converged: bool
    hard: np.ndarray

    def __post_init__(self):
        self.P_hat = np.asarray(self.P_hat, dtype=np.float64)
        self.hard = np.asarray(self.hard, dtype=np.float64)
        if np.any((self.P_hat < 0) | (self.P_hat > 1)):
            raise ContractError("P_hat entries must lie in [0, 1]")
        if self.converged and not _is_permutation(self.hard):
            raise ContractError("converged estimate must carry a permutation matrix")


def _is_permutation(M):
    return (M.ndim == 2 and M.shape[0] == M.shape[1]
            and np.all((M == 0) | (M == 1))
            and np.all(M.sum(axis=0) == 1) and np.all(M.sum(axis=1) == 1))


def _pair_rows(y_hat, y):
    if y_hat.encoding != PTE or y.encoding != LE:
        raise ContractError("expected (PTE predictions, LE labels)")
    if y_hat.values.shape[1] != y.values.shape[1]:
        raise ShapeError(f"class counts differ: {y_hat.values.shape[1]} "
                         f"vs {y.values.shape[1]}")
    if y_hat.values.shape[0] != y.values.shape[0] or not np.array_equal(y_hat.mask, y.mask):
        raise ShapeError("prediction and label masks must agree")
    return y_hat.values[y_hat.mask], y.values[y.mask]


def cross_bce_matrix(values, labels):
    """Matrix M[i, j] = exp[-BCE(labels(:,j), values(:,i))] built from graph ops.

    `values` may be a Tensor (for training) or an ndarray; `labels` is a
    constant 0/1 matrix. Rows of M index prediction columns (PTE classes),
    columns index label columns (LE classes).
    """
    wrapped = values if isinstance(values, Tensor) else Tensor(values)
    n = wrapped.shape[0]
    labels = np.asarray(labels, dtype=np.float64)
    wc = wrapped.clamp(EPS, 1.0 - EPS)
    # T[i,j] = sum_k labels[k,j]*log w[k,i] + (1-labels[k,j])*log(1-w[k,i])
    T = wc.log().T @ Tensor(labels) + (1.0 - wc).log().T @ Tensor(1.0 - labels)
    return (T * (1.0 / n)).exp()


def _reduce(M, approxmax, p, tau):
    if approxmax == "exact_max":
        return M.max(axis=1)
    if approxmax == "two_norm":
        return M.pnorm(2.0, axis=1)
    if approxmax == "p_norm":
        if p is None or p < 1:
            raise ConfigError(f"p_norm reduction needs p >= 1, got {p}")
        return M.pnorm(float(p), axis=1)
    if approxmax == "logsumexp":
        if tau is None or tau <= 0:
            raise ConfigError(f"logsumexp reduction needs tau > 0, got {tau}")
        return (M * (1.0 / tau)).exp().sum(axis=1).log() * tau
    raise ConfigError(f"unknown approxmax reduction {approxmax!r}")


def sgl_core(values, labels, approxmax="two_norm", p=None, tau=None):
    """Grounding loss on already-masked rows; Tensor in, Tensor out."""
    M = cross_bce_matrix(values, labels)
    return 1.0 - _reduce(M, approxmax, p, tau).mean()


def sgl(y_hat, y, approxmax="two_norm", p=None, tau=None):
    """Relaxed grounding loss between PTE predictions and LE labels."""
    vh, vy = _pair_rows(y_hat, y)
    return float(sgl_core(vh, vy, approxmax, p, tau).data)


def sgl_exact(y_hat, y):
    """Grounding loss with the exact max reduction (the analysis form)."""
    return sgl(y_hat, y, approxmax="exact_max")


def extract_permutation(y_hat, y):
    """Soft permutation P_hat[i,j] = exp[-BCE(y(j), yhat(i))] plus hard rounding."""
    vh, vy = _pair_rows(y_hat, y)
    P_hat = cross_bce_matrix(vh, vy).data
    K = P_hat.shape[0]
    hard = np.zeros((K, K))
    hard[np.arange(K), P_hat.argmax(axis=1)] = 1.0
    return PermutationEstimate(P_hat, False, hard)


def permutation_converged(est, row_margin=0.9):
    """True when row-normalized P_hat is margin-dominant with distinct argmaxes."""
    if not 0.0 < row_margin < 1.0:
        raise ContractError(f"row_margin must be in (0, 1), got {row_margin}")
    P = est.P_hat
    sums = P.sum(axis=1)
    if np.any(sums <= 0):
        return False
    normalized = P / sums[:, None]
    argmaxes = normalized.argmax(axis=1)
    if len(set(argmaxes.tolist())) != P.shape[0]:
        return False
    return bool(np.all(normalized.max(axis=1) >= row_margin))


def mark_converged(est):
    return replace(est, converged=True)


def apply_grounding(y_hat, est):
    """Translate PTE predictions into LE by the hard permutation."""
    if not est.converged:
        raise ContractError("apply_grounding requires a converged estimate")
    if y_hat.encoding != PTE:
        raise ContractError("apply_grounding expects PTE predictions")
    return EncodedPredictions(y_hat.values @ est.hard, LE, y_hat.mask)


def best_permutation_assignment(P_hat):
    """Exhaustive argmax over permutations of sum_i P_hat[i, sigma(i)] (K <= 9)."""
    from itertools import permutations

    K = P_hat.shape[0]
    if K > 9:
        raise ContractError("exhaustive permutation search limited to K <= 9")
    best, best_score = None, -np.inf
    for perm in permutations(range(K)):
        score = sum(P_hat[i, perm[i]] for i in range(K))
        if score > best_score:
            best, best_score = perm, score
    hard = np.zeros((K, K))
    for i, j in enumerate(best):
        hard[i, j] = 1.0
    return hard


def export_permutation(path, est):
    """Plain-text dump: K, the soft matrix, and the hard map as an index list."""
    K = est.P_hat.shape[0]
    lines = [f"K {K}", f"converged {int(est.converged)}"]
    for row in est.P_hat:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    lines.append("hard " + " ".join(str(int(j)) for j in est.hard.argmax(axis=1)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
