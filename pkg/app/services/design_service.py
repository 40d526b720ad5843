"""
Dense symmetric linear algebra and experimental-design solvers.

Every function here is pure: inputs are never mutated and no module state
is kept, so callers may use them from any number of threads or processes.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from app.core.config import settings
from app.core.exceptions import (
    BadShape,
    NoConvergence,
    NonFinite,
    RankDeficient,
    Singular,
    TooLarge,
)
from app.schemas.environment import FeatureSet
from app.schemas.linalg import DesignDistribution, EigenPair, SymMatrix

logger = logging.getLogger(__name__)

MatrixLike = Union[SymMatrix, np.ndarray]
ArmsLike = Union[FeatureSet, np.ndarray, Sequence[Sequence[float]]]

BRUTE_FORCE_MAX_ARMS = 6
BRUTE_FORCE_MAX_DIM = 3
BRUTE_FORCE_MAX_POINTS = 5_000_000


def argmax_lowest(values: np.ndarray, atol: float = 1e-12) -> int:
    """Index of the maximum, lowest index among values within atol of it."""
    values = np.asarray(values, dtype=float)
    return int(np.flatnonzero(values >= values.max() - atol)[0])


def _as_array(V: MatrixLike) -> np.ndarray:
    if isinstance(V, SymMatrix):
        return V.entries
    arr = np.asarray(V, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise BadShape(f"expected a square matrix, got shape {arr.shape}")
    return arr


def _as_features(arms: ArmsLike) -> Tuple[Tuple[int, ...], np.ndarray]:
    if isinstance(arms, FeatureSet):
        return arms.ids, arms.vectors
    X = np.asarray(arms, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise BadShape(f"expected an (n, d) array of vectors, got shape {X.shape}")
    return tuple(range(X.shape[0])), X


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains NaN or infinite entries")


def _require_span(X: np.ndarray, what: str) -> None:
    d = X.shape[1]
    rank = np.linalg.matrix_rank(X)
    if rank < d:
        raise RankDeficient(f"{what} span a {rank}-dimensional subspace of R^{d}")


def information_matrix(X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """V(pi) = sum_a pi(a) a a^T."""
    return X.T @ (weights[:, None] * X)


def g_values(X: np.ndarray, V: np.ndarray) -> np.ndarray:
    """a^T V^-1 a for every row a of X."""
    factor = scipy.linalg.cho_factor(V, lower=True, check_finite=False)
    return np.einsum("ij,ji->i", X, scipy.linalg.cho_solve(factor, X.T, check_finite=False))


def span_basis(X: np.ndarray, rcond: float = 1e-9) -> np.ndarray:
    """Orthonormal basis (d x r) of the span of the rows of X."""
    return scipy.linalg.orth(np.asarray(X, dtype=float).T, rcond=rcond)


def spectral_decompose(V: MatrixLike) -> List[EigenPair]:
    """
    Eigendecomposition of a symmetric PSD matrix.

    Returns d eigenpairs with values in descending order and mutually
    orthonormal vectors. Round-off negatives in [-1e-9, 0) are reported as 0.

    Raises:
        NonFinite: If any entry is NaN or infinite
        BadShape: If the matrix is not square or has an eigenvalue below -1e-9
    """
    entries = _as_array(V)
    _require_finite(entries, "matrix")
    values, vectors = scipy.linalg.eigh(entries)
    if values[0] < -1e-9:
        raise BadShape(f"matrix is not positive semidefinite (eigenvalue {values[0]:.3e})")
    pairs = []
    for j in range(len(values) - 1, -1, -1):
        value = float(values[j])
        pairs.append(EigenPair(value=max(value, 0.0), vector=vectors[:, j]))
    return pairs


def _initial_support(X: np.ndarray) -> np.ndarray:
    """d rows of X picked by greedy volume maximization (pivoted QR on X^T)."""
    d = X.shape[1]
    _, _, pivots = scipy.linalg.qr(X.T, mode="economic", pivoting=True)
    return np.sort(pivots[:d])


def g_optimal_design(
    arms: ArmsLike,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> DesignDistribution:
    """
    Compute a G-optimal design over ``arms`` with Frank-Wolfe.

    Starts from the uniform distribution over a greedily chosen maximal-volume
    d-subset and alternates toward steps (onto the arm with the largest
    variance) and away steps (off the support arm with the smallest one), both
    with the closed-form step gamma = (g/d - 1) / (g - 1). Stops once
    max_a a^T V(pi)^-1 a <= d (1 + tol), then drops weights below the pruning
    threshold if the pruned design still meets the tolerance and reduces the
    support to at most d(d+1)/2 arms.

    Args:
        arms: Arm set or (n, d) array of arm vectors spanning R^d
        tol: Relative optimality tolerance (settings.DESIGN_TOL by default)
        max_iter: Iteration cap (settings.DESIGN_MAX_ITER by default)

    Returns:
        DesignDistribution with weights keyed by arm id

    Raises:
        RankDeficient: If the arms do not span R^d
        NoConvergence: If max_iter iterations do not reach the tolerance
    """
    tol = settings.DESIGN_TOL if tol is None else tol
    max_iter = settings.DESIGN_MAX_ITER if max_iter is None else max_iter
    if tol <= 0:
        raise ValueError("tol must be positive")

    ids, X = _as_features(arms)
    _require_finite(X, "arm vectors")
    _require_span(X, "arms")
    n, d = X.shape
    target = d * (1.0 + tol)

    weights = np.zeros(n)
    weights[_initial_support(X)] = 1.0 / d

    iteration = 0
    while True:
        V = information_matrix(X, weights)
        g = g_values(X, V)
        j_plus = argmax_lowest(g)
        g_max = float(g[j_plus])
        if g_max <= target:
            break
        if iteration >= max_iter:
            logger.error(
                f"[DESIGN_SERVICE] Frank-Wolfe stalled at g={g_max:.6f} (target {target:.6f})"
            )
            raise NoConvergence(
                f"G-optimal design did not reach g <= {target:.6f} in {max_iter} iterations"
            )
        iteration += 1

        support = np.flatnonzero(weights > 0.0)
        j_minus = int(support[np.argmin(g[support])])
        g_min = float(g[j_minus])
        if g_max / d - 1.0 >= 1.0 - g_min / d or g_min - 1.0 <= 1e-12:
            gamma = (g_max / d - 1.0) / (g_max - 1.0)
            weights *= 1.0 - gamma
            weights[j_plus] += gamma
        else:
            w_minus = weights[j_minus]
            gamma = (g_min / d - 1.0) / (g_min - 1.0)
            drop = -w_minus / (1.0 - w_minus)
            if gamma <= drop:
                gamma = drop
            weights *= 1.0 - gamma
            weights[j_minus] += gamma
            if gamma == drop or weights[j_minus] < 1e-15:
                weights[j_minus] = 0.0
        weights /= weights.sum()

    weights, V, g_max = _prune(X, weights, V, g_max, target)
    weights, V, g_max = _reduce_support(X, weights, V, g_max, target)
    support_size = int(np.count_nonzero(weights > settings.DESIGN_PRUNE_THRESHOLD))
    if support_size > d * (d + 1) // 2:
        logger.warning(
            f"[DESIGN_SERVICE] Design support {support_size} exceeds d(d+1)/2={d * (d + 1) // 2}"
        )
    logger.debug(
        f"[DESIGN_SERVICE] G-optimal design on {n} arms in R^{d}: "
        f"g={g_max:.5f}, support={support_size}, iterations={iteration}"
    )
    return DesignDistribution(
        weights={arm_id: float(w) for arm_id, w in zip(ids, weights)},
        info_matrix=SymMatrix(entries=V, psd=True),
        g_value=g_max,
        iterations=iteration,
    )


def _prune(
    X: np.ndarray, weights: np.ndarray, V: np.ndarray, g_max: float, target: float
) -> Tuple[np.ndarray, np.ndarray, float]:
    pruned = np.where(weights < settings.DESIGN_PRUNE_THRESHOLD, 0.0, weights)
    if np.array_equal(pruned, weights):
        return weights, V, g_max
    pruned /= pruned.sum()
    try:
        V_pruned = information_matrix(X, pruned)
        g_pruned = float(np.max(g_values(X, V_pruned)))
    except np.linalg.LinAlgError:
        g_pruned = math.inf
    if g_pruned <= target:
        return pruned, V_pruned, g_pruned
    logger.warning(
        f"[DESIGN_SERVICE] Pruning raised g to {g_pruned:.6f}; keeping the unpruned design"
    )
    return weights, V, g_max


def _reduce_support(
    X: np.ndarray, weights: np.ndarray, V: np.ndarray, g_max: float, target: float
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Caratheodory reduction: move weight along null directions of
    [vec(a a^T); 1] until at most d(d+1)/2 arms remain. V is unchanged
    up to round-off.
    """
    d = X.shape[1]
    rows, cols = np.triu_indices(d)
    limit = len(rows)
    reduced = weights.copy()
    support = np.flatnonzero(reduced > 0.0)
    while len(support) > limit:
        chosen = support[: limit + 1]
        Xs = X[chosen]
        A = np.vstack([(Xs[:, rows] * Xs[:, cols]).T, np.ones(len(chosen))])
        null = scipy.linalg.null_space(A)
        if null.shape[1] == 0:
            # only unit-norm arms make the ones row redundant
            break
        z = null[:, 0]
        if not np.any(z > 1e-12):
            z = -z
        positive = np.flatnonzero(z > 1e-12)
        ratios = reduced[chosen[positive]] / z[positive]
        k = int(np.argmin(ratios))
        reduced[chosen] -= ratios[k] * z
        reduced[chosen[positive[k]]] = 0.0
        reduced[reduced < 0.0] = 0.0
        support = np.flatnonzero(reduced > 0.0)
    if np.array_equal(reduced, weights):
        return weights, V, g_max
    reduced /= reduced.sum()
    try:
        V_reduced = information_matrix(X, reduced)
        g_reduced = float(np.max(g_values(X, V_reduced)))
    except np.linalg.LinAlgError:
        g_reduced = math.inf
    if g_reduced <= target:
        return reduced, V_reduced, g_reduced
    logger.warning(
        f"[DESIGN_SERVICE] Support reduction raised g to {g_reduced:.6f}; keeping {int(np.count_nonzero(weights))} arms"
    )
    return weights, V, g_max


def _compositions(parts: int, total: int) -> np.ndarray:
    """All non-negative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    if parts == 2:
        head = np.arange(total + 1, dtype=np.int64)
        return np.column_stack([head, total - head])
    blocks = []
    for head in range(total + 1):
        rest = _compositions(parts - 1, total - head)
        blocks.append(np.column_stack([np.full(len(rest), head, dtype=np.int64), rest]))
    return np.vstack(blocks)


def brute_force_design(arms: ArmsLike, grid_step: float) -> DesignDistribution:
    """
    Exhaustive simplex-grid minimizer of g(pi), used as an oracle in tests.

    Raises:
        TooLarge: If more than 6 arms, d > 3, grid_step outside (0, 0.1] or the
            grid exceeds 5 million points
        RankDeficient: If the arms do not span R^d
    """
    ids, X = _as_features(arms)
    n, d = X.shape
    if n > BRUTE_FORCE_MAX_ARMS or d > BRUTE_FORCE_MAX_DIM:
        raise TooLarge(f"brute force handles at most 6 arms in d <= 3, got {n} arms in R^{d}")
    if not 0.0 < grid_step <= 0.1:
        raise TooLarge(f"grid_step must lie in (0, 0.1], got {grid_step}")
    _require_finite(X, "arm vectors")
    _require_span(X, "arms")

    resolution = int(round(1.0 / grid_step))
    points = math.comb(resolution + n - 1, n - 1)
    if points > BRUTE_FORCE_MAX_POINTS:
        raise TooLarge(f"simplex grid has {points} points")

    grid = _compositions(n, resolution).astype(float) / resolution
    outer = X[:, :, None] * X[:, None, :]
    best_value, best_weights = math.inf, None
    for start in range(0, len(grid), 200_000):
        chunk = grid[start : start + 200_000]
        V = np.einsum("pn,nij->pij", chunk, outer)
        dets = np.linalg.det(V)
        ok = dets > 1e-12
        if not np.any(ok):
            continue
        Vinv = np.linalg.inv(V[ok])
        values = np.einsum("ni,pij,nj->pn", X, Vinv, X).max(axis=1)
        pos = int(np.argmin(values))
        if values[pos] < best_value:
            best_value = float(values[pos])
            best_weights = chunk[np.flatnonzero(ok)[pos]]

    if best_weights is None:
        raise RankDeficient("no grid point yields an invertible information matrix")
    return DesignDistribution(
        weights={arm_id: float(w) for arm_id, w in zip(ids, best_weights)},
        info_matrix=SymMatrix(entries=information_matrix(X, best_weights), psd=True),
        g_value=best_value,
    )


def barycentric_spanner(vectors: ArmsLike, approx: float = 2.0) -> List[int]:
    """
    Return the ids of d vectors forming an ``approx``-barycentric spanner.

    Every input vector is a combination of the returned ones with all
    coefficients in [-approx, approx]. Swap-based construction that starts
    from the identity and only accepts swaps growing |det| by more than
    ``approx``, so it terminates.

    Raises:
        RankDeficient: If the vectors do not span R^d
    """
    if approx < 1.0:
        raise ValueError("approx must be at least 1")
    ids, X = _as_features(vectors)
    _require_finite(X, "vectors")
    _require_span(X, "vectors")
    d = X.shape[1]

    basis = np.eye(d)
    chosen: List[Optional[int]] = [None] * d
    for i in range(d):
        coefficients = scipy.linalg.solve(basis, X.T)
        j = argmax_lowest(np.abs(coefficients[i]))
        basis[:, i] = X[j]
        chosen[i] = j

    while True:
        coefficients = np.abs(scipy.linalg.solve(basis, X.T))
        i, j = np.unravel_index(int(np.argmax(coefficients)), coefficients.shape)
        if coefficients[i, j] <= approx:
            break
        basis[:, i] = X[j]
        chosen[i] = int(j)

    return [ids[j] for j in chosen]


def solve_linear_system(G: MatrixLike, w: np.ndarray) -> np.ndarray:
    """
    Solve G x = w for PSD G.

    Raises:
        Singular: If lambda_min(G) < 1e-12 lambda_max(G) (including G = 0)
    """
    entries = _as_array(G)
    rhs = np.asarray(w, dtype=float).ravel()
    if rhs.shape != (entries.shape[0],):
        raise BadShape(f"right-hand side has shape {rhs.shape}, expected ({entries.shape[0]},)")
    _require_finite(entries, "matrix")
    _require_finite(rhs, "right-hand side")
    eigenvalues = scipy.linalg.eigvalsh(entries)
    if eigenvalues[-1] <= 0.0 or eigenvalues[0] < 1e-12 * eigenvalues[-1]:
        raise Singular(
            f"matrix is singular (lambda_min={eigenvalues[0]:.3e}, lambda_max={eigenvalues[-1]:.3e})"
        )
    return scipy.linalg.solve(entries, rhs, assume_a="pos")
