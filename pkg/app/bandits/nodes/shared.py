import logging
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg

from app.schemas.environment import FeatureSet
from app.services.design_service import span_basis

logger = logging.getLogger(__name__)


def reduce_to_span(arms: FeatureSet) -> Tuple[np.ndarray, FeatureSet]:
    """
    Express arms in an orthonormal basis B (d x r) of their span.

    Returns B and the arms in reduced coordinates (X B). A full-rank arm set
    keeps the identity basis so its coordinates are untouched.
    """
    d = arms.dim
    basis = span_basis(arms.vectors)
    if basis.shape[1] == d:
        return np.eye(d), arms
    logger.debug(f"[CLIENT_NODE] Active arms span {basis.shape[1]} of {d} dimensions")
    return basis, FeatureSet(ids=arms.ids, vectors=arms.vectors @ basis)


def lift(basis: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """Map reduced coordinates back to R^d, renormalized against round-off."""
    full = basis @ vector
    return full / np.linalg.norm(full)


def augmented_min_eigenvalue(
    info_matrix: np.ndarray,
    keyterm_vectors: Sequence[np.ndarray],
    weights: Sequence[float],
) -> float:
    """
    lambda_min(V + sum_j w_j k_j k_j^T).

    Key-term vectors must be given in the same coordinates as ``info_matrix``.
    With w_j >= (s - lambda_j) / C^2 and every matched key term satisfying
    |k_j^T v_j| >= C the result is at least s.
    """
    augmented = np.array(info_matrix, dtype=float, copy=True)
    for k, weight in zip(keyterm_vectors, weights):
        k = np.asarray(k, dtype=float)
        augmented += weight * np.outer(k, k)
    return float(scipy.linalg.eigvalsh(augmented)[0])
