import logging
import math
from typing import List, Optional

import numpy as np

from app.core.exceptions import DimMismatch, EmptyKeyTermSet, ExperimentError
from app.schemas.algorithm import AlgoConfig, ServerState
from app.schemas.environment import FeatureSet
from app.schemas.linalg import EigenPair
from app.schemas.protocol import ClientUpload, KeytermAssignment
from app.services.design_service import argmax_lowest, solve_linear_system

logger = logging.getLogger(__name__)


def keyterm_repetitions(
    eigenvalue: float, cfg: AlgoConfig, phase: int, dim: Optional[int] = None
) -> int:
    """
    n_k = ceil(2 r (s_l - lambda) / (C^2 eps^2) * ln(2KM ln T / delta)), floored at 0.

    ``dim`` is the uploading client's effective dimension r (cfg.d when the
    active arms span R^d). With r = d this is the familiar
    (3 / (2 (1 - eps^2) N) - 2 d lambda) / (C^2 eps^2) form.
    """
    r = dim or cfg.d
    eps = cfg.epsilon(phase)
    gap = cfg.eigen_threshold(phase, r) - eigenvalue
    return max(0, int(math.ceil(2.0 * r * gap / (cfg.C**2 * eps**2) * cfg.confidence_log)))


def conversation_weight(
    repetitions: int, cfg: AlgoConfig, phase: int, dim: Optional[int] = None
) -> float:
    """Scale n_k back to the information-matrix weight n_k eps^2 / (2 r ln(.))."""
    r = dim or cfg.d
    return repetitions * cfg.epsilon(phase) ** 2 / (2.0 * r * cfg.confidence_log)


def server_select_keyterms(
    eigenpairs: List[EigenPair],
    key_terms: FeatureSet,
    cfg: AlgoConfig,
    phase: int,
    dim: Optional[int] = None,
) -> List[KeytermAssignment]:
    """
    Match every uploaded direction with the key term of largest |k^T v| and
    assign it n_k repetitions, computed for the client's effective dimension
    ``dim``.

    Raises:
        EmptyKeyTermSet: If there are no key terms to match against
    """
    if len(key_terms) == 0:
        raise EmptyKeyTermSet("the server has no key terms to assign")
    assignments = []
    for pair in eigenpairs:
        alignment = np.abs(key_terms.vectors @ pair.vector)
        pos = argmax_lowest(alignment)
        assignments.append(
            KeytermAssignment(
                keyterm_id=key_terms.ids[pos],
                vector=key_terms.vectors[pos],
                repetitions=keyterm_repetitions(pair.value, cfg, phase, dim),
                eigenvalue=pair.value,
                alignment=float(alignment[pos]),
            )
        )
    return assignments


def aggregate(uploads: List[ClientUpload], server: ServerState) -> ServerState:
    """
    Add this phase's G_i and W_i to the running totals.

    Raises:
        DimMismatch: If an upload disagrees with the server on d
    """
    gram = server.gram.copy()
    moment = server.moment.copy()
    for upload in uploads:
        if upload.dim != server.dim:
            raise DimMismatch(f"upload of client {upload.client_id} has d={upload.dim}, server has {server.dim}")
        if upload.phase != server.phase:
            raise ExperimentError(
                f"upload of client {upload.client_id} is from phase {upload.phase}, server is in {server.phase}"
            )
        if upload.gram is None or upload.moment is None:
            raise ExperimentError(f"upload of client {upload.client_id} carries no data")
        gram += upload.gram.entries
        moment += upload.moment
    return server.model_copy(update={"gram": (gram + gram.T) / 2.0, "moment": moment})


def estimate_theta(server: ServerState) -> np.ndarray:
    """theta_hat = G^-1 W."""
    return solve_linear_system(server.gram, server.moment)
