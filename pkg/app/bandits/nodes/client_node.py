"""
Client side of FedConPE: design, deficient-direction detection, playing a
phase against the environment and local arm elimination.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.bandits.nodes.shared import lift, reduce_to_span
from app.bandits.policies.schedules import interleave_positions
from app.schemas.algorithm import (
    AlgoConfig,
    ClientPhasePrep,
    ClientPlayResult,
    ClientState,
    PhasePlan,
)
from app.schemas.environment import Environment, FeatureSet
from app.schemas.linalg import DesignDistribution, EigenPair, SymMatrix
from app.schemas.protocol import ClientUpload, KeytermAssignment, ServerDownlink
from app.services.design_service import (
    argmax_lowest,
    g_optimal_design,
    spectral_decompose,
)
from app.services.environment_service import sample_arm_rewards, sample_keyterm_rewards

logger = logging.getLogger(__name__)


def compute_phase_plan_arms(
    design: DesignDistribution, cfg: AlgoConfig, phase: int, dim: Optional[int] = None
) -> Dict[int, int]:
    """
    T(a) = ceil(2 d pi(a) / eps^2 * ln(2KM ln T / delta)) for every arm of the design.

    ``dim`` replaces d when the design lives in a reduced span.
    """
    dim = dim or cfg.d
    scale = 2.0 * dim / cfg.epsilon(phase) ** 2 * cfg.confidence_log
    return {
        arm_id: int(math.ceil(scale * weight)) if weight > 0.0 else 0
        for arm_id, weight in design.weights.items()
    }


def deficient_directions(
    V, cfg: AlgoConfig, phase: int, dim: Optional[int] = None
) -> List[EigenPair]:
    """Eigenpairs of V below s_l = 3 / (4 (1 - eps^2) d N), ascending by value."""
    threshold = cfg.eigen_threshold(phase, dim)
    pairs = [pair for pair in spectral_decompose(V) if pair.value < threshold]
    return sorted(pairs, key=lambda pair: pair.value)


def prepare_client_phase(
    client: ClientState, arms: FeatureSet, cfg: AlgoConfig
) -> ClientPhasePrep:
    """
    Everything the client computes before its eigen upload.

    Active arms are reduced to their span; a single surviving arm gets the
    point-mass design and never asks for conversations.
    """
    active = arms.subset(client.active)
    phase = client.phase

    if len(active) == 1:
        arm_id = active.ids[0]
        design = DesignDistribution(
            weights={arm_id: 1.0},
            info_matrix=SymMatrix(entries=[[1.0]], psd=True),
            g_value=1.0,
        )
        basis = active.vectors.T.copy()
        return ClientPhasePrep(
            client_id=client.client_id,
            phase=phase,
            effective_dim=1,
            basis=basis,
            design=design,
            beta=1.0,
            threshold=cfg.eigen_threshold(phase, 1),
            eigenpairs=[],
            plan=PhasePlan(arm_pulls=compute_phase_plan_arms(design, cfg, phase, dim=1)),
        )

    basis, reduced = reduce_to_span(active)
    r = basis.shape[1]
    design = g_optimal_design(reduced, tol=cfg.design_tol, max_iter=cfg.design_max_iter)
    threshold = cfg.eigen_threshold(phase, r)
    deficient = [
        EigenPair(value=pair.value, vector=lift(basis, pair.vector))
        for pair in deficient_directions(design.info_matrix, cfg, phase, r)
    ]
    beta = float(np.linalg.eigvalsh(design.info_matrix.entries)[0])
    logger.debug(
        f"[CLIENT_NODE] Client {client.client_id} phase {phase}: {len(active)} active arms, "
        f"r={r}, beta={beta:.4f}, s={threshold:.4f}, deficient={len(deficient)}"
    )
    return ClientPhasePrep(
        client_id=client.client_id,
        phase=phase,
        effective_dim=r,
        basis=basis,
        design=design,
        beta=beta,
        threshold=threshold,
        eigenpairs=deficient,
        plan=PhasePlan(arm_pulls=compute_phase_plan_arms(design, cfg, phase, dim=r)),
    )


def eigen_upload(prep: ClientPhasePrep, dim: int) -> ClientUpload:
    """The first upload of a phase, sent even when no direction is deficient."""
    return ClientUpload(
        phase=prep.phase,
        client_id=prep.client_id,
        dim=dim,
        effective_dim=prep.effective_dim,
        eigenpairs=prep.eigenpairs,
    )


def scheduled_arm_sequence(arm_pulls: Dict[int, int]) -> np.ndarray:
    ids = sorted(a for a, n in arm_pulls.items() if n > 0)
    return np.repeat(np.asarray(ids, dtype=np.int64), [arm_pulls[a] for a in ids])


def scheduled_keyterm_sequence(assignments: List[KeytermAssignment]) -> np.ndarray:
    return np.repeat(
        np.asarray([a.keyterm_id for a in assignments], dtype=np.int64),
        [a.repetitions for a in assignments],
    )


def play_phase(
    prep: ClientPhasePrep,
    plan: PhasePlan,
    env: Environment,
    rounds: int,
    rng: np.random.Generator,
) -> ClientPlayResult:
    """
    Play ``rounds`` synchronized rounds of one phase following ``plan``.

    The scheduled arm pulls come first, grouped by arm id; key terms are
    interleaved uniformly over them, at most one per round. Rounds past the
    client's own schedule replay the active arm with the best sample mean
    of this phase and are excluded from G and W. Key-term demand beyond the
    scheduled arm rounds spills into the following rounds and sets
    ``schedule_overflow``.
    """
    client_id = prep.client_id
    arms = env.clients[client_id]
    d = env.dim

    scheduled = scheduled_arm_sequence(plan.arm_pulls)
    keyterms = scheduled_keyterm_sequence(plan.assignments)
    overflow = len(keyterms) > len(scheduled)
    if overflow:
        logger.warning(
            f"[CLIENT_NODE] Client {client_id} phase {prep.phase}: {len(keyterms)} conversations "
            f"exceed {len(scheduled)} arm rounds"
        )

    executed = min(rounds, len(scheduled))
    arm_ids = scheduled[:executed]
    rewards = sample_arm_rewards(env, client_id, arm_ids, rng)

    positions = interleave_positions(len(keyterms), len(scheduled))
    keep = positions < rounds
    keyterm_round_ids = np.full(rounds, -1, dtype=np.int64)
    keyterm_round_ids[positions[keep]] = keyterms[keep]
    executed_keyterms = keyterms[keep]
    keyterm_rewards = sample_keyterm_rewards(env, executed_keyterms, rng)

    X = arms.vectors[[arms.index[int(a)] for a in arm_ids]] if executed else np.zeros((0, d))
    Kx = (
        env.key_terms.vectors[[env.key_terms.index[int(k)] for k in executed_keyterms]]
        if len(executed_keyterms)
        else np.zeros((0, d))
    )
    gram = X.T @ X + Kx.T @ Kx
    moment = X.T @ rewards + Kx.T @ keyterm_rewards

    if rounds > executed:
        filler_arm = _best_sample_mean_arm(arm_ids, rewards)
        filler = np.full(rounds - executed, filler_arm, dtype=np.int64)
        sample_arm_rewards(env, client_id, filler, rng)
        arm_ids = np.concatenate([arm_ids, filler])

    return ClientPlayResult(
        arm_ids=arm_ids,
        keyterm_ids=keyterm_round_ids,
        gram=gram,
        moment=moment,
        executed_arm_pulls=executed,
        executed_keyterm_pulls=int(keep.sum()),
        schedule_overflow=overflow,
    )


def _best_sample_mean_arm(arm_ids: np.ndarray, rewards: np.ndarray) -> int:
    ids, inverse = np.unique(arm_ids, return_inverse=True)
    sums = np.bincount(inverse, weights=rewards)
    counts = np.bincount(inverse)
    return int(ids[argmax_lowest(sums / counts)])


def client_run_phase(
    client: ClientState,
    server_downlink: ServerDownlink,
    env: Environment,
    rng: np.random.Generator,
    cfg: AlgoConfig,
    prep: Optional[ClientPhasePrep] = None,
    rounds: Optional[int] = None,
) -> ClientUpload:
    """
    Run a client's phase on its own and return the full upload.

    Without an explicit ``rounds`` the client plays exactly its own schedule
    (no filler); G_i = sum_a T(a) a a^T + sum_k n_k k k^T.
    """
    prep = prep or prepare_client_phase(client, env.clients[client.client_id], cfg)
    plan = prep.plan.with_assignments(server_downlink.assignments)
    result = play_phase(prep, plan, env, rounds or plan.demand, rng)
    return ClientUpload(
        phase=prep.phase,
        client_id=client.client_id,
        dim=env.dim,
        effective_dim=prep.effective_dim,
        eigenpairs=prep.eigenpairs,
        gram=SymMatrix(entries=result.gram, psd=True),
        moment=result.moment,
    )


def eliminate_arms(
    client: ClientState, theta_hat: np.ndarray, arms: FeatureSet, cfg: AlgoConfig, phase: int
) -> Tuple[int, ...]:
    """
    Keep arm a iff max_b <theta_hat, b - a> <= 2 sqrt(N / M) eps_l.

    The empirical best arm has gap 0 and always survives.
    """
    active = arms.subset(client.active)
    values = active.vectors @ np.asarray(theta_hat, dtype=float)
    radius = cfg.elimination_radius(phase)
    keep = values.max() - values <= radius
    survivors = tuple(arm_id for arm_id, k in zip(active.ids, keep) if k)
    if len(survivors) < len(active):
        logger.debug(
            f"[CLIENT_NODE] Client {client.client_id} phase {phase}: "
            f"eliminated {len(active) - len(survivors)} arms (radius {radius:.4f})"
        )
    return survivors
