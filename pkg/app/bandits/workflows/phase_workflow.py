"""
FedConPE phase orchestration.

A phase runs design -> eigen upload -> key-term downlink -> synchronized
plays -> data upload -> theta broadcast -> elimination for every client,
stepping clients in id order so a seeded run is reproducible.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.bandits.nodes.client_node import (
    eigen_upload,
    eliminate_arms,
    play_phase,
    prepare_client_phase,
)
from app.bandits.nodes.server_node import (
    aggregate,
    conversation_weight,
    estimate_theta,
    server_select_keyterms,
)
from app.bandits.nodes.shared import augmented_min_eigenvalue
from app.schemas.algorithm import (
    AlgoConfig,
    ClientState,
    FedconpeRun,
    PhaseActions,
    PhaseClientReport,
    PhaseTranscript,
    ServerState,
)
from app.schemas.environment import Environment
from app.schemas.linalg import SymMatrix
from app.schemas.protocol import ClientUpload, ServerDownlink
from app.services.protocol_service import downlink_records, upload_records

logger = logging.getLogger(__name__)


def initial_states(env: Environment) -> Tuple[ServerState, List[ClientState]]:
    clients = [
        ClientState(client_id=i, active=arms.ids) for i, arms in enumerate(env.clients)
    ]
    return ServerState.empty(env.dim), clients


def run_phase(
    server: ServerState,
    clients: List[ClientState],
    env: Environment,
    cfg: AlgoConfig,
    round_budget: int,
    rngs: Sequence[np.random.Generator],
    start_round: int = 1,
) -> Tuple[ServerState, List[ClientState], PhaseTranscript]:
    """
    Execute one synchronized phase for all clients.

    The phase lasts max over clients of max(sum_a T_i(a), sum_k n_k) rounds.
    If that exceeds ``round_budget`` the phase is cut: only the eigen uploads
    and key-term downlinks are recorded, nothing is aggregated and no arm is
    eliminated, and the transcript is flagged ``horizon_exceeded``.

    Args:
        server: Server state at the start of the phase
        clients: Client states, all in the server's phase
        env: Ground truth the clients play against
        cfg: Algorithm constants
        round_budget: Rounds left before the horizon
        rngs: One random source per client
        start_round: Global index of the phase's first round

    Returns:
        Tuple of the next server state, next client states and the transcript
    """
    phase = server.phase
    if any(client.phase != phase for client in clients):
        raise ValueError(f"clients are not all in phase {phase}")
    d = env.dim

    preps = [prepare_client_phase(c, env.clients[c.client_id], cfg) for c in clients]
    eigen_uploads = [eigen_upload(prep, d) for prep in preps]

    assignments = [
        server_select_keyterms(upload.eigenpairs, env.key_terms, cfg, phase, upload.effective_dim)
        for upload in eigen_uploads
    ]
    plans = [prep.plan.with_assignments(assigned) for prep, assigned in zip(preps, assignments)]
    planned = max(plan.demand for plan in plans)
    rounds = min(planned, round_budget)
    horizon_exceeded = rounds < planned
    if horizon_exceeded:
        logger.warning(
            f"[PHASE_WORKFLOW] PHASE {phase} cut at {rounds} of {planned} rounds by the horizon"
        )

    plays = [
        play_phase(prep, plan, env, rounds, rngs[prep.client_id])
        for prep, plan in zip(preps, plans)
    ]

    uploads: List[ClientUpload] = []
    downlinks: List[ServerDownlink] = []
    theta_hat: Optional[np.ndarray] = None
    next_server = server
    if horizon_exceeded:
        uploads = eigen_uploads
        downlinks = [
            ServerDownlink(phase=phase, client_id=c.client_id, dim=d, assignments=assigned)
            for c, assigned in zip(clients, assignments)
        ]
    else:
        uploads = [
            upload.model_copy(
                update={
                    "gram": SymMatrix(entries=play.gram, psd=True),
                    "moment": play.moment,
                }
            )
            for upload, play in zip(eigen_uploads, plays)
        ]
        next_server = aggregate(uploads, server)
        theta_hat = estimate_theta(next_server)
        next_server = next_server.model_copy(update={"theta_hat": theta_hat, "phase": phase + 1})
        downlinks = [
            ServerDownlink(
                phase=phase,
                client_id=c.client_id,
                dim=d,
                assignments=assigned,
                theta_hat=theta_hat,
            )
            for c, assigned in zip(clients, assignments)
        ]

    records = []
    for upload, downlink in zip(uploads, downlinks):
        records.extend(upload_records(upload))
        records.extend(downlink_records(downlink))

    next_clients, reports = [], []
    for client, prep, plan, play in zip(clients, preps, plans, plays):
        arms = env.clients[client.client_id]
        if horizon_exceeded:
            survivors = client.active
            next_clients.append(client)
        else:
            survivors = eliminate_arms(client, theta_hat, arms, cfg, phase)
            next_clients.append(
                client.model_copy(
                    update={
                        "active": survivors,
                        "phase": phase + 1,
                        "design": prep.design,
                        "basis": prep.basis,
                    }
                )
            )
        reports.append(_client_report(client, prep, plan, play, survivors, env, cfg))

    actions = PhaseActions(
        rounds=np.tile(np.arange(start_round, start_round + rounds), len(clients)),
        clients=np.repeat([c.client_id for c in clients], rounds),
        arm_ids=np.concatenate([play.arm_ids for play in plays]),
        keyterm_ids=np.concatenate([play.keyterm_ids for play in plays]),
    )
    theta_error = (
        float(np.linalg.norm(theta_hat - env.theta_star)) if theta_hat is not None else None
    )
    logger.info(
        f"[PHASE_WORKFLOW] PHASE {phase}: {rounds} rounds from t={start_round}, "
        f"{sum(p.executed_keyterm_pulls for p in plays)} conversations, "
        f"active arms {[len(c.active) for c in next_clients]}"
        + (f", theta error {theta_error:.4f}" if theta_error is not None else "")
    )
    transcript = PhaseTranscript(
        phase=phase,
        start_round=start_round,
        rounds=rounds,
        planned_rounds=planned,
        horizon_exceeded=horizon_exceeded,
        records=records,
        reports=reports,
        theta_hat=theta_hat,
        theta_error=theta_error,
        actions=actions,
        uploads=uploads,
        downlinks=downlinks,
    )
    return next_server, next_clients, transcript


def _client_report(client, prep, plan, play, survivors, env, cfg) -> PhaseClientReport:
    basis = prep.basis
    assigned = plan.assignments
    reduced_keyterms = [basis.T @ a.vector for a in assigned]
    weights = [
        conversation_weight(a.repetitions, cfg, prep.phase, prep.effective_dim) for a in assigned
    ]
    lemma_value = None
    proviso_ok = all(a.alignment >= cfg.C - 1e-12 for a in assigned)
    if assigned:
        lemma_value = augmented_min_eigenvalue(
            prep.design.info_matrix.entries,
            reduced_keyterms,
            weights,
        )
        if not proviso_ok:
            logger.warning(
                f"[PHASE_WORKFLOW] Client {client.client_id} phase {prep.phase}: a matched key term "
                f"aligns below C={cfg.C:.4f} with its direction"
            )
    return PhaseClientReport(
        client_id=client.client_id,
        phase=prep.phase,
        effective_dim=prep.effective_dim,
        beta=prep.beta,
        threshold=prep.threshold,
        support_size=len(prep.design.support),
        eigen_uploads=len(prep.eigenpairs),
        arm_pulls=prep.total_arm_pulls,
        keyterm_pulls=plan.total_keyterm_pulls,
        executed_arm_pulls=play.executed_arm_pulls,
        executed_keyterm_pulls=play.executed_keyterm_pulls,
        schedule_overflow=play.schedule_overflow,
        active_before=len(client.active),
        active_after=len(survivors),
        best_arm_active=env.best_arms[client.client_id] in survivors,
        lemma_min_eigenvalue=lemma_value,
        lemma_proviso_ok=proviso_ok,
    )


def run_fedconpe(
    env: Environment, cfg: AlgoConfig, rng: np.random.Generator
) -> FedconpeRun:
    """
    Run FedConPE on ``env`` until the horizon cfg.T.

    Each client gets its own random stream spawned from ``rng``.
    """
    if env.num_clients != cfg.M or env.dim != cfg.d:
        raise ValueError(
            f"config (M={cfg.M}, d={cfg.d}) does not match the environment "
            f"(M={env.num_clients}, d={env.dim})"
        )
    rngs = rng.spawn(cfg.M)
    server, clients = initial_states(env)
    transcripts: List[PhaseTranscript] = []
    t = 1
    while t <= cfg.T:
        server, clients, transcript = run_phase(
            server, clients, env, cfg, cfg.T - t + 1, rngs, start_round=t
        )
        transcripts.append(transcript)
        t += transcript.rounds
    logger.info(f"[PHASE_WORKFLOW] FedConPE finished {len(transcripts)} phases in {t - 1} rounds")
    return FedconpeRun(transcripts=transcripts, clients=clients, server=server, rounds=t - 1)
