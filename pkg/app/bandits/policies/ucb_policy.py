"""
Ridge-regression UCB baselines: LinUCB, Arm-Con, ConUCB and ConLinUCB
(BS / MCR / UCB key-term selection).

All variants share one theta for arms and key terms. Conversations come
from a ConversationSchedule; every query newly allowed at round t is
served in round t, before that round's arm pull, so a client has made
exactly b(T) queries after T rounds.
"""

import logging
import math
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.bandits.policies.schedules import ConversationSchedule, schedule_queries
from app.core.exceptions import EmptyKeyTermSet
from app.schemas.environment import Environment, FeatureSet
from app.services.design_service import argmax_lowest, barycentric_spanner
from app.services.environment_service import sample_arm_reward, sample_keyterm_reward

logger = logging.getLogger(__name__)

ConLinUcbVariant = Literal["BS", "MCR", "UCB"]


def default_alpha(T: int) -> float:
    """1 + sqrt(ln(2T) / 2)."""
    return 1.0 + math.sqrt(math.log(2.0 * T) / 2.0)


class UcbState(BaseModel):
    """
    V = lambda_reg I + sum x x^T over every pooled observation, kept with its
    inverse through Sherman-Morrison updates.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    dim: int = Field(..., gt=0)
    alpha: float = Field(..., ge=0.0)
    lambda_reg: float = Field(1.0, gt=0.0)
    gram: np.ndarray
    gram_inv: np.ndarray
    moment: np.ndarray
    theta_hat: np.ndarray
    queries_served: int = 0

    @classmethod
    def fresh(cls, dim: int, alpha: float, lambda_reg: float = 1.0) -> "UcbState":
        return cls(
            dim=dim,
            alpha=alpha,
            lambda_reg=lambda_reg,
            gram=lambda_reg * np.eye(dim),
            gram_inv=np.eye(dim) / lambda_reg,
            moment=np.zeros(dim),
            theta_hat=np.zeros(dim),
        )

    def update(self, x: np.ndarray, reward: float) -> None:
        x = np.asarray(x, dtype=float)
        Vx = self.gram_inv @ x
        self.gram_inv = self.gram_inv - np.outer(Vx, Vx) / (1.0 + x @ Vx)
        self.gram = self.gram + np.outer(x, x)
        self.moment = self.moment + reward * x
        self.theta_hat = self.gram_inv @ self.moment

    def radius(self, X: np.ndarray) -> np.ndarray:
        """||x||_{V^-1} for every row."""
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, self.gram_inv, X), 0.0))

    def index(self, X: np.ndarray) -> np.ndarray:
        return X @ self.theta_hat + self.alpha * self.radius(X)


def _pull_best_arm(
    state: UcbState, arm_set: FeatureSet, env: Environment, client_id: int, rng
) -> int:
    pos = argmax_lowest(state.index(arm_set.vectors))
    arm_id = arm_set.ids[pos]
    state.update(arm_set.vectors[pos], sample_arm_reward(env, client_id, arm_id, rng))
    return arm_id


def _take_queries(state: UcbState, sched: ConversationSchedule, t: int) -> int:
    count = schedule_queries(sched, t)
    state.queries_served += count
    return count


def linucb_step(
    state: UcbState,
    arm_set: FeatureSet,
    env: Environment,
    rng: np.random.Generator,
    client_id: int = 0,
) -> Tuple[int, UcbState]:
    """Pull argmax_a a^T theta_hat + alpha ||a||_{V^-1} (lowest id on ties) and update."""
    return _pull_best_arm(state, arm_set, env, client_id, rng), state


def armcon_step(
    state: UcbState,
    sched: ConversationSchedule,
    arm_set: FeatureSet,
    env: Environment,
    t: int,
    rng: np.random.Generator,
    client_id: int = 0,
) -> Tuple[int, List[int], UcbState]:
    """Conversations ask about the highest-index arm; feedback is pooled."""
    queried = []
    for _ in range(_take_queries(state, sched, t)):
        pos = argmax_lowest(state.index(arm_set.vectors))
        queried.append(arm_set.ids[pos])
        reward = sample_arm_reward(env, client_id, arm_set.ids[pos], rng)
        state.update(arm_set.vectors[pos], reward)
    return _pull_best_arm(state, arm_set, env, client_id, rng), queried, state


def select_keyterm(
    variant: str,
    state: UcbState,
    key_terms: FeatureSet,
    rng: np.random.Generator,
    spanner: Optional[List[int]] = None,
    arm_set: Optional[FeatureSet] = None,
) -> int:
    """Position in ``key_terms`` of the key term a variant queries."""
    if variant == "BS":
        if not spanner:
            raise ValueError("ConLinUCB-BS needs a precomputed spanner")
        return key_terms.index[spanner[int(rng.integers(len(spanner)))]]
    if variant == "MCR":
        return argmax_lowest(state.radius(key_terms.vectors))
    if variant == "UCB":
        return argmax_lowest(state.index(key_terms.vectors))
    if variant == "CONUCB":
        # shrinkage of the arms' confidence widths from one more observation of k
        VK = key_terms.vectors @ state.gram_inv
        gain = ((arm_set.vectors @ VK.T) ** 2).sum(axis=0) / (
            1.0 + np.einsum("ij,ij->i", VK, key_terms.vectors)
        )
        return argmax_lowest(gain)
    raise ValueError(f"unknown key-term selection rule '{variant}'")


def conlinucb_step(
    variant: ConLinUcbVariant,
    state: UcbState,
    sched: ConversationSchedule,
    arm_set: FeatureSet,
    key_terms: FeatureSet,
    env: Environment,
    t: int,
    rng: np.random.Generator,
    spanner: Optional[List[int]] = None,
    client_id: int = 0,
) -> Tuple[int, List[int], UcbState]:
    """
    One ConLinUCB round: the key-term queries allowed at t, then a LinUCB pull.

    Raises:
        EmptyKeyTermSet: If there are no key terms
    """
    if len(key_terms) == 0:
        raise EmptyKeyTermSet("conversational baselines need key terms")
    queried = []
    for _ in range(_take_queries(state, sched, t)):
        pos = select_keyterm(variant, state, key_terms, rng, spanner=spanner)
        queried.append(key_terms.ids[pos])
        state.update(key_terms.vectors[pos], sample_keyterm_reward(env, key_terms.ids[pos], rng))
    return _pull_best_arm(state, arm_set, env, client_id, rng), queried, state


def conucb_step(
    state: UcbState,
    sched: ConversationSchedule,
    arm_set: FeatureSet,
    key_terms: FeatureSet,
    env: Environment,
    t: int,
    rng: np.random.Generator,
    client_id: int = 0,
) -> Tuple[int, List[int], UcbState]:
    """
    ConUCB on the shared-theta model: the queried key term is the one that
    most reduces sum_a ||a||^2_{V^-1}, i.e. argmax_k ||X V^-1 k||^2 / (1 + k^T V^-1 k).
    """
    if len(key_terms) == 0:
        raise EmptyKeyTermSet("conversational baselines need key terms")
    queried = []
    for _ in range(_take_queries(state, sched, t)):
        pos = select_keyterm("CONUCB", state, key_terms, rng, arm_set=arm_set)
        queried.append(key_terms.ids[pos])
        state.update(key_terms.vectors[pos], sample_keyterm_reward(env, key_terms.ids[pos], rng))
    return _pull_best_arm(state, arm_set, env, client_id, rng), queried, state


class BaselineRun(BaseModel):
    """Row-aligned (t, client) actions of a baseline run plus theta errors."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rounds: np.ndarray
    clients: np.ndarray
    arm_ids: np.ndarray
    keyterm_ids: np.ndarray
    theta_errors: List[Tuple[int, float]] = Field(default_factory=list)
    queries: List[int] = Field(default_factory=list)


def run_baseline(
    name: str,
    env: Environment,
    T: int,
    rng: np.random.Generator,
    sched: Optional[ConversationSchedule] = None,
    alpha: Optional[float] = None,
    lambda_reg: float = 1.0,
    theta_error_every: int = 500,
) -> BaselineRun:
    """
    Run a baseline for T rounds, every client learning on its own.

    Clients are stepped in id order each round. A row's key-term column holds
    the last query of that round (Arm-Con logs the queried arm id) and
    ``queries`` the per-client totals.
    """
    sched = sched or ConversationSchedule()
    alpha = default_alpha(T) if alpha is None else alpha
    M = env.num_clients
    states = [UcbState.fresh(env.dim, alpha, lambda_reg) for _ in range(M)]

    spanner = None
    if name == "conlinucb-bs":
        spanner = barycentric_spanner(env.key_terms)
        logger.debug(f"[UCB_POLICY] Barycentric spanner of key terms: {spanner}")

    arm_ids = np.empty((T, M), dtype=np.int64)
    keyterm_ids = np.full((T, M), -1, dtype=np.int64)
    theta_errors: List[Tuple[int, float]] = []
    for t in range(1, T + 1):
        for i in range(M):
            arms = env.clients[i]
            state = states[i]
            if name == "linucb":
                arm, _ = linucb_step(state, arms, env, rng, client_id=i)
                queried = []
            elif name == "armcon":
                arm, queried, _ = armcon_step(state, sched, arms, env, t, rng, client_id=i)
            elif name == "conucb":
                arm, queried, _ = conucb_step(
                    state, sched, arms, env.key_terms, env, t, rng, client_id=i
                )
            elif name.startswith("conlinucb-"):
                variant = name.split("-", 1)[1].upper()
                arm, queried, _ = conlinucb_step(
                    variant, state, sched, arms, env.key_terms, env, t, rng,
                    spanner=spanner, client_id=i,
                )
            else:
                raise ValueError(f"unknown baseline '{name}'")
            arm_ids[t - 1, i] = arm
            if queried:
                keyterm_ids[t - 1, i] = queried[-1]
        if t % theta_error_every == 0 or t == T:
            error = float(np.mean([np.linalg.norm(s.theta_hat - env.theta_star) for s in states]))
            theta_errors.append((t, error))

    logger.info(
        f"[UCB_POLICY] {name} finished {T} rounds for {M} clients, "
        f"{sum(s.queries_served for s in states)} conversations"
    )
    return BaselineRun(
        rounds=np.repeat(np.arange(1, T + 1), M),
        clients=np.tile(np.arange(M), T),
        arm_ids=arm_ids.ravel(),
        keyterm_ids=keyterm_ids.ravel(),
        theta_errors=theta_errors,
        queries=[s.queries_served for s in states],
    )
