"""
Ground-truth environments: synthetic generation, lower-bound instances,
feedback-matrix ingestion, reward sampling and richness estimation.
"""

import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from app.core.config import settings
from app.core.exceptions import (
    BadShape,
    EmptyKeyTermSet,
    RankDeficient,
    UnknownArm,
    UnknownKeyTerm,
)
from app.schemas.environment import (
    Environment,
    FeatureSet,
    FeedbackMatrix,
    IngestedFactors,
    SyntheticConfig,
    SyntheticDataset,
)

logger = logging.getLogger(__name__)

MAX_SUBSET_DRAWS = 1000


def normalize_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / norms


def _unit_or_zero(theta: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(theta)
    return theta / norm if norm > 0 else theta


def keyterms_from_relations(
    arm_vectors: np.ndarray, relations: Sequence[Sequence[int]]
) -> Tuple[Tuple[int, ...], np.ndarray]:
    """
    Build key-term vectors from an arm-to-key-term relation graph.

    ``relations[i]`` lists the key terms of arm i. With w_{i,k} = 1/n_i, key
    term k is the w-weighted mean of its related arms, renormalized to unit
    length. Key terms with no related arm (or a null combination) are left
    out, so the returned ids may have gaps.
    """
    weights_by_term: Dict[int, List[Tuple[int, float]]] = defaultdict(list)
    for arm, terms in enumerate(relations):
        for term in terms:
            weights_by_term[int(term)].append((arm, 1.0 / len(terms)))

    ids, vectors = [], []
    for term in sorted(weights_by_term):
        arms, weights = zip(*weights_by_term[term])
        weights = np.asarray(weights)
        combined = (weights / weights.sum()) @ arm_vectors[list(arms)]
        norm = np.linalg.norm(combined)
        if norm < 1e-12:
            logger.debug(f"[ENVIRONMENT_SERVICE] Dropping key term {term}: null combination")
            continue
        ids.append(term)
        vectors.append(combined / norm)
    return tuple(ids), np.asarray(vectors)


def random_relations(
    num_items: int, num_keyterms: int, relation_max: int, rng: np.random.Generator
) -> Tuple[Tuple[int, ...], ...]:
    """Every item gets n_i ~ U{1..relation_max} distinct key terms."""
    sizes = rng.integers(1, min(relation_max, num_keyterms) + 1, size=num_items)
    return tuple(
        tuple(int(k) for k in np.sort(rng.choice(num_keyterms, size=int(n), replace=False)))
        for n in sizes
    )


def draw_client_arms(
    pool: FeatureSet, num_clients: int, per_client: int, rng: np.random.Generator
) -> List[FeatureSet]:
    """
    Give each client ``per_client`` pool arms drawn without replacement,
    redrawing until the subset spans R^d.

    Raises:
        RankDeficient: If no spanning subset turns up in MAX_SUBSET_DRAWS draws
    """
    clients = []
    for client_id in range(num_clients):
        for _ in range(MAX_SUBSET_DRAWS):
            rows = np.sort(rng.choice(len(pool), size=per_client, replace=False))
            if np.linalg.matrix_rank(pool.vectors[rows]) == pool.dim:
                clients.append(pool.subset([pool.ids[r] for r in rows]))
                break
        else:
            raise RankDeficient(
                f"no spanning subset of {per_client} arms found for client {client_id}"
            )
    return clients


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    """
    Generate a synthetic world and the environment of one of its users.

    Pseudo key-term features are drawn from U(-1, 1)^d. Each arm picks
    n_i ~ U{1..relation_max} key terms and is drawn from a unit Gaussian
    around their mean. Key terms are the weight-normalized mean of their
    arms and users are drawn from U(-1, 1)^d. Every vector is normalized
    afterwards so arms and key terms are unit length and ||theta|| = 1.

    Args:
        cfg: Synthetic configuration (seed included)

    Returns:
        SyntheticDataset with the arm pool, key terms, relation graph, all
        user vectors and the environment of ``cfg.user_index``
    """
    logger.info(
        f"[ENVIRONMENT_SERVICE] Generating synthetic data: d={cfg.d}, arms={cfg.num_arms}, "
        f"key terms={cfg.num_keyterms}, users={cfg.num_users}, seed={cfg.seed}"
    )
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d

    pseudo = rng.uniform(-1.0, 1.0, size=(cfg.num_keyterms, d))
    relations = random_relations(cfg.num_arms, cfg.num_keyterms, cfg.relation_max, rng)
    centers = np.array([pseudo[list(terms)].mean(axis=0) for terms in relations])
    arms = normalize_rows(rng.normal(centers, 1.0))
    arm_pool = FeatureSet.from_vectors(arms)

    keyterm_ids, keyterm_vectors = keyterms_from_relations(arms, relations)
    key_terms = FeatureSet(ids=keyterm_ids, vectors=keyterm_vectors.reshape(-1, d))
    if len(key_terms) < cfg.num_keyterms:
        logger.debug(
            f"[ENVIRONMENT_SERVICE] {cfg.num_keyterms - len(key_terms)} key terms have no related arm"
        )

    user_thetas = normalize_rows(rng.uniform(-1.0, 1.0, size=(cfg.num_users, d)))
    clients = draw_client_arms(arm_pool, cfg.num_clients, cfg.arms_per_client, rng)
    richness = estimate_richness_C(key_terms, settings.RICHNESS_DIRECTIONS, rng)

    environment = Environment(
        dim=d,
        clients=clients,
        key_terms=key_terms,
        theta_star=user_thetas[cfg.user_index],
        noise_std=cfg.noise_std,
        richness_C=richness,
    )
    return SyntheticDataset(
        environment=environment,
        user_thetas=user_thetas,
        arm_pool=arm_pool,
        relations=relations,
    )


def lowerbound_gap(d: int, M: int, T: int) -> float:
    """Delta = sqrt((d - 1) / (M T))."""
    return math.sqrt((d - 1) / (M * T))


def build_lowerbound_instance(
    d: int,
    K: int,
    M: int,
    T: int,
    s: Optional[int] = None,
    pull_counts: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    noise_std: float = 1.0,
) -> Tuple[Environment, Environment]:
    """
    Build the pair of hard instances (theta, theta').

    theta = (Delta, 0, ..., 0) and theta' additionally holds 2 Delta in
    coordinate ``s`` (1-based, 2 <= s <= d). When ``s`` is not given it is the
    least pulled of coordinates 2..d according to ``pull_counts`` (basis arm
    pull counts indexed by arm id), or 2. Every client shares the arms
    e_1..e_d (ids 0..d-1) plus K - d unit vectors from the non-positive
    orthant. Key terms are the standard basis.

    Raises:
        BadShape: If K < d, d < 2, s is out of range or Delta is too large
            for ||theta'|| <= 1
    """
    if d < 2:
        raise BadShape("the lower-bound instance needs d >= 2")
    if K < d:
        raise BadShape(f"K={K} arms cannot contain the {d} basis arms")
    if s is None:
        if pull_counts is not None:
            counts = np.asarray(pull_counts, dtype=float)[1:d]
            s = int(np.argmin(counts)) + 2
        else:
            s = 2
    if not 2 <= s <= d:
        raise BadShape(f"perturbed coordinate s={s} must lie in 2..{d}")

    delta_gap = lowerbound_gap(d, M, T)
    if math.sqrt(5.0) * delta_gap > 1.0:
        raise BadShape(f"Delta={delta_gap:.4f} too large for a unit-ball instance (T too short)")

    rng = rng if rng is not None else np.random.default_rng(0)
    extra = -np.abs(rng.standard_normal((K - d, d)))
    arms = np.vstack([np.eye(d), normalize_rows(extra)]) if K > d else np.eye(d)
    arm_set = FeatureSet.from_vectors(arms)
    key_terms = FeatureSet.from_vectors(np.eye(d))

    theta = np.zeros(d)
    theta[0] = delta_gap
    theta_prime = theta.copy()
    theta_prime[s - 1] = 2.0 * delta_gap
    logger.info(
        f"[ENVIRONMENT_SERVICE] Lower-bound pair: d={d}, K={K}, M={M}, T={T}, Delta={delta_gap:.6f}, s={s}"
    )

    def build(theta_star: np.ndarray) -> Environment:
        return Environment(
            dim=d,
            clients=[arm_set] * M,
            key_terms=key_terms,
            theta_star=theta_star,
            noise_std=noise_std,
            richness_C=1.0 / math.sqrt(d),
        )

    return build(theta), build(theta_prime)


def _client_arms(env: Environment, client_id: int) -> FeatureSet:
    if not 0 <= client_id < env.num_clients:
        raise UnknownArm(f"client {client_id} does not exist")
    return env.clients[client_id]


def sample_arm_reward(
    env: Environment, client_id: int, arm_id: int, rng: np.random.Generator
) -> float:
    """a^T theta_star + N(0, noise_std^2) noise."""
    arms = _client_arms(env, client_id)
    pos = arms.position(arm_id)
    if pos is None:
        raise UnknownArm(f"arm {arm_id} is not in the arm set of client {client_id}")
    return float(arms.vectors[pos] @ env.theta_star + env.noise_std * rng.standard_normal())


def sample_arm_rewards(
    env: Environment, client_id: int, arm_ids: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    """Vectorized ``sample_arm_reward`` over a sequence of pulls, in order."""
    arms = _client_arms(env, client_id)
    positions = [arms.position(a) for a in arm_ids]
    if any(p is None for p in positions):
        raise UnknownArm(f"pull log of client {client_id} has arms outside its arm set")
    means = arms.vectors[positions] @ env.theta_star if positions else np.zeros(0)
    return means + env.noise_std * rng.standard_normal(len(positions))


def sample_keyterm_reward(env: Environment, keyterm_id: int, rng: np.random.Generator) -> float:
    """k^T theta_star + N(0, noise_std^2) noise (the key-term preference equals theta_star)."""
    pos = env.key_terms.position(keyterm_id)
    if pos is None:
        raise UnknownKeyTerm(f"key term {keyterm_id} does not exist")
    return float(
        env.key_terms.vectors[pos] @ env.theta_star + env.noise_std * rng.standard_normal()
    )


def sample_keyterm_rewards(
    env: Environment, keyterm_ids: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    positions = [env.key_terms.position(k) for k in keyterm_ids]
    if any(p is None for p in positions):
        raise UnknownKeyTerm("conversation log references unknown key terms")
    means = env.key_terms.vectors[positions] @ env.theta_star if positions else np.zeros(0)
    return means + env.noise_std * rng.standard_normal(len(positions))


def estimate_richness_C(
    key_terms: FeatureSet,
    num_directions: int,
    rng: Optional[np.random.Generator] = None,
    directions: Optional[np.ndarray] = None,
) -> float:
    """
    Estimate the richness constant as min over sampled directions v of
    max_k |k^T v|.

    Directions are uniform on the unit sphere unless ``directions`` is
    given. They are drawn as one block, so a larger count with the same
    seed extends the same sequence and the estimate cannot go up.

    Raises:
        EmptyKeyTermSet: If there are no key terms
    """
    if len(key_terms) == 0:
        raise EmptyKeyTermSet("cannot estimate richness of an empty key-term set")
    if directions is None:
        if num_directions < 1:
            raise ValueError("num_directions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        directions = rng.standard_normal((num_directions, key_terms.dim))
    samples = normalize_rows(np.atleast_2d(np.asarray(directions, dtype=float)))
    alignment = np.abs(samples @ key_terms.vectors.T).max(axis=1)
    return float(min(1.0, alignment.min()))


def binarize(values, threshold: float = 3.0) -> np.ndarray:
    """1 where the rating is strictly above ``threshold``, else 0."""
    return (np.asarray(values, dtype=float) > threshold).astype(float)


def ingest_feedback_matrix(R: FeedbackMatrix, d: int) -> IngestedFactors:
    """
    Split R ~ Theta S A^T into d-dimensional user and arm vectors.

    Users get U_d S_d and arms the rows of V_d, stored unit length with their
    norms in ``arm_scales``. Items whose row of V_d is zero cannot be
    normalized and are dropped.

    Raises:
        BadShape: If R is empty or d is outside 1..min(rows, cols)
    """
    rows, cols = R.entries.shape
    if rows == 0 or cols == 0:
        raise BadShape("feedback matrix is empty")
    if not 1 <= d <= min(rows, cols):
        raise BadShape(f"d={d} must lie in 1..{min(rows, cols)} for a {rows}x{cols} matrix")

    U, S, Vt = scipy.linalg.svd(R.entries, full_matrices=False)
    user_vectors = U[:, :d] * S[:d]
    item_vectors = Vt[:d].T
    scales = np.linalg.norm(item_vectors, axis=1)
    keep = scales > 1e-12
    if not np.all(keep):
        logger.warning(
            f"[ENVIRONMENT_SERVICE] Dropping {int(np.sum(~keep))} items with no weight in the top-{d} factors"
        )
    logger.info(
        f"[ENVIRONMENT_SERVICE] Ingested {rows}x{cols} feedback matrix at d={d} "
        f"(top singular value {S[0]:.4f})"
    )
    return IngestedFactors(
        user_ids=R.user_ids,
        item_ids=tuple(i for i, k in zip(R.item_ids, keep) if k),
        user_vectors=user_vectors,
        arm_vectors=item_vectors[keep] / scales[keep][:, None],
        arm_scales=scales[keep],
        singular_values=S[:d],
    )


def environment_from_factors(
    factors: IngestedFactors,
    num_clients: int,
    arms_per_client: int,
    rng: np.random.Generator,
    user_index: Optional[int] = None,
    relations: Optional[Sequence[Tuple[str, int]]] = None,
    num_keyterms: Optional[int] = None,
    relation_max: int = 5,
    noise_std: float = 1.0,
) -> Environment:
    """
    Turn ingested factors into an environment for one user.

    Key terms follow the synthetic recipe over the arm vectors, using the
    ``(item_id, keyterm_id)`` relation pairs when given and random relations
    otherwise. The user's theta is the unit direction of their factor row.
    """
    d = factors.arm_vectors.shape[1]
    num_items = len(factors.item_ids)
    if arms_per_client > num_items:
        raise BadShape(f"{arms_per_client} arms per client but only {num_items} items")

    if relations is not None:
        position = {item: pos for pos, item in enumerate(factors.item_ids)}
        by_item: Dict[int, List[int]] = defaultdict(list)
        for item, term in relations:
            if str(item) in position:
                by_item[position[str(item)]].append(int(term))
        item_relations = tuple(tuple(by_item.get(i, ())) for i in range(num_items))
    else:
        num_keyterms = num_keyterms or max(d, num_items // 5)
        item_relations = random_relations(num_items, num_keyterms, relation_max, rng)

    keyterm_ids, keyterm_vectors = keyterms_from_relations(factors.arm_vectors, item_relations)
    if not keyterm_ids:
        raise EmptyKeyTermSet("no key term is related to any ingested item")
    key_terms = FeatureSet(ids=keyterm_ids, vectors=keyterm_vectors)

    if user_index is None:
        user_index = int(rng.integers(len(factors.user_ids)))
    theta = _unit_or_zero(factors.user_vectors[user_index])

    pool = FeatureSet.from_vectors(factors.arm_vectors)
    clients = draw_client_arms(pool, num_clients, arms_per_client, rng)
    return Environment(
        dim=d,
        clients=clients,
        key_terms=key_terms,
        theta_star=theta,
        noise_std=noise_std,
        richness_C=estimate_richness_C(key_terms, settings.RICHNESS_DIRECTIONS, rng),
    )
