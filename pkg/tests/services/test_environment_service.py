import math

import numpy as np
import pytest

from app.core.exceptions import BadShape, EmptyKeyTermSet, UnknownArm, UnknownKeyTerm
from app.schemas.environment import FeatureSet, FeedbackMatrix, SyntheticConfig
from app.services.environment_service import (
    binarize,
    build_lowerbound_instance,
    environment_from_factors,
    estimate_richness_C,
    generate_synthetic,
    ingest_feedback_matrix,
    keyterms_from_relations,
    lowerbound_gap,
    sample_arm_reward,
    sample_keyterm_reward,
)


@pytest.fixture
def small_synthetic() -> SyntheticConfig:
    return SyntheticConfig(
        d=5,
        num_users=10,
        num_arms=60,
        num_keyterms=20,
        relation_max=4,
        seed=3,
        num_clients=3,
        arms_per_client=20,
        user_index=4,
    )


def test_synthetic_defaults():
    cfg = SyntheticConfig()
    assert (cfg.d, cfg.num_users, cfg.num_arms, cfg.num_keyterms) == (50, 200, 5000, 1000)


def test_synthetic_environment_shape(small_synthetic):
    dataset = generate_synthetic(small_synthetic)
    env = dataset.environment
    assert env.dim == 5
    assert env.num_clients == 3
    assert all(len(arms) == 20 for arms in env.clients)
    assert dataset.user_thetas.shape == (10, 5)
    np.testing.assert_allclose(np.linalg.norm(dataset.user_thetas, axis=1), 1.0)
    np.testing.assert_array_equal(env.theta_star, dataset.user_thetas[4])
    np.testing.assert_allclose(np.linalg.norm(env.key_terms.vectors, axis=1), 1.0)
    assert 0.0 < env.richness_C <= 1.0


def test_synthetic_key_terms_follow_relations(small_synthetic):
    dataset = generate_synthetic(small_synthetic)
    ids, vectors = keyterms_from_relations(dataset.arm_pool.vectors, dataset.relations)
    assert ids == dataset.environment.key_terms.ids
    np.testing.assert_allclose(vectors, dataset.environment.key_terms.vectors)
    assert all(1 <= len(terms) <= 4 for terms in dataset.relations)


def test_synthetic_is_deterministic(small_synthetic):
    first = generate_synthetic(small_synthetic).environment
    second = generate_synthetic(small_synthetic).environment
    np.testing.assert_array_equal(first.theta_star, second.theta_star)
    for a, b in zip(first.clients, second.clients):
        assert a.ids == b.ids
        np.testing.assert_array_equal(a.vectors, b.vectors)


def test_keyterm_is_weighted_mean_of_related_arms():
    arms = np.array([[1.0, 0.0], [0.0, 1.0]])
    # arm 0 relates to key terms 0 and 1 (weight 1/2 each), arm 1 only to 1
    ids, vectors = keyterms_from_relations(arms, [(0, 1), (1,)])
    assert ids == (0, 1)
    np.testing.assert_allclose(vectors[0], [1.0, 0.0])
    expected = np.array([0.5, 1.0]) / np.linalg.norm([0.5, 1.0])
    np.testing.assert_allclose(vectors[1], expected)


def test_lowerbound_gap():
    assert lowerbound_gap(5, 4, 100) == pytest.approx(0.1)


def test_lowerbound_instance_pair():
    theta_env, perturbed_env = build_lowerbound_instance(5, 8, 4, 100, s=3)
    np.testing.assert_allclose(theta_env.theta_star, [0.1, 0, 0, 0, 0])
    assert theta_env.best_arms == [0] * 4
    assert theta_env.best_values[0] == pytest.approx(0.1)
    assert perturbed_env.best_arms[0] == 2
    assert perturbed_env.best_values[0] == pytest.approx(0.2)
    assert perturbed_env.num_clients == 4
    assert len(perturbed_env.clients[0]) == 8
    assert theta_env.richness_C == pytest.approx(1.0 / math.sqrt(5.0))


def test_lowerbound_least_pulled_coordinate():
    _, perturbed_env = build_lowerbound_instance(4, 4, 1, 300, pull_counts=[50, 9, 3, 7])
    assert perturbed_env.best_arms[0] == 2


def test_lowerbound_rejects_short_horizon():
    with pytest.raises(BadShape):
        build_lowerbound_instance(5, 5, 1, 4)
    with pytest.raises(BadShape):
        build_lowerbound_instance(5, 4, 1, 1000)
    with pytest.raises(BadShape):
        build_lowerbound_instance(5, 5, 1, 1000, s=1)


def test_noiseless_rewards(env_factory):
    env = env_factory(np.eye(3), theta=[0.7, 0.0, 0.0])
    rng = np.random.default_rng(0)
    assert sample_arm_reward(env, 0, 0, rng) == pytest.approx(0.7)
    env = env_factory(np.eye(3), theta=[0.0, 0.4, 0.0])
    assert sample_keyterm_reward(env, 1, rng) == pytest.approx(0.4)


def test_noisy_reward_mean(env_factory):
    env = env_factory(np.eye(2), theta=[0.5, 0.0], noise_std=1.0)
    rng = np.random.default_rng(1)
    rewards = [sample_arm_reward(env, 0, 0, rng) for _ in range(4000)]
    assert np.mean(rewards) == pytest.approx(0.5, abs=0.06)


def test_unknown_ids(env_factory):
    env = env_factory(np.eye(2), theta=[0.5, 0.0])
    rng = np.random.default_rng(0)
    with pytest.raises(UnknownArm):
        sample_arm_reward(env, 0, 99, rng)
    with pytest.raises(UnknownArm):
        sample_arm_reward(env, 5, 0, rng)
    with pytest.raises(UnknownKeyTerm):
        sample_keyterm_reward(env, 99, rng)


def test_richness_of_signed_axes():
    key_terms = FeatureSet.from_vectors([[1, 0], [-1, 0], [0, 1], [0, -1]])
    angles = np.linspace(0.0, 2.0 * np.pi, 10_000, endpoint=False)
    directions = np.column_stack([np.cos(angles), np.sin(angles)])
    C = estimate_richness_C(key_terms, len(directions), directions=directions)
    assert C == pytest.approx(math.sqrt(2.0) / 2.0, abs=1e-6)


def test_richness_exact_alignment():
    directions = np.array([[0.6, 0.8], [1.0, 0.0]])
    key_terms = FeatureSet.from_vectors(np.vstack([directions, -directions]))
    assert estimate_richness_C(key_terms, 2, directions=directions) == pytest.approx(1.0)


def test_richness_more_directions_never_increases():
    key_terms = FeatureSet.from_vectors(np.eye(3))
    few = estimate_richness_C(key_terms, 100, rng=np.random.default_rng(4))
    many = estimate_richness_C(key_terms, 1000, rng=np.random.default_rng(4))
    assert many <= few


def test_richness_empty():
    with pytest.raises(EmptyKeyTermSet):
        estimate_richness_C(FeatureSet(ids=(), vectors=np.zeros((0, 2))), 10)


def test_binarize_above_three():
    np.testing.assert_array_equal(binarize([4, 3, 5, 1]), [1.0, 0.0, 1.0, 0.0])


def test_ingest_rank_one_matrix():
    u = np.array([1.0, 0.0, 1.0])
    v = np.array([1.0, 1.0, 0.0, 1.0])
    R = FeedbackMatrix(
        user_ids=("a", "b", "c"), item_ids=("i1", "i2", "i3", "i4"), entries=np.outer(u, v)
    )
    factors = ingest_feedback_matrix(R, 1)
    assert factors.item_ids == ("i1", "i2", "i4")
    rebuilt = factors.user_vectors @ (factors.arm_vectors * factors.arm_scales[:, None]).T
    np.testing.assert_allclose(rebuilt, np.outer(u, v)[:, [0, 1, 3]], atol=1e-6)
    np.testing.assert_allclose(np.abs(factors.arm_vectors), 1.0)


def test_ingest_rejects_large_dimension():
    R = FeedbackMatrix(user_ids=("a", "b"), item_ids=("x", "y", "z"), entries=np.eye(2, 3))
    with pytest.raises(BadShape):
        ingest_feedback_matrix(R, 3)


def test_environment_from_factors():
    rng = np.random.default_rng(12)
    entries = (rng.random((30, 40)) < 0.3).astype(float)
    entries[5, :3] = 1.0
    R = FeedbackMatrix(
        user_ids=tuple(f"u{i}" for i in range(30)),
        item_ids=tuple(f"i{j}" for j in range(40)),
        entries=entries,
    )
    factors = ingest_feedback_matrix(R, 3)
    env = environment_from_factors(
        factors, num_clients=2, arms_per_client=10, rng=np.random.default_rng(0), user_index=5
    )
    assert env.dim == 3
    assert env.num_clients == 2
    assert len(env.key_terms) > 0
    assert np.linalg.norm(env.theta_star) == pytest.approx(1.0)


def test_environment_from_factors_with_relations():
    rng = np.random.default_rng(2)
    entries = (rng.random((12, 15)) < 0.4).astype(float)
    entries[0, :3] = 1.0
    R = FeedbackMatrix(
        user_ids=tuple(str(i) for i in range(12)),
        item_ids=tuple(str(j) for j in range(15)),
        entries=entries,
    )
    factors = ingest_feedback_matrix(R, 2)
    relations = [(item, int(item) % 3) for item in factors.item_ids]
    env = environment_from_factors(
        factors,
        num_clients=1,
        arms_per_client=5,
        rng=np.random.default_rng(1),
        user_index=0,
        relations=relations,
    )
    assert set(env.key_terms.ids) <= {0, 1, 2}
