import math

import numpy as np
import pytest
from scipy import stats

from app.bandits.policies.schedules import ConversationSchedule
from app.bandits.policies.ucb_policy import (
    UcbState,
    armcon_step,
    conlinucb_step,
    conucb_step,
    default_alpha,
    linucb_step,
    run_baseline,
    select_keyterm,
)
from app.core.exceptions import EmptyKeyTermSet
from app.services.harness_service import run_seed
from app.schemas.environment import FeatureSet


@pytest.fixture
def noisy_env(env_factory):
    rng = np.random.default_rng(21)
    arms = rng.standard_normal((10, 3))
    arms /= np.linalg.norm(arms, axis=1, keepdims=True)
    return env_factory(arms, theta=[0.6, -0.3, 0.5], noise_std=1.0, clients=2)


def test_default_alpha():
    assert default_alpha(1000) == pytest.approx(1.0 + math.sqrt(math.log(2000.0) / 2.0))


def test_cold_start_index_is_flat(plane_env):
    state = UcbState.fresh(2, alpha=2.0, lambda_reg=4.0)
    np.testing.assert_allclose(state.index(plane_env.clients[0].vectors), 1.0)
    arm, _ = linucb_step(state, plane_env.clients[0], plane_env, np.random.default_rng(0))
    assert arm == 0


def test_greedy_when_alpha_zero(plane_env):
    state = UcbState.fresh(2, alpha=0.0)
    state.theta_hat = plane_env.theta_star.copy()
    arm, _ = linucb_step(state, plane_env.clients[0], plane_env, np.random.default_rng(0))
    assert arm == plane_env.best_arms[0]


def test_sherman_morrison_tracks_inverse():
    rng = np.random.default_rng(4)
    state = UcbState.fresh(3, alpha=1.0, lambda_reg=0.5)
    for _ in range(50):
        x = rng.standard_normal(3)
        state.update(x / np.linalg.norm(x), float(rng.standard_normal()))
    np.testing.assert_allclose(state.gram_inv, np.linalg.inv(state.gram), atol=1e-10)
    np.testing.assert_allclose(state.theta_hat, np.linalg.solve(state.gram, state.moment))


def _trajectory(step, env, rounds=30, seed=8):
    rng = np.random.default_rng(seed)
    state = UcbState.fresh(env.dim, alpha=1.5)
    arms = []
    for t in range(1, rounds + 1):
        arms.append(step(state, t, rng))
    return arms, state


def test_armcon_without_conversations_is_linucb(noisy_env):
    arms_set = noisy_env.clients[0]
    silent = ConversationSchedule(kind="none")
    plain, plain_state = _trajectory(
        lambda s, t, rng: linucb_step(s, arms_set, noisy_env, rng)[0], noisy_env
    )
    armcon, armcon_state = _trajectory(
        lambda s, t, rng: armcon_step(s, silent, arms_set, noisy_env, t, rng)[0], noisy_env
    )
    assert plain == armcon
    np.testing.assert_array_equal(plain_state.gram, armcon_state.gram)


def test_armcon_query_adds_one_update(noisy_env):
    state = UcbState.fresh(3, alpha=1.0)
    _, queried, _ = armcon_step(
        state, ConversationSchedule(kind="linear"), noisy_env.clients[0], noisy_env, 50,
        np.random.default_rng(0),
    )
    assert len(queried) == 1
    assert queried[0] in noisy_env.clients[0].ids
    assert np.trace(state.gram) == pytest.approx(3.0 + 2.0)
    assert state.queries_served == 1


def test_mcr_picks_widest_key_term():
    state = UcbState(
        dim=2,
        alpha=1.0,
        gram=np.diag([1.0, 100.0]),
        gram_inv=np.diag([1.0, 0.01]),
        moment=np.zeros(2),
        theta_hat=np.zeros(2),
    )
    key_terms = FeatureSet(ids=(4, 9), vectors=np.eye(2))
    pos = select_keyterm("MCR", state, key_terms, np.random.default_rng(0))
    assert key_terms.ids[pos] == 4


def test_bs_queries_uniformly_over_spanner():
    key_terms = FeatureSet.from_vectors(np.eye(3))
    state = UcbState.fresh(3, alpha=1.0)
    rng = np.random.default_rng(30)
    picks = [select_keyterm("BS", state, key_terms, rng, spanner=[0, 1, 2]) for _ in range(10_000)]
    counts = np.bincount(picks, minlength=3)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_ucb_variant_uses_index():
    state = UcbState.fresh(2, alpha=0.0)
    state.theta_hat = np.array([0.1, 0.9])
    key_terms = FeatureSet.from_vectors(np.eye(2))
    assert select_keyterm("UCB", state, key_terms, np.random.default_rng(0)) == 1


def test_conlinucb_silent_schedule_is_linucb(noisy_env):
    arms_set = noisy_env.clients[0]
    silent = ConversationSchedule(kind="none")
    plain, _ = _trajectory(
        lambda s, t, rng: linucb_step(s, arms_set, noisy_env, rng)[0], noisy_env
    )
    for variant in ("MCR", "UCB"):
        conversational, _ = _trajectory(
            lambda s, t, rng: conlinucb_step(
                variant, s, silent, arms_set, noisy_env.key_terms, noisy_env, t, rng
            )[0],
            noisy_env,
        )
        assert conversational == plain


def test_conucb_queries_known_key_terms(noisy_env):
    state = UcbState.fresh(3, alpha=1.0)
    _, queried, _ = conucb_step(
        state, ConversationSchedule(kind="linear"), noisy_env.clients[0], noisy_env.key_terms,
        noisy_env, 100, np.random.default_rng(0),
    )
    assert len(queried) == 1
    assert queried[0] in noisy_env.key_terms.ids


def test_conversational_step_needs_key_terms(noisy_env):
    state = UcbState.fresh(3, alpha=1.0)
    empty = FeatureSet(ids=(), vectors=np.zeros((0, 3)))
    with pytest.raises(EmptyKeyTermSet):
        conlinucb_step(
            "MCR", state, ConversationSchedule(), noisy_env.clients[0], empty, noisy_env, 1,
            np.random.default_rng(0),
        )


@pytest.mark.parametrize("name", ["conlinucb-bs", "conlinucb-mcr", "conucb", "armcon"])
def test_linear_schedule_query_count(noisy_env, name):
    run = run_baseline(
        name, noisy_env, 500, np.random.default_rng(5), sched=ConversationSchedule(kind="linear")
    )
    assert run.queries == [10, 10]
    assert np.count_nonzero(run.keyterm_ids >= 0) == 20
    assert len(run.arm_ids) == 1000


@pytest.mark.parametrize("T", [3, 8, 22, 30])
def test_log_schedule_query_count_matches_budget(noisy_env, T):
    run = run_baseline("conlinucb-mcr", noisy_env, T, np.random.default_rng(5))
    budget = ConversationSchedule().budget(T)
    assert run.queries == [budget, budget]


def test_log_schedule_jump_served_in_one_round(noisy_env):
    state = UcbState.fresh(3, alpha=1.0)
    _, queried, _ = conlinucb_step(
        "MCR", state, ConversationSchedule(), noisy_env.clients[0], noisy_env.key_terms,
        noisy_env, 3, np.random.default_rng(0),
    )
    # b jumps from 0 to 5 at t=3
    assert len(queried) == 5
    assert state.queries_served == 5
    assert np.trace(state.gram) == pytest.approx(3.0 + 6.0)


def test_baseline_log_counts_every_conversation(small_experiment):
    cfg = small_experiment.model_copy(
        update={
            "T": 30,
            "algorithm": small_experiment.algorithm.model_copy(update={"name": "conlinucb-mcr"}),
        }
    )
    log = run_seed(cfg, 1)
    assert log.keyterm_pulls == cfg.M * ConversationSchedule().budget(30)
