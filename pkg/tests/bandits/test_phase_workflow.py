import numpy as np
import pytest
from scipy.stats import special_ortho_group

from app.bandits.nodes.server_node import conversation_weight, keyterm_repetitions
from app.bandits.nodes.shared import augmented_min_eigenvalue
from app.bandits.workflows.phase_workflow import initial_states, run_fedconpe, run_phase
from app.schemas.algorithm import AlgoConfig
from app.services.protocol_service import ledger_from_records


@pytest.fixture
def basis_env(env_factory):
    return env_factory(np.eye(2), theta=[0.6, 0.3], richness_C=0.5, clients=2)


@pytest.fixture
def basis_cfg():
    return AlgoConfig(T=2000, M=2, d=2, K=2, C=0.5)


def _rngs(seed, count=2):
    return np.random.default_rng(seed).spawn(count)


def test_full_phase(basis_env, basis_cfg):
    server, clients = initial_states(basis_env)
    server, clients, transcript = run_phase(server, clients, basis_env, basis_cfg, 2000, _rngs(0))

    assert not transcript.horizon_exceeded
    assert transcript.rounds == transcript.planned_rounds
    assert transcript.rounds == max(r.arm_pulls for r in transcript.reports)
    assert server.phase == 2
    assert all(c.phase == 2 for c in clients)
    np.testing.assert_allclose(transcript.theta_hat, [0.6, 0.3], atol=1e-12)
    assert transcript.theta_error < 1e-12

    # no deficient direction: eigen count (1) + G, W (4 + 2) + theta broadcast (2)
    per_client = ledger_from_records(transcript.records).per_client_phase()
    assert {key: sum(v.values()) for key, v in per_client.items()} == {(0, 1): 9, (1, 1): 9}
    for report in transcript.reports:
        assert report.eigen_uploads == 0
        assert report.keyterm_pulls == 0
        assert report.best_arm_active

    assert len(transcript.actions.arm_ids) == 2 * transcript.rounds
    np.testing.assert_array_equal(transcript.actions.keyterm_ids, -1)


def test_horizon_cuts_phase(basis_env, basis_cfg):
    server, clients = initial_states(basis_env)
    next_server, next_clients, transcript = run_phase(
        server, clients, basis_env, basis_cfg, 10, _rngs(0), start_round=1991
    )
    assert transcript.horizon_exceeded
    assert transcript.rounds == 10
    assert transcript.planned_rounds > 10
    assert next_server.phase == 1
    assert next_server.theta_hat is None
    assert [c.active for c in next_clients] == [c.active for c in clients]
    assert transcript.theta_hat is None
    assert sum(r.scalar_count for r in transcript.records) == 2
    np.testing.assert_array_equal(np.unique(transcript.actions.rounds), np.arange(1991, 2001))


def test_clients_must_share_phase(basis_env, basis_cfg):
    server, clients = initial_states(basis_env)
    clients[1] = clients[1].model_copy(update={"phase": 2})
    with pytest.raises(ValueError):
        run_phase(server, clients, basis_env, basis_cfg, 100, _rngs(0))


def test_run_covers_horizon(env_factory):
    env = env_factory(
        [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], theta=[0.5, 0.4], noise_std=1.0, clients=2
    )
    cfg = AlgoConfig(T=3000, M=2, d=2, K=3, C=env.richness_C)
    run = run_fedconpe(env, cfg, np.random.default_rng(11))
    assert run.rounds == 3000
    assert sum(t.rounds for t in run.transcripts) == 3000
    assert [t.phase for t in run.transcripts] == list(range(1, len(run.transcripts) + 1))
    assert all(not t.horizon_exceeded for t in run.transcripts[:-1])


def test_run_is_deterministic(env_factory):
    env = env_factory(
        [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], theta=[0.5, 0.4], noise_std=1.0, clients=2
    )
    cfg = AlgoConfig(T=1500, M=2, d=2, K=3, C=env.richness_C)
    first = run_fedconpe(env, cfg, np.random.default_rng(3))
    second = run_fedconpe(env, cfg, np.random.default_rng(3))
    for a, b in zip(first.transcripts, second.transcripts):
        np.testing.assert_array_equal(a.actions.arm_ids, b.actions.arm_ids)
        np.testing.assert_array_equal(a.actions.keyterm_ids, b.actions.keyterm_ids)


def test_config_must_match_environment(basis_env):
    with pytest.raises(ValueError):
        run_fedconpe(basis_env, AlgoConfig(T=100, M=3, d=2, K=2, C=0.5), np.random.default_rng(0))


def test_aligned_key_terms_lift_spectrum():
    rng = np.random.default_rng(17)
    for _ in range(500):
        d = int(rng.integers(2, 8))
        phase = int(rng.integers(1, 7))
        C = float(rng.uniform(0.3, 1.0))
        N = float(rng.uniform(1.0, 4.0)) * max(1.0, 1.0 / C**2)
        cfg = AlgoConfig(
            T=int(rng.integers(100, 100_000)),
            M=int(rng.integers(1, 20)),
            d=d,
            K=int(rng.integers(2, 200)),
            C=C,
            N=N,
        )
        s = cfg.eigen_threshold(phase)
        Q = special_ortho_group.rvs(d, random_state=rng)
        values = rng.uniform(0.0, 2.0 * s, size=d)
        V = Q @ np.diag(values) @ Q.T
        deficient = [j for j in range(d) if values[j] < s]
        keyterms = [Q[:, j] for j in deficient]

        formula = [(s - values[j]) / C**2 for j in deficient]
        assert augmented_min_eigenvalue(V, keyterms, formula) >= s - 1e-9

        delivered = [
            conversation_weight(keyterm_repetitions(values[j], cfg, phase), cfg, phase)
            for j in deficient
        ]
        assert augmented_min_eigenvalue(V, keyterms, delivered) >= s - 1e-9


def test_reports_lemma_from_delivered_conversations(env_factory):
    tilted = [0.5, -(0.75**0.5)]
    env = env_factory(
        [[1.0, 0.0], [0.5, 0.75**0.5]],
        theta=[0.6, 0.3],
        key_terms=[[1.0, 0.0], [0.0, 1.0], tilted],
        richness_C=1.0,
    )
    cfg = AlgoConfig(T=5000, M=1, d=2, K=2, C=1.0)
    server, clients = initial_states(env)
    _, _, transcript = run_phase(server, clients, env, cfg, 5000, _rngs(3, 1))

    (report,) = transcript.reports
    assert report.keyterm_pulls > 0
    assert report.lemma_proviso_ok
    assert report.lemma_min_eigenvalue >= report.threshold - 1e-9
