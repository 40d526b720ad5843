import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import BadShape, ConfigError
from app.schemas.environment import SyntheticConfig
from app.services.environment_service import generate_synthetic
from app.services.harness_service import run_seed
from app.services.storage_service import (
    ExperimentStore,
    METRICS_COLUMNS,
    load_experiment_config,
    load_feedback_csv,
    load_relations_csv,
    read_environment,
    read_metrics_csv,
    write_environment,
)


def test_environment_file_round_trip(tmp_path):
    env = generate_synthetic(
        SyntheticConfig(
            d=4, num_users=3, num_arms=20, num_keyterms=8, num_clients=2, arms_per_client=6
        )
    ).environment
    path = write_environment(env, tmp_path / "world" / "env.txt")
    loaded = read_environment(path)
    assert loaded.dim == env.dim
    assert loaded.richness_C == env.richness_C
    np.testing.assert_array_equal(loaded.theta_star, env.theta_star)
    assert loaded.key_terms.ids == env.key_terms.ids
    np.testing.assert_array_equal(loaded.key_terms.vectors, env.key_terms.vectors)
    for a, b in zip(loaded.clients, env.clients):
        assert a.ids == b.ids
        np.testing.assert_array_equal(a.vectors, b.vectors)


def test_read_environment_rejects_other_files(tmp_path):
    path = tmp_path / "notes.txt"
    path.write_text("hello\n")
    with pytest.raises(BadShape):
        read_environment(path)
    path.write_text("fedcon-env 1\ndim 2\n[key_terms]\n0 1 0\n")
    with pytest.raises(BadShape):
        read_environment(path)


def test_load_experiment_config_with_overrides(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(
        "d: 3\nK: 8\nM: 2\nT: 100\n"
        "environment:\n  kind: synthetic\n  num_arms: 40\n"
        "algorithm:\n  name: linucb\n  schedule: linear\n"
    )
    cfg = load_experiment_config(path, {"algo": "conlinucb-mcr", "T": 250, "seeds": [4, 5]})
    assert cfg.algorithm.name == "conlinucb-mcr"
    assert cfg.algorithm.schedule == "linear"
    assert cfg.T == 250
    assert cfg.seeds == [4, 5]
    assert cfg.environment.num_arms == 40


def test_load_experiment_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.yaml")
    path = tmp_path / "bad.yaml"
    path.write_text("algorithm:\n  name: thompson\n")
    with pytest.raises(ConfigError):
        load_experiment_config(path)
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_experiment_config(path)


def test_load_feedback_csv_binarizes(tmp_path):
    path = tmp_path / "ratings.csv"
    pd.DataFrame(
        {
            "user_id": ["u1", "u1", "u2", "u3"],
            "item_id": ["a", "b", "a", "c"],
            "value": [5, 2, 4, 3],
        }
    ).to_csv(path, index=False)
    matrix = load_feedback_csv(path, binarize_threshold=3.0)
    assert matrix.user_ids == ("u1", "u2", "u3")
    assert matrix.item_ids == ("a", "b", "c")
    np.testing.assert_array_equal(
        matrix.entries, [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    )


def test_load_feedback_csv_requires_columns(tmp_path):
    path = tmp_path / "ratings.csv"
    pd.DataFrame({"user": ["u1"], "item_id": ["a"], "value": [1]}).to_csv(path, index=False)
    with pytest.raises(BadShape):
        load_feedback_csv(path)


def test_load_relations_csv(tmp_path):
    path = tmp_path / "relations.csv"
    pd.DataFrame({"item_id": ["a", "b"], "keyterm_id": [3, 1]}).to_csv(path, index=False)
    assert load_relations_csv(path) == [("a", 3), ("b", 1)]


def test_store_writes_exact_csvs(tmp_path, small_experiment):
    log = run_seed(small_experiment, 1)
    store = ExperimentStore(tmp_path / "out")
    paths = store.write_all([log], [])
    assert store.seed_path(1) in paths
    frame = read_metrics_csv(store.seed_path(1))
    assert list(frame.columns) == METRICS_COLUMNS
    np.testing.assert_array_equal(frame["cum_regret"].to_numpy(), log.cum_regret)
    np.testing.assert_array_equal(frame["arm_id"].to_numpy(), log.arm_id)
    comm = pd.read_csv(tmp_path / "out" / "comm.csv")
    assert comm["scalar_count"].sum() == log.ledger.total_scalars
