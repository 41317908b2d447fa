import pytest

from fireshift.core import settings
from fireshift.core.config import ExperimentConfig, load_config, parse_config
from fireshift.core.errors import ConfigError, StorageError
from fireshift.core.reporting import manifest_text


def test_mode_is_mandatory():
    with pytest.raises(ConfigError, match="mode"):
        parse_config("seed = 3\n")


def test_defaults_fill_missing_keys():
    config = parse_config("mode = batch\n")
    assert config.train.eta == 0.001
    assert config.train.penalty == 0.1
    assert config.train.fisher.momentum_alpha == 0.9
    assert config.train.fisher.mix_mu == 0.5
    assert config.train.fisher.rank_k == 50
    assert config.train.fisher.variant_kind == "diagonal"
    assert config.fed is None


def test_lambda_key():
    assert parse_config("mode = batch\ntrain.lambda = 0.25\n").train.penalty == 0.25


def test_federated_section():
    config = parse_config("mode = federated\nfed.fim_exchange_period = 5\nfed.partition.kind = dirichlet\n")
    assert config.fed.fim_exchange_period == 5
    assert config.fed.partition.kind == "dirichlet"


def test_federated_mode_gets_default_fed_section():
    assert parse_config("mode = federated\n").fed.num_clients == 10


def test_fed_section_outside_federated_mode():
    with pytest.raises(ConfigError):
        parse_config("mode = batch\nfed.rounds = 3\n")


def test_seed_is_inherited():
    config = parse_config("mode = federated\nseed = 42\ntrain.seed = 7\n")
    assert config.train.seed == 7
    assert config.fed.seed == 42


def test_comments_lists_and_strings():
    text = """
    # sweep a few penalties
    mode = batch   # trailing comment
    output_dir = "runs/sweep"
    model.hidden_sizes = [16, 8]
    train.lambda_sweep = 0.01, 0.1
    """
    config = parse_config(text)
    assert config.output_dir == "runs/sweep"
    assert config.model.hidden_sizes == (16, 8)
    assert config.train.lambda_sweep == (0.01, 0.1)


@pytest.mark.parametrize(
    "text",
    [
        "mode = batch\ntrain.unknown_knob = 1\n",
        "mode = batch\ntrain.eta = abc\n",
        "mode = batch\ntrain.eta = -0.1\n",
        "mode = batch\nmode = folds\n",
        "mode = batch\njust some words\n",
        "mode = batch\ntrain = 3\ntrain.eta = 0.1\n",
        "mode = sideways\n",
        "mode = batch\ndataset.kind = csv\n",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_manifest_parses_back_to_same_config():
    config = parse_config(
        "mode = federated\nseed = 9\nshift.kind = rotation_beta\nmodel.hidden_sizes = [4]\n"
        "fed.lambda = 0.3\nfed.fisher.variant_kind = lowrank\n"
    )
    text = manifest_text(config.resolved(), {"seed": 9})
    assert parse_config(text) == config


def test_resolved_uses_lambda_spelling():
    resolved = ExperimentConfig(mode="batch").resolved()
    assert "lambda" in resolved["train"]
    assert "penalty" not in resolved["train"]


def test_missing_config_file(tmp_path):
    with pytest.raises(StorageError):
        load_config(tmp_path / "nope.cfg")


def test_worker_count_capped(monkeypatch):
    monkeypatch.setattr(settings, "FIRE_THREADS", 2)
    assert settings.worker_count(8) == 2
    assert settings.worker_count(1) == 1
    assert settings.worker_count() == 2


def test_theory_convergence_section():
    config = parse_config(
        "mode = verify_theory\nseed = 11\ntheory.convergence.lambda = 0.5\ntheory.convergence.horizons = 10, 20\n"
    )
    convergence = config.theory.convergence
    assert convergence.penalty == 0.5
    assert convergence.horizons == (10, 20)
    assert convergence.seed == 11
    text = manifest_text(config.resolved(), {})
    assert "theory.convergence.horizons" in text
    assert "theory.convergence.dim" in text
    assert parse_config(text) == config


def test_theory_convergence_can_be_disabled():
    assert parse_config("mode = verify_theory\ntheory.convergence = none\n").theory.convergence is None


def test_num_fragments_accepts_a_list():
    config = parse_config("mode = folds\nnum_fragments = 2, 10, 20\n")
    assert config.fragment_counts == (2, 10, 20)
    assert parse_config("mode = batch\nnum_fragments = 5\n").fragment_counts == (5,)
    assert parse_config(manifest_text(config.resolved(), {})) == config


@pytest.mark.parametrize(
    "text",
    [
        "mode = batch\nnum_fragments = []\n",
        "mode = batch\nnum_fragments = [2, 0]\n",
        "mode = diagnostics\nnum_fragments = [2, 4]\n",
    ],
)
def test_num_fragments_list_rejections(text):
    with pytest.raises(ConfigError):
        parse_config(text)
