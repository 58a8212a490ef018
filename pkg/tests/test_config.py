"""Test module for experiment configuration."""
import pathlib

import pytest
import yaml
from pydantic import ValidationError

from agscl.config import (
    ExperimentConfig,
    config_to_dict,
    dump_config,
    load_config,
    parse_config,
)
from agscl.exceptions import ConfigurationError


class TestConfig:
    """Test cases for reading and validating configurations."""

    def test_defaults(self):
        """An empty file is a complete configuration."""
        config = parse_config({})
        hp = config.hyperparams
        assert (hp.rho, hp.eta, hp.lr, hp.lr_factor, hp.lr_patience) == (
            0.3,
            0.9,
            1e-3,
            3.0,
            5,
        )
        assert config.tasks.n_tasks == 5
        assert [layer.units for layer in config.model.hidden] == [100, 100]
        assert config.aopc.fractions[0] == 0.0
        assert config.shuffle_tasks is False

    def test_lambda_key(self):
        """The freeze weight is spelled `lambda` in files."""
        config = parse_config({"hyperparams": {"lambda": 250, "penalty_scale": 2}})
        assert config.hyperparams.lam == 250
        assert config.hyperparams.effective_lam == 500
        assert config_to_dict(config)["hyperparams"]["lambda"] == 250

    @pytest.mark.parametrize(
        "raw",
        [
            {"hyperparams": {"rho": 0}},
            {"hyperparams": {"rho": 1.5}},
            {"hyperparams": {"eta": 0}},
            {"hyperparams": {"mu": -1}},
            {"hyperparams": {"lr": 1e-3, "lr_min": 1e-2}},
            {"tasks": {"kind": "split"}},
            {"aopc": {"fractions": [0.1, 0.5]}},
            {"ablations": {"tau": 0}},
            {"unknown": 1},
            ["not", "a", "mapping"],
        ],
    )
    def test_invalid(self, raw):
        """Invalid values are configuration errors."""
        with pytest.raises(ConfigurationError):
            parse_config(raw)

    def test_minibatch_ablation(self):
        """The per-minibatch prox ablation resolves into the hyperparameters."""
        config = parse_config({"ablations": {"prox_per_minibatch": True}})
        assert config.hyperparams.prox_every == "epoch"
        assert config.resolved_hyperparams.prox_every == "minibatch"

    def test_frozen(self):
        """Configurations cannot be changed in place."""
        config = ExperimentConfig()
        with pytest.raises(ValidationError):
            config.name = "other"

    @pytest.mark.usefixtures("cleandir")
    def test_load_and_dump(self, tiny_config):
        """A dumped configuration loads back equal."""
        path = dump_config(tiny_config, "config.yaml")
        assert load_config(path) == tiny_config
        assert yaml.safe_load(path.read_text())["name"] == "tiny"

    @pytest.mark.usefixtures("cleandir")
    def test_bad_yaml(self):
        """Unparseable YAML is a configuration error."""
        with open("bad.yaml", "w") as f:
            f.write("name: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_config("bad.yaml")

    def test_missing_file(self, tmp_path):
        """A missing file is a configuration error."""
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "missing.yaml")

    @pytest.mark.parametrize(
        "name", ["synthetic.yaml", "split_idx.yaml", "split_idx_conv.yaml"]
    )
    def test_shipped_configs(self, name):
        """The example configurations are valid."""
        path = pathlib.Path(__file__).parents[1] / "configs" / name
        config = load_config(path)
        assert config.name == name.removesuffix(".yaml")
