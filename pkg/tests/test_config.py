import copy

import pytest

from zimed.config import DEFAULTS, RunConfig, get_config_paths, load_config, validate_config
from zimed.errors import UsageError

ENV_VARS = ("ZIMED_OUTPUT_DIR", "ZIMED_N_JOBS", "ZIMED_LOG_LEVEL", "ZIMED_FAMILY", "ZIMED_ALPHA")


@pytest.fixture
def isolated(tmp_path, monkeypatch):
    """Empty working directory and home, no zimed environment variables."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HOME", str(tmp_path / "home"))
    monkeypatch.delenv("XDG_CONFIG_HOME", raising=False)
    for name in ENV_VARS:
        monkeypatch.delenv(name, raising=False)
    return tmp_path


class TestLoadConfig:
    def test_defaults(self, isolated):
        config = load_config()
        assert config == DEFAULTS
        assert config is not DEFAULTS

    def test_search_path_order(self, isolated, monkeypatch):
        monkeypatch.setenv("XDG_CONFIG_HOME", str(isolated / "xdg"))
        paths = get_config_paths()
        assert paths[0] == isolated / "zimed.toml"
        assert paths[-1] == isolated / "xdg" / "zimed" / "config.toml"

    def test_file_in_working_directory(self, isolated):
        (isolated / "zimed.toml").write_text('[model]\nfamily = "zip"\n\n[fiducial]\nk = 800\n')
        config = load_config()
        assert config["model"]["family"] == "zip"
        assert config["fiducial"]["k"] == 800
        assert config["model"]["quad_nodes"] == 15

    def test_explicit_missing_file(self, isolated):
        with pytest.raises(UsageError):
            load_config(isolated / "nope.toml")

    def test_explicit_malformed_file(self, isolated):
        path = isolated / "bad.toml"
        path.write_text("[model\nfamily=")
        with pytest.raises(UsageError):
            load_config(path)

    def test_environment_overrides_file(self, isolated, monkeypatch):
        (isolated / "zimed.toml").write_text("[run]\nn_jobs = 2\n")
        monkeypatch.setenv("ZIMED_N_JOBS", "4")
        monkeypatch.setenv("ZIMED_ALPHA", "0.1")
        monkeypatch.setenv("ZIMED_OUTPUT_DIR", "elsewhere")
        config = load_config()
        assert config["run"]["n_jobs"] == 4
        assert config["inference"]["alpha"] == 0.1
        assert config["run"]["output_dir"] == "elsewhere"


class TestValidateConfig:
    def test_defaults_are_valid(self):
        assert validate_config(copy.deepcopy(DEFAULTS)) is None

    @pytest.mark.parametrize(
        "section, key, value, message",
        [
            ("model", "family", "gamma", "Unknown family"),
            ("inference", "alpha", 1.5, "Invalid alpha"),
            ("fiducial", "k", 100, "Invalid number of fiducial draws"),
            ("fiducial", "n", -3, "Invalid equivalence number"),
            ("fiducial", "norm", "Linf", "Invalid norm"),
            ("inference", "methods", ["fiducial", "bayes"], "Invalid methods"),
            ("inference", "npb_reps", 50, "Invalid npb_reps"),
            ("run", "n_jobs", 0, "Invalid n_jobs"),
            ("weights", "truncate", 75, "Invalid truncate"),
            ("model", "quad_nodes", 3, "Invalid quad_nodes"),
        ],
    )
    def test_invalid_values(self, section, key, value, message):
        config = copy.deepcopy(DEFAULTS)
        config[section][key] = value
        assert message in validate_config(config)


class TestRunConfig:
    def test_overrides(self):
        run = RunConfig.from_config(
            copy.deepcopy(DEFAULTS), "mediate", input="data.csv", family="ZIPoisson", k=600, n=300,
            methods="fiducial, delta", seed=9, output_dir="out", truncate=1.0, alpha=None,
        )
        assert run.input == "data.csv"
        assert run.family == "zip"
        assert run.k == 600
        assert run.n_equiv == 300
        assert run.methods == ("fiducial", "delta")
        assert run.require_seed() == 9
        assert run.output_dir == "out"
        assert run.truncate == 1.0
        assert run.alpha == 0.05
        assert run.fit_options().seed == 9
        assert run.effect_options().truncate == 1.0

    def test_auto_equivalence_number(self):
        run = RunConfig.from_config(copy.deepcopy(DEFAULTS), "mediate")
        assert run.n_equiv is None
        assert run.truncate is None
        assert run.schema.mediator_prefix == "taxon_"

    def test_seed_required(self):
        run = RunConfig.from_config(copy.deepcopy(DEFAULTS), "simulate")
        with pytest.raises(UsageError, match="simulate"):
            run.require_seed()

    def test_invalid_override(self):
        with pytest.raises(UsageError, match="Configuration error"):
            RunConfig.from_config(copy.deepcopy(DEFAULTS), "mediate", k=10)

    def test_metadata(self):
        run = RunConfig.from_config(copy.deepcopy(DEFAULTS), "mediate", seed=1)
        metadata = run.to_metadata()
        assert "log_level" not in metadata
        assert metadata["schema"]["c1"] == []
        assert metadata["seed"] == 1
