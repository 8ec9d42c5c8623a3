import pytest

from buildmend.config import PipelineConfig
from buildmend.errors import ConfigError


def test_defaults_when_no_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = PipelineConfig.load()
    assert cfg.prompt_budget == 24000 and cfg.snippet_window == 2 and cfg.examples_per_prompt == 2
    assert cfg.sandbox_mode == "local" and cfg.github_token_env == "PF_GITHUB_TOKEN"


def test_explicit_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.toml")


def test_load_file(tmp_path):
    (tmp_path / "rules").mkdir()
    path = tmp_path / "buildmend.toml"
    path.write_text('[ci]\nmarkers = ["west build", "bazel build"]\n[registry]\nrules = "rules"\n'
                    '[prompt]\nbudget = 8000\n[seeds]\nselection = 7\n[output]\ndirectory = "results"\n')
    cfg = PipelineConfig.load(path)
    assert cfg.markers == ["west build", "bazel build"]
    assert cfg.rules_dir == str((tmp_path / "rules").resolve())
    assert cfg.prompt_budget == 8000 and cfg.seeds == {"selection": 7} and cfg.output_dir == "results"
    assert cfg.marker_set().scan("bazel build //x")


@pytest.mark.parametrize("body", [
    '[registry]\npatterns = "nope"\n',
    '[sandbox]\nmode = "vm"\n',
    '[prompt]\nbudget = 0\n',
    '[prompt]\nbudget = "lots"\n',
    'not toml = = =\n',
])
def test_invalid_config(tmp_path, body):
    path = tmp_path / "c.toml"
    path.write_text(body)
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_provenance_tracks_config_and_seeds(tmp_path):
    a, b = PipelineConfig(), PipelineConfig(prompt_budget=1000)
    assert a.config_hash == PipelineConfig().config_hash != b.config_hash
    prov = a.provenance(selection=3)
    assert prov.seeds == {"selection": 3} and prov.tool_version
