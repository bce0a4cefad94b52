import pytest

from kgaugment.errors import ConfigError
from kgaugment.settings import PRESETS, RunConfig, load_run_config, read_manifest, write_manifest


def test_defaults_are_the_desk_preset():
    config = load_run_config()
    assert config == PRESETS["desk"]
    assert config.kg_dim == 16
    assert config.clusters == 20
    assert config.mode == "conv_kg"


def test_full_preset():
    config = load_run_config(overrides={"preset": "full"})
    assert config.preset == "full"
    assert config.kg_dim == 50
    assert config.batch_size == 256


def test_file_then_flags(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# desk run\nmode=vanilla_kg\nepochs=12\nshared_encoder=yes\nrelu-after-pool=1\n", encoding="utf-8")
    config = load_run_config(path, {"epochs": 3, "seed": None})
    assert config.mode == "vanilla_kg"
    assert config.epochs == 3
    assert config.seed == 0
    assert config.shared_encoder is True
    assert config.relu_after_pool is True


@pytest.mark.parametrize(
    "line",
    ["colour=red", "epochs=many", "shared_encoder=maybe", "mode=graph", "fraction=1.5", "clusters=0", "preset=huge"],
)
def test_bad_values(tmp_path, line):
    path = tmp_path / "run.env"
    path.write_text(line + "\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.env")


def test_fraction_list():
    assert RunConfig(fractions="0.5, 0.7,1.0").fraction_list() == [0.5, 0.7, 1.0]
    with pytest.raises(ConfigError):
        RunConfig(fractions="0.5,2").validate()


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "manifest.txt"
    write_manifest(path, {"mode": "plain", "shared_encoder": False, "accuracy": 0.5})
    assert path.read_text(encoding="utf-8") == "accuracy=0.5\nmode=plain\nshared_encoder=false\n"
    assert read_manifest(path) == {"accuracy": "0.5", "mode": "plain", "shared_encoder": "false"}


def test_manifest_echoes_every_field():
    entries = RunConfig().as_manifest()
    assert entries["relu_after_pool"] == "false"
    assert entries["transe_norm"] == "L1"
    assert list(entries) == sorted(entries)
