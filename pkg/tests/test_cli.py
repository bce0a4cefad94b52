import pandas as pd
import pytest

from kgaugment.cli import EXIT_INPUT, EXIT_OK, EXIT_TRAINING, main
from kgaugment.errors import TrainingError
from kgaugment.kg_embed import read_embeddings
from kgaugment.settings import read_manifest

SMALL_RUN = "\n".join([
    "kg_dim=4",
    "transe_epochs=3",
    "clusters=5",
    "cluster_restarts=1",
    "epochs=1",
    "pretrain_epochs=1",
    "word_dim=4",
    "hidden_dim=4",
    "seq_len=8",
    "batch_size=16",
    "fractions=0.5,1.0",
])


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.env"
    path.write_text(SMALL_RUN + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synthetic data, embeddings and clusters shared by the downstream commands."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "run.env"
    config.write_text(SMALL_RUN + "\n", encoding="utf-8")
    data, kg = root / "data", root / "kg"
    common = ["--config", str(config), "--no-progress"]
    assert main(["synth", "--out", str(data), "--train-docs", "200", "--test-docs", "40", *common]) == EXIT_OK
    assert main(["embed", "--triples", str(data / "kg.tsv"), "--descriptions", str(data / "descriptions.tsv"),
                 "--out", str(kg), *common]) == EXIT_OK
    assert main(["cluster", "--kg", str(kg), *common]) == EXIT_OK
    return root, common


def test_synth_writes_benchmark(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--out", str(out), "--seed", "2", "--train-docs", "50", "--test-docs", "10"]) == EXIT_OK
    for name in ("kg.tsv", "descriptions.tsv", "train.tsv", "test.tsv", "README.txt"):
        assert (out / name).exists()
    assert len((out / "test.tsv").read_text(encoding="utf-8").splitlines()) == 10


def test_embed_small_graph(tmp_path, triple_file, run_config):
    out = tmp_path / "kg"
    assert main(["embed", "--triples", str(triple_file), "--out", str(out), "--config", run_config, "--no-progress"]) == EXIT_OK
    entities = read_embeddings(out / "entities.txt")
    relations = read_embeddings(out / "relations.txt")
    assert entities.vectors.shape == (3, 4)
    assert relations.vectors.shape == (1, 4)
    assert read_manifest(out / "embed_manifest.txt")["transe_epochs"] == "3"


def test_cluster_outputs(pipeline):
    root, _ = pipeline
    kg = root / "kg"
    assert (kg / "entity_clusters.tsv").exists()
    # four relations cannot fill five clusters
    assert not (kg / "relation_clusters.tsv").exists()
    assert read_manifest(kg / "cluster_manifest.txt")["relation_retrieval"] == "full_table"


def test_train_eval_and_shuffle(pipeline):
    root, common = pipeline
    data, kg, run = root / "data", root / "kg", root / "conv"
    assert main(["train", "--train", str(data / "train.tsv"), "--test", str(data / "test.tsv"),
                 "--kg", str(kg), "--out", str(run), *common]) == EXIT_OK
    assert (run / "model.npz").exists() and (run / "model.json").exists()
    metrics = pd.read_csv(run / "metrics.csv")
    assert set(metrics["split"]) == {"train", "test"}
    manifest = read_manifest(run / "manifest.txt")
    assert manifest["mode"] == "conv_kg"
    assert 0.0 <= float(manifest["test_accuracy"]) <= 1.0

    dump = root / "attention.txt"
    assert main(["eval", "--model", str(run / "model"), "--test", str(data / "test.tsv"), "--kg", str(kg),
                 "--attention-dump", str(dump), *common]) == EXIT_OK
    assert dump.read_text(encoding="utf-8").strip()

    assert main(["shuffle", "--model", str(run / "model"), "--test", str(data / "test.tsv"), "--kg", str(kg),
                 "--shuffles", "2", "--out", str(root / "shuffle"), *common]) == EXIT_OK
    report = read_manifest(root / "shuffle" / "shuffle_manifest.txt")
    assert len(report["changed_predictions"].split(",")) == 2


def test_sweep(pipeline):
    root, common = pipeline
    data, out = root / "data", root / "sweep"
    assert main(["sweep", "--train", str(data / "train.tsv"), "--test", str(data / "test.tsv"),
                 "--kg", str(root / "kg"), "--out", str(out), *common]) == EXIT_OK
    table = pd.read_csv(out / "sweep.csv")
    assert list(table.columns) == ["mode", "fraction", "seed", "train_size", "accuracy"]
    assert list(table["mode"]) == ["plain", "plain", "conv_kg", "conv_kg"]
    assert list(table["fraction"]) == [0.5, 1.0, 0.5, 1.0]


def test_pretrain_scores_the_held_out_file(pipeline):
    root, common = pipeline
    data, out = root / "data", root / "pre"
    assert main(["pretrain", "--train", str(data / "train.tsv"), "--test", str(data / "test.tsv"),
                 "--kg", str(root / "kg"), "--out", str(out), *common]) == EXIT_OK
    manifest = read_manifest(out / "manifest.txt")
    assert manifest["pretrain_split"] == "test"
    assert 0.0 <= float(manifest["pretrain_accuracy"]) <= 1.0


def test_plain_mode_needs_no_kg(pipeline):
    root, common = pipeline
    data = root / "data"
    assert main(["train", "--train", str(data / "train.tsv"), "--mode", "plain",
                 "--out", str(root / "plain"), *common]) == EXIT_OK


@pytest.mark.parametrize("line", ["epochs=many", "colour=red", "mode=graph"])
def test_bad_config_exits_2(tmp_path, triple_file, line):
    config = tmp_path / "bad.env"
    config.write_text(line + "\n", encoding="utf-8")
    assert main(["embed", "--triples", str(triple_file), "--config", str(config), "--out", str(tmp_path)]) == EXIT_INPUT


def test_missing_inputs_exit_2(tmp_path, run_config):
    assert main(["embed", "--triples", str(tmp_path / "absent.tsv"), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["train", "--train", str(tmp_path / "absent.tsv"), "--config", run_config]) == EXIT_INPUT
    assert main(["embed", "--triples", "x", "--config", str(tmp_path / "absent.env")]) == EXIT_INPUT


def test_kg_mode_without_kg_exits_2(pipeline):
    root, common = pipeline
    assert main(["train", "--train", str(root / "data" / "train.tsv"), "--mode", "conv_kg",
                 "--out", str(root / "nokg"), *common]) == EXIT_INPUT


def test_training_failure_exits_3(pipeline, monkeypatch):
    root, common = pipeline

    def failing_step(params, grads, state):
        raise TrainingError("non-finite gradient for parameter 'head.W_plain'")

    monkeypatch.setattr("kgaugment.train.adam_step", failing_step)
    assert main(["train", "--train", str(root / "data" / "train.tsv"), "--mode", "plain",
                 "--out", str(root / "failed"), *common]) == EXIT_TRAINING


COMMON_FLAGS = ["--config", "--seed", "--mode", "--fraction", "--clusters", "--kg-dim", "--epochs", "--out",
                "--log-file", "--verbose", "--no-progress"]
COMMAND_FLAGS = {
    "synth": ["--train-docs", "--test-docs", "--cue-rate"],
    "embed": ["--triples", "--descriptions", "--word-vectors"],
    "cluster": ["--kg"],
    "pretrain": ["--train", "--test", "--kg", "--word-vectors"],
    "train": ["--train", "--test", "--kg", "--word-vectors", "--init"],
    "eval": ["--model", "--test", "--kg", "--attention-dump", "--top-k"],
    "sweep": ["--train", "--test", "--kg", "--fractions", "--modes", "--workers", "--curves"],
    "shuffle": ["--model", "--test", "--kg", "--shuffles"],
}


@pytest.mark.parametrize("command", sorted(COMMAND_FLAGS))
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in COMMON_FLAGS + COMMAND_FLAGS[command]:
        assert flag in text, f"{command} --help does not mention {flag}"


def test_top_level_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for command in COMMAND_FLAGS:
        assert command in text


def test_unknown_sweep_mode_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--train", "a.tsv", "--test", "b.tsv", "--modes", "plain,graph", "--out", str(tmp_path)])
    assert info.value.code == EXIT_INPUT
    assert "unknown mode 'graph'" in capsys.readouterr().err
