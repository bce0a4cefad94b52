import dataclasses
import math

import numpy as np
import pytest

from kgaugment.clustering import ClusterConfig
from kgaugment.errors import ConfigError, DomainError, LabelIndexError, ParseError, TrainingError
from kgaugment.model import KgInputs, Mode, ModelOptions
from kgaugment.settings import RunConfig
from kgaugment.train import (
    METRIC_COLUMNS,
    LabeledData,
    TrainConfig,
    evaluate,
    fraction_sweep,
    init_model,
    load_dataset,
    pretrain_retrieval,
    shuffle_robustness,
    stratified_subsample,
    train,
    write_dataset,
    write_metrics_csv,
)

TOY = LabeledData(
    texts=("red apple fruit", "green apple fruit", "blue sky above", "grey sky above"),
    labels=np.array([0, 0, 1, 1]),
    label_names=("fruit", "sky"),
)


def quick_config(mode=Mode.CONV, **overrides):
    config = TrainConfig(mode=mode, epochs=1, batch_size=2, pretrain_epochs=1, seq_len=4, word_dim=3, hidden_dim=3)
    return dataclasses.replace(config, **overrides)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def test_load_dataset(tmp_path):
    path = tmp_path / "train.tsv"
    path.write_text("sky\tblue sky above\nfruit\tred \"apple\"\n", encoding="utf-8")
    data = load_dataset(path)
    assert data.label_names == ("fruit", "sky")
    assert data.labels.tolist() == [1, 0]
    assert data.texts[1] == 'red "apple"'


def test_load_dataset_reuses_training_classes(tmp_path):
    path = tmp_path / "test.tsv"
    path.write_text("b\tsome text\n", encoding="utf-8")
    assert load_dataset(path, ("a", "b", "c")).labels.tolist() == [1]
    with pytest.raises(LabelIndexError):
        load_dataset(path, ("a",))


def test_load_dataset_missing_text(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tfine\nb\t\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line_number == 2


def test_load_dataset_keeps_text_after_a_second_tab(tmp_path):
    path = tmp_path / "tabs.tsv"
    path.write_text("pos\tgood\tmovie\n\nneg\tdull\n", encoding="utf-8")
    data = load_dataset(path)
    assert data.texts == ("good\tmovie", "dull")
    assert data.labels.tolist() == [1, 0]


def test_load_dataset_line_without_tab(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tfine\n\nno tab here\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.line_number == 3


def test_dataset_file_round_trip(tmp_path):
    path = tmp_path / "toy.tsv"
    write_dataset(path, TOY)
    loaded = load_dataset(path)
    assert loaded.texts == TOY.texts
    assert loaded.labels.tolist() == TOY.labels.tolist()


def test_stratified_subsample():
    data = LabeledData(tuple(f"doc {i}" for i in range(30)), np.array([0] * 20 + [1] * 10), ("a", "b"))
    half = stratified_subsample(data, 0.5, seed=1)
    assert half.class_counts().tolist() == [10, 5]
    assert stratified_subsample(data, 1.0) is data
    again = stratified_subsample(data, 0.5, seed=1)
    assert again.texts == half.texts
    with pytest.raises(DomainError):
        stratified_subsample(data, 0.01)


def test_train_config_from_run_config():
    run = RunConfig(mode="vanilla_kg", epochs=7, shared_encoder=True)
    config = TrainConfig.from_run_config(run, batch_size=5)
    assert config.mode is Mode.VANILLA
    assert config.epochs == 7 and config.batch_size == 5
    assert config.options.shared_encoder
    with pytest.raises(DomainError):
        TrainConfig(fraction=0.0)


def test_plain_context_width_follows_kg_dim_not_word_dim(tiny_kg):
    run = RunConfig(kg_dim=5, word_dim=7, hidden_dim=3, seq_len=4)
    plain = init_model(TOY, None, TrainConfig.from_run_config(run, mode=Mode.PLAIN))
    assert plain.dims.kg_dim == 5
    assert plain.arrays["head.W_plain"].shape == (5, 2)
    assert plain.arrays["encoder.CLS.proj"].shape == (3, 5)
    conv = init_model(TOY, tiny_kg, TrainConfig.from_run_config(run, mode=Mode.CONV))
    assert conv.dims.kg_dim == tiny_kg.dim


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("mode", list(Mode))
def test_one_epoch_smoke(mode, tiny_kg):
    kg = tiny_kg if mode.uses_kg else None
    params, metrics = train(TOY, kg, quick_config(mode), test=TOY)
    losses = metrics.losses("train")
    assert len(losses) == 1 and math.isfinite(losses[0])
    assert [r.split for r in metrics.records] == ["train", "test"]
    assert 0.0 <= metrics.test_accuracy <= 1.0
    if mode.uses_kg:
        assert metrics.pretrain_accuracy is not None
    else:
        assert metrics.pretrain_accuracy is None
        assert not any(name.startswith(("kg.", "conv.", "head.V")) for name in params.arrays)


def test_kg_mode_needs_kg():
    with pytest.raises(ConfigError):
        train(TOY, None, quick_config(Mode.CONV))


def test_training_moves_only_joint_parameters(tiny_kg):
    config = quick_config(Mode.CONV, pretrain_epochs=0, epochs=2)
    initial = init_model(TOY, tiny_kg, config)
    params, _ = train(TOY, tiny_kg, config, params=initial.copy())
    np.testing.assert_array_equal(params.arrays["head.U_pre"], initial.arrays["head.U_pre"])
    assert not np.array_equal(params.arrays["head.U_out"], initial.arrays["head.U_out"])


def test_same_seed_gives_identical_metrics_file(tmp_path, tiny_kg):
    config = quick_config(Mode.CONV, epochs=2, seed=4)
    paths = []
    for run in range(2):
        _, metrics = train(TOY, tiny_kg, config, test=TOY)
        paths.append(tmp_path / f"metrics{run}.csv")
        write_metrics_csv(paths[-1], metrics.records)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_text(encoding="utf-8").splitlines()[0] == ",".join(METRIC_COLUMNS)


def test_pretraining_without_epochs_is_passthrough(tiny_kg):
    config = quick_config(Mode.CONV, pretrain_epochs=0)
    params = init_model(TOY, tiny_kg, config)
    pretrained, accuracy = pretrain_retrieval(params, TOY, tiny_kg, config)
    for name, value in params.arrays.items():
        np.testing.assert_array_equal(pretrained.arrays[name], value)
    assert 0.0 <= accuracy <= 1.0


def test_pretraining_is_deterministic_and_leaves_the_input(tiny_kg):
    config = quick_config(Mode.VANILLA, pretrain_epochs=2)
    params = init_model(TOY, tiny_kg, config)
    before = {name: value.copy() for name, value in params.arrays.items()}
    first, _ = pretrain_retrieval(params, TOY, tiny_kg, config)
    second, _ = pretrain_retrieval(params, TOY, tiny_kg, config)
    for name in params.arrays:
        np.testing.assert_array_equal(first.arrays[name], second.arrays[name])
        np.testing.assert_array_equal(params.arrays[name], before[name])
    assert not np.array_equal(first.arrays["head.U_pre"], before["head.U_pre"])
    np.testing.assert_array_equal(first.arrays["head.U_out"], before["head.U_out"])


def test_plain_mode_cannot_pretrain():
    params = init_model(TOY, None, quick_config(Mode.PLAIN))
    with pytest.raises(ConfigError):
        pretrain_retrieval(params, TOY, None, quick_config(Mode.PLAIN))


def test_pretraining_reports_accuracy_on_the_held_out_set(tiny_kg):
    config = quick_config(Mode.CONV, pretrain_epochs=2)
    params = init_model(TOY, tiny_kg, config)
    held_out = dataclasses.replace(TOY, labels=1 - TOY.labels)
    pretrained, accuracy = pretrain_retrieval(params, TOY, tiny_kg, config, held_out)
    assert accuracy == evaluate(pretrained, tiny_kg, held_out, config.batch_size, head="pretrain").accuracy
    _, on_train = pretrain_retrieval(params, TOY, tiny_kg, config)
    assert on_train == evaluate(pretrained, tiny_kg, TOY, config.batch_size, head="pretrain").accuracy
    assert accuracy == pytest.approx(1.0 - on_train)


def test_train_records_which_split_pretraining_was_scored_on(tiny_kg):
    _, metrics = train(TOY, tiny_kg, quick_config(Mode.CONV), test=TOY)
    assert metrics.manifest["pretrain_split"] == "test"
    _, metrics = train(TOY, tiny_kg, quick_config(Mode.CONV))
    assert metrics.manifest["pretrain_split"] == "train"


def test_training_error_names_epoch_and_batch(monkeypatch):
    def failing_step(params, grads, state):
        raise TrainingError("non-finite gradient for parameter 'head.W_plain'")

    monkeypatch.setattr("kgaugment.train.adam_step", failing_step)
    with pytest.raises(TrainingError, match=r"epoch 1, batch 1.*head\.W_plain"):
        train(TOY, None, quick_config(Mode.PLAIN))


def test_evaluate(tiny_kg):
    plain = init_model(TOY, None, quick_config(Mode.PLAIN))
    result = evaluate(plain, None, TOY)
    assert result.predictions.shape == (4,)
    assert math.isnan(result.entity_entropy)

    conv = init_model(TOY, tiny_kg, quick_config(Mode.CONV))
    result = evaluate(conv, tiny_kg, TOY, batch_size=3)
    assert 0.0 <= result.entity_entropy <= math.log(tiny_kg.entity_clusters.num_clusters) + 1e-12
    assert result.loss > 0.0


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def test_fraction_sweep_rows(tiny_kg):
    data = LabeledData(TOY.texts * 2, np.concatenate([TOY.labels, TOY.labels]), TOY.label_names)
    result = fraction_sweep(data, TOY, tiny_kg, quick_config(), [0.5, 1.0], curves=True)
    assert len(result.table) == 4
    assert list(result.table["mode"]) == ["plain", "plain", "conv_kg", "conv_kg"]
    assert list(result.table["train_size"]) == [4, 8, 4, 8]
    assert list(result.curves.columns) == METRIC_COLUMNS
    assert len(result.curves) == 8


def test_full_fraction_matches_direct_run(tiny_kg):
    config = quick_config(Mode.PLAIN, epochs=2)
    result = fraction_sweep(TOY, TOY, tiny_kg, config, [1.0], modes=[Mode.PLAIN])
    _, metrics = train(TOY, None, config, test=TOY)
    assert result.table["accuracy"].iloc[0] == metrics.test_accuracy


def test_fraction_sweep_rejects_tiny_fractions(tiny_kg):
    with pytest.raises(DomainError):
        fraction_sweep(TOY, TOY, tiny_kg, quick_config(), [0.1])


def test_identity_encoder_is_shuffle_invariant(tiny_tables):
    entities, relations = tiny_tables
    kg = KgInputs.build(entities, relations, ClusterConfig(clusters=2, restarts=1), conv_encoder="identity")
    config = quick_config(Mode.CONV, options=ModelOptions(conv_encoder="identity"))
    params, _ = train(TOY, kg, config)
    report = shuffle_robustness(params, kg, TOY, shuffles=3, seed=1)
    assert report.changed_predictions == [0, 0, 0]
    assert report.max_delta == 0.0


def test_shuffle_needs_conv_model():
    params = init_model(TOY, None, quick_config(Mode.PLAIN))
    with pytest.raises(ConfigError):
        shuffle_robustness(params, None, TOY)
