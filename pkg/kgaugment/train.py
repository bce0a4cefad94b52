"""
Training, evaluation and the experiments built on them.

Dataset file: `label<TAB>text` per line, UTF-8.
Metrics CSV:  epoch,split,mode,fraction,seed,loss,accuracy
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from kgaugment import settings
from kgaugment.clustering import shuffle_members
from kgaugment.errors import ConfigError, DomainError, LabelIndexError, ParseError, TrainingError
from kgaugment.model import (
    KgInputs,
    Mode,
    ModelDims,
    ModelOptions,
    ModelParams,
    forward,
    joint_parameter_names,
    new_model,
    pretrain_parameter_names,
)
from kgaugment.numerics import OptimizerState, adam_step, ops
from kgaugment.retrieval import attention_entropy
from kgaugment.settings import RunConfig
from kgaugment.text_encoder import (
    Vocabulary,
    WordVectors,
    build_vocabulary,
    initial_word_matrix,
    stack_sequences,
    tokenize,
)

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "mode", "fraction", "seed", "loss", "accuracy"]


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.CONV
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    fraction: float = 1.0
    pretrain_epochs: int = 20
    seq_len: int = 16
    word_dim: int = 16
    hidden_dim: int = 24
    kg_dim: int = 16
    options: ModelOptions = ModelOptions()
    progress: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0.0 < self.fraction <= 1.0:
            raise DomainError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")

    @classmethod
    def from_run_config(cls, run: RunConfig, **overrides: Any) -> "TrainConfig":
        config = cls(
            mode=Mode(run.mode),
            epochs=run.epochs,
            batch_size=run.batch_size,
            learning_rate=run.learning_rate,
            seed=run.seed,
            fraction=run.fraction,
            pretrain_epochs=run.pretrain_epochs,
            seq_len=run.seq_len,
            word_dim=run.word_dim,
            hidden_dim=run.hidden_dim,
            kg_dim=run.kg_dim,
            options=ModelOptions(
                shared_encoder=run.shared_encoder,
                relu_after_pool=run.relu_after_pool,
                conv_encoder=run.conv_encoder,
                finetune_kg=run.finetune_kg,
            ),
        )
        return dataclasses.replace(config, **overrides) if overrides else config


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabeledData:
    texts: tuple[str, ...]
    labels: np.ndarray  # (n,) class index
    label_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def subset(self, rows: Sequence[int]) -> "LabeledData":
        rows = list(rows)
        return LabeledData(tuple(self.texts[i] for i in rows), self.labels[rows], self.label_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def load_dataset(path: str | Path, label_names: Sequence[str] | None = None) -> LabeledData:
    """
    Read `label<TAB>text` lines; the text is everything after the first tab.

    Class indices follow `label_names` when given (a test set reuses the
    training classes), else the sorted distinct labels.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")

    rows: list[tuple[int, str, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep:
                raise ParseError("expected label<TAB>text", path=str(path), line_number=line_number)
            rows.append((line_number, label, text))
    if not rows:
        raise DomainError(f"no examples in {path}")

    frame = pd.DataFrame(rows, columns=["line", "label", "text"])
    frame["label"] = frame["label"].str.strip()
    blank = frame.loc[(frame["label"] == "") | (frame["text"].str.strip() == ""), "line"]
    if len(blank):
        raise ParseError("missing label or text", path=str(path), line_number=int(blank.iloc[0]))

    names = tuple(label_names) if label_names is not None else tuple(sorted(frame["label"].unique()))
    index = {name: i for i, name in enumerate(names)}
    unknown = sorted(set(frame["label"]) - set(index))
    if unknown:
        raise LabelIndexError(f"{path}: labels {unknown} are not among the known classes {list(names)}")

    labels = frame["label"].map(index).to_numpy(dtype=np.int64)
    logger.info(f"Loaded {len(frame)} examples, {len(names)} classes from {path.name}")
    return LabeledData(tuple(frame["text"]), labels, names)


def write_dataset(path: str | Path, data: LabeledData) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for text, label in zip(data.texts, data.labels):
            f.write(f"{data.label_names[label]}\t{text}\n")


def encode_texts(data: LabeledData, vocab: Vocabulary, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    return stack_sequences([tokenize(text, vocab, seq_len) for text in data.texts])


def stratified_subsample(data: LabeledData, fraction: float, seed: int = 0) -> LabeledData:
    """round(fraction * n_c) examples of every class c, original order kept."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return data
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for label in range(data.num_classes):
        rows = np.flatnonzero(data.labels == label)
        take = int(round(fraction * len(rows)))
        if take < 1:
            raise DomainError(
                f"fraction {fraction} leaves no example of class {data.label_names[label]!r} "
                f"({len(rows)} available)"
            )
        keep.extend(rng.permutation(rows)[:take].tolist())
    return data.subset(sorted(keep))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class EpochRecord(NamedTuple):
    epoch: int
    split: str
    mode: str
    fraction: float
    seed: int
    loss: float
    accuracy: float


class Evaluation(NamedTuple):
    loss: float
    accuracy: float
    predictions: np.ndarray
    entity_entropy: float  # NaN in plain mode


@dataclass
class Metrics:
    records: list[EpochRecord] = field(default_factory=list)
    entropies: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    pretrain_accuracy: float | None = None
    manifest: dict[str, Any] = field(default_factory=dict)

    def losses(self, split: str = "train") -> list[float]:
        return [r.loss for r in self.records if r.split == split]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([r._asdict() for r in self.records], columns=METRIC_COLUMNS)


def write_metrics_csv(path: str | Path, records: Sequence[EpochRecord] | pd.DataFrame) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = records if isinstance(records, pd.DataFrame) else pd.DataFrame([r._asdict() for r in records], columns=METRIC_COLUMNS)
    frame.to_csv(path, index=False, columns=METRIC_COLUMNS, lineterminator="\n")


def write_manifest(path: str | Path, run: RunConfig | None, metrics: Metrics, extra: Mapping[str, Any] | None = None) -> None:
    """Config echo plus results; the timestamp lives only here."""
    entries: dict[str, Any] = dict(run.as_manifest()) if run is not None else {}
    entries.update(metrics.manifest)
    if metrics.test_accuracy is not None:
        entries["test_accuracy"] = f"{metrics.test_accuracy:.6f}"
    if metrics.pretrain_accuracy is not None:
        entries["pretrain_accuracy"] = f"{metrics.pretrain_accuracy:.6f}"
    entries.update(extra or {})
    entries["created_at"] = datetime.now().isoformat(timespec="seconds")
    settings.write_manifest(path, entries)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def _batches(count: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def _step(
    params: ModelParams,
    kg: KgInputs | None,
    ids: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    names: Sequence[str],
    state: OptimizerState,
    head: str,
) -> tuple[float, int, float]:
    """One Adam step; returns (loss, correct predictions, entity attention entropy)."""
    result = forward(params, kg, ids, mask, head=head)
    loss = ops.cross_entropy(result.probs, labels)
    result.graph.backward(loss)
    grads = {name: result.graph.grad(result.leaves[name]) for name in names}
    adam_step(params.arrays, grads, state)
    correct = int(np.sum(result.probs.data.argmax(axis=1) == labels))
    entropy = attention_entropy(result.fact.entity_weights.data) if result.fact is not None else math.nan
    return float(loss.data), correct, entropy


def _run_epochs(
    params: ModelParams,
    kg: KgInputs | None,
    ids: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    epochs: int,
    head: str,
    rng: np.random.Generator,
    on_epoch=None,
) -> None:
    names = pretrain_parameter_names(params) if head == "pretrain" else joint_parameter_names(params)
    state = OptimizerState(learning_rate=config.learning_rate)
    stage = "pretrain" if head == "pretrain" else "train"
    for epoch in tqdm(range(1, epochs + 1), desc=stage, disable=not config.progress):
        total_loss, total_correct, entropies = 0.0, 0, []
        for batch_number, rows in enumerate(_batches(len(labels), config.batch_size, rng), 1):
            try:
                loss, correct, entropy = _step(
                    params, kg, ids[rows], mask[rows], labels[rows], names, state, head
                )
            except TrainingError as exc:
                raise TrainingError(f"{stage} epoch {epoch}, batch {batch_number}: {exc}") from exc
            total_loss += loss * len(rows)
            total_correct += correct
            entropies.append(entropy)
        epoch_loss = total_loss / len(labels)
        epoch_accuracy = total_correct / len(labels)
        entropy = float(np.mean(entropies)) if entropies else math.nan
        if not math.isnan(entropy):
            logger.info(f"{stage} epoch {epoch}/{epochs}: loss {epoch_loss:.4f}, accuracy {epoch_accuracy:.4f}, entity attention entropy {entropy:.4f}")
        else:
            logger.info(f"{stage} epoch {epoch}/{epochs}: loss {epoch_loss:.4f}, accuracy {epoch_accuracy:.4f}")
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, epoch_accuracy, entropy)


def evaluate(
    params: ModelParams,
    kg: KgInputs | None,
    data: LabeledData,
    batch_size: int = 64,
    head: str = "joint",
) -> Evaluation:
    vocab = Vocabulary(params.words)
    ids, mask = encode_texts(data, vocab, params.dims.seq_len)
    total_loss, predictions, entropies = 0.0, [], []
    for rows in _batches(len(data), batch_size):
        result = forward(params, kg, ids[rows], mask[rows], head=head)
        total_loss += float(ops.cross_entropy(result.probs, data.labels[rows]).data) * len(rows)
        predictions.append(result.probs.data.argmax(axis=1))
        if result.fact is not None:
            entropies.append(attention_entropy(result.fact.entity_weights.data))
    predicted = np.concatenate(predictions)
    return Evaluation(
        loss=total_loss / len(data),
        accuracy=float(np.mean(predicted == data.labels)),
        predictions=predicted,
        entity_entropy=float(np.mean(entropies)) if entropies else math.nan,
    )


def init_model(
    data: LabeledData,
    kg: KgInputs | None,
    config: TrainConfig,
    vocab: Vocabulary | None = None,
    word_vectors: WordVectors | None = None,
) -> ModelParams:
    vocab = vocab or build_vocabulary(data.texts)
    rng = np.random.default_rng(config.seed)
    dims = ModelDims(
        vocab_size=len(vocab),
        word_dim=config.word_dim,
        hidden=config.hidden_dim,
        kg_dim=kg.dim if kg is not None else config.kg_dim,
        classes=data.num_classes,
        seq_len=config.seq_len,
    )
    word_matrix = initial_word_matrix(vocab, config.word_dim, rng, word_vectors)
    return new_model(
        dims, config.mode, rng, config.options, kg if config.mode.uses_kg else None,
        word_matrix, words=vocab.words, labels=data.label_names,
    )


def pretrain_retrieval(
    params: ModelParams,
    data: LabeledData,
    kg: KgInputs,
    config: TrainConfig,
    test: LabeledData | None = None,
) -> tuple[ModelParams, float]:
    """
    Train the KG branch alone as a classifier (pretrain head, no text context C).

    Returns the updated copy and its retrieval-only accuracy on `test`, or on `data` when no
    held-out set is given.
    """
    if not params.mode.uses_kg:
        raise ConfigError("plain mode has no retrieval branch")
    params = params.copy()
    if config.pretrain_epochs > 0:
        rng = np.random.default_rng([config.seed, 1])
        ids, mask = encode_texts(data, Vocabulary(params.words), params.dims.seq_len)
        _run_epochs(params, kg, ids, mask, data.labels, config, config.pretrain_epochs, "pretrain", rng)
    split = "test" if test is not None else "train"
    accuracy = evaluate(params, kg, test if test is not None else data, config.batch_size, head="pretrain").accuracy
    logger.info(f"Retrieval-only {split} accuracy after {config.pretrain_epochs} pretrain epochs: {accuracy:.4f}")
    return params, accuracy


def train(
    data: LabeledData,
    kg: KgInputs | None,
    config: TrainConfig,
    test: LabeledData | None = None,
    word_vectors: WordVectors | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, Metrics]:
    """Optional retrieval pretraining, then joint training; test metrics per epoch when `test` is given."""
    if config.mode.uses_kg and kg is None:
        raise ConfigError(f"mode {config.mode.value} needs KG inputs")
    data = stratified_subsample(data, config.fraction, config.seed)
    params = params or init_model(data, kg, config, word_vectors=word_vectors)
    metrics = Metrics(manifest={"train_size": len(data)})
    if config.mode is Mode.CONV and kg is not None:
        metrics.manifest["entity_clusters"] = 0 if kg.entity_clusters is None else kg.entity_clusters.num_clusters
        metrics.manifest["relation_retrieval"] = "clusters" if kg.relation_clusters is not None else "full_table"

    if config.mode.uses_kg and config.pretrain_epochs > 0:
        params, metrics.pretrain_accuracy = pretrain_retrieval(params, data, kg, config, test)
        metrics.manifest["pretrain_split"] = "test" if test is not None else "train"

    ids, mask = encode_texts(data, Vocabulary(params.words), params.dims.seq_len)
    mode, fraction = config.mode.value, config.fraction

    def record(epoch: int, loss: float, accuracy: float, entropy: float) -> None:
        metrics.records.append(EpochRecord(epoch, "train", mode, fraction, config.seed, loss, accuracy))
        metrics.entropies.append(entropy)
        if test is not None:
            result = evaluate(params, kg, test, config.batch_size)
            metrics.records.append(EpochRecord(epoch, "test", mode, fraction, config.seed, result.loss, result.accuracy))
            metrics.test_accuracy = result.accuracy

    rng = np.random.default_rng([config.seed, 2])
    _run_epochs(params, kg, ids, mask, data.labels, config, config.epochs, "joint", rng, on_epoch=record)

    if test is not None and metrics.test_accuracy is None:
        metrics.test_accuracy = evaluate(params, kg, test, config.batch_size).accuracy
    return params, metrics


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


class SweepResult(NamedTuple):
    table: pd.DataFrame  # mode, fraction, seed, train_size, accuracy
    curves: pd.DataFrame | None  # metrics-CSV rows of every run


def _sweep_run(job: tuple) -> tuple[dict[str, Any], list[EpochRecord]]:
    data, test, kg, config = job
    _, metrics = train(data, kg if config.mode.uses_kg else None, config, test=test)
    row = {
        "mode": config.mode.value,
        "fraction": config.fraction,
        "seed": config.seed,
        "train_size": metrics.manifest["train_size"],
        "accuracy": metrics.test_accuracy,
    }
    logger.info(f"sweep {row['mode']} @ {row['fraction']}: accuracy {row['accuracy']:.4f}")
    return row, metrics.records


def fraction_sweep(
    data: LabeledData,
    test: LabeledData,
    kg: KgInputs,
    config: TrainConfig,
    fractions: Sequence[float],
    modes: Sequence[Mode] = (Mode.PLAIN, Mode.CONV),
    workers: int = 1,
    curves: bool = False,
) -> SweepResult:
    """Test accuracy for every (mode, fraction); runs are independent and may go to a process pool."""
    if not fractions:
        raise DomainError("fraction sweep needs at least one fraction")
    jobs = [
        (data, test, kg, dataclasses.replace(config, mode=Mode(mode), fraction=float(fraction), progress=False))
        for mode in modes
        for fraction in fractions
    ]
    for *_, job_config in jobs:
        stratified_subsample(data, job_config.fraction, job_config.seed)

    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_sweep_run, jobs)
    else:
        results = [_sweep_run(job) for job in tqdm(jobs, desc="sweep", disable=not config.progress)]

    table = pd.DataFrame([row for row, _ in results], columns=["mode", "fraction", "seed", "train_size", "accuracy"])
    curve_frame = None
    if curves:
        curve_frame = pd.DataFrame(
            [r._asdict() for _, records in results for r in records], columns=METRIC_COLUMNS
        )
    return SweepResult(table, curve_frame)


class ShuffleReport(NamedTuple):
    base_accuracy: float
    accuracies: list[float]
    changed_predictions: list[int]

    @property
    def max_delta(self) -> float:
        return max((abs(a - self.base_accuracy) for a in self.accuracies), default=0.0)


def shuffle_robustness(
    params: ModelParams,
    kg: KgInputs,
    data: LabeledData,
    shuffles: int = 5,
    seed: int = 0,
    batch_size: int = 64,
) -> ShuffleReport:
    """Re-evaluate a conv model with the member order of every cluster permuted."""
    if params.mode is not Mode.CONV:
        raise ConfigError("shuffle robustness applies to conv_kg models only")
    base = evaluate(params, kg, data, batch_size)
    rng = np.random.default_rng(seed)
    accuracies, changed = [], []
    for round_number in range(1, shuffles + 1):
        entity_clusters = shuffle_members(kg.entity_clusters, kg.entities, rng)
        relation_clusters = None
        if kg.relation_clusters is not None:
            relation_clusters = shuffle_members(kg.relation_clusters, kg.relations, rng)
        result = evaluate(params, kg.with_clusters(entity_clusters, relation_clusters), data, batch_size)
        accuracies.append(result.accuracy)
        changed.append(int(np.sum(result.predictions != base.predictions)))
        logger.info(
            f"shuffle {round_number}/{shuffles}: accuracy {result.accuracy:.4f} "
            f"(base {base.accuracy:.4f}), {changed[-1]} predictions changed"
        )
    return ShuffleReport(base.accuracy, accuracies, changed)
