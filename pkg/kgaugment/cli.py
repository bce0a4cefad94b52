"""
Command-line entry point.

    python -m kgaugment synth    --seed 7 --out data/synth
    python -m kgaugment embed    --triples data/synth/kg.tsv --descriptions data/synth/descriptions.tsv --out runs/kg
    python -m kgaugment cluster  --kg runs/kg --clusters 20
    python -m kgaugment pretrain --train data/synth/train.tsv --kg runs/kg --out runs/pre
    python -m kgaugment train    --train data/synth/train.tsv --test data/synth/test.tsv --kg runs/kg --out runs/conv
    python -m kgaugment eval     --model runs/conv/model --test data/synth/test.tsv --kg runs/kg
    python -m kgaugment sweep    --train ... --test ... --kg runs/kg --out runs/sweep
    python -m kgaugment shuffle  --model runs/conv/model --test ... --kg runs/kg

Exit codes: 0 success, 2 bad input or configuration, 3 training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from kgaugment import settings
from kgaugment.clustering import ClusterConfig, cluster_or_fallback, write_clusters
from kgaugment.errors import ConfigError, DomainError, KgAugmentError, TrainingError
from kgaugment.kg_embed import (
    TransEConfig,
    eval_link_prediction,
    train_transe,
    write_embeddings,
    write_link_prediction,
)
from kgaugment.kg_store import parse_descriptions, parse_triples, split_triples
from kgaugment.logs import log_banner, setup_logging
from kgaugment.model import (
    ENTITY_CLUSTERS_FILE,
    ENTITY_EMBEDDINGS_FILE,
    RELATION_CLUSTERS_FILE,
    RELATION_EMBEDDINGS_FILE,
    KgInputs,
    Mode,
    ModelParams,
    forward,
)
from kgaugment.retrieval import top_attention, write_attention_dump
from kgaugment.settings import RunConfig, load_run_config
from kgaugment.synth import SynthConfig, generate_benchmark, write_benchmark
from kgaugment.text_encoder import Vocabulary, load_word_vectors
from kgaugment.train import (
    Metrics,
    TrainConfig,
    encode_texts,
    evaluate,
    fraction_sweep,
    init_model,
    load_dataset,
    pretrain_retrieval,
    shuffle_robustness,
    train,
    write_manifest,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRAINING = 3

MODEL_NAME = "model"
PRETRAINED_NAME = "pretrained"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "fraction": args.fraction,
        "clusters": args.clusters,
        "kg_dim": args.kg_dim,
        "epochs": args.epochs,
    }
    for name in ("fractions", "workers", "word_vectors"):
        overrides[name] = getattr(args, name, None)
    return load_run_config(args.config, overrides)


def _word_vectors(run: RunConfig, warnings: list[str]):
    return load_word_vectors(run.word_vectors, warnings) if run.word_vectors else None


def _kg_inputs(args: argparse.Namespace, run: RunConfig, mode: Mode) -> KgInputs | None:
    if not mode.uses_kg:
        return None
    if not args.kg:
        raise FileNotFoundError(f"mode {mode.value} needs --kg DIR with embedding (and cluster) files")
    return KgInputs.from_artifacts(args.kg, conv_encoder=run.conv_encoder, with_clusters=mode is Mode.CONV)


def _out_dir(args: argparse.Namespace, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cluster_labels(kg: KgInputs, side: str, count: int) -> list[str]:
    """Names for attention dump rows: members of each cluster, or table names."""
    table = kg.entities if side == "entity" else kg.relations
    clusters = kg.entity_clusters if side == "entity" else kg.relation_clusters
    if clusters is None or clusters.num_clusters != count:
        return [table.name(i) for i in range(len(table))]
    labels = []
    for ids in clusters.members:
        shown = "+".join(table.name(i) for i in ids[:3])
        labels.append(shown + ("+..." if len(ids) > 3 else ""))
    return labels


def _attention_blocks(params: ModelParams, kg: KgInputs, data, top_k: int, limit: int = 20):
    docs = data.subset(range(min(limit, len(data))))
    ids, mask = encode_texts(docs, Vocabulary(params.words), params.dims.seq_len)
    result = forward(params, kg, ids, mask)
    entity_weights = result.fact.entity_weights.data
    relation_weights = result.fact.relation_weights.data
    if params.mode is Mode.CONV:
        entity_names = _cluster_labels(kg, "entity", entity_weights.shape[1])
        relation_names = _cluster_labels(kg, "relation", relation_weights.shape[1])
    else:
        entity_names = [kg.entities.name(i) for i in range(len(kg.entities))]
        relation_names = [kg.relations.name(i) for i in range(len(kg.relations))]
    blocks = []
    for row, text in enumerate(docs.texts):
        blocks.append((f"doc {row} entity | {text}", top_attention(entity_weights[row], entity_names, top_k)))
        blocks.append((f"doc {row} relation | {text}", top_attention(relation_weights[row], relation_names, top_k)))
    return blocks


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> None:
    config = SynthConfig(
        seed=run.seed,
        train_docs=args.train_docs,
        test_docs=args.test_docs,
        cue_rate=args.cue_rate,
    )
    out = _out_dir(args, "data/synth")
    paths = write_benchmark(generate_benchmark(config), out)
    log_banner(logger, "Synthetic benchmark", [f"seed: {run.seed}", *[f"wrote {p}" for p in paths]])


def cmd_embed(args: argparse.Namespace, run: RunConfig) -> None:
    warnings: list[str] = []
    vocab, triples = parse_triples(args.triples, warnings)
    if args.descriptions:
        vocab = parse_descriptions(args.descriptions, vocab, warnings)
    word_vectors = _word_vectors(run, warnings)
    out = _out_dir(args, "runs/kg")

    config = TransEConfig(
        dim=run.kg_dim,
        margin=run.transe_margin,
        norm=run.transe_norm,
        epochs=run.transe_epochs,
        batch_size=run.transe_batch_size,
        learning_rate=run.transe_learning_rate,
        seed=run.seed,
    )
    training, held_out = triples, None
    if run.transe_holdout > 0:
        training, held_out = split_triples(triples, run.transe_holdout, np.random.default_rng(run.seed))
    result = train_transe(vocab, training, config, word_vectors, progress=not args.no_progress)
    write_embeddings(out / ENTITY_EMBEDDINGS_FILE, result.entities)
    write_embeddings(out / RELATION_EMBEDDINGS_FILE, result.relations)

    lines = [
        f"entities: {vocab.num_entities}, relations: {vocab.num_relations}, triples: {len(triples)}",
        f"final loss: {result.epoch_losses[-1]:.6f}" if result.epoch_losses else "no training epochs",
        f"warnings: {len(warnings)}",
    ]
    entries = {"final_loss": result.epoch_losses[-1] if result.epoch_losses else "", "warnings": len(warnings)}
    if held_out is not None and len(held_out):
        report = eval_link_prediction(result.entities, result.relations, held_out, triples, norm=run.transe_norm)
        write_link_prediction(out / "link_prediction.txt", report)
        lines.append(f"link prediction on {report.count} held-out triples: mean rank {report.mean_rank:.2f}, "
                     + ", ".join(f"hits@{k} {v:.3f}" for k, v in sorted(report.hits.items())))
        entries.update({f"hits@{k}": v for k, v in report.hits.items()})
    write_manifest(out / "embed_manifest.txt", run, Metrics(), entries)
    log_banner(logger, "KG embedding summary", lines + [f"output: {out.absolute()}"])


def cmd_cluster(args: argparse.Namespace, run: RunConfig) -> None:
    kg = KgInputs.from_artifacts(args.kg, conv_encoder=run.conv_encoder, with_clusters=False)
    out = Path(args.out) if args.out else Path(args.kg)
    out.mkdir(parents=True, exist_ok=True)
    config = ClusterConfig(
        clusters=run.clusters, max_iterations=run.cluster_iterations,
        restarts=run.cluster_restarts, seed=run.seed,
    )
    entity_clusters = cluster_or_fallback(kg.entities, config)
    if entity_clusters is None:
        raise DomainError(f"cannot form {run.clusters} entity clusters from {len(kg.entities)} entities")
    write_clusters(out / ENTITY_CLUSTERS_FILE, entity_clusters)
    lines = [f"entity clusters: {entity_clusters.num_clusters} (q={entity_clusters.rows}, sizes {sorted(set(entity_clusters.sizes))})"]

    relation_clusters = cluster_or_fallback(kg.relations, config)
    relation_path = out / RELATION_CLUSTERS_FILE
    if relation_clusters is not None:
        write_clusters(relation_path, relation_clusters)
        lines.append(f"relation clusters: {relation_clusters.num_clusters} (q={relation_clusters.rows})")
    else:
        if relation_path.exists():
            relation_path.unlink()
        lines.append(f"relation clusters: none ({len(kg.relations)} relations < {run.clusters}); full-table attention")
    entries = {"relation_retrieval": "clusters" if relation_clusters is not None else "full_table"}
    write_manifest(out / "cluster_manifest.txt", run, Metrics(), entries)
    log_banner(logger, "Clustering summary", lines)


def cmd_pretrain(args: argparse.Namespace, run: RunConfig) -> None:
    warnings: list[str] = []
    config = TrainConfig.from_run_config(run, progress=not args.no_progress)
    if not config.mode.uses_kg:
        raise ConfigError("pretrain needs a KG mode (vanilla_kg or conv_kg)")
    data = load_dataset(args.train)
    test = load_dataset(args.test, data.label_names) if args.test else None
    kg = _kg_inputs(args, run, config.mode)
    out = _out_dir(args, "runs/pretrain")

    params = init_model(data, kg, config, word_vectors=_word_vectors(run, warnings))
    params, accuracy = pretrain_retrieval(params, data, kg, config, test)
    params.save(out / PRETRAINED_NAME)
    split = "test" if test is not None else "train"
    entries = {"train_size": len(data), "pretrain_split": split}
    write_manifest(out / "manifest.txt", run, Metrics(pretrain_accuracy=accuracy), entries)
    log_banner(logger, "Retrieval pretraining summary", [
        f"mode: {config.mode.value}, pretrain epochs: {config.pretrain_epochs}",
        f"retrieval-only {split} accuracy: {accuracy:.4f}",
        f"model: {(out / PRETRAINED_NAME).with_suffix('.npz')}",
    ])


def cmd_train(args: argparse.Namespace, run: RunConfig) -> None:
    warnings: list[str] = []
    config = TrainConfig.from_run_config(run, progress=not args.no_progress)
    data = load_dataset(args.train)
    test = load_dataset(args.test, data.label_names) if args.test else None
    kg = _kg_inputs(args, run, config.mode)
    out = _out_dir(args, "runs/train")

    initial = None
    if args.init:
        initial = ModelParams.load(args.init)
        if initial.mode is not config.mode:
            raise ConfigError(f"--init model has mode {initial.mode.value}, run uses {config.mode.value}")
        config = dataclasses.replace(config, pretrain_epochs=0)
        logger.info(f"Starting from {args.init}; pretraining skipped")

    params, metrics = train(data, kg, config, test=test, word_vectors=_word_vectors(run, warnings), params=initial)
    params.save(out / MODEL_NAME)
    write_metrics_csv(out / "metrics.csv", metrics.records)
    write_manifest(out / "manifest.txt", run, metrics)

    lines = [f"mode: {config.mode.value}, fraction: {config.fraction}, seed: {config.seed}"]
    if metrics.pretrain_accuracy is not None:
        lines.append(f"retrieval-only accuracy: {metrics.pretrain_accuracy:.4f}")
    train_losses = metrics.losses("train")
    if train_losses:
        lines.append(f"final training loss: {train_losses[-1]:.4f}")
    if metrics.test_accuracy is not None:
        lines.append(f"test accuracy: {metrics.test_accuracy:.4f}")
    lines.append(f"output: {out.absolute()}")
    log_banner(logger, "Training summary", lines)


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> None:
    params = ModelParams.load(args.model)
    data = load_dataset(args.test, params.labels)
    run = dataclasses.replace(run, mode=params.mode.value, conv_encoder=params.options.conv_encoder)
    kg = _kg_inputs(args, run, params.mode)
    result = evaluate(params, kg, data, run.batch_size)

    lines = [f"mode: {params.mode.value}", f"examples: {len(data)}", f"loss: {result.loss:.4f}", f"accuracy: {result.accuracy:.4f}"]
    if kg is not None:
        lines.append(f"mean entity attention entropy: {result.entity_entropy:.4f}")
    if args.attention_dump:
        if kg is None:
            raise ConfigError("--attention-dump needs a KG-mode model")
        write_attention_dump(args.attention_dump, _attention_blocks(params, kg, data, args.top_k))
        lines.append(f"attention dump: {args.attention_dump}")
    if args.out:
        out = _out_dir(args, args.out)
        write_manifest(out / "eval_manifest.txt", None, Metrics(test_accuracy=result.accuracy),
                       {"model": args.model, "test": args.test, "loss": f"{result.loss:.6f}"})
    log_banner(logger, "Evaluation summary", lines)


def cmd_sweep(args: argparse.Namespace, run: RunConfig) -> None:
    config = TrainConfig.from_run_config(run, progress=not args.no_progress)
    data = load_dataset(args.train)
    test = load_dataset(args.test, data.label_names)
    modes = args.modes
    kg = None
    if any(m.uses_kg for m in modes):
        kg = _kg_inputs(args, run, Mode.CONV if Mode.CONV in modes else Mode.VANILLA)
    out = _out_dir(args, "runs/sweep")

    result = fraction_sweep(data, test, kg, config, run.fraction_list(), modes, run.workers, curves=args.curves)
    result.table.to_csv(out / "sweep.csv", index=False, lineterminator="\n")
    if result.curves is not None:
        write_metrics_csv(out / "curves.csv", result.curves)
    write_manifest(out / "manifest.txt", run, Metrics(), {"modes": ",".join(m.value for m in modes)})
    log_banner(logger, "Fraction sweep", [
        f"{row.mode} @ {row.fraction}: {row.accuracy:.4f} ({row.train_size} examples)"
        for row in result.table.itertuples()
    ])


def cmd_shuffle(args: argparse.Namespace, run: RunConfig) -> None:
    params = ModelParams.load(args.model)
    data = load_dataset(args.test, params.labels)
    run = dataclasses.replace(run, mode=params.mode.value, conv_encoder=params.options.conv_encoder)
    kg = _kg_inputs(args, run, params.mode)
    report = shuffle_robustness(params, kg, data, args.shuffles, run.seed, run.batch_size)
    if args.out:
        out = _out_dir(args, args.out)
        write_manifest(out / "shuffle_manifest.txt", None, Metrics(test_accuracy=report.base_accuracy), {
            "shuffles": args.shuffles,
            "max_accuracy_delta": f"{report.max_delta:.6f}",
            "changed_predictions": ",".join(map(str, report.changed_predictions)),
        })
    log_banner(logger, "Shuffle robustness", [
        f"base accuracy: {report.base_accuracy:.4f}",
        *[f"shuffle {i}: accuracy {a:.4f}, {c} predictions changed"
          for i, (a, c) in enumerate(zip(report.accuracies, report.changed_predictions), 1)],
        f"max accuracy change: {100 * report.max_delta:.2f} points",
    ])


COMMANDS = {
    "synth": cmd_synth,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "shuffle": cmd_shuffle,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def mode_list(text: str) -> list[Mode]:
    """argparse type for --modes: comma-separated model variants."""
    modes = []
    for name in (part.strip() for part in text.split(",")):
        try:
            modes.append(Mode(name))
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"unknown mode {name!r}; choose from {', '.join(m.value for m in Mode)}"
            ) from None
    return modes


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="key=value configuration file (flags override it)")
    common.add_argument("--seed", type=int, help="random seed for every stage")
    common.add_argument("--mode", choices=settings.MODES, help="model variant")
    common.add_argument("--fraction", type=float, help="share of the training set to use, in (0, 1]")
    common.add_argument("--clusters", type=int, help="number of balanced clusters l")
    common.add_argument("--kg-dim", type=int, help="KG embedding dimension m")
    common.add_argument("--epochs", type=int, help="joint training epochs")
    common.add_argument("--out", type=str, help="output directory")
    common.add_argument("--log-file", type=str, help="also write the log to this file")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--no-progress", action="store_true", help="hide progress bars")

    parser = argparse.ArgumentParser(
        prog="kgaugment",
        description="Knowledge-graph augmented sequence classification at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--train-docs", type=int, default=800)
    p.add_argument("--test-docs", type=int, default=200)
    p.add_argument("--cue-rate", type=float, default=0.3)

    p = sub.add_parser("embed", parents=[common], help="train TransE embeddings")
    p.add_argument("--triples", required=True, help="head<TAB>relation<TAB>tail file")
    p.add_argument("--descriptions", help="entity<TAB>text file")
    p.add_argument("--word-vectors", dest="word_vectors", help="word v1 ... v_d file for description init")

    p = sub.add_parser("cluster", parents=[common], help="balanced k-means over embeddings")
    p.add_argument("--kg", required=True, help="directory holding entities.txt and relations.txt")

    for name, help_text in (("pretrain", "retrieval-only pretraining"), ("train", "train a classifier")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--train", required=True, help="label<TAB>text training file")
        p.add_argument("--kg", help="directory with embeddings and clusters")
        p.add_argument("--word-vectors", dest="word_vectors", help="pretrained word vectors")
        p.add_argument("--test", help="label<TAB>text test file")
        if name == "train":
            p.add_argument("--init", help="start from a saved model (e.g. the pretrain output)")

    p = sub.add_parser("eval", parents=[common], help="test accuracy of a saved model")
    p.add_argument("--model", required=True, help="model path without extension")
    p.add_argument("--test", required=True)
    p.add_argument("--kg")
    p.add_argument("--attention-dump", help="write top attention weights per document here")
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("sweep", parents=[common], help="accuracy over training-set fractions")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--kg")
    p.add_argument("--fractions", help="comma-separated fractions, e.g. 0.5,0.7,1.0")
    p.add_argument("--modes", type=mode_list, default="plain,conv_kg", help="comma-separated modes")
    p.add_argument("--workers", type=int, help="parallel runs")
    p.add_argument("--curves", action="store_true", help="also write per-epoch curves.csv")

    p = sub.add_parser("shuffle", parents=[common], help="within-cluster shuffle robustness")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--shuffles", type=int, default=5)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file, args.verbose)

    try:
        run = _run_config(args)
        COMMANDS[args.command](args, run)
    except TrainingError as exc:
        logger.error(f"Training failed: {exc}")
        return EXIT_TRAINING
    except (KgAugmentError, FileNotFoundError) as exc:
        logger.error(f"{args.command}: {exc}")
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
