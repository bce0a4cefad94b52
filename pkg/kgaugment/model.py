"""
Classifier graph: text contexts, KG retrieval and the output heads.

    plain:       y = softmax(C W_plain)
    vanilla_kg:  y = softmax(([ReLU(F V) : C] U) U_out), F from attention over all entities/relations
    conv_kg:     same head, F from attention over conv-encoded cluster vectors
    pretrain:    y = softmax(ReLU(F V) U_pre)

The hidden width u equals the KG dimension m.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from kgaugment.clustering import ClusterConfig, ClusterSet, cluster_or_fallback, read_clusters
from kgaugment.errors import ConfigError
from kgaugment.kg_embed import EmbeddingTable, read_embeddings
from kgaugment.numerics import ops
from kgaugment.numerics.tensor import Graph, Tensor
from kgaugment.retrieval import (
    ConvSchedule,
    ConvSide,
    RetrievedFact,
    identity_schedule,
    init_filters,
    plan_schedule,
    retrieve_conv,
    retrieve_vanilla,
)
from kgaugment.text_encoder import (
    WORDS_PARAM,
    Branch,
    ContextBundle,
    encode_contexts,
    init_encoder_params,
    projection_name,
)

logger = logging.getLogger(__name__)

ENTITY_TABLE = "kg.entities"
RELATION_TABLE = "kg.relations"

ENTITY_EMBEDDINGS_FILE = "entities.txt"
RELATION_EMBEDDINGS_FILE = "relations.txt"
ENTITY_CLUSTERS_FILE = "entity_clusters.tsv"
RELATION_CLUSTERS_FILE = "relation_clusters.tsv"


class Mode(str, Enum):
    PLAIN = "plain"
    VANILLA = "vanilla_kg"
    CONV = "conv_kg"

    @property
    def uses_kg(self) -> bool:
        return self is not Mode.PLAIN


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    word_dim: int
    hidden: int
    kg_dim: int  # m, also the hidden width u
    classes: int  # K
    seq_len: int = 16

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ConfigError(f"a classifier needs at least two classes, got {self.classes}")
        for name in ("vocab_size", "word_dim", "hidden", "kg_dim", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class ModelOptions:
    shared_encoder: bool = False
    relu_after_pool: bool = False
    conv_encoder: str = "planned"
    finetune_kg: bool = False


@dataclass
class ModelParams:
    dims: ModelDims
    mode: Mode
    arrays: dict[str, np.ndarray]
    options: ModelOptions = field(default_factory=ModelOptions)
    words: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()

    def copy(self) -> "ModelParams":
        return ModelParams(
            dims=self.dims, mode=self.mode, arrays={k: v.copy() for k, v in self.arrays.items()},
            options=self.options, words=self.words, labels=self.labels,
        )

    def save(self, path: str | Path) -> None:
        """Arrays to `<path>.npz`, everything else to `<path>.json`."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path.with_suffix(".npz"), **self.arrays)
        metadata = {
            "dims": asdict(self.dims),
            "mode": self.mode.value,
            "options": asdict(self.options),
            "words": list(self.words),
            "labels": list(self.labels),
        }
        path.with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        path = Path(path)
        arrays_path, metadata_path = path.with_suffix(".npz"), path.with_suffix(".json")
        for required in (arrays_path, metadata_path):
            if not required.exists():
                raise FileNotFoundError(f"model file not found: {required}")
        metadata = json.loads(metadata_path.read_text(encoding="utf-8"))
        with np.load(arrays_path) as stored:
            arrays = {name: np.array(stored[name], dtype=np.float64) for name in stored.files}
        return cls(
            dims=ModelDims(**metadata["dims"]),
            mode=Mode(metadata["mode"]),
            arrays=arrays,
            options=ModelOptions(**metadata["options"]),
            words=tuple(metadata["words"]),
            labels=tuple(metadata["labels"]),
        )


@dataclass(frozen=True, eq=False)
class KgInputs:
    """Frozen KG artifacts a KG-mode model reads: tables, clusters, conv schedules."""

    entities: EmbeddingTable
    relations: EmbeddingTable
    entity_clusters: ClusterSet | None = None
    relation_clusters: ClusterSet | None = None
    conv_encoder: str = "planned"

    def __post_init__(self) -> None:
        if self.entities.dim != self.relations.dim:
            raise ConfigError(
                f"entity dimension {self.entities.dim} differs from relation dimension {self.relations.dim}"
            )

    @property
    def dim(self) -> int:
        return self.entities.dim

    def schedule(self, clusters: ClusterSet | None) -> ConvSchedule | None:
        if clusters is None:
            return None
        if self.conv_encoder == "identity":
            return identity_schedule(clusters.rows)
        return plan_schedule(clusters.rows)

    @property
    def entity_schedule(self) -> ConvSchedule | None:
        return self.schedule(self.entity_clusters)

    @property
    def relation_schedule(self) -> ConvSchedule | None:
        return self.schedule(self.relation_clusters)

    def with_clusters(self, entity_clusters: ClusterSet | None, relation_clusters: ClusterSet | None) -> "KgInputs":
        return KgInputs(self.entities, self.relations, entity_clusters, relation_clusters, self.conv_encoder)

    @classmethod
    def build(
        cls,
        entities: EmbeddingTable,
        relations: EmbeddingTable,
        cluster_config: ClusterConfig | None = None,
        conv_encoder: str = "planned",
    ) -> "KgInputs":
        """Cluster both tables in memory; no clustering when cluster_config is None."""
        if cluster_config is None:
            return cls(entities, relations, conv_encoder=conv_encoder)
        return cls(
            entities,
            relations,
            cluster_or_fallback(entities, cluster_config),
            cluster_or_fallback(relations, cluster_config),
            conv_encoder,
        )

    @classmethod
    def from_artifacts(cls, directory: str | Path, conv_encoder: str = "planned", with_clusters: bool = True) -> "KgInputs":
        """Read the files written by `embed` and `cluster` from one directory."""
        directory = Path(directory)
        entities = read_embeddings(directory / ENTITY_EMBEDDINGS_FILE)
        relations = read_embeddings(directory / RELATION_EMBEDDINGS_FILE)
        entity_clusters = relation_clusters = None
        if with_clusters:
            entity_path = directory / ENTITY_CLUSTERS_FILE
            if not entity_path.exists():
                raise FileNotFoundError(f"entity cluster file not found: {entity_path} (run `cluster` first)")
            entity_clusters = read_clusters(entity_path, entities)
            relation_path = directory / RELATION_CLUSTERS_FILE
            if relation_path.exists():
                relation_clusters = read_clusters(relation_path, relations)
            else:
                logger.warning(f"No {RELATION_CLUSTERS_FILE}; attending over the full relation table")
        return cls(entities, relations, entity_clusters, relation_clusters, conv_encoder)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def filter_name(side: str, layer: int) -> str:
    return f"conv.{side}.w{layer}"


def branches_for(mode: Mode) -> tuple[Branch, ...]:
    if mode is Mode.PLAIN:
        return (Branch.CLASSIFY,)
    return (Branch.ENTITY, Branch.RELATION, Branch.CLASSIFY)


def init_model_params(
    dims: ModelDims,
    mode: Mode,
    seed: int | np.random.Generator = 0,
    options: ModelOptions = ModelOptions(),
    kg: KgInputs | None = None,
    word_matrix: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Every trainable array for `mode`; plain mode holds no KG-side parameter."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = dims.kg_dim
    arrays: dict[str, np.ndarray] = {}

    if word_matrix is None:
        word_matrix = rng.normal(0.0, 0.1, size=(dims.vocab_size, dims.word_dim))
        word_matrix[0] = 0.0
    if word_matrix.shape != (dims.vocab_size, dims.word_dim):
        raise ConfigError(f"word matrix {word_matrix.shape} does not match {(dims.vocab_size, dims.word_dim)}")
    arrays[WORDS_PARAM] = np.array(word_matrix, dtype=np.float64)

    for branch in branches_for(mode):
        for name, value in init_encoder_params(
            rng, branch, dims.word_dim, dims.hidden, m, shared=options.shared_encoder
        ).items():
            arrays.setdefault(name, value)

    if mode is Mode.PLAIN:
        arrays["head.W_plain"] = _glorot(rng, m, dims.classes)
        return arrays

    if kg is None:
        raise ConfigError(f"mode {mode.value} needs KG inputs")
    if kg.dim != m:
        raise ConfigError(f"KG embeddings have dimension {kg.dim}, model expects {m}")

    arrays["head.V"] = _glorot(rng, 3 * m, m)
    arrays["head.U"] = _glorot(rng, 2 * m, m)
    arrays["head.U_out"] = _glorot(rng, m, dims.classes)
    arrays["head.U_pre"] = _glorot(rng, m, dims.classes)

    if mode is Mode.CONV:
        if kg.entity_clusters is None:
            raise ConfigError("conv_kg mode needs entity clusters")
        identity = options.conv_encoder == "identity"
        for side, schedule in (("E", kg.entity_schedule), ("R", kg.relation_schedule)):
            if schedule is None:
                continue
            first, second = init_filters(schedule, rng, identity=identity)
            arrays[filter_name(side, 1)] = first
            arrays[filter_name(side, 2)] = second

    if options.finetune_kg:
        arrays[ENTITY_TABLE] = np.array(kg.entities.vectors)
        arrays[RELATION_TABLE] = np.array(kg.relations.vectors)
    return arrays


def new_model(
    dims: ModelDims,
    mode: Mode,
    seed: int | np.random.Generator = 0,
    options: ModelOptions = ModelOptions(),
    kg: KgInputs | None = None,
    word_matrix: np.ndarray | None = None,
    words: tuple[str, ...] = (),
    labels: tuple[str, ...] = (),
) -> ModelParams:
    if options.finetune_kg and mode is Mode.CONV:
        logger.warning("finetune_kg is on: cluster assignments stay fixed while embeddings move")
    arrays = init_model_params(dims, mode, seed, options, kg, word_matrix)
    return ModelParams(dims=dims, mode=mode, arrays=arrays, options=options, words=words, labels=labels)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def classify(fact: Tensor, context: Tensor, leaves: dict[str, Tensor]) -> Tensor:
    """softmax(([ReLU(fact V) : C] U) U_out)."""
    V, U, U_out = leaves["head.V"], leaves["head.U"], leaves["head.U_out"]
    if fact.shape[-1] != V.shape[0] or context.shape[-1] != V.shape[1] or U.shape[0] != 2 * V.shape[1]:
        raise ConfigError(
            f"classify: fact {fact.shape}, context {context.shape}, V {V.shape}, U {U.shape} do not fit"
        )
    hidden = ops.concat(ops.relu(ops.matmul(fact, V)), context)
    return ops.softmax(ops.matmul(ops.matmul(hidden, U), U_out))


def classify_plain(context: Tensor, leaves: dict[str, Tensor]) -> Tensor:
    W = leaves["head.W_plain"]
    if context.shape[-1] != W.shape[0]:
        raise ConfigError(f"classify_plain: context {context.shape} does not fit W_plain {W.shape}")
    return ops.softmax(ops.matmul(context, W))


def classify_pretrain(fact: Tensor, leaves: dict[str, Tensor]) -> Tensor:
    V, U_pre = leaves["head.V"], leaves["head.U_pre"]
    if fact.shape[-1] != V.shape[0]:
        raise ConfigError(f"pretrain head: fact {fact.shape} does not fit V {V.shape}")
    return ops.softmax(ops.matmul(ops.relu(ops.matmul(fact, V)), U_pre))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


class Forward(NamedTuple):
    graph: Graph
    leaves: dict[str, Tensor]
    probs: Tensor
    contexts: ContextBundle
    fact: RetrievedFact | None


def _table(graph: Graph, leaves: dict[str, Tensor], name: str, table: EmbeddingTable) -> Tensor:
    return leaves[name] if name in leaves else graph.constant(table.vectors, name=name)


def _conv_side(
    graph: Graph,
    leaves: dict[str, Tensor],
    table: Tensor,
    clusters: ClusterSet,
    schedule: ConvSchedule,
    side: str,
    options: ModelOptions,
) -> ConvSide:
    # (l, q, m) stack gathered from the live table, padding rows zeroed
    index = np.zeros(clusters.mask.shape, dtype=np.int64)
    for c, ids in enumerate(clusters.members):
        index[c, : len(ids)] = ids
    keep = np.repeat(clusters.mask[:, :, None], table.shape[1], axis=2).astype(np.float64)
    matrices = ops.mul(ops.gather_rows(table, index), graph.constant(keep))
    return ConvSide(
        matrices=matrices,
        mask=clusters.mask,
        schedule=schedule,
        filters=(leaves[filter_name(side, 1)], leaves[filter_name(side, 2)]),
        relu_after_pool=options.relu_after_pool,
    )


def retrieve(graph: Graph, leaves: dict[str, Tensor], params: ModelParams, kg: KgInputs, contexts: ContextBundle) -> RetrievedFact:
    entities = _table(graph, leaves, ENTITY_TABLE, kg.entities)
    relations = _table(graph, leaves, RELATION_TABLE, kg.relations)
    if params.mode is Mode.VANILLA:
        return retrieve_vanilla(contexts, entities, relations)

    entity_side = _conv_side(graph, leaves, entities, kg.entity_clusters, kg.entity_schedule, "E", params.options)
    relation_side: ConvSide | Tensor = relations
    if kg.relation_clusters is not None and filter_name("R", 1) in leaves:
        relation_side = _conv_side(
            graph, leaves, relations, kg.relation_clusters, kg.relation_schedule, "R", params.options
        )
    return retrieve_conv(contexts, entity_side, relation_side)


def forward(
    params: ModelParams,
    kg: KgInputs | None,
    ids: np.ndarray,
    mask: np.ndarray,
    head: str = "joint",
    graph: Graph | None = None,
) -> Forward:
    """Build the graph for one batch; head is "joint" or "pretrain"."""
    graph = graph or Graph()
    leaves = {name: graph.leaf(value, name=name) for name, value in params.arrays.items()}
    shared = params.options.shared_encoder

    if params.mode is Mode.PLAIN:
        if head != "joint":
            raise ConfigError("plain mode has no retrieval head to pretrain")
        contexts = encode_contexts(graph, leaves, ids, mask, (Branch.CLASSIFY,), shared)
        return Forward(graph, leaves, classify_plain(contexts.classify, leaves), contexts, None)

    if kg is None:
        raise ConfigError(f"mode {params.mode.value} needs KG inputs")
    if head == "pretrain":
        contexts = encode_contexts(graph, leaves, ids, mask, (Branch.ENTITY, Branch.RELATION), shared)
        fact = retrieve(graph, leaves, params, kg, contexts)
        return Forward(graph, leaves, classify_pretrain(fact.fact, leaves), contexts, fact)
    if head != "joint":
        raise ConfigError(f"unknown head {head!r}")

    contexts = encode_contexts(graph, leaves, ids, mask, branches_for(params.mode), shared)
    fact = retrieve(graph, leaves, params, kg, contexts)
    return Forward(graph, leaves, classify(fact.fact, contexts.classify, leaves), contexts, fact)


def pretrain_parameter_names(params: ModelParams) -> list[str]:
    """Parameters the retrieval-only stage updates."""
    names = [WORDS_PARAM, "head.V", "head.U_pre"]
    for name in params.arrays:
        if name.startswith(("encoder.E.", "encoder.R.", "encoder.shared.", "conv.", "kg.")):
            names.append(name)
    names = [n for n in names if n != projection_name(Branch.CLASSIFY)]
    return [n for n in dict.fromkeys(names) if n in params.arrays]


def joint_parameter_names(params: ModelParams) -> list[str]:
    return [name for name in params.arrays if name != "head.U_pre"]
