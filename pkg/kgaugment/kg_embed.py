"""
TransE entity/relation embeddings with description-averaged initialization.

When entity descriptions and word vectors are available the effective entity
vector is `free + mean_word_vector(description) @ projection`, and the
projection is trained together with the margin loss. Otherwise entities are
plain free vectors. After every epoch the effective entity vectors are
rescaled to unit L2 norm, and the epoch is kept only when the margin loss on
a fixed sample of corruptions did not rise.

Embedding dump format:

    # kind=entity dim=16
    name v1 v2 ... v16
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from tqdm import tqdm

from kgaugment.errors import DimensionError, DomainError, ParseError
from kgaugment.kg_store import KgVocab, Triple, TripleSet, corrupt
from kgaugment.numerics import OptimizerState, adam_step, ops
from kgaugment.numerics.tensor import Graph
from kgaugment.text_encoder import WordVectors

logger = logging.getLogger(__name__)

NORMS = ("L1", "L2")
KINDS = ("entity", "relation")

FREE_PARAM = "entity.free"
PROJECTION_PARAM = "entity.projection"
RELATION_PARAM = "relation"

MONITOR_NEGATIVES = 8
STEP_SHRINK = 0.5
STEP_GROWTH = 1.05


@dataclass(frozen=True)
class TransEConfig:
    dim: int = 16
    margin: float = 1.0
    norm: str = "L1"
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise DomainError(f"margin must be positive, got {self.margin}")
        if self.norm not in NORMS:
            raise DomainError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.dim < 1 or self.batch_size < 1:
            raise DomainError(f"dim and batch_size must be >= 1, got {self.dim}, {self.batch_size}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")


DESK_TRANSE = TransEConfig()


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    vectors: np.ndarray  # (N, m), read-only
    kind: str = "entity"
    names: tuple[str, ...] = ()
    projection: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DomainError(f"kind must be one of {KINDS}, got {self.kind!r}")
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise DimensionError(f"embedding table needs an (N, m) array with N >= 1, got {vectors.shape}")
        if self.names and len(self.names) != vectors.shape[0]:
            raise DimensionError(f"{len(self.names)} names for {vectors.shape[0]} vectors")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def name(self, index: int) -> str:
        return self.names[index] if self.names else str(index)


class TransEResult(NamedTuple):
    entities: EmbeddingTable
    relations: EmbeddingTable
    epoch_losses: list[float]


class LinkPredictionReport(NamedTuple):
    mean_rank: float
    hits: dict[int, float]
    mean_reciprocal_rank: float
    count: int


# ---------------------------------------------------------------------------
# energy and loss
# ---------------------------------------------------------------------------


def transe_energy(h: np.ndarray, r: np.ndarray, t: np.ndarray, norm: str = "L1") -> np.ndarray | float:
    """||h + r - t|| over the last axis; a float for single vectors."""
    h, r, t = (np.asarray(v, dtype=np.float64) for v in (h, r, t))
    if not (h.shape[-1] == r.shape[-1] == t.shape[-1]):
        raise DimensionError(f"transe_energy: dimensions {h.shape}, {r.shape}, {t.shape} differ")
    diff = h + r - t
    if norm == "L1":
        value = np.abs(diff).sum(axis=-1)
    elif norm == "L2":
        value = np.sqrt((diff * diff).sum(axis=-1))
    else:
        raise DomainError(f"unknown norm {norm!r}; expected 'L1' or 'L2'")
    return float(value) if np.ndim(value) == 0 else value


def margin_loss(d_pos, d_neg, margin: float = 1.0):
    """max(0, margin + d_pos - d_neg), elementwise for arrays."""
    if margin <= 0:
        raise DomainError(f"margin must be positive, got {margin}")
    value = np.maximum(0.0, margin + np.asarray(d_pos, dtype=np.float64) - np.asarray(d_neg, dtype=np.float64))
    return float(value) if np.ndim(value) == 0 else value


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def uniform_bound(dim: int) -> float:
    return 6.0 / np.sqrt(dim)


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.where(norms > 0, matrix / np.where(norms > 0, norms, 1.0), matrix)


def description_means(vocab: KgVocab, word_vectors: WordVectors) -> tuple[np.ndarray, np.ndarray]:
    """Mean word vector per entity (zeros when no description word is known) and a has-description mask."""
    index = word_vectors.index
    means = np.zeros((vocab.num_entities, word_vectors.dim))
    covered = np.zeros(vocab.num_entities, dtype=bool)
    for entity in range(vocab.num_entities):
        rows = [index[w] for w in vocab.description(entity) if w in index]
        if rows:
            means[entity] = word_vectors.matrix[rows].mean(axis=0)
            covered[entity] = True
    return means, covered


def init_from_descriptions(
    vocab: KgVocab,
    word_vectors: WordVectors | None,
    dim: int,
    seed: int | np.random.Generator = 0,
    projection: np.ndarray | None = None,
) -> EmbeddingTable:
    """
    Entity vectors from averaged description words, projected to `dim` and L2-normalized.

    Entities without a usable description fall back to uniform draws in
    [-6/sqrt(dim), 6/sqrt(dim)].
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = uniform_bound(dim)
    vectors = rng.uniform(-bound, bound, size=(vocab.num_entities, dim))
    if word_vectors is None:
        return EmbeddingTable(vectors, kind="entity", names=vocab.entities)

    if projection is None:
        projection = rng.normal(0.0, 1.0 / np.sqrt(word_vectors.dim), size=(word_vectors.dim, dim))
    projection = np.asarray(projection, dtype=np.float64)
    if projection.shape != (word_vectors.dim, dim):
        raise DimensionError(
            f"projection shape {projection.shape} does not map {word_vectors.dim} -> {dim}"
        )

    means, covered = description_means(vocab, word_vectors)
    projected = _unit_rows(means @ projection)
    usable = covered & (np.linalg.norm(projected, axis=1) > 0)
    vectors[usable] = projected[usable]
    logger.info(f"Description init covers {int(usable.sum())}/{vocab.num_entities} entities")
    return EmbeddingTable(vectors, kind="entity", names=vocab.entities, projection=projection)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batch_loss(
    graph: Graph,
    leaves: dict,
    description: np.ndarray | None,
    positives: np.ndarray,
    negatives: np.ndarray,
    config: TransEConfig,
):
    entities = leaves[FREE_PARAM]
    if description is not None:
        entities = ops.add(entities, ops.matmul(graph.constant(description), leaves[PROJECTION_PARAM]))
    relations = leaves[RELATION_PARAM]

    def energy(ids: np.ndarray):
        h = ops.gather_rows(entities, ids[:, 0])
        r = ops.gather_rows(relations, ids[:, 1])
        t = ops.gather_rows(entities, ids[:, 2])
        return ops.row_norm(ops.sub(ops.add(h, r), t), config.norm)

    hinge = ops.relu(ops.add_scalar(ops.sub(energy(positives), energy(negatives)), config.margin))
    return ops.mean(hinge)


def _effective_entities(params: dict[str, np.ndarray], description: np.ndarray | None) -> np.ndarray:
    if description is None:
        return params[FREE_PARAM]
    return params[FREE_PARAM] + description @ params[PROJECTION_PARAM]


def _renormalize(params: dict[str, np.ndarray], description: np.ndarray | None) -> None:
    """Rescale effective entity vectors to unit norm by moving the free part."""
    effective = _effective_entities(params, description)
    target = _unit_rows(effective)
    params[FREE_PARAM] = params[FREE_PARAM] + (target - effective)


def _monitor_pairs(
    data: Sequence[Triple], num_entities: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (positive, corrupted) id pairs the epoch loss is measured on."""
    positives = np.array([t.key() for t in data for _ in range(MONITOR_NEGATIVES)], dtype=np.int64)
    negatives = np.array(
        [corrupt(t, num_entities, rng).key() for t in data for _ in range(MONITOR_NEGATIVES)], dtype=np.int64
    )
    return positives, negatives


def _monitor_loss(
    params: dict[str, np.ndarray],
    description: np.ndarray | None,
    pairs: tuple[np.ndarray, np.ndarray],
    config: TransEConfig,
) -> float:
    entities = _effective_entities(params, description)
    relations = params[RELATION_PARAM]

    def energy(ids: np.ndarray) -> np.ndarray:
        return np.atleast_1d(transe_energy(entities[ids[:, 0]], relations[ids[:, 1]], entities[ids[:, 2]], config.norm))

    positives, negatives = pairs
    return float(np.mean(margin_loss(energy(positives), energy(negatives), config.margin)))


def train_transe(
    vocab: KgVocab,
    triples: TripleSet,
    config: TransEConfig = DESK_TRANSE,
    word_vectors: WordVectors | None = None,
    progress: bool = False,
) -> TransEResult:
    """
    Minibatch margin training with fresh corruptions every batch.

    The loss reported per epoch is the margin loss on a fixed set of
    corruptions drawn once. An epoch that raises it is undone and the step
    size halved; accepted epochs grow the step back toward the configured
    rate, so the reported curve never rises.
    """
    if vocab.num_entities < 2:
        raise DomainError("TransE needs at least two entities")
    if len(triples) == 0:
        raise DomainError("TransE needs at least one training triple")
    for triple in triples:
        vocab.check(triple)

    rng = np.random.default_rng(config.seed)
    initial = init_from_descriptions(vocab, word_vectors, config.dim, rng)
    bound = uniform_bound(config.dim)
    relations = _unit_rows(rng.uniform(-bound, bound, size=(vocab.num_relations, config.dim)))

    params: dict[str, np.ndarray] = {RELATION_PARAM: relations}
    description = None
    if word_vectors is not None and initial.projection is not None:
        means, covered = description_means(vocab, word_vectors)
        if covered.any():
            description = means
            params[PROJECTION_PARAM] = initial.projection.copy()
    params[FREE_PARAM] = _unit_rows(np.array(initial.vectors)) - (
        0.0 if description is None else description @ params[PROJECTION_PARAM]
    )
    _renormalize(params, description)

    state = OptimizerState(learning_rate=config.learning_rate)
    data = triples.triples
    monitor = _monitor_pairs(data, vocab.num_entities, rng)
    best = _monitor_loss(params, description, monitor, config)
    epoch_losses: list[float] = []
    rejected = 0
    report_every = max(1, config.epochs // 10)

    for epoch in tqdm(range(1, config.epochs + 1), desc="TransE", disable=not progress):
        saved_params = dict(params)
        saved_state = dataclasses.replace(state, first=dict(state.first), second=dict(state.second))
        order = rng.permutation(len(data))
        for start in range(0, len(order), config.batch_size):
            batch = [data[i] for i in order[start : start + config.batch_size]]
            positives = np.array([t.key() for t in batch], dtype=np.int64)
            negatives = np.array([corrupt(t, vocab.num_entities, rng).key() for t in batch], dtype=np.int64)

            graph = Graph()
            leaves = {name: graph.leaf(value, name=name) for name, value in params.items()}
            loss = _batch_loss(graph, leaves, description, positives, negatives, config)
            graph.backward(loss)
            adam_step(params, {name: graph.grad(leaf) for name, leaf in leaves.items()}, state)

        _renormalize(params, description)
        epoch_loss = _monitor_loss(params, description, monitor, config)
        if epoch_loss > best:
            rate = state.learning_rate * STEP_SHRINK
            params, state = saved_params, saved_state
            state.learning_rate = rate
            rejected += 1
            logger.debug(f"TransE epoch {epoch}: loss rose to {epoch_loss:.6f}, undone; step size now {rate:.2e}")
            epoch_loss = best
        else:
            best = epoch_loss
            state.learning_rate = min(state.learning_rate * STEP_GROWTH, config.learning_rate)
        epoch_losses.append(epoch_loss)
        logger.debug(f"TransE epoch {epoch}: loss {epoch_loss:.6f}")
        if epoch % report_every == 0 or epoch == config.epochs:
            logger.info(f"TransE epoch {epoch}/{config.epochs}: loss {epoch_loss:.6f} ({rejected} epochs undone)")

    entities = EmbeddingTable(
        _effective_entities(params, description),
        kind="entity",
        names=vocab.entities,
        projection=params.get(PROJECTION_PARAM),
    )
    return TransEResult(
        entities=entities,
        relations=EmbeddingTable(params[RELATION_PARAM], kind="relation", names=vocab.relations),
        epoch_losses=epoch_losses,
    )


# ---------------------------------------------------------------------------
# link prediction
# ---------------------------------------------------------------------------


def _as_matrix(table: EmbeddingTable | np.ndarray) -> np.ndarray:
    return table.vectors if isinstance(table, EmbeddingTable) else np.asarray(table, dtype=np.float64)


def eval_link_prediction(
    entities: EmbeddingTable | np.ndarray,
    relations: EmbeddingTable | np.ndarray,
    test: TripleSet | Sequence[Triple],
    all_triples: TripleSet | Sequence[Triple],
    norm: str = "L1",
    ks: Sequence[int] = (1, 10),
) -> LinkPredictionReport:
    """
    Filtered tail prediction: rank the true tail of (h, r, ?) among all entities.

    Other known tails of (h, r) are removed from the candidates; ties count in
    the true tail's favor.
    """
    test = list(test)
    if not test:
        raise DomainError("link prediction needs at least one test triple")
    entity_matrix = _as_matrix(entities)
    relation_matrix = _as_matrix(relations)

    known: dict[tuple[int, int], set[int]] = {}
    for triple in [*all_triples, *test]:
        known.setdefault((triple.head, triple.relation), set()).add(triple.tail)

    ranks = np.zeros(len(test))
    for position, triple in enumerate(test):
        query = entity_matrix[triple.head] + relation_matrix[triple.relation]
        energies = transe_energy(query[None, :], np.zeros_like(query)[None, :], entity_matrix, norm)
        energies = np.atleast_1d(energies).copy()
        others = known[(triple.head, triple.relation)] - {triple.tail}
        if others:
            energies[list(others)] = np.inf
        ranks[position] = 1 + int(np.sum(energies < energies[triple.tail]))

    hits = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return LinkPredictionReport(
        mean_rank=float(ranks.mean()),
        hits=hits,
        mean_reciprocal_rank=float(np.mean(1.0 / ranks)),
        count=len(test),
    )


def write_link_prediction(path: str | Path, report: LinkPredictionReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"count={report.count}", f"mean_rank={report.mean_rank!r}", f"mrr={report.mean_reciprocal_rank!r}"]
    lines += [f"hits@{k}={value!r}" for k, value in sorted(report.hits.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# dump files
# ---------------------------------------------------------------------------


def write_embeddings(path: str | Path, table: EmbeddingTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# kind={table.kind} dim={table.dim}\n")
        for index, row in enumerate(table.vectors):
            f.write(table.name(index) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def _parse_header(line: str, path: Path) -> dict[str, str]:
    fields = {}
    for part in line.lstrip("#").split():
        key, sep, value = part.partition("=")
        if sep:
            fields[key] = value
    if "kind" not in fields or "dim" not in fields:
        raise ParseError("header must read '# kind=<entity|relation> dim=<m>'", path=str(path), line_number=1)
    return fields


def read_embeddings(path: str | Path) -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"embedding file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError("missing '# kind=... dim=...' header", path=str(path), line_number=1)
    header = _parse_header(lines[0], path)
    try:
        dim = int(header["dim"])
    except ValueError:
        raise ParseError(f"bad dim {header['dim']!r}", path=str(path), line_number=1) from None
    if dim < 1:
        raise ParseError(f"dim must be >= 1, got {dim}", path=str(path), line_number=1)

    names: list[str] = []
    rows: list[list[float]] = []
    for line_number, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        # names may hold spaces or start with "#"; the last dim fields are the vector
        parts = line.rstrip().rsplit(None, dim)
        if len(parts) != dim + 1:
            raise ParseError(f"expected name and {dim} values, found {len(parts)} fields", path=str(path), line_number=line_number)
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            raise ParseError("non-numeric embedding value", path=str(path), line_number=line_number) from None
        names.append(parts[0])

    if not rows:
        raise DomainError(f"no embeddings in {path}")
    return EmbeddingTable(np.array(rows), kind=header["kind"], names=tuple(names))
