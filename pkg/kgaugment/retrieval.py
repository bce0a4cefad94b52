"""
Fact retrieval by soft attention.

Vanilla retrieval attends over every entity and relation vector. Conv
retrieval first compresses each balanced cluster's (q, m) member matrix into
one m-vector with a two-layer column-wise conv/pool encoder, then attends over
those l cluster vectors. Either way the retrieved fact is [e, r, e + r].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kgaugment.errors import ConfigError, DimensionError, DomainError
from kgaugment.numerics import ops
from kgaugment.numerics.ops import pooled_mask, window_mask
from kgaugment.numerics.tensor import Tensor
from kgaugment.text_encoder import ContextBundle

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# conv schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    stride: int = 1
    pool: int | None = None  # None pools every remaining row

    def out_rows(self, rows: int) -> tuple[int, int]:
        """Rows after the conv and after the pool."""
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"kernel and stride must be >= 1 in {self}")
        if self.kernel > rows:
            raise ConfigError(f"kernel {self.kernel} exceeds {rows} rows")
        conv_rows = (rows - self.kernel) // self.stride + 1
        window = conv_rows if self.pool is None else self.pool
        if not 1 <= window <= conv_rows:
            raise ConfigError(f"pool window {window} does not fit {conv_rows} rows")
        pooled = -(-(conv_rows - window) // window) + 1
        return conv_rows, pooled

    def describe(self) -> str:
        pool = "global" if self.pool is None else str(self.pool)
        return f"(k={self.kernel}, s={self.stride}, pool={pool})"


@dataclass(frozen=True)
class ConvSchedule:
    rows: int  # q
    first: ConvLayer
    second: ConvLayer

    def __post_init__(self) -> None:
        self.validate()

    @property
    def layers(self) -> tuple[ConvLayer, ConvLayer]:
        return (self.first, self.second)

    def describe(self) -> str:
        return f"q={self.rows} " + " -> ".join(layer.describe() for layer in self.layers)

    def trace(self) -> list[int]:
        """Row count after every conv and pool, starting from q."""
        rows = [self.rows]
        for layer in self.layers:
            rows.extend(layer.out_rows(rows[-1]))
        return rows

    def validate(self) -> None:
        try:
            trace = self.trace()
        except ConfigError as exc:
            raise ConfigError(f"invalid conv schedule {self.describe()}: {exc}") from None
        if trace[-1] != 1:
            raise ConfigError(
                f"conv schedule {self.describe()} reduces {self.rows} rows to {trace[-1]}, not 1 "
                f"(rows {' -> '.join(map(str, trace))})"
            )


def plan_schedule(rows: int) -> ConvSchedule:
    """k=3, s=1, pool 2 for the first layer where it fits; global pool after the second."""
    if rows < 1:
        raise DomainError(f"cluster matrices need at least one row, got {rows}")
    first_kernel = min(3, rows)
    conv_rows = rows - first_kernel + 1
    first = ConvLayer(kernel=first_kernel, stride=1, pool=2 if conv_rows >= 2 else 1)
    _, pooled = first.out_rows(rows)
    second = ConvLayer(kernel=min(3, pooled), stride=1, pool=None)
    return ConvSchedule(rows=rows, first=first, second=second)


def identity_schedule(rows: int) -> ConvSchedule:
    """Unit filters with a global max pool: the cluster vector is the column-wise member max."""
    return ConvSchedule(rows=rows, first=ConvLayer(1, 1, None), second=ConvLayer(1, 1, 1))


def init_filters(schedule: ConvSchedule, rng: np.random.Generator, identity: bool = False) -> tuple[np.ndarray, np.ndarray]:
    if identity:
        return np.ones(schedule.first.kernel), np.ones(schedule.second.kernel)
    filters = []
    for layer in schedule.layers:
        k = layer.kernel
        filters.append(np.full(k, 1.0 / k) + rng.normal(0.0, 0.1 / np.sqrt(k), size=k))
    return filters[0], filters[1]


@dataclass
class ConvSide:
    """Inputs to encode one side (entities or relations) into cluster vectors."""

    matrices: Tensor  # (l, q, m)
    mask: np.ndarray  # (l, q)
    schedule: ConvSchedule
    filters: tuple[Tensor, Tensor]
    relu_after_pool: bool = False


def encode_clusters(side: ConvSide) -> Tensor:
    """conv -> pool -> conv -> pool per cluster; filters shared by all clusters and columns. Returns (l, m)."""
    if side.matrices.ndim != 3:
        raise DimensionError(f"cluster matrices must be (l, q, m), got {side.matrices.shape}")
    clusters, rows, width = side.matrices.shape
    if rows != side.schedule.rows:
        raise ConfigError(f"schedule built for q={side.schedule.rows}, matrices have q={rows}")

    x, mask = side.matrices, np.asarray(side.mask, dtype=bool)
    for layer, weights in zip(side.schedule.layers, side.filters):
        if weights.shape != (layer.kernel,):
            raise DimensionError(f"filter shape {weights.shape} does not match kernel {layer.kernel}")
        x = ops.conv1d_col(x, weights, stride=layer.stride, mask=mask)
        mask = window_mask(mask, layer.kernel, layer.stride)
        window = x.shape[-2] if layer.pool is None else layer.pool
        x = ops.maxpool_col(x, window, mask=mask)
        mask = pooled_mask(mask, window)
        if side.relu_after_pool:
            x = ops.relu(x)
    return ops.reshape(x, (clusters, width))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attend(context: Tensor, candidates: Tensor) -> tuple[Tensor, Tensor]:
    """
    Dot-product soft attention.

    context: (m,) or (B, m); candidates: (N, m).
    Returns (weights (B, N), pooled (B, m)); a 1-D context gives B = 1.
    """
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise DomainError(f"attention needs at least one candidate, got shape {candidates.shape}")
    if context.ndim == 1:
        context = ops.reshape(context, (1, context.shape[0]))
    if context.shape[-1] != candidates.shape[-1]:
        raise DimensionError(
            f"attention: context dimension {context.shape[-1]} vs candidates {candidates.shape[-1]}"
        )
    weights = ops.softmax(ops.matmul(context, ops.transpose(candidates)))
    return weights, ops.matmul(weights, candidates)


@dataclass
class RetrievedFact:
    e: Tensor
    r: Tensor
    t: Tensor
    fact: Tensor  # [e, r, t] along the last axis
    entity_weights: Tensor
    relation_weights: Tensor


def _retrieve(contexts: ContextBundle, entity_space: Tensor, relation_space: Tensor) -> RetrievedFact:
    if contexts.entity is None or contexts.relation is None:
        raise ConfigError("retrieval needs the entity and relation context vectors")
    entity_weights, e = attend(contexts.entity, entity_space)
    relation_weights, r = attend(contexts.relation, relation_space)
    t = ops.add(e, r)
    fact = ops.concat(ops.concat(e, r), t)
    return RetrievedFact(e=e, r=r, t=t, fact=fact, entity_weights=entity_weights, relation_weights=relation_weights)


def retrieve_vanilla(contexts: ContextBundle, entities: Tensor, relations: Tensor) -> RetrievedFact:
    """Attention over the full entity and relation tables."""
    return _retrieve(contexts, entities, relations)


def retrieve_conv(
    contexts: ContextBundle, entity_side: ConvSide, relation_side: ConvSide | Tensor
) -> RetrievedFact:
    """
    Attention over encoded cluster vectors.

    relation_side may be the raw relation table when there are fewer
    relations than clusters.
    """
    entity_space = encode_clusters(entity_side)
    if isinstance(relation_side, ConvSide):
        relation_space = encode_clusters(relation_side)
    else:
        relation_space = relation_side
    return _retrieve(contexts, entity_space, relation_space)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def attention_entropy(weights: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the attention rows."""
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    safe = np.where(weights > 0, weights, 1.0)
    return float(np.mean(-(weights * np.log(safe)).sum(axis=1)))


def top_attention(weights: np.ndarray, names: Sequence[str], k: int = 5) -> list[tuple[str, float]]:
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(names) != weights.shape[0]:
        raise DimensionError(f"{len(names)} names for {weights.shape[0]} attention weights")
    order = np.argsort(-weights, kind="stable")[:k]
    return [(names[i], float(weights[i])) for i in order]


def write_attention_dump(path: str | Path, blocks: Sequence[tuple[str, list[tuple[str, float]]]]) -> None:
    """One `# title` line per block followed by `name<TAB>weight` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for title, rows in blocks:
            f.write(f"# {title}\n")
            for name, weight in rows:
                f.write(f"{name}\t{weight:.6f}\n")
    logger.info(f"Wrote {len(blocks)} attention blocks to {path}")
