"""
Balanced k-means over embedding tables and the stacked per-cluster matrices.

Each cluster c is stored as a (q, m) matrix whose first rows are its member
vectors in stacking order and whose remaining rows are zero padding, with a
boolean mask marking the real rows. q = ceil(N / l).

Cluster dump format, one line per id in stacking order:

    id<TAB>cluster
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kgaugment.errors import DimensionError, DomainError, ParseError
from kgaugment.kg_embed import EmbeddingTable

logger = logging.getLogger(__name__)

SWAP_TOLERANCE = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    clusters: int = 20
    max_iterations: int = 50
    restarts: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clusters < 1:
            raise DomainError(f"cluster count must be >= 1, got {self.clusters}")
        if self.max_iterations < 1 or self.restarts < 1:
            raise DomainError("max_iterations and restarts must be >= 1")


@dataclass(frozen=True, eq=False)
class ClusterSet:
    assignments: np.ndarray  # (N,) cluster index per id
    members: tuple[tuple[int, ...], ...]  # ids per cluster, in stacking order
    matrices: np.ndarray  # (l, q, m)
    mask: np.ndarray  # (l, q) True on real rows
    objective: float
    kind: str = "entity"

    @property
    def num_clusters(self) -> int:
        return len(self.members)

    @property
    def rows(self) -> int:
        return int(self.matrices.shape[1])

    @property
    def dim(self) -> int:
        return int(self.matrices.shape[2])

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]


def _vectors(table: EmbeddingTable | np.ndarray) -> np.ndarray:
    if isinstance(table, EmbeddingTable):
        return table.vectors
    vectors = np.asarray(table, dtype=np.float64)
    if vectors.ndim != 2:
        raise DimensionError(f"expected an (N, m) array, got {vectors.shape}")
    return vectors


def balanced_sizes(count: int, clusters: int) -> list[int]:
    """count mod clusters sizes of ceil(count/clusters), the rest floor."""
    base, extra = divmod(count, clusters)
    return [base + 1] * extra + [base] * (clusters - extra)


def clustering_objective(table: EmbeddingTable | np.ndarray, assignments: np.ndarray) -> float:
    """Within-cluster sum of squared distances to the cluster means."""
    vectors = _vectors(table)
    assignments = np.asarray(assignments)
    total = 0.0
    for cluster in np.unique(assignments):
        points = vectors[assignments == cluster]
        total += float(((points - points.mean(axis=0)) ** 2).sum())
    return total


def _kmeans_plus_plus(vectors: np.ndarray, clusters: int, rng: np.random.Generator) -> np.ndarray:
    count = vectors.shape[0]
    chosen = [int(rng.integers(count))]
    closest = ((vectors - vectors[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, clusters):
        total = closest.sum()
        if total > 0:
            pick = int(rng.choice(count, p=closest / total))
        else:
            pick = int(rng.integers(count))
        chosen.append(pick)
        closest = np.minimum(closest, ((vectors - vectors[pick]) ** 2).sum(axis=1))
    return vectors[chosen].copy()


def _balanced_assign(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """
    Greedy capacity-constrained assignment.

    Points with the largest gap between their second-nearest and nearest
    centroid choose first; each takes the nearest centroid with room left.
    Exactly N mod l clusters may grow to ceil(N/l).
    """
    count, clusters = vectors.shape[0], centroids.shape[0]
    base, extra = divmod(count, clusters)
    distances = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    preference = np.argsort(distances, axis=1, kind="stable")
    if clusters > 1:
        ordered = np.take_along_axis(distances, preference, axis=1)
        advantage = ordered[:, 1] - ordered[:, 0]
    else:
        advantage = np.zeros(count)
    order = np.argsort(-advantage, kind="stable")

    labels = np.full(count, -1, dtype=np.int64)
    filled = np.zeros(clusters, dtype=np.int64)
    large = 0
    for point in order:
        for cluster in preference[point]:
            if filled[cluster] < base:
                break
            if filled[cluster] == base and large < extra:
                large += 1
                break
        else:
            raise DomainError("balanced assignment ran out of capacity")
        labels[point] = cluster
        filled[cluster] += 1
    return labels


def _centroids(vectors: np.ndarray, labels: np.ndarray, clusters: int) -> np.ndarray:
    return np.stack([vectors[labels == c].mean(axis=0) for c in range(clusters)])


def _swap_refine(vectors: np.ndarray, labels: np.ndarray, clusters: int, max_passes: int) -> np.ndarray:
    """Best-improvement pairwise swaps between clusters; sizes never change."""
    labels = labels.copy()
    sums = np.stack([vectors[labels == c].sum(axis=0) for c in range(clusters)])
    sizes = np.bincount(labels, minlength=clusters).astype(np.float64)
    for _ in range(max_passes):
        improved = False
        for i in range(vectors.shape[0]):
            a = labels[i]
            delta_vectors = vectors - vectors[i]  # x_j - x_i for every j
            sum_a = sums[a]
            gain_a = (((sum_a + delta_vectors) ** 2).sum(axis=1) - sum_a @ sum_a) / sizes[a]
            sum_b = sums[labels]
            gain_b = (((sum_b - delta_vectors) ** 2).sum(axis=1) - (sum_b**2).sum(axis=1)) / sizes[labels]
            change = -gain_a - gain_b  # SSE change of swapping i and j
            change[labels == a] = np.inf
            j = int(np.argmin(change))
            if change[j] < -SWAP_TOLERANCE:
                b = labels[j]
                step = vectors[j] - vectors[i]
                sums[a] += step
                sums[b] -= step
                labels[i], labels[j] = b, a
                improved = True
        if not improved:
            break
    return labels


def _single_run(
    vectors: np.ndarray, config: ClusterConfig, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    clusters = config.clusters
    centroids = _kmeans_plus_plus(vectors, clusters, rng)
    labels = _balanced_assign(vectors, centroids)
    for _ in range(config.max_iterations):
        centroids = _centroids(vectors, labels, clusters)
        updated = _balanced_assign(vectors, centroids)
        if np.array_equal(updated, labels):
            break
        labels = updated
    labels = _swap_refine(vectors, labels, clusters, config.max_iterations)
    return labels, clustering_objective(vectors, labels)


def cluster_members(assignments: np.ndarray, clusters: int) -> tuple[tuple[int, ...], ...]:
    assignments = np.asarray(assignments)
    return tuple(tuple(int(i) for i in np.flatnonzero(assignments == c)) for c in range(clusters))


def build_cluster_matrices(
    assignments: np.ndarray,
    table: EmbeddingTable | np.ndarray,
    members: Sequence[Sequence[int]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Stack member vectors per cluster into an (l, q, m) array, zero-padded to q rows.

    Members are stacked in ascending id order unless an explicit order is given.
    """
    vectors = _vectors(table)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (vectors.shape[0],):
        raise DimensionError(f"{assignments.shape[0]} assignments for {vectors.shape[0]} vectors")
    clusters = int(assignments.max()) + 1
    if members is None:
        members = cluster_members(assignments, clusters)
    rows = max(len(m) for m in members)

    matrices = np.zeros((len(members), rows, vectors.shape[1]))
    mask = np.zeros((len(members), rows), dtype=bool)
    for c, ids in enumerate(members):
        if ids:
            matrices[c, : len(ids)] = vectors[list(ids)]
            mask[c, : len(ids)] = True
    return matrices, mask


def _cluster_set(
    vectors: np.ndarray, labels: np.ndarray, members, kind: str, objective: float | None = None
) -> ClusterSet:
    matrices, mask = build_cluster_matrices(labels, vectors, members)
    if objective is None:
        objective = clustering_objective(vectors, labels)
    return ClusterSet(
        assignments=labels, members=tuple(tuple(m) for m in members),
        matrices=matrices, mask=mask, objective=objective, kind=kind,
    )


def balanced_kmeans(table: EmbeddingTable | np.ndarray, config: ClusterConfig) -> ClusterSet:
    """Best of `restarts` seeded balanced k-means runs (lowest within-cluster SSE)."""
    vectors = _vectors(table)
    count = vectors.shape[0]
    if config.clusters > count:
        raise DomainError(f"cannot form {config.clusters} clusters from {count} vectors")

    rng = np.random.default_rng(config.seed)
    best_labels, best_objective = None, np.inf
    for restart in range(config.restarts):
        labels, objective = _single_run(vectors, config, rng)
        logger.debug(f"k-means restart {restart}: objective {objective:.6f}")
        if objective < best_objective:
            best_labels, best_objective = labels, objective

    kind = table.kind if isinstance(table, EmbeddingTable) else "entity"
    clusters = _cluster_set(
        vectors, best_labels, cluster_members(best_labels, config.clusters), kind, best_objective
    )
    logger.info(
        f"Clustered {count} {kind} vectors into {config.clusters} clusters "
        f"(q={clusters.rows}, objective {best_objective:.4f})"
    )
    return clusters


def cluster_or_fallback(table: EmbeddingTable, config: ClusterConfig) -> ClusterSet | None:
    """None when the table has fewer rows than clusters; retrieval then attends over the raw table."""
    if len(table) < config.clusters:
        logger.warning(
            f"{table.kind} table has {len(table)} rows < {config.clusters} clusters; "
            f"using attention over the full table"
        )
        return None
    return balanced_kmeans(table, config)


def shuffle_members(
    clusters: ClusterSet, table: EmbeddingTable | np.ndarray, rng: np.random.Generator
) -> ClusterSet:
    """Same partition, member order permuted within every cluster."""
    vectors = _vectors(table)
    members = tuple(tuple(int(i) for i in rng.permutation(ids)) for ids in clusters.members)
    matrices, mask = build_cluster_matrices(clusters.assignments, vectors, members)
    return dataclasses.replace(clusters, members=members, matrices=matrices, mask=mask)


def write_clusters(path: str | Path, clusters: ClusterSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for cluster, ids in enumerate(clusters.members):
            for i in ids:
                f.write(f"{i}\t{cluster}\n")


def read_clusters(path: str | Path, table: EmbeddingTable | np.ndarray) -> ClusterSet:
    """Rebuild a ClusterSet from a dump; file order gives the stacking order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cluster file not found: {path}")
    vectors = _vectors(table)
    count = vectors.shape[0]

    labels = np.full(count, -1, dtype=np.int64)
    order: dict[int, list[int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                identifier, cluster = int(parts[0]), int(parts[1])
                if len(parts) != 2:
                    raise ValueError(line)
            except (ValueError, IndexError):
                raise ParseError("expected id<TAB>cluster", path=str(path), line_number=line_number) from None
            if not 0 <= identifier < count or labels[identifier] != -1 or cluster < 0:
                raise ParseError(
                    f"id {identifier} out of range or assigned twice", path=str(path), line_number=line_number
                )
            labels[identifier] = cluster
            order.setdefault(cluster, []).append(identifier)

    if np.any(labels < 0):
        raise DomainError(f"{path}: {int(np.sum(labels < 0))} ids have no cluster")
    num_clusters = int(labels.max()) + 1
    members = [order.get(c, []) for c in range(num_clusters)]
    kind = table.kind if isinstance(table, EmbeddingTable) else "entity"
    return _cluster_set(vectors, labels, members, kind)
