"""
Knowledge-graph storage: vocabularies, triples, descriptions.

Triple file:       head<TAB>relation<TAB>tail   (UTF-8, '#' comments, blank lines ignored)
Description file:  entity<TAB>free text
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from kgaugment.errors import DomainError, LabelIndexError, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int

    def key(self) -> tuple[int, int, int]:
        return (self.head, self.relation, self.tail)


@dataclass(frozen=True)
class KgVocab:
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    descriptions: dict[int, tuple[str, ...]] = field(default_factory=dict, compare=False)
    entity_index: dict[str, int] = field(init=False, repr=False, compare=False)
    relation_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.entities or not self.relations:
            raise DomainError("a knowledge graph needs at least one entity and one relation")
        entity_index = {name: i for i, name in enumerate(self.entities)}
        relation_index = {name: i for i, name in enumerate(self.relations)}
        if len(entity_index) != len(self.entities) or len(relation_index) != len(self.relations):
            raise DomainError("entity and relation names must be unique")
        object.__setattr__(self, "entity_index", entity_index)
        object.__setattr__(self, "relation_index", relation_index)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def entity_id(self, name: str) -> int:
        try:
            return self.entity_index[name]
        except KeyError:
            raise LabelIndexError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relation_index[name]
        except KeyError:
            raise LabelIndexError(f"unknown relation {name!r}") from None

    def description(self, entity: int) -> tuple[str, ...]:
        return self.descriptions.get(entity, ())

    def with_descriptions(self, descriptions: dict[int, tuple[str, ...]]) -> "KgVocab":
        return dataclasses.replace(self, descriptions=dict(descriptions))

    def check(self, triple: Triple) -> None:
        if not (0 <= triple.head < self.num_entities and 0 <= triple.tail < self.num_entities):
            raise LabelIndexError(f"entity id outside [0, {self.num_entities}) in {triple}")
        if not 0 <= triple.relation < self.num_relations:
            raise LabelIndexError(f"relation id outside [0, {self.num_relations}) in {triple}")


class TripleSet:
    """Ordered, duplicate-free triples with a membership index."""

    def __init__(self, triples: Iterable[Triple], duplicates: int = 0):
        unique: list[Triple] = []
        seen: set[tuple[int, int, int]] = set()
        for triple in triples:
            key = triple.key()
            if key in seen:
                duplicates += 1
                continue
            seen.add(key)
            unique.append(triple)
        self._triples = tuple(unique)
        self._index = frozenset(seen)
        self.duplicates = duplicates

    def __len__(self) -> int:
        return len(self._triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self._triples)

    def __getitem__(self, position: int) -> Triple:
        return self._triples[position]

    def __contains__(self, item) -> bool:
        key = item.key() if isinstance(item, Triple) else tuple(item)
        return key in self._index

    @property
    def triples(self) -> tuple[Triple, ...]:
        return self._triples

    def as_array(self) -> np.ndarray:
        if not self._triples:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array([t.key() for t in self._triples], dtype=np.int64)

    def union(self, other: "TripleSet") -> "TripleSet":
        return TripleSet([*self._triples, *other.triples])


def _data_lines(path: Path) -> Iterator[tuple[int, str]]:
    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield line_number, line


def parse_triples(
    path: str | Path, warnings: list[str] | None = None
) -> tuple[KgVocab, TripleSet]:
    """Read a triple file; vocabularies are numbered in first-appearance order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"triple file not found: {path}")

    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    triples: list[Triple] = []
    for line_number, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3 or not all(part.strip() for part in parts):
            raise ParseError(
                "expected head<TAB>relation<TAB>tail", path=str(path), line_number=line_number
            )
        head, relation, tail = (part.strip() for part in parts)
        head_id = entities.setdefault(head, len(entities))
        relation_id = relations.setdefault(relation, len(relations))
        tail_id = entities.setdefault(tail, len(entities))
        triples.append(Triple(head_id, relation_id, tail_id))

    if not triples:
        raise DomainError(f"no triples in {path}")

    triple_set = TripleSet(triples)
    if triple_set.duplicates:
        message = f"{path.name}: {triple_set.duplicates} duplicate triple line(s) dropped"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)

    vocab = KgVocab(entities=tuple(entities), relations=tuple(relations))
    logger.info(
        f"Loaded {len(triple_set)} triples: {vocab.num_entities} entities, "
        f"{vocab.num_relations} relations"
    )
    return vocab, triple_set


def write_triples(path: str | Path, vocab: KgVocab, triples: Iterable[Triple]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triples:
            f.write(f"{vocab.entities[t.head]}\t{vocab.relations[t.relation]}\t{vocab.entities[t.tail]}\n")


def tokenize_description(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


def parse_descriptions(
    path: str | Path, vocab: KgVocab, warnings: list[str] | None = None
) -> KgVocab:
    """Attach tokenized descriptions; lines naming unknown entities are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"description file not found: {path}")

    descriptions: dict[int, tuple[str, ...]] = {}
    skipped = 0
    for line_number, line in _data_lines(path):
        name, sep, text = line.partition("\t")
        if not sep:
            raise ParseError("expected entity<TAB>text", path=str(path), line_number=line_number)
        entity = vocab.entity_index.get(name.strip())
        if entity is None:
            skipped += 1
            message = f"{path.name}:{line_number}: unknown entity {name.strip()!r}, line skipped"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
            continue
        descriptions[entity] = tokenize_description(text)

    if skipped:
        logger.warning(f"{path.name}: {skipped} description line(s) skipped")
    logger.info(f"Attached descriptions to {len(descriptions)}/{vocab.num_entities} entities")
    return vocab.with_descriptions(descriptions)


def write_descriptions(path: str | Path, vocab: KgVocab) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entity in sorted(vocab.descriptions):
            f.write(f"{vocab.entities[entity]}\t{' '.join(vocab.descriptions[entity])}\n")


def corrupt(triple: Triple, vocab: KgVocab | int, rng: np.random.Generator) -> Triple:
    """Replace head or tail (equal odds) with a different, uniformly drawn entity."""
    num_entities = vocab if isinstance(vocab, int) else vocab.num_entities
    if num_entities < 2:
        raise DomainError("corruption needs at least two entities")

    replace_head = rng.random() < 0.5
    current = triple.head if replace_head else triple.tail
    # uniform over the other num_entities - 1 ids
    drawn = int(rng.integers(num_entities - 1))
    if drawn >= current:
        drawn += 1
    if replace_head:
        return Triple(drawn, triple.relation, triple.tail)
    return Triple(triple.head, triple.relation, drawn)


def split_triples(
    triples: TripleSet, holdout: float, rng: np.random.Generator
) -> tuple[TripleSet, TripleSet]:
    """Random (train, held-out) split; held-out gets round(holdout * N) triples."""
    if not 0.0 <= holdout < 1.0:
        raise DomainError(f"holdout must be in [0, 1), got {holdout}")
    order = rng.permutation(len(triples))
    count = int(round(holdout * len(triples)))
    held = sorted(order[:count].tolist())
    kept = sorted(order[count:].tolist())
    return (
        TripleSet(triples[i] for i in kept),
        TripleSet(triples[i] for i in held),
    )
