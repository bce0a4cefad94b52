"""
Synthetic fact-determined classification benchmark.

Every document mentions one subject entity and one trigger word that
announces a relation. Its label is the category of the object reached from
that subject through that relation. Object and category names never appear
in the text, so a text-only model can only fall back on the occasional label
cue word while a model reading the KG can complete the fact.

Subjects come in families whose members share every fact and description;
with the family size equal to the cluster size, balanced clustering of the
embeddings recovers the families. Each family keeps one relation for test
documents only, so no member is ever seen with it during training, and every
object reached by a held-out pair is also reached by some training pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kgaugment.errors import DomainError
from kgaugment.kg_store import KgVocab, Triple, TripleSet, write_descriptions, write_triples
from kgaugment.train import LabeledData, write_dataset

logger = logging.getLogger(__name__)

CATEGORY_RELATION = "belongs_to"
CATEGORY_NAMES = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta")
RELATION_TRIGGERS = (
    ("visits", "visiting"),
    ("trades_with", "trading"),
    ("guards", "guarding"),
    ("studies", "studying"),
    ("builds", "building"),
    ("sells_to", "selling"),
)
FILLER_WORDS = (
    "the", "a", "report", "today", "was", "seen", "while", "after", "before", "again",
    "quietly", "often", "during", "morning", "evening", "news", "said", "that", "with", "some",
    "people", "later", "early", "local", "story", "in", "on", "about", "there", "then",
)
SYLLABLES = ("ka", "lo", "mi", "ru", "ze", "ta", "vo", "ni", "pa", "qu", "sh", "dr", "ex", "yl", "or", "bi")
MAX_DRAWS = 200


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    families: int = 12
    family_size: int = 3  # match the cluster size so clusters recover families
    objects: int = 20
    categories: int = 4
    relations: int = 3
    train_docs: int = 800
    test_docs: int = 200
    cue_rate: float = 0.3
    min_filler: int = 4
    max_filler: int = 8

    def __post_init__(self) -> None:
        if not 2 <= self.categories <= len(CATEGORY_NAMES):
            raise DomainError(f"categories must be in [2, {len(CATEGORY_NAMES)}], got {self.categories}")
        if not 2 <= self.relations <= len(RELATION_TRIGGERS):
            raise DomainError(f"relations must be in [2, {len(RELATION_TRIGGERS)}], got {self.relations}")
        if self.families < 1 or self.family_size < 1:
            raise DomainError("need at least one family with at least one subject")
        if self.objects < max(self.categories, self.relations):
            raise DomainError("need at least one object per category and per relation")
        if self.train_docs < 1 or self.test_docs < 1:
            raise DomainError("need at least one train and one test document")
        if not 0.0 <= self.cue_rate <= 1.0:
            raise DomainError(f"cue_rate must be in [0, 1], got {self.cue_rate}")
        if not 0 <= self.min_filler <= self.max_filler:
            raise DomainError("filler bounds must satisfy 0 <= min_filler <= max_filler")

    @property
    def subjects(self) -> int:
        return self.families * self.family_size


@dataclass(frozen=True, eq=False)
class Benchmark:
    config: SynthConfig
    vocab: KgVocab
    triples: TripleSet
    train: LabeledData
    test: LabeledData
    families: tuple[tuple[int, ...], ...]  # subject entity ids per family
    held_out: tuple[int, ...]  # relation id each family keeps for test documents


def _pseudo_words(count: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        word = "".join(SYLLABLES[i] for i in rng.integers(len(SYLLABLES), size=3))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def _document(
    subject: str,
    trigger: str,
    cue: str | None,
    config: SynthConfig,
    rng: np.random.Generator,
) -> str:
    filler_count = int(rng.integers(config.min_filler, config.max_filler + 1))
    tokens = [FILLER_WORDS[i] for i in rng.integers(len(FILLER_WORDS), size=filler_count)]
    for word in (subject, trigger) if cue is None else (subject, trigger, cue):
        tokens.insert(int(rng.integers(len(tokens) + 1)), word)
    return " ".join(tokens)


def _assign_targets(
    config: SynthConfig, held_out: np.ndarray, rng: np.random.Generator
) -> dict[tuple[int, int], int]:
    """
    Object index for every (family, relation) pair.

    Held-out pairs get distinct objects where possible, every one of which is
    also the target of a training pair; a family never reaches the same object
    twice.
    """
    families, relations, objects = config.families, config.relations, config.objects
    held_cells = [(f, int(held_out[f])) for f in range(families)]
    train_cells = [(f, r) for f in range(families) for r in range(relations) if r != held_out[f]]
    held_targets = rng.choice(objects, size=families, replace=families > objects)
    shared = list(dict.fromkeys(int(o) for o in held_targets))
    others = [int(o) for o in rng.permutation(objects) if int(o) not in shared]
    pool = (shared + others)[: len(train_cells)]
    if len(pool) < len(train_cells):
        pool += [int(o) for o in rng.integers(objects, size=len(train_cells) - len(pool))]

    for _ in range(MAX_DRAWS):
        target = {cell: int(o) for cell, o in zip(held_cells, held_targets)}
        for position, cell_index in enumerate(rng.permutation(len(train_cells))):
            target[train_cells[cell_index]] = pool[position]
        if all(len({target[(f, r)] for r in range(relations)}) == relations for f in range(families)):
            return target
    raise DomainError(f"no target assignment without repeated objects per family after {MAX_DRAWS} draws")


def generate_benchmark(config: SynthConfig = SynthConfig()) -> Benchmark:
    rng = np.random.default_rng(config.seed)
    taken = set(FILLER_WORDS) | {trigger for _, trigger in RELATION_TRIGGERS} | set(CATEGORY_NAMES)
    subjects = _pseudo_words(config.subjects, rng, taken)
    family_names = _pseudo_words(config.families, rng, taken)
    objects = _pseudo_words(config.objects, rng, taken)
    cues = _pseudo_words(config.categories, rng, taken)
    categories = list(CATEGORY_NAMES[: config.categories])
    relation_names = [name for name, _ in RELATION_TRIGGERS[: config.relations]]
    triggers = [trigger for _, trigger in RELATION_TRIGGERS[: config.relations]]

    entities = tuple(subjects + objects + categories)
    relations = tuple(relation_names + [CATEGORY_RELATION])
    object_offset, category_offset = len(subjects), len(subjects) + len(objects)
    category_relation = len(relation_names)
    families = tuple(
        tuple(range(f * config.family_size, (f + 1) * config.family_size)) for f in range(config.families)
    )

    # objects spread evenly over categories
    object_category = rng.permutation(np.arange(config.objects) % config.categories)
    triples = [
        Triple(object_offset + o, category_relation, category_offset + int(c))
        for o, c in enumerate(object_category)
    ]

    held_out = rng.integers(config.relations, size=config.families)
    target = _assign_targets(config, held_out, rng)
    for f, members in enumerate(families):
        for r in range(config.relations):
            triples.extend(Triple(s, r, object_offset + target[(f, r)]) for s in members)

    train_cells = [(f, r) for f in range(config.families) for r in range(config.relations) if r != held_out[f]]
    test_cells = [(f, int(held_out[f])) for f in range(config.families)]

    def documents(cells: list[tuple[int, int]], count: int) -> tuple[list[str], list[int]]:
        texts, labels = [], []
        for draw in rng.integers(len(cells), size=count):
            f, r = cells[int(draw)]
            subject = subjects[families[f][int(rng.integers(config.family_size))]]
            label = int(object_category[target[(f, r)]])
            cue = cues[label] if rng.random() < config.cue_rate else None
            texts.append(_document(subject, triggers[r], cue, config, rng))
            labels.append(label)
        return texts, labels

    train_texts, train_labels = documents(train_cells, config.train_docs)
    test_texts, test_labels = documents(test_cells, config.test_docs)
    missing = sorted(set(range(config.categories)) - set(train_labels))
    if missing:
        raise DomainError(f"training documents cover no example of classes {[categories[c] for c in missing]}")

    descriptions = {}
    for f, members in enumerate(families):
        for s in members:
            descriptions[s] = ("a", "person", "of", "family", family_names[f])
    for o in range(config.objects):
        descriptions[object_offset + o] = ("a", "place", "of", "kind", categories[object_category[o]])
    for c, name in enumerate(categories):
        descriptions[category_offset + c] = ("the", "category", name)

    vocab = KgVocab(entities=entities, relations=relations, descriptions=descriptions)
    label_names = tuple(categories)
    bench = Benchmark(
        config=config,
        vocab=vocab,
        triples=TripleSet(triples),
        train=LabeledData(tuple(train_texts), np.array(train_labels, dtype=np.int64), label_names),
        test=LabeledData(tuple(test_texts), np.array(test_labels, dtype=np.int64), label_names),
        families=families,
        held_out=tuple(int(r) for r in held_out),
    )
    logger.info(
        f"Synthetic benchmark (seed {config.seed}): {vocab.num_entities} entities in "
        f"{config.families} families of {config.family_size}, {vocab.num_relations} relations, "
        f"{len(bench.triples)} triples, {len(bench.train)} train / {len(bench.test)} test documents"
    )
    return bench


def write_benchmark(bench: Benchmark, out_dir: str | Path) -> list[Path]:
    """kg.tsv, descriptions.tsv, train.tsv, test.tsv and README.txt; byte-identical for a given seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / name for name in ("kg.tsv", "descriptions.tsv", "train.tsv", "test.tsv", "README.txt")]
    write_triples(paths[0], bench.vocab, bench.triples)
    write_descriptions(paths[1], bench.vocab)
    write_dataset(paths[2], bench.train)
    write_dataset(paths[3], bench.test)

    config = bench.config
    readme = [
        "Synthetic fact-determined classification benchmark",
        "",
        f"seed={config.seed}",
        f"entities={bench.vocab.num_entities}",
        f"families={config.families}",
        f"family_size={config.family_size}",
        f"relations={bench.vocab.num_relations}",
        f"triples={len(bench.triples)}",
        f"train_documents={len(bench.train)}",
        f"test_documents={len(bench.test)}",
        f"classes={','.join(bench.train.label_names)}",
        f"cue_rate={config.cue_rate}",
        "",
        "A document's label is the category of the object linked to its subject",
        "by the relation its trigger word announces. Members of a family share",
        "every fact. Each family keeps one relation for test documents, so test",
        "(subject, relation) pairs never occur in training documents.",
    ]
    paths[4].write_text("\n".join(readme) + "\n", encoding="utf-8")
    return paths
