"""
Text side of the model: tokenization, word vectors and the LSTM context encoders.

Three branches read the same token sequence: E (entity-retrieval query C_E),
R (relation-retrieval query C_R) and CLS (classification context C). Each has
its own LSTM and its own ReLU projection to the KG dimension m.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from kgaugment.errors import DimensionError, DomainError, ParseError
from kgaugment.numerics import ops
from kgaugment.numerics.ops import LstmWeights
from kgaugment.numerics.tensor import Graph, Tensor

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
WORD_INIT_STD = 0.1
WORDS_PARAM = "embedding.words"

TOKEN_PATTERN = re.compile(r"\w+")


class Branch(str, Enum):
    ENTITY = "E"
    RELATION = "R"
    CLASSIFY = "CLS"


# ---------------------------------------------------------------------------
# tokens
# ---------------------------------------------------------------------------


class Vocabulary:
    """word <-> id map; id 0 is padding and id 1 the unknown word."""

    def __init__(self, words: Iterable[str]):
        ordered = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.words: tuple[str, ...] = tuple(dict.fromkeys(ordered))
        self.index = {word: i for i, word in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def lookup(self, word: str) -> int:
        return self.index.get(word, UNK_ID)


def split_tokens(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return TOKEN_PATTERN.findall(text.lower())


def build_vocabulary(texts: Iterable[str], min_count: int = 1) -> Vocabulary:
    counts: dict[str, int] = {}
    for text in texts:
        for token in split_tokens(text):
            counts[token] = counts.get(token, 0) + 1
    return Vocabulary(word for word, count in counts.items() if count >= min_count)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # (T,) int
    mask: np.ndarray  # (T,) bool, real tokens form a prefix

    @property
    def length(self) -> int:
        return int(self.mask.sum())

    @property
    def max_len(self) -> int:
        return int(self.ids.shape[0])


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise DomainError(f"sequence length must be >= 1, got {max_len}")
    tokens = split_tokens(text)
    if not tokens:
        raise DomainError(f"no tokens in text {text!r}")
    tokens = tokens[:max_len]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(tokens)] = [vocab.lookup(token) for token in tokens]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(tokens)] = True
    return TokenSequence(ids=ids, mask=mask)


def stack_sequences(sequences: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    if not sequences:
        raise DomainError("no sequences to stack")
    ids = np.stack([s.ids for s in sequences])
    mask = np.stack([s.mask for s in sequences])
    return ids, mask


# ---------------------------------------------------------------------------
# word vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WordVectors:
    words: tuple[str, ...]
    matrix: np.ndarray  # (|V|, d_w)
    oov: str = "unknown"

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.words):
            raise DimensionError(
                f"word vector matrix {self.matrix.shape} does not match {len(self.words)} words"
            )

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def index(self) -> dict[str, int]:
        return {word: i for i, word in enumerate(self.words)}

    def get(self, word: str) -> np.ndarray | None:
        position = self.index.get(word)
        return None if position is None else self.matrix[position]


def load_word_vectors(path: str | Path, warnings: list[str] | None = None) -> WordVectors:
    """Read `word v1 ... v_dw` lines; duplicate words keep their first vector."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"word vector file not found: {path}")

    words: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    duplicates = 0
    dim: int | None = None
    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise ParseError("word line without a vector", path=str(path), line_number=line_number)
            if len(parts) - 1 != dim:
                raise ParseError(
                    f"expected {dim} values, found {len(parts) - 1}",
                    path=str(path),
                    line_number=line_number,
                )
            try:
                vector = [float(v) for v in parts[1:]]
            except ValueError:
                raise ParseError("non-numeric vector entry", path=str(path), line_number=line_number) from None
            word = parts[0]
            if word in seen:
                duplicates += 1
                message = f"{path.name}:{line_number}: duplicate word {word!r}, first vector kept"
                logger.warning(message)
                if warnings is not None:
                    warnings.append(message)
                continue
            seen.add(word)
            words.append(word)
            rows.append(vector)

    if not words:
        raise DomainError(f"no word vectors in {path}")
    logger.info(f"Loaded {len(words)} word vectors of dimension {dim} ({duplicates} duplicates)")
    return WordVectors(words=tuple(words), matrix=np.array(rows, dtype=np.float64))


def write_word_vectors(path: str | Path, vectors: WordVectors) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for word, row in zip(vectors.words, vectors.matrix):
            f.write(word + " " + " ".join(repr(float(v)) for v in row) + "\n")


def initial_word_matrix(
    vocab: Vocabulary,
    dim: int,
    rng: np.random.Generator,
    pretrained: WordVectors | None = None,
) -> np.ndarray:
    """Gaussian init (sigma 0.1); pretrained rows copied in; the padding row is zero."""
    matrix = rng.normal(0.0, WORD_INIT_STD, size=(len(vocab), dim))
    matrix[PAD_ID] = 0.0
    if pretrained is not None:
        if pretrained.dim != dim:
            raise DimensionError(f"pretrained word vectors have dimension {pretrained.dim}, model uses {dim}")
        index = pretrained.index
        hits = 0
        for word, row in vocab.index.items():
            position = index.get(word)
            if position is not None:
                matrix[row] = pretrained.matrix[position]
                hits += 1
        logger.info(f"Pretrained vectors cover {hits}/{len(vocab) - 2} vocabulary words")
    return matrix


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def lstm_prefix(branch: Branch, shared: bool = False) -> str:
    return "encoder.shared" if shared else f"encoder.{branch.value}"


def projection_name(branch: Branch) -> str:
    return f"encoder.{branch.value}.proj"


def init_encoder_params(
    rng: np.random.Generator,
    branch: Branch,
    word_dim: int,
    hidden: int,
    out_dim: int,
    shared: bool = False,
) -> dict[str, np.ndarray]:
    prefix = lstm_prefix(branch, shared)
    bound = 1.0 / np.sqrt(hidden)
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
    return {
        f"{prefix}.W_x": rng.uniform(-bound, bound, size=(word_dim, 4 * hidden)),
        f"{prefix}.W_h": rng.uniform(-bound, bound, size=(hidden, 4 * hidden)),
        f"{prefix}.b": bias,
        projection_name(branch): rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, out_dim)),
    }


@dataclass
class ContextBundle:
    entity: Tensor | None = None  # C_E
    relation: Tensor | None = None  # C_R
    classify: Tensor | None = None  # C


def lstm_mean_state(
    graph: Graph,
    leaves: Mapping[str, Tensor],
    ids: np.ndarray,
    mask: np.ndarray,
    prefix: str,
) -> Tensor:
    """Masked mean of LSTM hidden states over the real tokens."""
    ids = np.atleast_2d(ids)
    mask = np.atleast_2d(mask)
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise DomainError("every sequence needs at least one real token")
    steps = int(lengths.max())  # trailing all-padding steps never reach the mean

    weights = LstmWeights(
        input=leaves[f"{prefix}.W_x"],
        recurrent=leaves[f"{prefix}.W_h"],
        bias=leaves[f"{prefix}.b"],
    )
    hidden = weights.recurrent.shape[0]
    h = graph.constant(np.zeros((ids.shape[0], hidden)))
    c = graph.constant(np.zeros((ids.shape[0], hidden)))
    states = []
    for t in range(steps):
        x_t = ops.gather_rows(leaves[WORDS_PARAM], ids[:, t])
        h, c = ops.lstm_cell(x_t, (h, c), weights)
        states.append(h)
    return ops.mean_over_time(states, mask[:, :steps])


def encode(
    graph: Graph,
    leaves: Mapping[str, Tensor],
    ids: np.ndarray,
    mask: np.ndarray,
    branch: Branch,
    shared: bool = False,
) -> Tensor:
    """ReLU(o^T W_branch) for a batch of sequences: (B, m)."""
    o = lstm_mean_state(graph, leaves, ids, mask, lstm_prefix(branch, shared))
    return ops.relu(ops.matmul(o, leaves[projection_name(branch)]))


def encode_contexts(
    graph: Graph,
    leaves: Mapping[str, Tensor],
    ids: np.ndarray,
    mask: np.ndarray,
    branches: Sequence[Branch],
    shared: bool = False,
) -> ContextBundle:
    bundle = ContextBundle()
    shared_state = None
    for branch in branches:
        if shared:
            if shared_state is None:
                shared_state = lstm_mean_state(graph, leaves, ids, mask, lstm_prefix(branch, True))
            context = ops.relu(ops.matmul(shared_state, leaves[projection_name(branch)]))
        else:
            context = encode(graph, leaves, ids, mask, branch)
        if branch is Branch.ENTITY:
            bundle.entity = context
        elif branch is Branch.RELATION:
            bundle.relation = context
        else:
            bundle.classify = context
    return bundle
