import numpy as np
import pytest

from kgaugment.errors import DimensionError, DomainError, ParseError
from kgaugment.kg_embed import (
    FREE_PARAM,
    RELATION_PARAM,
    EmbeddingTable,
    TransEConfig,
    _batch_loss,
    eval_link_prediction,
    init_from_descriptions,
    margin_loss,
    read_embeddings,
    train_transe,
    transe_energy,
    uniform_bound,
    write_embeddings,
    write_link_prediction,
)
from kgaugment.kg_store import KgVocab, Triple, TripleSet
from kgaugment.numerics import adam_step
from kgaugment.numerics.gradcheck import analytic_gradients, check_gradients
from kgaugment.text_encoder import WordVectors


def grid_kg():
    """Entities on a 4 x 5 grid, relations are fixed moves; every fact is an exact translation."""
    entities = tuple(f"n{x}{y}" for x in range(4) for y in range(5))
    moves = {"right": (1, 0), "right2": (2, 0), "up": (0, 1), "up2": (0, 2), "diag": (1, 1)}
    relations = tuple(moves)
    triples = []
    for r, (dx, dy) in enumerate(moves.values()):
        for x in range(4):
            for y in range(5):
                if x + dx < 4 and y + dy < 5:
                    triples.append(Triple(x * 5 + y, r, (x + dx) * 5 + y + dy))
    return KgVocab(entities=entities, relations=relations), TripleSet(triples), moves


# ---------------------------------------------------------------------------
# energy and loss
# ---------------------------------------------------------------------------


def test_energy_examples():
    assert transe_energy(np.zeros(2), np.zeros(2), np.zeros(2)) == 0.0
    assert transe_energy([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]) == 0.0
    assert transe_energy([1.0, 0.0], [0.0, 0.0], [0.0, 0.0], "L1") == 1.0
    assert transe_energy([3.0, 0.0], [0.0, 4.0], [0.0, 0.0], "L2") == pytest.approx(5.0)


def test_energy_of_exact_translation_is_zero():
    rng = np.random.default_rng(0)
    h, r = rng.normal(size=(50, 8)), rng.normal(size=(50, 8))
    energies = transe_energy(h, r, h + r)
    assert np.all(energies == 0.0)


def test_energy_dimension_mismatch():
    with pytest.raises(DimensionError):
        transe_energy(np.zeros(2), np.zeros(3), np.zeros(2))


def test_margin_loss_examples():
    assert margin_loss(1.5, 1.5, 1.0) == 1.0
    assert margin_loss(0.0, 2.0, 1.0) == 0.0
    assert margin_loss(2.0, 1.0, 1.0) == 2.0
    with pytest.raises(DomainError):
        margin_loss(0.0, 0.0, 0.0)


def test_hinge_inactive_gradient_is_zero():
    config = TransEConfig(dim=2, margin=1.0)
    params = {
        FREE_PARAM: np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]),
        RELATION_PARAM: np.array([[1.0, 0.0]]),
    }
    positives = np.array([[0, 0, 1]])
    negatives = np.array([[0, 0, 2]])

    def build(graph, leaves):
        return _batch_loss(graph, leaves, None, positives, negatives, config)

    grads = analytic_gradients(build, params)
    for grad in grads.values():
        np.testing.assert_array_equal(grad, 0.0)
    assert max(check_gradients(build, params).values()) == 0.0


def test_active_hinge_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    config = TransEConfig(dim=3, margin=1.0, norm="L2")
    params = {FREE_PARAM: rng.normal(size=(4, 3)), RELATION_PARAM: rng.normal(size=(2, 3))}
    positives = np.array([[0, 0, 1], [2, 1, 3]])
    negatives = np.array([[0, 0, 3], [1, 1, 3]])

    def build(graph, leaves):
        return _batch_loss(graph, leaves, None, positives, negatives, config)

    assert max(check_gradients(build, params).values()) < 1e-4


# ---------------------------------------------------------------------------
# description initialization
# ---------------------------------------------------------------------------


def test_init_without_descriptions_stays_in_bounds():
    vocab = KgVocab(entities=("a", "b", "c"), relations=("r",))
    table = init_from_descriptions(vocab, None, dim=8, seed=0)
    assert table.vectors.shape == (3, 8)
    assert np.all(np.abs(table.vectors) <= uniform_bound(8))


def test_init_from_descriptions():
    words = WordVectors(words=("red", "blue"), matrix=np.array([[3.0, 4.0], [1.0, -1.0]]))
    vocab = KgVocab(
        entities=("a", "b", "c", "d"),
        relations=("r",),
        descriptions={0: ("red",), 1: ("red", "blue"), 2: ("red", "blue")},
    )
    table = init_from_descriptions(vocab, words, dim=2, seed=0, projection=np.eye(2))
    np.testing.assert_allclose(table.vectors[0], [0.6, 0.8])
    np.testing.assert_array_equal(table.vectors[1], table.vectors[2])
    assert np.linalg.norm(table.vectors[1]) == pytest.approx(1.0)
    assert np.all(np.abs(table.vectors[3]) <= uniform_bound(2))
    np.testing.assert_array_equal(table.projection, np.eye(2))


def test_init_rejects_bad_projection():
    words = WordVectors(words=("red",), matrix=np.ones((1, 3)))
    vocab = KgVocab(entities=("a",), relations=("r",), descriptions={0: ("red",)})
    with pytest.raises(DimensionError):
        init_from_descriptions(vocab, words, dim=2, projection=np.eye(2))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_training_is_deterministic():
    vocab, triples, _ = grid_kg()
    config = TransEConfig(dim=8, epochs=5, seed=3)
    first = train_transe(vocab, triples, config)
    second = train_transe(vocab, triples, config)
    np.testing.assert_array_equal(first.entities.vectors, second.entities.vectors)
    np.testing.assert_array_equal(first.relations.vectors, second.relations.vectors)
    assert first.epoch_losses == second.epoch_losses


def test_entities_have_unit_norm_after_training():
    vocab, triples, _ = grid_kg()
    result = train_transe(vocab, triples, TransEConfig(dim=8, epochs=3))
    norms = np.linalg.norm(result.entities.vectors, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_unit_norm_with_description_projection():
    words = WordVectors(words=("x", "y"), matrix=np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]]))
    vocab = KgVocab(entities=("a", "b", "c"), relations=("r",), descriptions={0: ("x",), 1: ("x", "y")})
    triples = TripleSet([Triple(0, 0, 1), Triple(1, 0, 2)])
    result = train_transe(vocab, triples, TransEConfig(dim=4, epochs=4), word_vectors=words)
    assert result.entities.projection is not None
    assert result.entities.projection.shape == (3, 4)
    norms = np.linalg.norm(result.entities.vectors, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_single_triple_loss_decreases():
    vocab = KgVocab(entities=("a", "b"), relations=("r",))
    config = TransEConfig(epochs=10, margin=1.0, learning_rate=0.001)
    losses = train_transe(vocab, TripleSet([Triple(0, 0, 1)]), config).epoch_losses
    assert len(losses) == 10
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))
    assert losses[-1] > 0.0


def test_loss_never_rises_over_five_epoch_windows():
    vocab, triples, _ = grid_kg()
    losses = np.array(train_transe(vocab, triples, TransEConfig()).epoch_losses)
    assert len(losses) == 200
    window_means = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(window_means) <= 1e-12)
    assert np.all(np.diff(losses) <= 0.0)
    assert losses[-1] < 0.5 * losses[0]


def test_epochs_that_raise_the_loss_are_undone(monkeypatch):
    vocab, triples, _ = grid_kg()
    measured = iter([1.0, 0.8, 0.9, 0.7, 0.75, 0.6])
    monkeypatch.setattr("kgaugment.kg_embed._monitor_loss", lambda *args: next(measured))
    rates = []

    def recording_step(params, grads, state):
        rates.append(state.learning_rate)
        adam_step(params, grads, state)

    monkeypatch.setattr("kgaugment.kg_embed.adam_step", recording_step)
    result = train_transe(vocab, triples, TransEConfig(dim=4, epochs=5, batch_size=100))
    assert result.epoch_losses == [0.8, 0.8, 0.7, 0.7, 0.6]
    assert rates == pytest.approx([0.01, 0.01, 0.005, 0.00525, 0.002625])


def test_training_needs_two_entities():
    vocab = KgVocab(entities=("a",), relations=("r",))
    with pytest.raises(DomainError):
        train_transe(vocab, TripleSet([Triple(0, 0, 0)]), TransEConfig(epochs=1))


def test_config_validation():
    with pytest.raises(DomainError):
        TransEConfig(margin=0.0)
    with pytest.raises(DomainError):
        TransEConfig(norm="L3")


@pytest.mark.slow
def test_grid_translations_recovered():
    """
    Held-out grid facts are ranked first.

    Training keeps 60 grid facts, a single minibatch at the default batch
    size, so this run uses batch 16 over 400 epochs: 1,600 updates instead of 200.
    """
    vocab, triples, moves = grid_kg()
    held = []
    for r in range(vocab.num_relations):
        held.append(next(t for t in triples if t.relation == r and t.head == 1 * 5 + 1))
    training = TripleSet(t for t in triples if t not in held)
    config = TransEConfig(dim=16, epochs=400, batch_size=16, learning_rate=0.01, seed=0)
    result = train_transe(vocab, training, config)

    losses = result.epoch_losses
    assert np.mean(losses[-5:]) <= np.mean(losses[:5])
    report = eval_link_prediction(result.entities, result.relations, held, triples, config.norm)
    assert report.hits[1] >= 0.9


# ---------------------------------------------------------------------------
# link prediction
# ---------------------------------------------------------------------------


def test_perfect_embeddings_rank_first():
    rng = np.random.default_rng(0)
    heads = rng.normal(size=(10, 6))
    relations = rng.normal(size=(3, 6))
    tails = [heads[i] + relations[i % 3] for i in range(10)]
    entities = np.vstack([heads, tails])
    test = [Triple(i, i % 3, 10 + i) for i in range(10)]
    report = eval_link_prediction(entities, relations, test, test)
    assert report.hits[1] == 1.0
    assert report.mean_rank == 1.0
    assert report.mean_reciprocal_rank == 1.0


def test_random_embeddings_rank_near_middle():
    rng = np.random.default_rng(1)
    entities = rng.normal(size=(100, 8))
    relations = rng.normal(size=(3, 8))
    test = [Triple(i % 100, i // 100, int(rng.integers(100))) for i in range(300)]
    report = eval_link_prediction(entities, relations, test, test)
    assert 40.0 <= report.mean_rank <= 60.0
    assert report.count == 300


def test_filtered_ranking_skips_other_true_tails():
    entities = np.array([[0.0], [1.0], [2.0], [3.0]])
    relations = np.array([[1.0]])
    test = [Triple(0, 0, 2)]
    known = TripleSet([Triple(0, 0, 1), Triple(0, 0, 2)])
    assert eval_link_prediction(entities, relations, test, known).mean_rank == 1.0
    assert eval_link_prediction(entities, relations, test, test).mean_rank == 2.0


def test_two_entity_rank_bounds():
    rng = np.random.default_rng(2)
    report = eval_link_prediction(rng.normal(size=(2, 3)), rng.normal(size=(1, 3)), [Triple(0, 0, 1)], [])
    assert report.mean_rank in (1.0, 2.0)


def test_empty_test_set():
    with pytest.raises(DomainError):
        eval_link_prediction(np.eye(2), np.eye(2)[:1], [], [])


def test_link_prediction_report_file(tmp_path):
    entities = np.array([[0.0], [1.0]])
    report = eval_link_prediction(entities, np.array([[1.0]]), [Triple(0, 0, 1)], [])
    path = tmp_path / "lp.txt"
    write_link_prediction(path, report)
    assert path.read_text(encoding="utf-8").splitlines() == [
        "count=1", "mean_rank=1.0", "mrr=1.0", "hits@1=1.0", "hits@10=1.0",
    ]


# ---------------------------------------------------------------------------
# dump files
# ---------------------------------------------------------------------------


def test_embedding_dump(tmp_path):
    table = EmbeddingTable(np.array([[0.1, -2.5], [1.0 / 3.0, 4.0]]), kind="relation", names=("r0", "r1"))
    path = tmp_path / "relations.txt"
    write_embeddings(path, table)
    assert path.read_text(encoding="utf-8").startswith("# kind=relation dim=2\n")
    loaded = read_embeddings(path)
    assert loaded.kind == "relation"
    assert loaded.names == ("r0", "r1")
    np.testing.assert_array_equal(loaded.vectors, table.vectors)


def test_embedding_names_with_spaces_and_hashes_round_trip(tmp_path):
    names = ("new york", "#politics", "a b  c", "plain")
    table = EmbeddingTable(np.arange(8.0).reshape(4, 2) / 7.0, kind="entity", names=names)
    path = tmp_path / "entities.txt"
    write_embeddings(path, table)
    loaded = read_embeddings(path)
    assert loaded.names == names
    np.testing.assert_array_equal(loaded.vectors, table.vectors)


def test_embedding_dump_wrong_arity(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# kind=entity dim=2\na 1.0 2.0\nb 1.0\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        read_embeddings(path)
    assert info.value.line_number == 3


def test_embedding_table_is_read_only():
    table = EmbeddingTable(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        table.vectors[0, 0] = 1.0
