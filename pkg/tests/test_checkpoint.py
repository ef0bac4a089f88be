# Python standard library
import os, zipfile

# 3rd party imports from pypi
import numpy as np
import pytest

# Local imports
from checkpoint import ModelCheckpoint, serialize, save_checkpoint, load_checkpoint
from errors import IntegrityError, MissingArtifactError, ContractError
from propagation import EmbeddingTable, ModelParams
from pruning import prune_embeddings


def _weighted(rng, random_graph, rate = 0.0):
    g = random_graph(rng, 12, 9, 0.3)
    table = EmbeddingTable(rng.normal(size=(12, 5)), rng.normal(size=(9, 5)))
    if rate:
        table = prune_embeddings(table, rate)
    params = ModelParams(table, rng.normal(size=g.num_edges), 1)
    weights = params.edge_weights + 0.5
    return g, params, ModelCheckpoint.from_model('student', g, params, weights=weights, config_hash='feed')


def test_round_trip_preserves_the_model(tmp_path, rng, random_graph):
    g, params, ckpt = _weighted(rng, random_graph, rate=40)
    path = str(tmp_path / 'student.ckpt')
    size = save_checkpoint(ckpt, path)
    assert size == os.path.getsize(path)

    back = load_checkpoint(path)
    assert back.role == 'student' and back.variant == 'weighted' and back.config_hash == 'feed'
    assert np.array_equal(back.table.user_mask, params.table.user_mask)
    assert np.array_equal(back.table.user, params.table.user)
    assert np.array_equal(back.learned, params.edge_weights)
    assert np.array_equal(back.weights, params.edge_weights + 0.5)
    assert np.array_equal(back.rows, g.rows) and np.array_equal(back.cols, g.cols)
    assert np.allclose(back.forward().user_final, ckpt.forward().user_final, rtol=0, atol=0)


def test_plain_round_trip(tmp_path, rng, random_graph):
    g = random_graph(rng, 6, 7)
    params = ModelParams(EmbeddingTable(rng.normal(size=(6, 3)), rng.normal(size=(7, 3))), None, 2)
    ckpt = ModelCheckpoint.from_model('teacher', g, params)
    path = str(tmp_path / 'teacher.ckpt')
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.variant == 'plain' and back.weights is None and back.learned is None
    assert back.params().edge_weights is None
    assert np.array_equal(back.forward().item_final, ckpt.forward().item_final)


def test_serialization_is_deterministic(rng, random_graph):
    _, _, ckpt = _weighted(rng, random_graph)
    assert serialize(ckpt) == serialize(ckpt)
    copy = ModelCheckpoint.from_model('student', ckpt.graph(), ckpt.params(), weights=ckpt.weights, config_hash='feed')
    assert serialize(copy) == serialize(ckpt)


def test_masked_entries_shrink_the_file(rng, random_graph):
    _, _, dense = _weighted(np.random.default_rng(1), random_graph)
    _, _, sparse = _weighted(np.random.default_rng(1), random_graph, rate=80)
    assert len(serialize(sparse)) < len(serialize(dense))


def test_float32_storage(tmp_path, rng, random_graph):
    g, params, _ = _weighted(rng, random_graph)
    ckpt = ModelCheckpoint.from_model('student', g, params, precision='float32')
    path = str(tmp_path / 'f32.ckpt')
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.table.user.dtype == np.float64
    assert np.allclose(back.table.user, params.table.user, rtol=1e-6)
    # the in-memory snapshot already holds the rounded values
    assert np.array_equal(back.table.user, ckpt.table.user)
    assert np.array_equal(back.weights, ckpt.weights) and np.array_equal(back.learned, ckpt.learned)
    assert len(serialize(ckpt)) < len(serialize(ModelCheckpoint.from_model('student', g, params)))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(str(tmp_path / 'absent.ckpt'))


def test_truncated_checkpoint_fails_integrity(tmp_path, rng, random_graph):
    _, _, ckpt = _weighted(rng, random_graph)
    path = str(tmp_path / 'broken.ckpt')
    payload = serialize(ckpt)
    with open(path, 'wb') as fh:
        fh.write(payload[:len(payload) // 2])
    with pytest.raises(IntegrityError) as info:
        load_checkpoint(path)
    assert path in str(info.value)


def test_tampered_values_fail_the_digest(tmp_path, rng, random_graph):
    _, _, ckpt = _weighted(rng, random_graph)
    original = str(tmp_path / 'ok.ckpt')
    save_checkpoint(ckpt, original)
    tampered = str(tmp_path / 'tampered.ckpt')
    with zipfile.ZipFile(original) as src, zipfile.ZipFile(tampered, 'w') as dst:
        for info in src.infolist():
            data = src.read(info.filename)
            if info.filename == 'learned.npy':
                data = data[:-8] + np.float64(123.0).tobytes()
            dst.writestr(info, data)
    with pytest.raises(IntegrityError):
        load_checkpoint(tampered)


def test_unknown_variant():
    table = EmbeddingTable(np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ContractError):
        ModelCheckpoint('x', 'other', 1, table, np.zeros(0, dtype=int), np.zeros(0, dtype=int))
