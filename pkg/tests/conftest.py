# Python standard library
import os, sys

# 3rd party imports from pypi
import numpy as np
import pytest

# Local imports
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.realpath(__file__))), 'src'))


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='Run desk-scale trend tests (minutes each).')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale trend test, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _random_graph(rng, num_users, num_items, p = 0.3, weights = False):
    from graph import BipartiteGraph
    dense = rng.random((num_users, num_items)) < p
    rows, cols = np.nonzero(dense)
    w = rng.uniform(0.2, 1.5, size=len(rows)) if weights else None
    return BipartiteGraph(num_users, num_items, rows, cols, weights=w)


@pytest.fixture
def random_graph():
    """random_graph(rng, I, J, p=0.3, weights=False) -> BipartiteGraph"""
    return _random_graph


def _dense_operator(g, weights = None):
    """Dense D_U^-1/2 (A * W) D_V^-1/2 built independently of the sparse code."""
    w = np.ones(g.num_edges) if weights is None else weights
    A = np.zeros((g.num_users, g.num_items))
    for r, c, x in zip(g.rows, g.cols, w):
        A[r, c] = x
    binary = np.zeros_like(A)
    binary[g.rows, g.cols] = 1.0
    du = binary.sum(axis=1)
    dv = binary.sum(axis=0)
    su = np.where(du > 0, 1.0 / np.sqrt(np.maximum(du, 1)), 0.0)
    sv = np.where(dv > 0, 1.0 / np.sqrt(np.maximum(dv, 1)), 0.0)
    return su[:, None] * A * sv[None, :]


@pytest.fixture
def dense_operator():
    return _dense_operator


def _finite_difference(f, x, eps = 1e-5):
    """Central differences of the scalar f() with respect to array x, in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


@pytest.fixture
def finite_difference():
    return _finite_difference


def _relative_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@pytest.fixture
def relative_error():
    return _relative_error


def _dataset(pairs, num_users = None, num_items = None, val = None, test = None):
    from graph import InteractionDataset
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    empty = np.zeros((0, 2), dtype=np.int64)
    val = empty if val is None else np.asarray(val, dtype=np.int64).reshape(-1, 2)
    test = empty if test is None else np.asarray(test, dtype=np.int64).reshape(-1, 2)
    everything = np.concatenate([pairs, val, test])
    return InteractionDataset(
        num_users=num_users or int(everything[:, 0].max()) + 1,
        num_items=num_items or int(everything[:, 1].max()) + 1,
        train=pairs, val=val, test=test,
    )


@pytest.fixture
def make_dataset():
    """make_dataset(train_pairs, I=None, J=None, val=None, test=None)"""
    return _dataset


@pytest.fixture
def planted(tmp_path):
    """Small clustered dataset written to disk, (path, PlantedDataset)."""
    from synth import synth_planted, write_planted
    ds = synth_planted(60, 50, 3, 0.3, 0.1, seed=3)
    path, _ = write_planted(ds, str(tmp_path / 'planted.tsv'))
    return path, ds


@pytest.fixture
def small_config(planted):
    """Fast configuration over the planted dataset."""
    from config import load_config
    path, _ = planted
    return load_config(None, seed=11, environ={}, extra={
        'data': {'path': path, 'min_degree': 1, 'ratios': [0.7, 0.1, 0.2]},
        'model': {'dim': 8, 'layers': 2, 'student_layers': 1},
        'augment': {'hops': 3, 'cap_factor': 2},
        'loss': {'negatives': 16, 'contrast_anchors': 32},
        'prune': {'rounds': 2, 'edge_keep': 0.5, 'emb_keep': 0.5, 'epochs_per_round': 2, 'finetune_epochs': 2},
        'train': {'epochs': 3, 'batch_size': 64, 'lr': 0.01, 'eval_every': 1, 'patience': 5},
        'eval': {'bench_repetitions': 1, 'bench_warmup': 0},
    })
