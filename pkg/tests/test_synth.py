# 3rd party imports from pypi
import numpy as np
import pytest

# Local imports
from errors import ConfigError
from graph import load_interactions
from synth import synth_planted, write_planted, read_labels, labels_path, noise_count


def test_noise_count_example():
    """20% noise on top of 8000 clean edges is 2000 noise edges."""
    assert noise_count(8000, 0.2) == 2000
    assert noise_count(100, 0.0) == 0


def test_clean_edges_stay_inside_clusters():
    ds = synth_planted(50, 40, 4, 0.2, 0.0, seed=1)
    assert ds.num_noise == 0
    assert np.array_equal(ds.user_cluster[ds.pairs[:, 0]], ds.item_cluster[ds.pairs[:, 1]])


def test_planted_noise_is_exact_and_crosses_clusters():
    ds = synth_planted(80, 60, 3, 0.3, 0.25, seed=2)
    clean = int((~ds.noise).sum())
    assert ds.num_noise == noise_count(clean, 0.25)
    noisy = ds.pairs[ds.noise]
    assert (ds.user_cluster[noisy[:, 0]] != ds.item_cluster[noisy[:, 1]]).all()
    assert len(np.unique(ds.pairs, axis=0)) == ds.num_edges


def test_every_user_has_an_edge():
    ds = synth_planted(40, 200, 4, 0.01, 0.0, seed=3)
    assert set(ds.pairs[:, 0]) == set(range(40))


def test_same_seed_same_dataset():
    a = synth_planted(30, 30, 3, 0.2, 0.1, seed=4)
    b = synth_planted(30, 30, 3, 0.2, 0.1, seed=4)
    assert np.array_equal(a.pairs, b.pairs) and np.array_equal(a.noise, b.noise)


@pytest.mark.parametrize('args', [(10, 10, 1, 0.1, 0.0), (10, 10, 2, 0.1, 0.5), (10, 10, 2, 0.0, 0.1),
                                  (1, 10, 2, 0.1, 0.0), (3, 5, 2, 1.0, 0.49)])
def test_invalid_arguments(args):
    with pytest.raises(ConfigError):
        synth_planted(*args, seed=0)


def test_written_dataset_loads_with_labels(tmp_path):
    ds = synth_planted(30, 20, 2, 0.3, 0.1, seed=5)
    path, sidecar = write_planted(ds, str(tmp_path / 'out' / 'planted.tsv'))
    assert sidecar == labels_path(path) == str(tmp_path / 'out' / 'planted.labels.tsv')
    loaded = load_interactions(path)
    assert len(loaded.train) == ds.num_edges
    labels = read_labels(sidecar)
    assert list(labels.columns) == ['user', 'item', 'label']
    assert (labels['label'] == 'noise').sum() == ds.num_noise
    assert np.array_equal(labels[['user', 'item']].to_numpy(), ds.pairs)
