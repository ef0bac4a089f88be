#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Planted-noise synthetic interactions with ground-truth labels.

Users and items are split into clusters; clean edges connect a user to items
of its own cluster and noise edges connect it to items of other clusters.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass
import os

# 3rd party imports from pypi
import numpy as np
import pandas as pd

# Local imports
from errors import ConfigError
from utils import rng_stream, get_logger, initialize

logger = get_logger('synth')


@dataclass
class PlantedDataset:
    pairs: np.ndarray           # (n, 2) user, item sorted by (user, item)
    noise: np.ndarray           # True for planted noise edges
    user_cluster: np.ndarray
    item_cluster: np.ndarray

    @property
    def num_edges(self):
        return len(self.pairs)

    @property
    def num_noise(self):
        return int(self.noise.sum())


def noise_count(clean, noise_fraction):
    """Noise edges so that they make up noise_fraction of all edges."""
    return int(round(noise_fraction * clean / (1.0 - noise_fraction)))


def synth_planted(users, items, clusters, intra_p, noise_fraction, seed):
    """Generates a clustered interaction set with planted inter-cluster noise.
    @param users <int>:
        Number of users, at least clusters
    @param items <int>:
        Number of items, at least clusters
    @param clusters <int>:
        Number of clusters (>= 2)
    @param intra_p <float>:
        Probability of each intra-cluster user-item edge
    @param noise_fraction <float>:
        Share of noise among all edges, in [0, 0.5)
    @param seed <int>:
        Global seed, consumed through the 'synth' stream
    @return <PlantedDataset>
    """
    if clusters < 2:
        raise ConfigError('synth needs at least 2 clusters, got {}'.format(clusters))
    if not (0.0 <= noise_fraction < 0.5):
        raise ConfigError('noise fraction must be in [0, 0.5), got {}'.format(noise_fraction))
    if not (0.0 < intra_p <= 1.0):
        raise ConfigError('intra-cluster probability must be in (0, 1], got {}'.format(intra_p))
    if users < clusters or items < clusters:
        raise ConfigError('need at least one user and one item per cluster')
    rng = rng_stream(seed, 'synth')
    user_cluster = rng.permutation(np.arange(users) % clusters)
    item_cluster = rng.permutation(np.arange(items) % clusters)

    clean = []
    for c in range(clusters):
        members = np.flatnonzero(user_cluster == c)
        pool = np.flatnonzero(item_cluster == c)
        block = rng.random((len(members), len(pool))) < intra_p
        # Users that drew no edge are resampled until they have one
        empty = np.flatnonzero(~block.any(axis=1))
        while len(empty):
            block[empty] = rng.random((len(empty), len(pool))) < intra_p
            empty = empty[~block[empty].any(axis=1)]
        r, i = np.nonzero(block)
        clean.append(np.stack([members[r], pool[i]], axis=1))
    clean = np.concatenate(clean)

    wanted = noise_count(len(clean), noise_fraction)
    capacity = int(np.sum(items - np.bincount(item_cluster, minlength=clusters)[user_cluster]))
    if wanted > capacity:
        raise ConfigError('cannot plant {} noise edges, only {} inter-cluster pairs exist'.format(wanted, capacity))
    keys = set()
    noise = []
    while len(noise) < wanted:
        u = rng.integers(0, users, size=2 * (wanted - len(noise)))
        i = rng.integers(0, items, size=len(u))
        for a, b in zip(u[user_cluster[u] != item_cluster[i]], i[user_cluster[u] != item_cluster[i]]):
            key = int(a) * items + int(b)
            if key not in keys:
                keys.add(key)
                noise.append((a, b))
                if len(noise) == wanted:
                    break
    noise = np.asarray(noise, dtype=np.int64).reshape(-1, 2)

    pairs = np.concatenate([clean, noise]).astype(np.int64)
    labels = np.concatenate([np.zeros(len(clean), dtype=bool), np.ones(len(noise), dtype=bool)])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    logger.info('planted %d clean and %d noise edges over %d clusters', len(clean), len(noise), clusters)

    return PlantedDataset(pairs=pairs[order], noise=labels[order], user_cluster=user_cluster, item_cluster=item_cluster)


def labels_path(path):
    return '{}.labels.tsv'.format(os.path.splitext(path)[0])


def write_planted(ds, path):
    """Writes the interaction file and its label sidecar.
    @return (<str>, <str>):
        Dataset and label file paths
    """
    directory = os.path.dirname(os.path.abspath(path))
    initialize(directory)
    with open(path, 'w') as fh:
        fh.write('# user\titem\n')
        pd.DataFrame(ds.pairs).to_csv(fh, sep='\t', header=False, index=False)
    sidecar = labels_path(path)
    pd.DataFrame({
        'user': ds.pairs[:, 0],
        'item': ds.pairs[:, 1],
        'label': np.where(ds.noise, 'noise', 'clean'),
    }).to_csv(sidecar, sep='\t', index=False)

    return path, sidecar


def read_labels(path):
    """Label sidecar as a DataFrame with user, item, label columns."""
    return pd.read_csv(path, sep='\t', dtype={'user': np.int64, 'item': np.int64, 'label': str})
