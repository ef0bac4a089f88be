#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Interaction ingestion, splitting, and the bipartite user-item graph.

Edges are always stored in (user, item) order sorted by (row, col), so
construction is bit-deterministic and the compressed sparse row layout can
be handed to scipy without copies. The item->user transpose shares the same
edge arrays; transpose consistency holds by construction.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass, field
import os, json, math

# 3rd party imports from pypi
import numpy as np
import pandas as pd
import scipy.sparse as sp

# Local imports
from benchmark import timer
from errors import ParseError, DatasetEmptyError, ConfigError, ContractError, AugmentationBudgetError, MissingArtifactError
from utils import rng_stream, get_logger, initialize

logger = get_logger('graph')

_EMPTY = np.zeros((0, 2), dtype=np.int64)


@dataclass
class InteractionDataset:
    """Implicit-feedback interactions over dense user/item indices.
    train/val/test are (n, 2) int64 arrays of (user, item) rows sorted
    lexicographically; user_ids/item_ids map dense indices back to raw ids."""
    num_users: int
    num_items: int
    train: np.ndarray
    val: np.ndarray = field(default_factory=lambda: _EMPTY.copy())
    test: np.ndarray = field(default_factory=lambda: _EMPTY.copy())
    user_ids: np.ndarray = None
    item_ids: np.ndarray = None

    def __post_init__(self):
        if self.user_ids is None:
            self.user_ids = np.arange(self.num_users, dtype=np.int64)
        if self.item_ids is None:
            self.item_ids = np.arange(self.num_items, dtype=np.int64)

    @property
    def interactions(self):
        return _sort_pairs(np.concatenate([self.train, self.val, self.test]))

    def split(self, name):
        return {'train': self.train, 'val': self.val, 'test': self.test}[name]

    def positives(self, *splits):
        """Boolean users x items CSR matrix of the given splits' interactions."""
        pairs = np.concatenate([self.split(s) for s in splits]) if splits else _EMPTY
        data = np.ones(len(pairs), dtype=bool)
        return sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(self.num_users, self.num_items))

    def counts(self):
        return {'train': int(len(self.train)), 'val': int(len(self.val)), 'test': int(len(self.test))}


def _sort_pairs(pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def _parse_lines(path):
    """Reads <user>\t<item>[\t<rating>] lines, skipping blanks and '#' comments."""
    users, items = [], []
    with open(path, 'r', encoding='utf-8') as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            fields = stripped.split()
            if len(fields) < 2:
                raise ParseError(path, lineno, stripped, 'expected two columns')
            try:
                u, i = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(path, lineno, stripped, 'ids must be integers')
            if u < 0 or i < 0:
                raise ParseError(path, lineno, stripped, 'ids must be non-negative')
            users.append(u)
            items.append(i)

    return np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)


def load_interactions(path, min_degree = 1):
    """Loads an implicit-feedback file and filters it to a fixpoint.
    Duplicate (user, item) lines collapse into one interaction and a rating
    column, if any, is ignored. Users and items with fewer than min_degree
    interactions are removed repeatedly until nothing changes, then indices
    are densely re-mapped in ascending raw-id order.
    @param path <str>:
        Interaction file
    @param min_degree <int>:
        Minimum number of interactions per retained user and item
    @return <InteractionDataset>:
        All interactions in the train split; val/test empty until split_dataset()
    """
    raw_u, raw_i = _parse_lines(path)
    pairs = np.unique(np.stack([raw_u, raw_i], axis=1), axis=0) if len(raw_u) else _EMPTY

    # Iterative filter, every removal can push a neighbour under the threshold
    while len(pairs):
        _, uinv, ucount = np.unique(pairs[:, 0], return_inverse=True, return_counts=True)
        _, iinv, icount = np.unique(pairs[:, 1], return_inverse=True, return_counts=True)
        keep = (ucount[uinv] >= min_degree) & (icount[iinv] >= min_degree)
        if keep.all():
            break
        pairs = pairs[keep]

    if not len(pairs):
        raise DatasetEmptyError("dataset empty: no interactions left in '{}' after filtering with min_degree={}".format(path, min_degree))

    user_ids, u = np.unique(pairs[:, 0], return_inverse=True)
    item_ids, i = np.unique(pairs[:, 1], return_inverse=True)
    logger.info('loaded %d interactions, %d users, %d items from %s', len(pairs), len(user_ids), len(item_ids), path)

    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        train=_sort_pairs(np.stack([u, i], axis=1)),
        user_ids=user_ids.astype(np.int64),
        item_ids=item_ids.astype(np.int64),
    )


def _check_ratios(ratios):
    if len(ratios) != 3 or any((not math.isfinite(r)) or r < 0 for r in ratios) or ratios[0] <= 0:
        raise ConfigError('split ratios must be three non-negative numbers with train > 0, got {}'.format(ratios))
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError('split ratios must sum to 1, got {} (sum {})'.format(ratios, sum(ratios)))


def _share(n, ratio):
    return int(math.floor(n * ratio + 0.5))


def split_dataset(ds, ratios, seed, mode = 'per_user'):
    """Randomly splits interactions into train/val/test.
    @param ds <InteractionDataset>:
        Dataset, every current interaction is redistributed
    @param ratios tuple(<float>, <float>, <float>):
        (train, val, test) shares summing to 1
    @param seed <int>:
        Global seed, consumed through the 'split' stream
    @param mode <str>:
        'per_user' splits each user's interactions at the ratios;
        'global' splits all interactions at once
    @return <InteractionDataset>:
        Every user keeps at least one training interaction
    """
    _check_ratios(ratios)
    _, r_val, r_test = ratios
    rng = rng_stream(seed, 'split')
    pairs = ds.interactions
    n = len(pairs)
    labels = np.zeros(n, dtype=np.int8)  # 0 train, 1 val, 2 test

    if mode == 'per_user':
        bounds = np.concatenate([[0], np.cumsum(np.bincount(pairs[:, 0], minlength=ds.num_users))])
        for user in range(ds.num_users):
            start, stop = bounds[user], bounds[user + 1]
            size = stop - start
            if size == 0:
                continue
            n_test, n_val = _share(size, r_test), _share(size, r_val)
            # Keep at least one training interaction, take it back from test first
            excess = n_test + n_val - (size - 1)
            if excess > 0:
                cut = min(excess, n_test)
                n_test -= cut
                n_val -= excess - cut
            perm = rng.permutation(size) + start
            labels[perm[:n_test]] = 2
            labels[perm[n_test:n_test + n_val]] = 1
    elif mode == 'global':
        perm = rng.permutation(n)
        n_test, n_val = _share(n, r_test), _share(n, r_val)
        labels[perm[:n_test]] = 2
        labels[perm[n_test:n_test + n_val]] = 1
        # Users left without a training interaction get their first held-out one back
        has_train = np.zeros(ds.num_users, dtype=bool)
        has_train[pairs[labels == 0, 0]] = True
        for idx in perm:
            user = pairs[idx, 0]
            if not has_train[user]:
                labels[idx] = 0
                has_train[user] = True
    else:
        raise ConfigError("unknown split mode '{}'".format(mode))

    logger.info('split %d interactions: %d train, %d val, %d test', n, (labels == 0).sum(), (labels == 1).sum(), (labels == 2).sum())

    return InteractionDataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        train=pairs[labels == 0],
        val=pairs[labels == 1],
        test=pairs[labels == 2],
        user_ids=ds.user_ids,
        item_ids=ds.item_ids,
    )


def save_prepared(ds, directory, seed = None, ratios = None, mode = None, config_hash = None):
    """Persists splits, the dense->raw id mapping and the split manifest.
    @param ds <InteractionDataset>:
        Split dataset
    @param directory <str>:
        Output directory, created if missing
    """
    initialize(directory)
    for name in ('train', 'val', 'test'):
        frame = pd.DataFrame(ds.split(name), columns=['user', 'item'])
        frame.to_csv(os.path.join(directory, '{}.tsv'.format(name)), sep='\t', index=False)
    pd.DataFrame({'index': np.arange(ds.num_users), 'raw_id': ds.user_ids}).to_csv(
        os.path.join(directory, 'users.tsv'), sep='\t', index=False)
    pd.DataFrame({'index': np.arange(ds.num_items), 'raw_id': ds.item_ids}).to_csv(
        os.path.join(directory, 'items.tsv'), sep='\t', index=False)
    manifest = {
        'seed': seed,
        'ratios': list(ratios) if ratios is not None else None,
        'mode': mode,
        'num_users': int(ds.num_users),
        'num_items': int(ds.num_items),
        'counts': ds.counts(),
        'config_hash': config_hash,
    }
    with open(os.path.join(directory, 'split.json'), 'w') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write('\n')

    return manifest


def load_prepared(directory):
    """Reads a dataset written by save_prepared().
    @param directory <str>:
        Directory containing train/val/test/users/items TSVs
    @return <InteractionDataset>
    """
    def read(name):
        path = os.path.join(directory, name)
        if not os.path.isfile(path):
            raise MissingArtifactError("prepared dataset file '{}' not found (run 'lightprune prepare' first)".format(path))
        return pd.read_csv(path, sep='\t', dtype=np.int64)

    users, items = read('users.tsv'), read('items.tsv')
    splits = {}
    for name in ('train', 'val', 'test'):
        frame = read('{}.tsv'.format(name))
        splits[name] = _sort_pairs(frame[['user', 'item']].to_numpy(dtype=np.int64))

    return InteractionDataset(
        num_users=len(users),
        num_items=len(items),
        user_ids=users['raw_id'].to_numpy(dtype=np.int64),
        item_ids=items['raw_id'].to_numpy(dtype=np.int64),
        **splits
    )


class BipartiteGraph(object):
    """User-item graph in compressed sparse row layout.

    Edge e connects user rows[e] and item cols[e]; arrays are aligned
    edge-for-edge and sorted by (row, col). Degrees and the Laplacian
    coefficients 1/sqrt(d_i d_j) always describe the current edge set.
    Instances are treated as immutable; pruning returns a new graph.
    """

    def __init__(self, num_users, num_items, rows, cols, weights = None, provenance = None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.shape != cols.shape or rows.ndim != 1:
            raise ContractError('edge arrays must be 1-d and of equal length')
        order = np.lexsort((cols, rows))
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.rows = rows[order]
        self.cols = cols[order]
        m = len(self.rows)
        if m and (self.rows[-1] >= num_users or self.cols.max() >= num_items or self.rows[0] < 0 or self.cols.min() < 0):
            raise ContractError('edge index out of range for a {}x{} graph'.format(num_users, num_items))

        weights = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)[order]
        if weights.shape != (m,) or not np.all(np.isfinite(weights)):
            raise ContractError('edge weights must be {} finite values'.format(m))
        self.weights = weights
        self.provenance = np.ones(m, dtype=bool) if provenance is None else np.asarray(provenance, dtype=bool)[order]

        self.user_degree = np.bincount(self.rows, minlength=self.num_users)
        self.item_degree = np.bincount(self.cols, minlength=self.num_items)
        self.indptr = np.concatenate([[0], np.cumsum(self.user_degree)]).astype(np.int64)
        if m:
            self.norm = 1.0 / np.sqrt(self.user_degree[self.rows].astype(np.float64) * self.item_degree[self.cols])
        else:
            self.norm = np.zeros(0)

    @property
    def num_edges(self):
        return len(self.rows)

    @property
    def num_directed_edges(self):
        return 2 * len(self.rows)

    def operator(self, weights = None):
        """Normalized users x items operator D_U^-1/2 (A * W) D_V^-1/2 as scipy CSR.
        @param weights <np.ndarray>:
            Per-edge weights, defaults to the graph's own weights
        @return <sp.csr_matrix>
        """
        w = self.weights if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (self.num_edges,):
            raise ContractError('weight vector has length {}, graph has {} edges'.format(w.shape, self.num_edges))
        return sp.csr_matrix((self.norm * w, self.cols, self.indptr), shape=(self.num_users, self.num_items))

    def adjacency(self):
        """Binary users x items adjacency (int64 data so products count walks)."""
        return sp.csr_matrix((np.ones(self.num_edges, dtype=np.int64), self.cols, self.indptr),
                             shape=(self.num_users, self.num_items))

    def transpose(self):
        """Binary items x users adjacency."""
        return self.adjacency().T.tocsr()

    def subgraph(self, keep):
        """Graph over the edges where keep is True, degrees recomputed."""
        keep = np.asarray(keep, dtype=bool)
        return BipartiteGraph(self.num_users, self.num_items, self.rows[keep], self.cols[keep],
                              weights=self.weights[keep], provenance=self.provenance[keep])

    def with_weights(self, weights):
        return BipartiteGraph(self.num_users, self.num_items, self.rows, self.cols,
                              weights=weights, provenance=self.provenance)

    def edge_keys(self):
        """Unique int64 key per edge, row * num_items + col."""
        return self.rows * self.num_items + self.cols

    def __repr__(self):
        return 'BipartiteGraph(users={}, items={}, edges={})'.format(self.num_users, self.num_items, self.num_edges)


def build_graph(ds):
    """Builds the training graph (train split only, unit weights).
    @param ds <InteractionDataset>:
        Non-empty dataset
    @return <BipartiteGraph>
    """
    if not len(ds.train):
        raise DatasetEmptyError('dataset empty: no training interactions to build a graph from')
    return BipartiteGraph(ds.num_users, ds.num_items, ds.train[:, 0], ds.train[:, 1])


@dataclass
class AugmentedGraph:
    """Graph over all user-item pairs reachable within `hops` hops.
    graph.provenance is True for original edges and False for augmented ones."""
    graph: BipartiteGraph
    hops: int
    covisits: np.ndarray

    @property
    def provenance(self):
        return self.graph.provenance

    @property
    def num_augmented(self):
        return int((~self.graph.provenance).sum())


def _item_cap(rows, cols, covisits, original, item_degree, cap, cap_factor):
    """Selector keeping, per item, its original edges and the cap augmented
    edges with the highest co-visit count (ties by user index)."""
    keep = np.ones(len(rows), dtype=bool)
    extra = np.flatnonzero(~original)
    if not len(extra):
        return keep
    items = cols[extra]
    order = np.lexsort((rows[extra], -covisits[extra], items))
    ranked = items[order]
    rank = np.arange(len(order)) - np.searchsorted(ranked, ranked, side='left')
    if cap is not None:
        limit = np.full(len(item_degree), cap)
    else:
        limit = np.ceil(cap_factor * item_degree).astype(np.int64)
    keep[extra[order[rank >= limit[ranked]]]] = False

    return keep


@timer
def augment_graph(g, hops = 3, cap = None, cap_factor = None, budget = 50000000, block = 2048):
    """Adds every user-item pair connected by a path of length <= hops.
    Reachability is computed by expanding sparse frontiers one user block
    at a time; a user-item path has odd length, so each expansion step walks
    user -> item -> user -> item. The walk counts double as co-visit counts
    used to rank augmented edges when a cap is set: each user keeps its
    best-ranked augmented edges, then each item does the same among the
    survivors. Original edges are never capped.
    @param g <BipartiteGraph>:
        Original graph
    @param hops <int>:
        Hop parameter h >= 1
    @param cap <int>:
        Max augmented edges kept per user and per item, or None
    @param cap_factor <float>:
        Alternative cap as a multiple of the node's original degree, or None
    @param budget <int>:
        Max projected edge count when both caps are unset
    @param block <int>:
        Users per frontier block
    @return <AugmentedGraph>
    """
    if hops < 1:
        raise ContractError('hops must be >= 1, got {}'.format(hops))
    capped = cap is not None or cap_factor is not None
    A = g.adjacency()
    At = A.T.tocsr()
    steps = (hops - 1) // 2

    rows, cols, covisits = [], [], []
    total_nnz = 0
    for start in range(0, g.num_users, block):
        stop = min(start + block, g.num_users)
        frontier = A[start:stop]
        reach = frontier.copy()
        for _ in range(steps):
            frontier = (frontier @ At) @ A
            reach = reach + frontier
        reach.sum_duplicates()
        reach.sort_indices()
        if not capped:
            total_nnz += reach.nnz
            projected = int(math.ceil(total_nnz * g.num_users / float(stop)))
            if projected > budget:
                raise AugmentationBudgetError(projected, budget)

        for local in range(stop - start):
            user = start + local
            lo, hi = reach.indptr[local], reach.indptr[local + 1]
            items, counts = reach.indices[lo:hi], reach.data[lo:hi]
            if capped and len(items):
                original = np.isin(items, g.cols[g.indptr[user]:g.indptr[user + 1]], assume_unique=True)
                limit = cap if cap is not None else int(math.ceil(cap_factor * g.user_degree[user]))
                extra = np.flatnonzero(~original)
                if len(extra) > limit:
                    # Highest co-visit count first, ties by item index
                    ranked = extra[np.lexsort((items[extra], -counts[extra]))]
                    keep = np.concatenate([np.flatnonzero(original), ranked[:limit]])
                    keep.sort()
                    items, counts = items[keep], counts[keep]
            rows.append(np.full(len(items), user, dtype=np.int64))
            cols.append(items.astype(np.int64))
            covisits.append(counts.astype(np.int64))

    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    covisits = np.concatenate(covisits) if covisits else np.zeros(0, dtype=np.int64)
    original = np.isin(rows * g.num_items + cols, g.edge_keys())
    if capped:
        keep = _item_cap(rows, cols, covisits, original, g.item_degree, cap, cap_factor)
        rows, cols, covisits, original = rows[keep], cols[keep], covisits[keep], original[keep]
    augmented = BipartiteGraph(g.num_users, g.num_items, rows, cols, provenance=original)
    # BipartiteGraph sorts by (row, col); the blocks already are, so covisits stay aligned
    logger.info('augmented graph with h=%d: %d original + %d augmented edges', hops, int(original.sum()), int((~original).sum()))

    return AugmentedGraph(graph=augmented, hops=hops, covisits=covisits)
