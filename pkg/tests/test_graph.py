# Python standard library
import os

# 3rd party imports from pypi
import numpy as np
import pytest

# Local imports
from errors import ParseError, DatasetEmptyError, ConfigError, AugmentationBudgetError, MissingArtifactError
from graph import (load_interactions, split_dataset, build_graph, augment_graph, BipartiteGraph,
                   save_prepared, load_prepared)


def _write(tmp_path, text, name = 'interactions.tsv'):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_load_reindexes_in_ascending_raw_id_order(tmp_path):
    """Raw ids are mapped densely and kept for export."""
    path = _write(tmp_path, '# comment\n\n30\t7\t5\n10\t9\n30\t9\n10\t7\n10\t7\n')
    ds = load_interactions(path)
    assert ds.num_users == 2 and ds.num_items == 2
    assert list(ds.user_ids) == [10, 30]
    assert list(ds.item_ids) == [7, 9]
    # the duplicate line collapses, ratings are ignored
    assert ds.train.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]


def test_min_degree_filter_reaches_a_fixpoint(tmp_path):
    """Removing a user can push an item under the threshold and vice versa."""
    # user 2 has one interaction; once it is gone item 2 has a single user left
    lines = ['0\t0', '0\t1', '1\t0', '1\t1', '2\t2', '3\t2', '3\t0']
    ds = load_interactions(_write(tmp_path, '\n'.join(lines) + '\n'), min_degree=2)
    assert ds.num_users == 2 and ds.num_items == 2
    assert list(ds.user_ids) == [0, 1]


def test_parse_error_reports_the_line(tmp_path):
    path = _write(tmp_path, '0\t1\nnot-a-number\t2\n')
    with pytest.raises(ParseError) as info:
        load_interactions(path)
    assert ':2' in str(info.value) or 'line 2' in str(info.value)


def test_single_column_line_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_interactions(_write(tmp_path, '0\t1\n5\n'))


def test_empty_after_filtering(tmp_path):
    with pytest.raises(DatasetEmptyError):
        load_interactions(_write(tmp_path, '0\t1\n1\t2\n'), min_degree=2)


def test_per_user_split_counts(make_dataset):
    """20 interactions at (0.7, 0.05, 0.25) give 14 / 1 / 5."""
    ds = make_dataset([[0, j] for j in range(20)])
    out = split_dataset(ds, (0.7, 0.05, 0.25), seed=1)
    assert out.counts() == {'train': 14, 'val': 1, 'test': 5}


def test_split_is_a_partition_and_deterministic(make_dataset, rng):
    pairs = np.unique(np.stack([rng.integers(0, 30, 400), rng.integers(0, 40, 400)], axis=1), axis=0)
    ds = make_dataset(pairs, 30, 40)
    a = split_dataset(ds, (0.7, 0.1, 0.2), seed=5)
    b = split_dataset(ds, (0.7, 0.1, 0.2), seed=5)
    c = split_dataset(ds, (0.7, 0.1, 0.2), seed=6)
    for name in ('train', 'val', 'test'):
        assert np.array_equal(a.split(name), b.split(name))
    assert not np.array_equal(a.test, c.test)
    joined = np.concatenate([a.train, a.val, a.test])
    assert len(np.unique(joined, axis=0)) == len(pairs)
    # every user with interactions keeps a training one
    assert set(a.train[:, 0]) == set(pairs[:, 0])


def test_single_interaction_user_stays_in_train(make_dataset):
    ds = make_dataset([[0, 0], [1, 0], [1, 1], [1, 2], [1, 3]])
    out = split_dataset(ds, (0.5, 0.25, 0.25), seed=0)
    assert [0, 0] in out.train.tolist()


def test_global_split_keeps_a_training_interaction_per_user(make_dataset):
    ds = make_dataset([[u, u % 3] for u in range(10)] + [[0, 1], [0, 2]])
    out = split_dataset(ds, (0.4, 0.2, 0.4), seed=2, mode='global')
    assert set(out.train[:, 0]) == set(range(10))


def test_everything_in_train(make_dataset):
    ds = make_dataset([[0, 0], [0, 1], [1, 1]])
    out = split_dataset(ds, (1.0, 0.0, 0.0), seed=0)
    assert out.counts() == {'train': 3, 'val': 0, 'test': 0}


@pytest.mark.parametrize('ratios', [(0.5, 0.5, 0.5), (0.0, 0.5, 0.5), (0.8, -0.1, 0.3), (0.5, 0.5)])
def test_invalid_ratios(make_dataset, ratios):
    with pytest.raises(ConfigError):
        split_dataset(make_dataset([[0, 0]]), ratios, seed=0)


def test_prepared_dataset_survives_a_round_trip(tmp_path, make_dataset):
    ds = split_dataset(make_dataset([[u, j] for u in range(4) for j in range(5)]), (0.6, 0.2, 0.2), seed=3)
    ds.user_ids = np.array([11, 12, 13, 14])
    manifest = save_prepared(ds, str(tmp_path / 'data'), seed=3, ratios=(0.6, 0.2, 0.2), mode='per_user')
    assert manifest['counts'] == ds.counts()
    back = load_prepared(str(tmp_path / 'data'))
    for name in ('train', 'val', 'test'):
        assert np.array_equal(back.split(name), ds.split(name))
    assert list(back.user_ids) == [11, 12, 13, 14]


def test_missing_prepared_dataset(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_prepared(str(tmp_path / 'nowhere'))


def test_single_edge_coefficient_is_one():
    g = BipartiteGraph(1, 1, [0], [0])
    assert g.norm.tolist() == [1.0]
    assert g.operator().toarray().tolist() == [[1.0]]


def test_coefficient_of_degree_one_and_four():
    """User of degree 1 next to an item of degree 4 gets 1/sqrt(4)."""
    g = BipartiteGraph(4, 4, [0, 1, 2, 3, 3, 3], [0, 0, 0, 0, 1, 2])
    e = np.flatnonzero((g.rows == 0) & (g.cols == 0))[0]
    assert g.norm[e] == pytest.approx(0.5)


def test_operator_matches_dense_construction(rng, random_graph, dense_operator):
    g = random_graph(rng, 20, 20, 0.2, weights=True)
    assert np.allclose(g.operator().toarray(), dense_operator(g, g.weights), rtol=0, atol=1e-12)
    assert np.array_equal(g.transpose().toarray(), g.adjacency().toarray().T)


def test_edges_are_sorted_whatever_the_input_order():
    g = BipartiteGraph(3, 3, [2, 0, 1, 0], [0, 2, 1, 0], weights=[4.0, 3.0, 2.0, 1.0])
    assert g.rows.tolist() == [0, 0, 1, 2]
    assert g.cols.tolist() == [0, 2, 1, 0]
    assert g.weights.tolist() == [1.0, 3.0, 2.0, 4.0]


def test_subgraph_recomputes_degrees():
    g = BipartiteGraph(2, 2, [0, 0, 1], [0, 1, 1])
    sub = g.subgraph(np.array([True, False, True]))
    assert sub.user_degree.tolist() == [1, 1]
    assert sub.item_degree.tolist() == [1, 1]
    assert sub.norm.tolist() == [1.0, 1.0]


def test_build_graph_uses_train_only(make_dataset):
    ds = make_dataset([[0, 0], [1, 1]], 2, 3, test=[[0, 2]])
    g = build_graph(ds)
    assert g.num_edges == 2
    assert g.weights.tolist() == [1.0, 1.0]


def test_one_hop_keeps_the_original_graph(rng, random_graph):
    g = random_graph(rng, 15, 12, 0.2)
    for hops in (1, 2):
        aug = augment_graph(g, hops=hops)
        assert np.array_equal(aug.graph.edge_keys(), g.edge_keys())
        assert aug.num_augmented == 0


def test_chain_gains_one_edge():
    """u0 - i0 - u1 - i1: three hops connect u0 and i1."""
    g = BipartiteGraph(2, 2, [0, 1, 1], [0, 0, 1])
    aug = augment_graph(g, hops=3)
    assert aug.graph.num_edges == 4
    added = aug.graph.edge_keys()[~aug.provenance]
    assert added.tolist() == [0 * 2 + 1]


def test_star_neighbour_reaches_every_star_item():
    """u0 holds v0..v4 and u1 shares v0: three hops give u1 all five."""
    g = BipartiteGraph(2, 5, [0, 0, 0, 0, 0, 1], [0, 1, 2, 3, 4, 0])
    aug = augment_graph(g, hops=3)
    assert aug.graph.num_edges == 10
    added = aug.graph.edge_keys()[~aug.provenance]
    assert sorted(added.tolist()) == [5 + j for j in range(1, 5)]
    # a three-user star connects everyone to everything
    star = augment_graph(BipartiteGraph(3, 4, [0, 0, 1, 1, 2, 2], [0, 1, 0, 2, 0, 3]), hops=3)
    assert star.graph.num_edges == 12 and star.num_augmented == 6


def _bfs_reachable(g, hops):
    """Items within `hops` hops of each user, by plain breadth-first search."""
    users = [set() for _ in range(g.num_users)]
    items = [set() for _ in range(g.num_items)]
    for r, c in zip(g.rows, g.cols):
        users[r].add(c)
        items[c].add(r)
    reach = set()
    for u in range(g.num_users):
        seen_users, seen_items = {u}, set()
        frontier, side = {u}, 'user'
        for _ in range(hops):
            if side == 'user':
                frontier = set().union(*(users[x] for x in frontier)) - seen_items if frontier else set()
                seen_items |= frontier
                side = 'item'
            else:
                frontier = set().union(*(items[x] for x in frontier)) - seen_users if frontier else set()
                seen_users |= frontier
                side = 'user'
        reach.update(u * g.num_items + j for j in seen_items)
    return reach


@pytest.mark.parametrize('hops', [1, 2, 3, 4])
def test_augmentation_matches_breadth_first_search(hops, random_graph):
    for trial in range(25):
        rng = np.random.default_rng(100 + trial)
        g = random_graph(rng, 8, 9, 0.15)
        aug = augment_graph(g, hops=hops, block=3)
        assert set(aug.graph.edge_keys().tolist()) == _bfs_reachable(g, hops)
        # original edges are flagged as such
        assert set(aug.graph.edge_keys()[aug.provenance].tolist()) == set(g.edge_keys().tolist())


def test_more_hops_never_lose_edges(rng, random_graph):
    g = random_graph(rng, 20, 25, 0.08)
    sizes = [augment_graph(g, hops=h).graph.num_edges for h in (1, 3, 5)]
    assert sizes == sorted(sizes)
    small = set(augment_graph(g, hops=3).graph.edge_keys().tolist())
    assert small <= set(augment_graph(g, hops=5).graph.edge_keys().tolist())


def test_cap_limits_augmented_edges_and_keeps_originals(rng, random_graph):
    g = random_graph(rng, 20, 25, 0.15)
    aug = augment_graph(g, hops=3, cap=2)
    extra = ~aug.provenance
    assert np.bincount(aug.graph.rows[extra], minlength=g.num_users).max() <= 2
    assert np.bincount(aug.graph.cols[extra], minlength=g.num_items).max() <= 2
    assert set(g.edge_keys().tolist()) <= set(aug.graph.edge_keys().tolist())
    assert len(aug.covisits) == aug.graph.num_edges


def test_item_cap_keeps_the_most_covisited_users():
    """User 0's best augmented item is 1, but user 2 reaches item 1 by more
    paths, so with one augmented edge per node only (2, 1) survives there."""
    g = BipartiteGraph(4, 4, [0, 1, 1, 2, 2, 3, 3, 3, 3], [0, 0, 1, 0, 3, 0, 1, 2, 3])

    def extra(aug):
        keep = ~aug.provenance
        return dict(zip(zip(aug.graph.rows[keep].tolist(), aug.graph.cols[keep].tolist()), aug.covisits[keep].tolist()))

    assert extra(augment_graph(g, hops=3)) == {(0, 1): 2, (0, 2): 1, (0, 3): 2, (1, 2): 2, (1, 3): 3, (2, 1): 3, (2, 2): 2}
    assert extra(augment_graph(g, hops=3, cap=1)) == {(1, 3): 3, (2, 1): 3}
    # degree-relative caps: ceil(0.5 * degree) is 1 for every capped node here
    assert extra(augment_graph(g, hops=3, cap_factor=0.5)) == {(1, 3): 3, (2, 1): 3}


def test_budget_guard_rejects_dense_projection(rng, random_graph):
    g = random_graph(rng, 30, 30, 0.3)
    with pytest.raises(AugmentationBudgetError):
        augment_graph(g, hops=3, budget=10)
