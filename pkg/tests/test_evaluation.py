# Python standard library
import os, json, math

# 3rd party imports from pypi
import numpy as np
import pandas as pd
import pytest

# Local imports
from benchmark import timing_bench
from checkpoint import ModelCheckpoint, save_checkpoint, load_checkpoint
from errors import EmptySplitError, ContractError, NonFiniteError
from evaluation import (FinalEmbeddings, EvalReport, full_rank_eval, mad_metric, popular_nodes, popularity_scores,
                        flops_count, storage_count, evaluate_model, write_report, SCHEMA_VERSION)
from graph import BipartiteGraph, build_graph
from propagation import EmbeddingTable, ModelParams
from pruning import prune_embeddings

EVAL = {'topk': [20, 40], 'mad_fraction': 0.2, 'mad_cap': 1000, 'bench_repetitions': 2, 'bench_warmup': 0}


def test_single_positive_at_rank_one(make_dataset):
    ds = make_dataset([[0, 2]], 1, 3, test=[[0, 0]])
    model = FinalEmbeddings(np.array([[1.0]]), np.array([[2.0], [1.0], [5.0]]))
    recall, ndcg = full_rank_eval(model, ds, (1, 2))
    assert recall == {1: 1.0, 2: 1.0}
    assert ndcg == {1: 1.0, 2: 1.0}


def test_single_positive_at_rank_two(make_dataset):
    ds = make_dataset([[0, 2]], 1, 3, test=[[0, 0]])
    model = FinalEmbeddings(np.array([[1.0]]), np.array([[1.0], [2.0], [5.0]]))
    recall, ndcg = full_rank_eval(model, ds, (1, 2))
    assert recall[1] == 0.0 and recall[2] == 1.0
    assert ndcg[2] == pytest.approx(1.0 / math.log2(3))


def test_ties_keep_the_lower_item_first(make_dataset):
    ds = make_dataset([[0, 3]], 1, 4, test=[[0, 1]])
    model = FinalEmbeddings(np.zeros((1, 2)), np.zeros((4, 2)))
    recall, _ = full_rank_eval(model, ds, (1, 2))
    assert recall[1] == 0.0 and recall[2] == 1.0


def _brute_force(model, ds, n):
    truth, seen = {}, set(map(tuple, np.concatenate([ds.train, ds.val]).tolist()))
    for u, j in ds.test.tolist():
        truth.setdefault(u, set()).add(j)
    recalls, ndcgs = [], []
    for u, positives in truth.items():
        scores = model.user_final[u] @ model.item_final.T
        candidates = [j for j in range(ds.num_items) if (u, j) not in seen]
        ranked = sorted(candidates, key=lambda j: (-scores[j], j))[:n]
        hits = [1.0 if j in positives else 0.0 for j in ranked]
        recalls.append(sum(hits) / len(positives))
        dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
        ideal = sum(1.0 / math.log2(r + 2) for r in range(min(n, len(positives))))
        ndcgs.append(dcg / ideal)
    return np.mean(recalls), np.mean(ndcgs)


def test_metrics_match_brute_force(rng, make_dataset):
    pairs = np.unique(np.stack([rng.integers(0, 25, 300), rng.integers(0, 60, 300)], axis=1), axis=0)
    labels = rng.integers(0, 3, len(pairs))
    ds = make_dataset(pairs[labels == 0], 25, 60, val=pairs[labels == 1], test=pairs[labels == 2])
    model = FinalEmbeddings(rng.normal(size=(25, 4)), rng.normal(size=(60, 4)))
    recall, ndcg = full_rank_eval(model, ds, (5, 20), block=7)
    for n in (5, 20):
        r, d = _brute_force(model, ds, n)
        assert recall[n] == pytest.approx(r)
        assert ndcg[n] == pytest.approx(d)
    assert recall[5] <= recall[20]


def test_metrics_ignore_monotone_score_transforms(rng, make_dataset):
    pairs = np.unique(np.stack([rng.integers(0, 10, 80), rng.integers(0, 30, 80)], axis=1), axis=0)
    ds = make_dataset(pairs[::2], 10, 30, test=pairs[1::2])
    user = np.abs(rng.normal(size=(10, 1))) + 0.1
    item = rng.normal(size=(30, 1))
    base = full_rank_eval(FinalEmbeddings(user, item), ds, (5,))
    scaled = full_rank_eval(FinalEmbeddings(3.0 * user, item + 0.0), ds, (5,))
    assert base == scaled


def test_empty_split_is_a_user_error(make_dataset):
    ds = make_dataset([[0, 0]], 1, 2)
    with pytest.raises(EmptySplitError):
        full_rank_eval(FinalEmbeddings(np.ones((1, 1)), np.ones((2, 1))), ds)


def test_non_finite_scores(make_dataset):
    ds = make_dataset([[0, 0]], 1, 2, test=[[0, 1]])
    with pytest.raises(NonFiniteError):
        full_rank_eval(FinalEmbeddings(np.array([[np.nan]]), np.ones((2, 1))), ds)


def test_popularity_baseline_ranks_by_degree(make_dataset):
    train = [[u, 0] for u in range(5)] + [[0, 1], [1, 1], [2, 2]]
    ds = make_dataset(train, 6, 4, test=[[5, 0], [4, 3]])
    recall, _ = full_rank_eval(popularity_scores(ds), ds, (1,))
    # user 5 finds item 0 first, user 4 has item 0 masked and item 1 comes next
    assert recall[1] == pytest.approx(0.5)


def test_mad_extremes():
    assert mad_metric(np.ones((4, 3))) == pytest.approx(0.0)
    assert mad_metric(np.eye(3)) == pytest.approx(1.0)
    assert mad_metric(np.array([[1.0, 0.0], [-2.0, 0.0]])) == pytest.approx(2.0)
    assert mad_metric(np.ones((1, 3))) == 0.0


def test_mad_matches_pairwise_loop(rng):
    x = rng.normal(size=(7, 4))
    total = 0.0
    for a in range(7):
        for b in range(7):
            if a != b:
                total += 1 - x[a] @ x[b] / (np.linalg.norm(x[a]) * np.linalg.norm(x[b]))
    assert mad_metric(x) == pytest.approx(total / 42)
    assert mad_metric(x, nodes=[0, 2, 5]) == pytest.approx(mad_metric(x[[0, 2, 5]]))


def test_mad_skips_zero_rows():
    x = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert mad_metric(x) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        mad_metric(x, nodes=[])


def test_popular_nodes(make_dataset):
    train = [[0, j] for j in range(5)] + [[1, 0], [1, 1], [2, 0]] + [[u, 4] for u in range(3, 10)]
    ds = make_dataset(train, 10, 5)
    users, items = popular_nodes(ds, 0.2, 1000)
    assert users.tolist() == [0, 1]
    assert items.tolist() == [4]
    capped, _ = popular_nodes(ds, 1.0, 3, np.random.default_rng(0))
    assert len(capped) == 3


def _line_graph(edges, users = 100, items = 100):
    return BipartiteGraph(users, items, np.arange(edges) % users, np.arange(edges) // users)


def test_flops_example():
    """L = 2, 200 directed edges, d = 32: 25,600 propagation ops."""
    g = _line_graph(100)
    params = ModelParams(EmbeddingTable(np.zeros((100, 32)), np.zeros((100, 32))), None, 2)
    flops = flops_count(g, params)
    assert flops['propagation'] == 25600
    assert flops['residual'] == 0
    assert flops['layer_sum'] == 2 * 200 * 32
    assert flops['total'] == sum(v for k, v in flops.items() if k != 'total')


def test_flops_scale_with_edges_and_layers():
    table = EmbeddingTable(np.zeros((100, 8)), np.zeros((100, 8)))
    full, half = _line_graph(100), _line_graph(50)
    two = ModelParams(table, np.ones(100), 2)
    assert flops_count(half, two)['propagation'] * 2 == flops_count(full, two)['propagation']
    assert flops_count(full, ModelParams(table, np.ones(100), 1))['propagation'] * 2 == flops_count(full, two)['propagation']
    assert flops_count(full, two)['residual'] == 2 * 200 * 8


def test_storage_counts_unmasked_entries(rng):
    """100 nodes at d = 32 hold 3200 entries; keeping 10% leaves 320."""
    table = EmbeddingTable(rng.normal(size=(60, 32)), rng.normal(size=(40, 32)))
    params = ModelParams(table, None, 2)
    full, full_bytes = storage_count(params)
    assert full == 3200
    pruned = ModelParams(prune_embeddings(table, 90), None, 2)
    count, pruned_bytes = storage_count(pruned)
    assert count == 320
    assert pruned_bytes < full_bytes


def test_storage_of_weighted_models_needs_the_graph(rng):
    g = _line_graph(10, 10, 10)
    params = ModelParams(EmbeddingTable(rng.normal(size=(10, 2)), rng.normal(size=(10, 2))), np.ones(10), 1)
    assert storage_count(params, g)[0] == 40 + 10
    with pytest.raises(ContractError):
        storage_count(params)


def test_report_ranges():
    with pytest.raises(ContractError):
        EvalReport('teacher', recall={20: 1.5})
    with pytest.raises(ContractError):
        EvalReport('teacher', mad=2.5)


def test_evaluate_and_write_report(tmp_path, rng, make_dataset):
    pairs = np.unique(np.stack([rng.integers(0, 20, 200), rng.integers(0, 15, 200)], axis=1), axis=0)
    ds = make_dataset(pairs[::2], 20, 15, test=pairs[1::2])
    g = build_graph(ds)
    params = ModelParams(EmbeddingTable(rng.normal(size=(20, 4)), rng.normal(size=(15, 4))), None, 2)
    ckpt = ModelCheckpoint.from_model('teacher', g, params, config_hash='abc')

    report = evaluate_model(ckpt, ds, EVAL, timing=False)
    assert report.kept_edge_ratio == 1.0 and report.kept_entry_ratio == 1.0
    assert report.parameters == 35 * 4
    assert report.inference_median_s is None
    assert report.mad_nodes == 4 + 3
    assert set(report.recall) == {20, 40}
    timed = evaluate_model(ckpt, ds, EVAL, timing=True)
    assert timed.inference_median_s > 0
    assert timed.recall == report.recall

    payload = write_report([report, timed], str(tmp_path), 'abc', build='v1.0.0')
    with open(os.path.join(str(tmp_path), 'report.json')) as fh:
        data = json.load(fh)
    assert data == payload
    assert data['schema_version'] == SCHEMA_VERSION
    assert data['config_hash'] == 'abc' and data['build_id'] == 'v1.0.0'
    assert set(data['models']['teacher']['recall']) == {'20', '40'}
    frame = pd.read_csv(os.path.join(str(tmp_path), 'report.csv'))
    assert 'recall@20' in frame.columns and 'flops_total' in frame.columns
    assert len(frame) == 2


@pytest.mark.parametrize('precision', ['float64', 'float32'])
def test_reported_size_is_the_checkpoint_file_size(tmp_path, rng, make_dataset, precision):
    """A pruned student whose compound weights differ from its learned ones."""
    pairs = np.unique(np.stack([rng.integers(0, 20, 200), rng.integers(0, 15, 200)], axis=1), axis=0)
    ds = make_dataset(pairs[::2], 20, 15, test=pairs[1::2])
    g = build_graph(ds)
    table = prune_embeddings(EmbeddingTable(rng.normal(size=(20, 4)), rng.normal(size=(15, 4))), 50)
    params = ModelParams(table, rng.normal(size=g.num_edges), 1)
    ckpt = ModelCheckpoint.from_model('student', g, params, weights=params.edge_weights + rng.uniform(1, 2, g.num_edges),
                                      config_hash='beef', precision=precision)
    path = str(tmp_path / 'student.ckpt')
    save_checkpoint(ckpt, path)

    report = evaluate_model(load_checkpoint(path), ds, EVAL, timing=False)
    assert report.serialized_bytes == os.path.getsize(path)
    assert report.parameters == table.kept_entries() + g.num_edges
    assert (report.parameters, report.serialized_bytes) == storage_count(
        params, g, precision, weights=ckpt.weights, role='student', config_hash='beef')


def test_timing_bench_runs_warmup_then_timed_repetitions():
    calls = []
    stats = timing_bench(lambda: calls.append(1), repetitions=4, warmup=2)
    assert len(calls) == 6
    assert stats.repetitions == 4 and len(stats.samples) == 4
    assert stats.median >= 0 and stats.iqr is not None
    assert timing_bench(lambda: None, repetitions=1, warmup=0).iqr is None
