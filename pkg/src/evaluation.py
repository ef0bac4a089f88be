#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Full-rank ranking metrics, over-smoothing diagnostics and cost accounting."""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass, field, asdict
import os, math, json, subprocess

# 3rd party imports from pypi
import numpy as np
import pandas as pd

# Local imports
from benchmark import timer, timing_bench
from checkpoint import ModelCheckpoint, serialize
from errors import EmptySplitError, ContractError, NonFiniteError
from graph import BipartiteGraph
from utils import atomic_write, get_logger, rng_stream

logger = get_logger('evaluation')

SCHEMA_VERSION = 1
FLOPS_CONVENTION = (
    'multiply+add = 2 ops; propagation = 2*L*|E_directed|*d counting both directions; '
    'residual = L*(I+J)*d for weighted models; layer sum = L*(I+J)*d'
)
# Report fields that depend on wall-clock time
TIMING_FIELDS = ('inference_median_s', 'inference_iqr_s')


@dataclass
class FinalEmbeddings:
    """Anything scoring users against items by a dot product."""
    user_final: np.ndarray
    item_final: np.ndarray


@dataclass
class EvalReport:
    role: str
    recall: dict = field(default_factory=dict)      # N -> Recall@N
    ndcg: dict = field(default_factory=dict)        # N -> NDCG@N
    mad: float = None
    mad_nodes: int = 0
    flops: dict = field(default_factory=dict)
    parameters: int = 0
    serialized_bytes: int = 0
    inference_median_s: float = None
    inference_iqr_s: float = None
    kept_edge_ratio: float = 1.0
    kept_entry_ratio: float = 1.0
    num_edges: int = 0
    layers: int = 0

    def __post_init__(self):
        for name, values in (('recall', self.recall), ('ndcg', self.ndcg)):
            for n, value in values.items():
                if not (0.0 <= value <= 1.0):
                    raise ContractError('{}@{} = {} outside [0, 1]'.format(name, n, value))
        if self.mad is not None and not (0.0 <= self.mad <= 2.0):
            raise ContractError('MAD {} outside [0, 2]'.format(self.mad))

    def to_dict(self):
        data = asdict(self)
        data['recall'] = {str(k): v for k, v in sorted(self.recall.items())}
        data['ndcg'] = {str(k): v for k, v in sorted(self.ndcg.items())}
        return data

    def flat(self):
        """One flat row for report.csv."""
        row = {k: v for k, v in self.to_dict().items() if k not in ('recall', 'ndcg', 'flops')}
        for n, value in sorted(self.recall.items()):
            row['recall@{}'.format(n)] = value
        for n, value in sorted(self.ndcg.items()):
            row['ndcg@{}'.format(n)] = value
        for name, value in self.flops.items():
            row['flops_{}'.format(name)] = value
        return row


@timer
def full_rank_eval(model, dataset, topk = (20, 40), split = 'test', exclude = ('train', 'val'), block = 1024):
    """Recall@N and NDCG@N ranking every item for every user with a positive.
    Items in the exclude splits score -inf; ties keep the lower item index
    first. Users without positives in split are left out of the averages.
    @param model <PropagationOutput or FinalEmbeddings>:
        Provides user_final and item_final
    @param dataset <InteractionDataset>:
        Dataset with the target split
    @param topk list[<int>]:
        Cut-offs N
    @param split <str>:
        'test' or 'val'
    @param exclude tuple(<str>):
        Splits whose interactions are masked out of the ranking
    @return (recall, ndcg):
        Dicts mapping N to the macro-average over users
    """
    target = dataset.split(split)
    if not len(target):
        raise EmptySplitError("the {} split is empty, nothing to evaluate (check data.ratios)".format(split))
    topk = sorted(set(int(n) for n in topk))
    truth = dataset.positives(split)
    seen = dataset.positives(*exclude)
    n_pos_all = np.diff(truth.indptr)
    users = np.flatnonzero(n_pos_all > 0)

    kmax = min(max(topk), dataset.num_items)
    discounts = 1.0 / np.log2(np.arange(2, max(topk) + 2))
    ideal = np.cumsum(discounts)
    recall = dict.fromkeys(topk, 0.0)
    ndcg = dict.fromkeys(topk, 0.0)

    for start in range(0, len(users), block):
        u = users[start:start + block]
        scores = np.asarray(model.user_final[u] @ model.item_final.T, dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            raise NonFiniteError('scores')
        r, c = seen[u].nonzero()
        scores[r, c] = -np.inf
        top = np.argsort(-scores, axis=1, kind='stable')[:, :kmax]
        hits = truth[u].toarray()[np.arange(len(u))[:, None], top]
        n_pos = n_pos_all[u]
        for n in topk:
            h = hits[:, :n]
            recall[n] += float(np.sum(h.sum(axis=1) / n_pos))
            dcg = h @ discounts[:h.shape[1]]
            ndcg[n] += float(np.sum(dcg / ideal[np.minimum(n, n_pos) - 1]))

    count = float(len(users))
    # Summation order can push a perfect NDCG a few ulps above 1
    return ({n: min(1.0, v / count) for n, v in recall.items()},
            {n: min(1.0, v / count) for n, v in ndcg.items()})


def mad_metric(final, nodes = None):
    """Mean cosine distance 1 - cos(a, b) over ordered pairs a != b.
    Zero-norm rows are excluded and counted in a warning.
    @param final <np.ndarray>:
        Final embeddings, one row per node
    @param nodes <np.ndarray>:
        Row subset, defaults to every row
    @return <float>:
        Value in [0, 2]; 0 when fewer than two usable rows remain
    """
    x = np.asarray(final, dtype=np.float64)
    if nodes is not None:
        if not len(nodes):
            raise ContractError('MAD needs a non-empty node subset')
        x = x[np.asarray(nodes, dtype=np.int64)]
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any():
        logger.warning('%d zero-norm rows excluded from MAD', int(zero.sum()))
    x = x[~zero] / norms[~zero][:, None]
    n = len(x)
    if n < 2:
        return 0.0
    cos = x @ x.T
    total = float(np.sum(1.0 - cos) - np.sum(1.0 - np.diag(cos)))

    return float(np.clip(total / (n * (n - 1)), 0.0, 2.0))


def popular_nodes(dataset, fraction = 0.2, cap = 1000, rng = None):
    """Most-interacted users and items by train degree.
    @return (users, items):
        Sorted index arrays; each side holds ceil(fraction * n) nodes, sampled
        down to cap with rng when larger
    """
    def side(degree):
        count = max(1, int(math.ceil(fraction * len(degree))))
        ranked = np.argsort(-degree, kind='stable')[:count]
        if len(ranked) > cap:
            ranked = (rng or rng_stream(0, 'mad')).choice(ranked, size=cap, replace=False)
        return np.sort(ranked)

    train = dataset.train
    users = side(np.bincount(train[:, 0], minlength=dataset.num_users))
    items = side(np.bincount(train[:, 1], minlength=dataset.num_items))
    return users, items


def popularity_scores(dataset):
    """Baseline scoring every item by its training degree for every user."""
    degree = np.bincount(dataset.train[:, 1], minlength=dataset.num_items).astype(np.float64)
    return FinalEmbeddings(np.ones((dataset.num_users, 1)), degree[:, None])


def flops_count(graph, params, residual = None):
    """Analytic forward FLOPs under FLOPS_CONVENTION.
    @param graph <BipartiteGraph>:
        Graph the model propagates over
    @param params <ModelParams>:
        Supplies d and L
    @param residual <bool>:
        Count residual adds, defaults to whether the model has edge weights
    @return <dict>:
        propagation, residual, layer_sum and total
    """
    d = params.table.dim
    L = params.layers
    nodes = graph.num_users + graph.num_items
    if residual is None:
        residual = params.edge_weights is not None
    counts = {
        'propagation': 2 * L * graph.num_directed_edges * d,
        'residual': L * nodes * d if residual else 0,
        'layer_sum': L * nodes * d,
    }
    counts['total'] = sum(counts.values())
    return counts


def storage_count(params, graph = None, precision = 'float64', weights = None, role = 'storage', config_hash = ''):
    """Parameter count and serialized checkpoint size.
    Counts unmasked embedding entries plus surviving edge weights; the size
    comes from the checkpoint writer itself, index overhead included.
    @param weights <np.ndarray>:
        Propagation weights when they differ from params.edge_weights
        (the student's compound weights)
    @param role <str>, config_hash <str>:
        Manifest fields, so a rebuilt checkpoint matches its file byte for byte
    @return (parameters, bytes)
    """
    parameters = params.table.kept_entries()
    if params.edge_weights is not None:
        parameters += len(params.edge_weights)
    if graph is None:
        if params.edge_weights is not None:
            raise ContractError('storage of a weighted model needs its graph')
        graph = BipartiteGraph(params.table.num_users, params.table.num_items, [], [])
    ckpt = ModelCheckpoint.from_model(role, graph, params, weights=weights, config_hash=config_hash, precision=precision)

    return int(parameters), len(serialize(ckpt))


def evaluate_model(ckpt, dataset, eval_cfg, original_edges = None, seed = 0, split = 'test', timing = True):
    """EvalReport of one checkpoint.
    @param ckpt <ModelCheckpoint>:
        Trained model
    @param dataset <InteractionDataset>:
        Prepared dataset
    @param eval_cfg <dict>:
        cfg.eval
    @param original_edges <int>:
        Edge count the kept-edge ratio is relative to, defaults to |train|
    @return <EvalReport>
    """
    graph = ckpt.graph()
    params = ckpt.params()
    out = ckpt.forward(graph)
    recall, ndcg = full_rank_eval(out, dataset, eval_cfg['topk'], split=split)

    users, items = popular_nodes(dataset, eval_cfg['mad_fraction'], eval_cfg['mad_cap'], rng_stream(seed, 'mad'))
    final = np.concatenate([out.user_final[users], out.item_final[items]])
    mad = mad_metric(final)

    parameters, size = storage_count(params, graph, ckpt.precision, weights=ckpt.weights, role=ckpt.role,
                                     config_hash=ckpt.config_hash)
    stats = None
    if timing:
        def work():
            o = ckpt.forward(graph)
            return o.user_final @ o.item_final.T
        stats = timing_bench(work, eval_cfg['bench_repetitions'], eval_cfg['bench_warmup'])

    original_edges = len(dataset.train) if original_edges is None else original_edges
    report = EvalReport(
        role=ckpt.role,
        recall=recall,
        ndcg=ndcg,
        mad=mad,
        mad_nodes=len(final),
        flops=flops_count(graph, params, residual=ckpt.variant == 'weighted'),
        parameters=int(parameters),
        serialized_bytes=size,
        inference_median_s=None if stats is None else stats.median,
        inference_iqr_s=None if stats is None else stats.iqr,
        kept_edge_ratio=min(1.0, ckpt.num_edges / float(max(original_edges, 1))),
        kept_entry_ratio=ckpt.table.kept_ratio(),
        num_edges=ckpt.num_edges,
        layers=ckpt.layers,
    )
    logger.info('%s: recall@20=%s ndcg@20=%s edges=%d entries=%.3f', ckpt.role,
                recall.get(20), ndcg.get(20), ckpt.num_edges, report.kept_entry_ratio)
    return report


def build_id(version = None):
    """git-describe style identifier of the running code."""
    here = os.path.dirname(os.path.realpath(__file__))
    try:
        out = subprocess.check_output(['git', 'describe', '--always', '--dirty', '--tags'],
                                      cwd=here, stderr=subprocess.DEVNULL)
        return out.decode('utf-8').strip()
    except (OSError, subprocess.CalledProcessError):
        return 'v{}'.format(version) if version else 'unknown'


def write_report(reports, directory, config_hash, build = None):
    """Writes report.json (versioned, sorted keys) and report.csv.
    @param reports list[<EvalReport>]:
        One report per evaluated model
    @param directory <str>:
        Run directory
    @return <dict>:
        The report.json payload
    """
    payload = {
        'schema_version': SCHEMA_VERSION,
        'build_id': build or build_id(),
        'config_hash': config_hash,
        'flops_convention': FLOPS_CONVENTION,
        'models': {r.role: r.to_dict() for r in reports},
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + '\n'
    atomic_write(os.path.join(directory, 'report.json'), text.encode('utf-8'))
    frame = pd.DataFrame([r.flat() for r in reports])
    atomic_write(os.path.join(directory, 'report.csv'), frame.to_csv(index=False).encode('utf-8'))

    return payload
