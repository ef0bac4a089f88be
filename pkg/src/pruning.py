#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Compound edge weights, edge/embedding/layer pruning and the iterative
train-then-prune loop of the student stage."""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass, field
import os, math

# 3rd party imports from pypi
import numpy as np
import pandas as pd
from scipy.special import expit

# Local imports
from errors import ContractError, MissingTeacherWeightError
from losses import build_positive_sets
from propagation import EmbeddingTable, ModelParams
from training import StageModel
from utils import get_logger

logger = get_logger('pruning')

ROUND_COLUMNS = ['round', 'kept_edge_ratio', 'kept_emb_ratio', 'val_recall20', 'val_ndcg20', 'train_loss']


def _rate(keep, rounds):
    if rounds == 0 or keep >= 1.0:
        return 0.0
    return 100.0 * (1.0 - keep ** (1.0 / rounds))


@dataclass
class PruneSchedule:
    """Per-round drop percentages rho (edges) and rho' (embedding entries).
    A rate of 0 skips that kind of pruning."""
    rounds: int
    edge_rate: float
    emb_rate: float
    edge_keep: float = 1.0
    emb_keep: float = 1.0
    student_layers: int = 1
    epochs_per_round: int = 20
    finetune_epochs: int = 50

    def __post_init__(self):
        if self.rounds < 0:
            raise ContractError('rounds must be >= 0, got {}'.format(self.rounds))
        for name in ('edge_rate', 'emb_rate'):
            rate = getattr(self, name)
            if not (0.0 <= rate < 100.0):
                raise ContractError('{} must be in [0, 100), got {}'.format(name, rate))
        if self.student_layers < 1:
            raise ContractError('student layer count must be >= 1')

    @classmethod
    def from_targets(cls, rounds, edge_keep, emb_keep, student_layers = 1, epochs_per_round = 20, finetune_epochs = 50):
        """Geometric schedule reaching the keep targets after `rounds` rounds,
        rho = 100 * (1 - keep^(1/rounds))."""
        return cls(rounds=rounds, edge_rate=_rate(edge_keep, rounds), emb_rate=_rate(emb_keep, rounds),
                   edge_keep=edge_keep, emb_keep=emb_keep, student_layers=student_layers,
                   epochs_per_round=epochs_per_round, finetune_epochs=finetune_epochs)

    @classmethod
    def from_config(cls, cfg):
        p = cfg.prune
        return cls.from_targets(p['rounds'], p['edge_keep'], p['emb_keep'], cfg.model['student_layers'],
                                p['epochs_per_round'], p['finetune_epochs'])


def drop_count(n, rate):
    """Entries removed from n candidates at rate percent (floored)."""
    return int(math.floor(n * rate / 100.0))


@dataclass
class EdgeDecision:
    """Compound decision weight w̄ = w^s + β1 w^t + β2 σ(<ē^t_i, ē^t_j>) per edge."""
    rows: np.ndarray
    cols: np.ndarray
    student: np.ndarray
    teacher: np.ndarray
    score: np.ndarray       # σ of the teacher's edge score
    beta1: float
    beta2: float
    compound: np.ndarray = None

    def __post_init__(self):
        if self.compound is None:
            self.compound = self.recompute()

    def recompute(self):
        return self.student + self.beta1 * self.teacher + self.beta2 * self.score

    def offset(self):
        """Constant part β1 w^t + β2 σ(.) added to w^s in propagation."""
        return self.beta1 * self.teacher + self.beta2 * self.score


def compound_edge_weights(student_w, teacher_w, teacher_final, beta1, beta2, edges):
    """Importance-distilled edge decision weights.
    @param student_w <np.ndarray>:
        Student's learnable weights, one per edge
    @param teacher_w <np.ndarray>:
        Upstream model's learned weights on the same edges
    @param teacher_final tuple(<np.ndarray>, <np.ndarray>):
        Upstream model's (user, item) final embeddings
    @param edges tuple(<np.ndarray>, <np.ndarray>):
        (rows, cols) of the edges
    @return <EdgeDecision>
    """
    rows, cols = edges
    student_w = np.asarray(student_w, dtype=np.float64)
    if teacher_w is None or len(teacher_w) != len(student_w):
        raise MissingTeacherWeightError(
            'no upstream weight for {} of {} candidate edges'.format(
                len(student_w) if teacher_w is None else abs(len(student_w) - len(teacher_w)), len(student_w)))
    if len(rows) != len(student_w) or len(cols) != len(student_w):
        raise ContractError('edge list and weight vector differ in length')
    users, items = teacher_final
    score = expit(np.einsum('ij,ij->i', users[rows], items[cols]))

    return EdgeDecision(rows=np.asarray(rows), cols=np.asarray(cols), student=student_w,
                        teacher=np.asarray(teacher_w, dtype=np.float64), score=score,
                        beta1=beta1, beta2=beta2)


def edge_ranking(decisions):
    """Edge indices by ascending |w̄|, ties by edge index."""
    return np.argsort(np.abs(decisions.compound), kind='stable')


def edge_keep_mask(decisions, rate, rng = None):
    """Boolean selector of the edges surviving one round.
    Drops floor(m * rate / 100) edges: the smallest |w̄| (stable by edge
    index) or, given rng, a uniform random set."""
    m = len(decisions.compound)
    drop = drop_count(m, rate)
    keep = np.ones(m, dtype=bool)
    if drop:
        victims = rng.choice(m, size=drop, replace=False) if rng is not None else edge_ranking(decisions)[:drop]
        keep[victims] = False
    return keep


def prune_edges(g, decisions, rate, rng = None):
    """Removes the rate% least important edges (both directions at once).
    Degrees and normalization are recomputed; survivors carry their compound
    weights.
    @param g <BipartiteGraph>:
        Current graph, edges aligned with decisions
    @param decisions <EdgeDecision>:
        Decision weights of every current edge
    @param rate <float>:
        Percent of current edges to drop
    @param rng <np.random.Generator>:
        Set for the random-drop ablation
    @return (<BipartiteGraph>, keep <np.ndarray>)
    """
    if len(decisions.compound) != g.num_edges:
        raise ContractError('decisions cover {} edges, graph has {}'.format(len(decisions.compound), g.num_edges))
    keep = edge_keep_mask(decisions, rate, rng)
    pruned = g.subgraph(keep).with_weights(decisions.compound[keep]) if g.num_edges else g
    isolated = int(((pruned.user_degree == 0) & (g.user_degree > 0)).sum() + ((pruned.item_degree == 0) & (g.item_degree > 0)).sum())
    if isolated:
        logger.info('edge pruning left %d nodes without edges', isolated)

    return pruned, keep


def prune_embeddings(emb, rate, rng = None):
    """Masks the rate% of unmasked entries with the smallest |value|,
    globally across the user and item tables. Masks only ever shrink.
    @param emb <EmbeddingTable>:
        Current table
    @param rate <float>:
        Percent of currently unmasked entries to mask
    @param rng <np.random.Generator>:
        Set for the random-drop ablation
    @return <EmbeddingTable>:
        New table, masked entries zeroed
    """
    table = emb.copy()
    masks = np.concatenate([table.user_mask.ravel(), table.item_mask.ravel()])
    values = np.concatenate([table.user.ravel(), table.item.ravel()])
    alive = np.flatnonzero(masks)
    drop = drop_count(len(alive), rate)
    if drop:
        if rng is not None:
            victims = rng.choice(alive, size=drop, replace=False)
        else:
            victims = alive[np.argsort(np.abs(values[alive]), kind='stable')[:drop]]
        masks[victims] = False
        split = table.user.size
        table.user_mask = masks[:split].reshape(table.user.shape)
        table.item_mask = masks[split:].reshape(table.item.shape)
        table.apply_masks()
    empty = int((~table.user_mask.any(axis=1)).sum() + (~table.item_mask.any(axis=1)).sum())
    if empty:
        logger.info('%d embedding rows are fully masked', empty)

    return table


def reduce_layers(params, layers):
    """Copy of params propagating `layers` layers."""
    if not (1 <= layers <= params.layers):
        raise ContractError('cannot reduce {} layers to {}'.format(params.layers, layers))
    reduced = params.copy()
    reduced.layers = layers
    return reduced


@dataclass
class PruneOutcome:
    model: StageModel
    decisions: EdgeDecision
    rounds: list = field(default_factory=list)
    teacher_weights: np.ndarray = None


def _log_round(path, row):
    if path is None:
        return
    frame = pd.DataFrame([row], columns=ROUND_COLUMNS)
    frame.to_csv(path, mode='a', header=not os.path.exists(path), index=False)


def prune_train_loop(trainer, schedule, teacher_weights, teacher_final, beta1, beta2, delta = None,
                     random_edges = False, random_embeddings = False, rng = None, log_path = None):
    """Alternates training and pruning, then fine-tunes.
    Each round trains schedule.epochs_per_round epochs, recomputes the edge
    decisions, drops rho% of edges and rho'% of unmasked entries, rebuilds
    the uniformity positive sets and logs one CSV row.
    @param trainer <Trainer>:
        Trainer holding the student StageModel and its KD target
    @param schedule <PruneSchedule>:
        Rates and epoch counts
    @param teacher_weights <np.ndarray>:
        Upstream learned weights aligned with the student's initial edges
    @param teacher_final tuple(<np.ndarray>, <np.ndarray>):
        Upstream final embeddings for the score term
    @param delta <int>:
        Positive-set relaxation δ, None leaves trainer.positive_sets alone
    @param rng <np.random.Generator>:
        Stream for the random-drop ablations
    @return <PruneOutcome>
    """
    model = trainer.model
    initial_edges = max(model.graph.num_edges, 1)
    teacher_weights = np.asarray(teacher_weights, dtype=np.float64)

    def decide(m, w_t):
        return compound_edge_weights(m.params.edge_weights, w_t, teacher_final, beta1, beta2, (m.graph.rows, m.graph.cols))

    decisions = decide(model, teacher_weights)
    model.offset = decisions.offset()
    history = []

    def record(label):
        recall, ndcg = trainer.validate()
        row = {
            'round': label,
            'kept_edge_ratio': trainer.model.graph.num_edges / float(initial_edges),
            'kept_emb_ratio': trainer.model.params.table.kept_ratio(),
            'val_recall20': recall,
            'val_ndcg20': ndcg,
            'train_loss': trainer.last_loss,
        }
        history.append(row)
        _log_round(log_path, row)
        logger.info('prune %s: edges %.4f entries %.4f val recall@20 %s', label,
                    row['kept_edge_ratio'], row['kept_emb_ratio'], recall)

    for r in range(1, schedule.rounds + 1):
        trainer.fit(schedule.epochs_per_round, early_stopping=False)
        model = trainer.model
        decisions = decide(model, teacher_weights)
        graph, keep = model.graph, None
        if schedule.edge_rate > 0:
            graph, keep = prune_edges(model.graph, decisions, schedule.edge_rate, rng if random_edges else None)
            teacher_weights = teacher_weights[keep]
        table = model.params.table
        if schedule.emb_rate > 0:
            table = prune_embeddings(table, schedule.emb_rate, rng if random_embeddings else None)
        weights = model.params.edge_weights if keep is None else model.params.edge_weights[keep]
        params = ModelParams(table, weights.copy(), model.params.layers)
        offset = decisions.offset() if keep is None else decisions.offset()[keep]
        trainer.rebind(StageModel(model.role, graph, params, offset, model.binary), keep)
        if delta is not None:
            trainer.positive_sets = build_positive_sets((table.user_mask, table.item_mask), delta)
        record(r)

    if schedule.finetune_epochs:
        trainer.fit(schedule.finetune_epochs, early_stopping=True)
        record('finetune')

    decisions = decide(trainer.model, teacher_weights)
    return PruneOutcome(model=trainer.model, decisions=decisions, rounds=history, teacher_weights=teacher_weights)
