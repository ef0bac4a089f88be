#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Batch sampling and the full-graph training driver shared by all stages.

Every optimizer step runs a full-graph forward, evaluates the enabled loss
components on the batch, back-propagates by hand and applies one Adam
update with masked entries pinned at zero.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass, field
import os, math

# 3rd party imports from pypi
import numpy as np
import pandas as pd

# Local imports
from errors import NonFiniteError, ContractError
from evaluation import full_rank_eval
from losses import (TrainingBatch, bpr_loss, prediction_kd_loss, embedding_kd_loss,
                    uniformity_loss, weight_decay, total_loss)
from propagation import forward_plain, forward_weighted, backward, predict_scores, Adam
from utils import get_logger

logger = get_logger('training')


class BatchSampler(object):
    """BPR triples over a shuffled pass of the training interactions plus
    uniform KD tuples of the same size."""

    def __init__(self, dataset, batch_size, rng):
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.rng = rng
        self.train = dataset.train
        self.keys = np.unique(self.train[:, 0] * dataset.num_items + self.train[:, 1])
        self.degree = np.bincount(self.train[:, 0], minlength=dataset.num_users)

    def is_positive(self, users, items):
        keys = users * self.dataset.num_items + items
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def negatives(self, users):
        """One non-interacted item per user by rejection sampling.
        Users who interacted with every item get an unconstrained draw."""
        J = self.dataset.num_items
        items = self.rng.integers(0, J, size=len(users))
        pending = np.flatnonzero(self.is_positive(users, items) & (self.degree[users] < J))
        while len(pending):
            items[pending] = self.rng.integers(0, J, size=len(pending))
            pending = pending[self.is_positive(users[pending], items[pending])]
        return items

    def tuples(self, n):
        I, J = self.dataset.num_users, self.dataset.num_items
        return np.stack([self.rng.integers(0, I, n), self.rng.integers(0, J, n), self.rng.integers(0, J, n)], axis=1)

    def epoch(self):
        """Yields TrainingBatch objects covering every training interaction once."""
        order = self.rng.permutation(len(self.train))
        for start in range(0, len(order), self.batch_size):
            pairs = self.train[order[start:start + self.batch_size]]
            users = pairs[:, 0]
            triples = np.stack([users, pairs[:, 1], self.negatives(users)], axis=1)
            yield TrainingBatch(triples=triples, tuples=self.tuples(len(pairs)))


@dataclass
class KDTarget:
    """Final embeddings of a frozen upstream model, cached once."""
    user_final: np.ndarray
    item_final: np.ndarray

    @classmethod
    def from_output(cls, out):
        return cls(out.user_final.copy(), out.item_final.copy())

    def scores(self, tuples):
        u = tuples[:, 0]
        return np.stack([np.einsum('ij,ij->i', self.user_final[u], self.item_final[tuples[:, 1]]),
                         np.einsum('ij,ij->i', self.user_final[u], self.item_final[tuples[:, 2]])], axis=1)


class StageModel(object):
    """A model being trained: graph, parameters and how edge weights enter
    propagation.

    Propagation weights are edge_weights + offset, where offset holds the
    constant importance terms of the compound student weight (None elsewhere).
    With binary=True propagation uses unit weights and the edge gradient
    passes straight through to the learnable weights.
    """

    def __init__(self, role, graph, params, offset = None, binary = False):
        params.check(graph)
        self.role = role
        self.graph = graph
        self.params = params
        self.offset = offset
        self.binary = binary
        if offset is not None and (params.edge_weights is None or offset.shape != params.edge_weights.shape):
            raise ContractError('edge offset must align with the edge weights')

    @property
    def weighted(self):
        return self.params.edge_weights is not None

    def propagation_weights(self):
        if not self.weighted:
            return None
        if self.binary:
            return np.ones(self.graph.num_edges)
        if self.offset is None:
            return self.params.edge_weights
        return self.params.edge_weights + self.offset

    def forward(self):
        t = self.params.table
        if self.weighted:
            return forward_weighted(self.graph, t, self.params.layers, self.propagation_weights())
        return forward_plain(self.graph, t, self.params.layers)

    def backward(self, out, grad_user, grad_item):
        gu, gi, gw = backward(self.graph, self.params, out, grad_user, grad_item, self.propagation_weights())
        grads = {'user': gu, 'item': gi}
        if self.weighted:
            grads['edges'] = gw
        return grads

    def arrays(self):
        arrays = {'user': self.params.table.user, 'item': self.params.table.item}
        if self.weighted:
            arrays['edges'] = self.params.edge_weights
        return arrays

    def masks(self):
        return {'user': self.params.table.user_mask, 'item': self.params.table.item_mask}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_recall20: float = None
    val_ndcg20: float = None


@dataclass
class TrainResult:
    epochs_run: int = 0
    best_epoch: int = 0
    best_recall20: float = None
    best_ndcg20: float = None
    stopped_early: bool = False
    history: list = field(default_factory=list)


def _accumulate_scores(grad_u, grad_i, out, users, items, g):
    """Chain rule of y = <u_final, i_final> into the final embeddings."""
    np.add.at(grad_u, users, g[:, None] * out.item_final[items])
    np.add.at(grad_i, items, g[:, None] * out.user_final[users])


class Trainer(object):
    """Full-graph trainer for one stage.
    @param model <StageModel>:
        Model to train, updated in place
    @param dataset <InteractionDataset>:
        Prepared dataset (validation uses its val split)
    @param weights <LossWeights>:
        Multi-task weights of this stage
    @param rng <np.random.Generator>:
        Sampling stream of this stage
    @param train_cfg <dict>:
        cfg.train
    @param loss_cfg <dict>:
        cfg.loss (negatives, contrast_anchors)
    @param target <KDTarget>:
        Frozen upstream model for the KD terms, or None
    @param positive_sets tuple(<PositiveSets>, <PositiveSets>):
        Uniformity positives, or None
    @param log_path <str>:
        Per-epoch CSV, appended to
    """

    def __init__(self, model, dataset, weights, rng, train_cfg, loss_cfg, target = None,
                 positive_sets = None, log_path = None):
        self.model = model
        self.dataset = dataset
        self.weights = weights
        self.rng = rng
        self.train_cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.target = target
        self.positive_sets = positive_sets
        self.log_path = log_path
        self.sampler = BatchSampler(dataset, train_cfg['batch_size'], rng)
        edge_lr = train_cfg.get('edge_lr')
        self.optimizer = Adam(model.arrays(), lr=train_cfg['lr'], rates=None if edge_lr is None else {'edges': edge_lr})
        self.epoch = 0
        self.last_loss = float('nan')

    def rebind(self, model, keep_edges = None):
        """Continues with a pruned model, carrying optimizer moments over."""
        self.model = model
        keep = {} if keep_edges is None else {'edges': keep_edges}
        self.optimizer.rebind(model.arrays(), keep)

    def _anchors(self, candidates):
        cap = self.loss_cfg['contrast_anchors']
        if len(candidates) > cap:
            candidates = np.sort(self.rng.choice(candidates, size=cap, replace=False))
        return candidates

    def step(self, batch):
        """One optimizer update.
        @return <float>:
            Total loss of the batch before the update
        """
        model, w = self.model, self.weights
        out = model.forward()
        grad_u = np.zeros_like(out.user_final)
        grad_i = np.zeros_like(out.item_final)
        components = {}

        t = batch.triples
        pos = predict_scores(out, t[:, [0, 1]])
        neg = predict_scores(out, t[:, [0, 2]])
        components['bpr'], g_pos, g_neg = bpr_loss(pos, neg)
        if w.lambda0:
            _accumulate_scores(grad_u, grad_i, out, t[:, 0], t[:, 1], w.lambda0 * g_pos)
            _accumulate_scores(grad_u, grad_i, out, t[:, 0], t[:, 2], w.lambda0 * g_neg)

        if self.target is not None and w.lambda1:
            k = batch.tuples
            student = np.stack([predict_scores(out, k[:, [0, 1]]), predict_scores(out, k[:, [0, 2]])], axis=1)
            components['pred_kd'], g = prediction_kd_loss(self.target.scores(k), student, w.tau_pred)
            _accumulate_scores(grad_u, grad_i, out, k[:, 0], k[:, 1], w.lambda1 * g[:, 0])
            _accumulate_scores(grad_u, grad_i, out, k[:, 0], k[:, 2], w.lambda1 * g[:, 1])

        need_anchors = (self.target is not None and w.lambda2) or (self.positive_sets is not None and w.lambda3)
        if need_anchors:
            anchors = (self._anchors(batch.users()), self._anchors(batch.items()))
            negatives = self.loss_cfg['negatives']
            final = (out.user_final, out.item_final)
        if self.target is not None and w.lambda2:
            teacher = (self.target.user_final, self.target.item_final)
            components['emb_kd'], (gu, gi) = embedding_kd_loss(final, teacher, w.tau_emb, anchors, negatives, self.rng)
            grad_u += w.lambda2 * gu
            grad_i += w.lambda2 * gi
        if self.positive_sets is not None and w.lambda3:
            components['uniformity'], (gu, gi) = uniformity_loss(final, self.positive_sets, w.tau_unif, anchors, negatives, self.rng)
            grad_u += w.lambda3 * gu
            grad_i += w.lambda3 * gi

        arrays = model.arrays()
        names = sorted(arrays)
        value = total_loss(components, w, [arrays[n] for n in names])
        grads = model.backward(out, grad_u, grad_i)
        if w.lambda4:
            _, decay = weight_decay([arrays[n] for n in names])
            for name, g in zip(names, decay):
                grads[name] = grads[name] + w.lambda4 * g
        self.optimizer.step(grads, model.masks())

        return value

    def run_epoch(self):
        """One pass over the training interactions.
        @return <float>:
            Mean batch loss
        """
        losses = [self.step(batch) for batch in self.sampler.epoch()]
        self.epoch += 1
        self.last_loss = float(np.mean(losses)) if losses else float('nan')
        if losses and not math.isfinite(self.last_loss):
            raise NonFiniteError('train_loss', self.last_loss)
        return self.last_loss

    def validate(self):
        """Validation Recall@20 and NDCG@20, or (None, None) without a val split."""
        if not len(self.dataset.val):
            return None, None
        recall, ndcg = full_rank_eval(self.model.forward(), self.dataset, (20,), split='val', exclude=('train',))
        if not (math.isfinite(recall[20]) and math.isfinite(ndcg[20])):
            raise NonFiniteError('val_recall20', recall[20])
        return recall[20], ndcg[20]

    def _log(self, record):
        if self.log_path is None:
            return
        frame = pd.DataFrame([record.__dict__], columns=['epoch', 'train_loss', 'val_recall20', 'val_ndcg20'])
        header = not os.path.exists(self.log_path)
        frame.to_csv(self.log_path, mode='a', header=header, index=False)

    def fit(self, epochs, early_stopping = True):
        """Trains for up to `epochs` epochs.
        Validates every train.eval_every epochs; with early_stopping the best
        snapshot by validation Recall@20 is restored after train.patience
        evaluations without improvement or at the end.
        @return <TrainResult>
        """
        result = TrainResult()
        if not len(self.dataset.val) and epochs:
            logger.warning('%s: empty validation split, early stopping disabled', self.model.role)
        best_arrays = None
        stale = 0
        for _ in range(epochs):
            loss = self.run_epoch()
            record = EpochRecord(self.epoch, loss)
            if self.epoch % self.train_cfg['eval_every'] == 0:
                record.val_recall20, record.val_ndcg20 = self.validate()
                if record.val_recall20 is not None:
                    logger.info('%s epoch %d: loss %.6f val recall@20 %.5f', self.model.role, self.epoch, loss, record.val_recall20)
                    if result.best_recall20 is None or record.val_recall20 > result.best_recall20:
                        result.best_recall20, result.best_ndcg20 = record.val_recall20, record.val_ndcg20
                        result.best_epoch = self.epoch
                        best_arrays = {k: v.copy() for k, v in self.model.arrays().items()}
                        stale = 0
                    else:
                        stale += 1
            else:
                logger.debug('%s epoch %d: loss %.6f', self.model.role, self.epoch, loss)
            result.history.append(record)
            result.epochs_run += 1
            self._log(record)
            if early_stopping and stale >= self.train_cfg['patience']:
                result.stopped_early = True
                logger.info('%s: early stop at epoch %d, best epoch %d', self.model.role, self.epoch, result.best_epoch)
                break

        if early_stopping and best_arrays is not None:
            for name, array in self.model.arrays().items():
                array[...] = best_arrays[name]
        return result
