#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Embedding tables, sparse message passing and its hand-derived gradients.

Two forward variants exist on purpose:
  forward_plain     E_U,l = Â E_V,l-1                  (teacher)
  forward_weighted  E_U,l = Â_W E_V,l-1 + E_U,l-1      (intermediate, student)
where Â = D_U^-1/2 A D_V^-1/2 and Â_W uses A * W. Item sides use the
transpose. Final embeddings are the unweighted sum of layers 0..L.
Everything is float64.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass
import math

# 3rd party imports from pypi
import numpy as np

# Local imports
from errors import ContractError
from utils import get_logger

logger = get_logger('propagation')


@dataclass
class EmbeddingTable:
    """User (I x d) and item (J x d) matrices with binary keep masks."""
    user: np.ndarray
    item: np.ndarray
    user_mask: np.ndarray = None
    item_mask: np.ndarray = None

    def __post_init__(self):
        self.user = np.asarray(self.user, dtype=np.float64)
        self.item = np.asarray(self.item, dtype=np.float64)
        if self.user.ndim != 2 or self.item.ndim != 2 or self.user.shape[1] != self.item.shape[1]:
            raise ContractError('user and item tables must be 2-d with the same width')
        if self.user_mask is None:
            self.user_mask = np.ones(self.user.shape, dtype=bool)
        if self.item_mask is None:
            self.item_mask = np.ones(self.item.shape, dtype=bool)
        if self.user_mask.shape != self.user.shape or self.item_mask.shape != self.item.shape:
            raise ContractError('masks must match their tables')
        self.apply_masks()

    @classmethod
    def xavier(cls, num_users, num_items, dim, rng):
        """Xavier-uniform tables, bound sqrt(6 / (rows + dim)) per table."""
        def uniform(rows):
            bound = math.sqrt(6.0 / (rows + dim))
            return rng.uniform(-bound, bound, size=(rows, dim))
        return cls(user=uniform(num_users), item=uniform(num_items))

    @property
    def dim(self):
        return self.user.shape[1]

    @property
    def num_users(self):
        return self.user.shape[0]

    @property
    def num_items(self):
        return self.item.shape[0]

    def apply_masks(self):
        self.user[~self.user_mask] = 0.0
        self.item[~self.item_mask] = 0.0

    def kept_entries(self):
        return int(self.user_mask.sum() + self.item_mask.sum())

    def total_entries(self):
        return self.user.size + self.item.size

    def kept_ratio(self):
        return self.kept_entries() / float(self.total_entries())

    def copy(self):
        return EmbeddingTable(self.user.copy(), self.item.copy(), self.user_mask.copy(), self.item_mask.copy())


@dataclass
class ModelParams:
    """Learnable state of one model. edge_weights is None for the teacher."""
    table: EmbeddingTable
    edge_weights: np.ndarray = None
    layers: int = 2

    def __post_init__(self):
        if self.layers < 0:
            raise ContractError('layer count must be >= 0, got {}'.format(self.layers))

    def check(self, graph):
        if self.table.num_users != graph.num_users or self.table.num_items != graph.num_items:
            raise ContractError('table is {}x{} but graph is {}x{}'.format(
                self.table.num_users, self.table.num_items, graph.num_users, graph.num_items))
        if self.edge_weights is not None and self.edge_weights.shape != (graph.num_edges,):
            raise ContractError('edge weight vector has length {}, graph has {} edges'.format(
                len(self.edge_weights), graph.num_edges))

    def copy(self):
        weights = None if self.edge_weights is None else self.edge_weights.copy()
        return ModelParams(self.table.copy(), weights, self.layers)


@dataclass
class PropagationOutput:
    """Per-layer embeddings (index 0 is the input table) and their sums."""
    user_layers: list
    item_layers: list
    user_final: np.ndarray
    item_final: np.ndarray
    residual: bool = False

    @property
    def layers(self):
        return len(self.user_layers) - 1


def _check(g, emb, L):
    if emb.num_users != g.num_users or emb.num_items != g.num_items:
        raise ContractError('table is {}x{} but graph is {}x{}'.format(
            emb.num_users, emb.num_items, g.num_users, g.num_items))
    if L < 0:
        raise ContractError('layer count must be >= 0, got {}'.format(L))


def _propagate(op, emb, L, residual):
    users, items = [emb.user], [emb.item]
    opT = op.T
    for _ in range(L):
        u_prev, i_prev = users[-1], items[-1]
        u_next = op @ i_prev
        i_next = opT @ u_prev
        if residual:
            u_next = u_next + u_prev
            i_next = i_next + i_prev
        users.append(np.asarray(u_next))
        items.append(np.asarray(i_next))

    return PropagationOutput(users, items, np.sum(users, axis=0), np.sum(items, axis=0), residual)


def forward_plain(g, emb, L):
    """LightGCN-style propagation without residual (teacher).
    Zero-degree nodes get zero vectors on layers >= 1.
    @param g <BipartiteGraph>:
        Graph, its weights are ignored
    @param emb <EmbeddingTable>:
        Layer-0 embeddings
    @param L <int>:
        Number of layers
    @return <PropagationOutput>
    """
    _check(g, emb, L)
    return _propagate(g.operator(np.ones(g.num_edges)), emb, L, residual=False)


def forward_weighted(g, emb, L, weights = None):
    """Weighted propagation with the residual term (intermediate and student).
    @param g <BipartiteGraph>:
        Graph
    @param emb <EmbeddingTable>:
        Layer-0 embeddings
    @param L <int>:
        Number of layers
    @param weights <np.ndarray>:
        Per-edge weights, defaults to g.weights
    @return <PropagationOutput>
    """
    _check(g, emb, L)
    return _propagate(g.operator(weights), emb, L, residual=True)


def predict_scores(out, pairs):
    """Dot products of final embeddings for (user, item) rows."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.einsum('ij,ij->i', out.user_final[pairs[:, 0]], out.item_final[pairs[:, 1]])


def backward(g, params, out, grad_user, grad_item, weights = None):
    """Reverse-mode gradients of a propagation.

    With adjoints a_U,l and a_V,l of the layer outputs (upstream flows into
    every layer through the layer sum):
        a_U,L = G_U                a_U,l = G_U + Â a_V,l+1 (+ a_U,l+1 if residual)
        a_V,L = G_V                a_V,l = G_V + Â^T a_U,l+1 (+ a_V,l+1 if residual)
    and for edge e = (i, j) with coefficient c_e:
        dL/dw_e = sum_l c_e (<a_U,l[i], E_V,l-1[j]> + <a_V,l[j], E_U,l-1[i]>)
    @param g <BipartiteGraph>:
        Graph used in the forward pass
    @param params <ModelParams>:
        Parameters used in the forward pass (masks are read from here)
    @param out <PropagationOutput>:
        Result of the matching forward
    @param grad_user <np.ndarray>:
        dLoss/d user_final, I x d
    @param grad_item <np.ndarray>:
        dLoss/d item_final, J x d
    @param weights <np.ndarray>:
        Per-edge weights used in the forward (weighted variant only)
    @return (grad_user0, grad_item0, grad_weights):
        Gradients of the layer-0 tables (masked entries zeroed) and of the
        edge weights (zeros for the plain variant)
    """
    table = params.table
    if grad_user.shape != out.user_final.shape or grad_item.shape != out.item_final.shape:
        raise ContractError('upstream gradient shapes {} / {} do not match outputs {} / {}'.format(
            grad_user.shape, grad_item.shape, out.user_final.shape, out.item_final.shape))
    if table.user.shape != out.user_layers[0].shape or table.item.shape != out.item_layers[0].shape:
        raise ContractError('parameters do not match the propagation output')

    if out.residual:
        w = g.weights if weights is None else weights
    else:
        w = np.ones(g.num_edges)
    op = g.operator(w)
    opT = op.T
    grad_w = np.zeros(g.num_edges)

    a_u, a_v = grad_user, grad_item
    for l in range(out.layers, 0, -1):
        # Edge gradient of layer l from the two directed halves
        if g.num_edges:
            grad_w += g.norm * (
                np.einsum('ij,ij->i', a_u[g.rows], out.item_layers[l - 1][g.cols])
                + np.einsum('ij,ij->i', a_v[g.cols], out.user_layers[l - 1][g.rows])
            )
        next_u = grad_user + op @ a_v
        next_v = grad_item + opT @ a_u
        if out.residual:
            next_u = next_u + a_u
            next_v = next_v + a_v
        a_u, a_v = np.asarray(next_u), np.asarray(next_v)

    grad_u0 = np.where(table.user_mask, a_u, 0.0)
    grad_v0 = np.where(table.item_mask, a_v, 0.0)
    if not out.residual:
        grad_w = np.zeros(g.num_edges)

    return grad_u0, grad_v0, grad_w


class Adam(object):
    """Adam over a dict of named float64 arrays, updated in place.
    Masks (same shape as the parameter) pin entries at zero, including
    their moment estimates. rates maps a parameter name to its own step
    size; the others step with lr."""

    def __init__(self, params, lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, rates = None):
        self.params = params
        self.lr = lr
        self.rates = dict(rates or {})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, masks = None):
        masks = masks or {}
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p -= self.rates.get(name, self.lr) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            mask = masks.get(name)
            if mask is not None:
                p[~mask] = 0.0
                m[~mask] = 0.0
                v[~mask] = 0.0

    def rebind(self, params, keep = None):
        """Points the optimizer at new arrays after edge pruning.
        @param params <dict>:
            New parameter arrays
        @param keep <dict>:
            name -> boolean selector over the old entries that survive;
            selected moments carry over, unmatched shapes restart at zero
        """
        keep = keep or {}
        self.params = params
        for name, value in params.items():
            if name in keep:
                self.m[name] = self.m[name][keep[name]]
                self.v[name] = self.v[name][keep[name]]
            if self.m[name].shape != value.shape:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
