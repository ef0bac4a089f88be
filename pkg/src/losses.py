#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Training objectives with their gradients.

Every loss returns its value together with the gradient with respect to
its inputs (scores or final embeddings); propagation.backward() carries
those down to the parameters. Sigmoids are evaluated in log space.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass
import math

# 3rd party imports from pypi
import numpy as np
from scipy.special import expit, logsumexp

# Local imports
from errors import ContractError, NonFiniteError


@dataclass
class LossWeights:
    """Multi-task weights λ0..λ4 and temperatures."""
    lambda0: float = 1.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0
    lambda4: float = 0.0
    tau_pred: float = 1.0
    tau_emb: float = 1.0
    tau_unif: float = 1.0

    def __post_init__(self):
        for name in ('lambda0', 'lambda1', 'lambda2', 'lambda3', 'lambda4'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ContractError('{} must be finite and >= 0, got {}'.format(name, value))
        for name in ('tau_pred', 'tau_emb', 'tau_unif'):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ContractError('{} must be finite and > 0, got {}'.format(name, value))

    @classmethod
    def from_config(cls, loss, lambda3 = None, kd = True):
        """Weights from the config's loss section.
        @param loss <dict>:
            cfg.loss
        @param lambda3 <float>:
            Stage-specific uniformity weight, defaults to loss['lambda3']
        @param kd <bool>:
            False zeroes λ1 and λ2
        """
        return cls(
            lambda0=loss['lambda0'],
            lambda1=loss['lambda1'] if kd else 0.0,
            lambda2=loss['lambda2'] if kd else 0.0,
            lambda3=loss['lambda3'] if lambda3 is None else lambda3,
            lambda4=loss['lambda4'],
            tau_pred=loss['tau_pred'],
            tau_emb=loss['tau_emb'],
            tau_unif=loss['tau_unif'],
        )


@dataclass
class TrainingBatch:
    """BPR triples (u, j+, j-) and KD tuples (u, j1, j2), both (n, 3) int64.
    KD items carry no polarity constraint."""
    triples: np.ndarray
    tuples: np.ndarray

    def __len__(self):
        return len(self.triples)

    def users(self):
        return np.unique(np.concatenate([self.triples[:, 0], self.tuples[:, 0]]))

    def items(self):
        return np.unique(np.concatenate([self.triples[:, 1:].ravel(), self.tuples[:, 1:].ravel()]))


def _softplus(x):
    # log(1 + e^x) without overflow
    return np.logaddexp(0.0, x)


def bpr_loss(scores_pos, scores_neg):
    """Mean of -log sigmoid(y+ - y-).
    @return (value, grad_pos, grad_neg)
    """
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape:
        raise ContractError('positive and negative score vectors differ in length')
    n = max(len(scores_pos), 1)
    diff = scores_pos - scores_neg
    value = float(np.sum(_softplus(-diff)) / n)
    g = -expit(-diff) / n

    return value, g, -g


def prediction_kd_loss(teacher_scores, student_scores, tau):
    """Binary cross-entropy between teacher and student pairwise preferences.
    For tuple (u, j1, j2), eps = y[u, j1] - y[u, j2] per model and the loss is
    -[σ(eps_t/τ) log σ(eps_s/τ) + (1 - σ(eps_t/τ)) log(1 - σ(eps_s/τ))], averaged.
    @param teacher_scores <np.ndarray>:
        (n, 2) teacher scores of (j1, j2), constant
    @param student_scores <np.ndarray>:
        (n, 2) student scores of (j1, j2)
    @param tau <float>:
        Temperature
    @return (value, grad_student):
        grad_student has shape (n, 2)
    """
    t = np.asarray(teacher_scores, dtype=np.float64).reshape(-1, 2)
    s = np.asarray(student_scores, dtype=np.float64).reshape(-1, 2)
    if t.shape != s.shape:
        raise ContractError('teacher and student scores must cover the same tuples')
    n = max(len(s), 1)
    target = expit((t[:, 0] - t[:, 1]) / tau)
    z = (s[:, 0] - s[:, 1]) / tau
    # log σ(z) = -softplus(-z), log(1 - σ(z)) = -softplus(z)
    value = float(np.sum(target * _softplus(-z) + (1.0 - target) * _softplus(z)) / n)
    g_eps = (expit(z) - target) / (tau * n)

    return value, np.stack([g_eps, -g_eps], axis=1)


def _normalize(x):
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None], norms, safe


def _candidates(n, negatives, rng):
    if negatives is None or negatives + 1 >= n:
        return np.arange(n)
    if rng is None:
        raise ContractError('a random generator is required for sampled negatives')
    return np.sort(rng.choice(n, size=negatives, replace=False))


def infonce_side(student, teacher, tau, anchors = None, negatives = None, rng = None):
    """One side of the embedding-level KD loss.
    Per anchor i: -log exp(cos(s_i, t_i)/τ) / sum_i' exp(cos(s_i', t_i)/τ),
    averaged over anchors. The denominator runs over all rows, or over the
    positive plus a uniform sample of `negatives` rows. Zero-norm rows have
    cosine 0.
    @return (value, grad_student)
    """
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ContractError('student and teacher embeddings must have the same shape')
    n = len(student)
    grad = np.zeros_like(student)
    if n == 0:
        return 0.0, grad
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    b = len(anchors)
    sn, _, safe = _normalize(student)
    tn, _, _ = _normalize(teacher)
    cand = _candidates(n, negatives, rng)

    t_a = tn[anchors]
    pos = np.einsum('ij,ij->i', sn[anchors], t_a) / tau
    neg = t_a @ sn[cand].T / tau
    neg[cand[None, :] == anchors[:, None]] = -np.inf
    logits = np.concatenate([pos[:, None], neg], axis=1)
    lse = logsumexp(logits, axis=1)
    value = float(np.mean(lse - pos))

    d_logits = np.exp(logits - lse[:, None]) / b
    d_logits[:, 0] -= 1.0 / b
    d_sn = np.zeros_like(sn)
    np.add.at(d_sn, anchors, d_logits[:, :1] * t_a / tau)
    d_sn[cand] += d_logits[:, 1:].T @ t_a / tau
    # Back through the row normalization
    grad = (d_sn - np.sum(d_sn * sn, axis=1, keepdims=True) * sn) / safe[:, None]
    grad[np.linalg.norm(student, axis=1) == 0] = 0.0

    return value, grad


def embedding_kd_loss(student_final, teacher_final, tau, anchors = (None, None), negatives = None, rng = None):
    """Embedding-level KD: user and item InfoNCE sides summed.
    @param student_final tuple(<np.ndarray>, <np.ndarray>):
        Student (user, item) final embeddings
    @param teacher_final tuple(<np.ndarray>, <np.ndarray>):
        Teacher (user, item) final embeddings, constant
    @return (value, (grad_user, grad_item))
    """
    value_u, grad_u = infonce_side(student_final[0], teacher_final[0], tau, anchors[0], negatives, rng)
    value_i, grad_i = infonce_side(student_final[1], teacher_final[1], tau, anchors[1], negatives, rng)
    return value_u + value_i, (grad_u, grad_i)


class PositiveSets(object):
    """Positive sets of one side, evaluated lazily per anchor block.
    i' ∈ S_i iff |m_i ∧ m_i'| >= max(|m_i|, |m_i'|) - δ, with i' != i."""

    def __init__(self, masks = None, delta = 0, membership = None):
        self.delta = int(delta)
        self.membership = None if membership is None else np.asarray(membership, dtype=bool)
        if masks is not None:
            self.masks = np.asarray(masks, dtype=np.float64)
            self.sizes_ = self.masks.sum(axis=1)
            self.n = len(self.masks)
        else:
            self.masks = None
            self.n = len(self.membership)

    @classmethod
    def from_dense(cls, membership):
        """Explicit membership matrix (row i lists S_i); used as given."""
        return cls(membership=membership)

    def rows(self, anchors):
        """Boolean (len(anchors), n) membership block."""
        anchors = np.asarray(anchors, dtype=np.int64)
        if self.membership is not None:
            return self.membership[anchors]
        overlap = self.masks[anchors] @ self.masks.T
        bound = np.maximum(self.sizes_[anchors][:, None], self.sizes_[None, :]) - self.delta
        member = overlap >= bound
        member[np.arange(len(anchors)), anchors] = False
        return member

    def to_dense(self):
        return self.rows(np.arange(self.n))


def build_positive_sets(masks, delta):
    """Positive sets from the current binary embedding masks.
    @param masks tuple(<np.ndarray>, <np.ndarray>):
        (user_mask, item_mask) boolean tables
    @param delta <int>:
        Relaxation threshold δ >= 0
    @return tuple(<PositiveSets>, <PositiveSets>)
    """
    if delta < 0:
        raise ContractError('delta must be >= 0, got {}'.format(delta))
    return PositiveSets(masks[0], delta), PositiveSets(masks[1], delta)


def uniformity_side(final, positives, tau, anchors = None, negatives = None, rng = None):
    """One side of the adaptive uniformity constraint.
    Per anchor: -log sum_{p in S} exp(e·e_p/τ) / sum_{all} exp(e·e_a/τ) with raw
    dot products; anchors with no positive in the support are skipped. With
    `negatives` set the support is a uniform sample plus one positive drawn
    per anchor.
    @return (value, grad_final)
    """
    final = np.asarray(final, dtype=np.float64)
    n = len(final)
    grad = np.zeros_like(final)
    if n == 0:
        return 0.0, grad
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    member = positives.rows(anchors)

    if negatives is None or negatives >= n:
        pool = np.arange(n)
    else:
        if rng is None:
            raise ContractError('a random generator is required for sampled negatives')
        sample = rng.choice(n, size=negatives, replace=False)
        # One random positive per anchor joins the sampled support
        draw = rng.random(member.shape)
        draw[~member] = -1.0
        has = member.any(axis=1)
        pool = np.unique(np.concatenate([sample, np.argmax(draw, axis=1)[has]]))
    member = member[:, pool]

    valid = member.any(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, grad

    a = anchors[valid]
    member = member[valid]
    logits = final[a] @ final[pool].T / tau
    lse_all = logsumexp(logits, axis=1)
    pos_logits = np.where(member, logits, -np.inf)
    lse_pos = logsumexp(pos_logits, axis=1)
    value = float(np.mean(lse_all - lse_pos))

    d_logits = (np.exp(logits - lse_all[:, None]) - np.exp(pos_logits - lse_pos[:, None])) / n_valid
    np.add.at(grad, a, d_logits @ final[pool] / tau)
    grad[pool] += d_logits.T @ final[a] / tau

    return value, grad


def uniformity_loss(student_final, positive_sets, tau, anchors = (None, None), negatives = None, rng = None):
    """Adaptive uniformity constraint, user and item sides summed.
    @return (value, (grad_user, grad_item))
    """
    value_u, grad_u = uniformity_side(student_final[0], positive_sets[0], tau, anchors[0], negatives, rng)
    value_i, grad_i = uniformity_side(student_final[1], positive_sets[1], tau, anchors[1], negatives, rng)
    return value_u + value_i, (grad_u, grad_i)


def weight_decay(params):
    """Squared Frobenius norm of all parameters and its gradients 2Θ."""
    value = float(sum(np.sum(np.square(p)) for p in params))
    return value, [2.0 * p for p in params]


COMPONENTS = ('bpr', 'pred_kd', 'emb_kd', 'uniformity')


def total_loss(components, weights, params):
    """λ0 bpr + λ1 pred_kd + λ2 emb_kd + λ3 uniformity + λ4 ||Θ||_F².
    @param components <dict>:
        Component name -> value; missing components count as 0
    @param weights <LossWeights>:
        Multi-task weights
    @param params list[<np.ndarray>]:
        All learnable parameter arrays (embeddings and edge weights)
    @return <float>
    """
    lambdas = (weights.lambda0, weights.lambda1, weights.lambda2, weights.lambda3)
    value = 0.0
    for name, lam in zip(COMPONENTS, lambdas):
        part = components.get(name, 0.0)
        if not math.isfinite(part):
            raise NonFiniteError(name, part)
        value += lam * part
    decay, _ = weight_decay(params)
    if not math.isfinite(decay):
        raise NonFiniteError('weight_decay', decay)

    return value + weights.lambda4 * decay
