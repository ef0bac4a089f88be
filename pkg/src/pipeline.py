#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Three-stage distillation: teacher -> augmented intermediate -> pruned student.

Artifacts of a run live in <out-dir>/<run-id>/:

    config.resolved                  resolved configuration (YAML)
    data/                            prepared splits, id mappings, split.json
    teacher.ckpt, intermediate.ckpt, student.ckpt
    teacher.csv, intermediate.csv, student.csv, student_rounds.csv
    report.json, report.csv

Each checkpoint records the hash of the configuration sections its stage
depends on. A stage whose checkpoint hash matches is skipped; a mismatch is
an error unless the caller asks to overwrite or to force reuse.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass
import os, json

# 3rd party imports from pypi
import numpy as np
import pandas as pd

# Local imports
from checkpoint import ModelCheckpoint, save_checkpoint, load_checkpoint
from errors import ConfigError, StaleArtifactError, MissingArtifactError, MissingTeacherWeightError
from evaluation import evaluate_model, write_report
from graph import load_interactions, split_dataset, save_prepared, load_prepared, build_graph, augment_graph
from losses import LossWeights, build_positive_sets
from propagation import EmbeddingTable, ModelParams
from pruning import PruneSchedule, prune_train_loop, reduce_layers
from training import StageModel, Trainer, KDTarget
from utils import RunLock, atomic_write, exists, initialize, rng_stream, get_logger

logger = get_logger('pipeline')

STAGES = ('teacher', 'intermediate', 'student')

# What to do with an artifact trained under a different configuration
REUSE, OVERWRITE, FORCE = 'reuse', 'overwrite', 'force'


@dataclass
class StageArtifacts:
    """A finished stage: checkpoint plus cached outputs."""
    role: str
    checkpoint: ModelCheckpoint
    user_final: np.ndarray
    item_final: np.ndarray
    edge_weights: np.ndarray     # learned per-edge weights, None for the teacher
    config_hash: str
    log_path: str = None
    path: str = None
    reused: bool = False

    @classmethod
    def from_checkpoint(cls, ckpt, path = None, log_path = None, reused = False):
        out = ckpt.forward()
        return cls(role=ckpt.role, checkpoint=ckpt, user_final=out.user_final, item_final=out.item_final,
                   edge_weights=ckpt.learned, config_hash=ckpt.config_hash, log_path=log_path,
                   path=path, reused=reused)

    @property
    def final(self):
        return self.user_final, self.item_final


def checkpoint_path(directory, role):
    return os.path.join(directory, '{}.ckpt'.format(role))


def log_path(directory, name):
    return os.path.join(directory, '{}.csv'.format(name))


def _fresh_log(path):
    if path is not None and exists(path):
        os.remove(path)
    return path


def _check_reuse(what, path, found, expected, policy):
    """True when the artifact at path may be reused."""
    if found == expected:
        logger.info("%s is up to date, reusing '%s'", what, path)
        return True
    if policy == FORCE:
        logger.warning("%s at '%s' was built with a different configuration, reusing it anyway", what, path)
        return True
    if policy == OVERWRITE:
        logger.info("%s at '%s' is stale, retraining", what, path)
        return False
    raise StaleArtifactError(
        "stale artifact '{}': built with config hash {} but the current configuration "
        "hashes to {}; rerun with --overwrite to rebuild it or --force-reuse to keep it".format(path, found, expected)
    )


def prepare_data(cfg, directory, policy = REUSE):
    """Loads, filters and splits cfg.data['path'] into directory/data.
    @return <InteractionDataset>
    """
    target = os.path.join(directory, 'data')
    manifest_path = os.path.join(target, 'split.json')
    expected = cfg.stage_hash('data')
    if exists(manifest_path):
        with open(manifest_path) as fh:
            found = json.load(fh).get('config_hash')
        if _check_reuse('prepared dataset', target, found, expected, policy):
            return load_prepared(target)
    if cfg.data['path'] is None:
        raise ConfigError("data.path is not set and no prepared dataset exists in '{}'".format(target))
    ds = load_interactions(cfg.data['path'], cfg.data['min_degree'])
    ds = split_dataset(ds, cfg.data['ratios'], cfg.seed, cfg.data['split_mode'])
    save_prepared(ds, target, cfg.seed, cfg.data['ratios'], cfg.data['split_mode'], config_hash=expected)
    return ds


def _save(role, graph, params, cfg, directory, weights = None):
    ckpt = ModelCheckpoint.from_model(role, graph, params, weights=weights,
                                      config_hash=cfg.stage_hash(role), precision=cfg.model['precision'])
    path = None
    if directory is not None:
        path = checkpoint_path(directory, role)
        size = save_checkpoint(ckpt, path)
        logger.info("wrote %s checkpoint '%s' (%d bytes)", role, path, size)
    return ckpt, path


def train_teacher(data, cfg, directory = None):
    """Trains the plain (no residual, unweighted) teacher with BPR and weight decay.
    @param data <InteractionDataset>:
        Prepared dataset
    @param cfg <RunConfig>:
        Resolved configuration
    @param directory <str>:
        Run directory for the checkpoint and log, None keeps everything in memory
    @return <StageArtifacts>
    """
    graph = build_graph(data)
    table = EmbeddingTable.xavier(data.num_users, data.num_items, cfg.model['dim'], rng_stream(cfg.seed, 'init/teacher'))
    params = ModelParams(table, None, cfg.model['layers'])
    weights = LossWeights.from_config(cfg.loss, lambda3=0.0, kd=False)
    log = _fresh_log(None if directory is None else log_path(directory, 'teacher'))
    trainer = Trainer(StageModel('teacher', graph, params), data, weights, rng_stream(cfg.seed, 'sampling/teacher'),
                      cfg.train, cfg.loss, log_path=log)
    result = trainer.fit(cfg.train['epochs'])
    logger.info('teacher: %d epochs, best val recall@20 %s', result.epochs_run, result.best_recall20)
    ckpt, path = _save('teacher', graph, params, cfg, directory)

    return StageArtifacts.from_checkpoint(ckpt, path, log)


def _initial_table(data, cfg, role, upstream, from_upstream):
    if from_upstream:
        return upstream.checkpoint.table.copy()
    return EmbeddingTable.xavier(data.num_users, data.num_items, cfg.model['dim'], rng_stream(cfg.seed, 'init/' + role))


def train_intermediate(data, teacher, cfg, hops = None, directory = None):
    """Distills the teacher into a weighted model over the h-hop augmented graph.
    @param teacher <StageArtifacts>:
        Trained teacher, frozen
    @param hops <int>:
        Augmentation hops, defaults to cfg.augment['hops']
    @return <StageArtifacts>:
        edge_weights holds the learned W^t for every augmented-graph edge
    """
    a = cfg.augment
    hops = a['hops'] if hops is None else hops
    augmented = augment_graph(build_graph(data), hops, a['cap'], a['cap_factor'], a['budget'])
    graph = augmented.graph
    table = _initial_table(data, cfg, 'intermediate', teacher, cfg.train['init_intermediate_from_teacher'])
    params = ModelParams(table, np.ones(graph.num_edges), cfg.model['layers'])
    lambda3 = cfg.loss['lambda3_intermediate']
    weights = LossWeights.from_config(cfg.loss, lambda3=lambda3)
    positive_sets = build_positive_sets((table.user_mask, table.item_mask), cfg.resolved_delta()) if lambda3 else None
    log = _fresh_log(None if directory is None else log_path(directory, 'intermediate'))
    trainer = Trainer(StageModel('intermediate', graph, params), data, weights,
                      rng_stream(cfg.seed, 'sampling/intermediate'), cfg.train, cfg.loss,
                      target=KDTarget(teacher.user_final, teacher.item_final),
                      positive_sets=positive_sets, log_path=log)
    result = trainer.fit(cfg.train['epochs'])
    logger.info('intermediate: %d edges (%d augmented), %d epochs, best val recall@20 %s',
                graph.num_edges, augmented.num_augmented, result.epochs_run, result.best_recall20)
    ckpt, path = _save('intermediate', graph, params, cfg, directory)

    return StageArtifacts.from_checkpoint(ckpt, path, log)


def train_student(data, upstream, schedule, cfg, directory = None):
    """Distills the upstream model into the pruned student.
    The student starts on the upstream graph (the original graph with unit
    upstream weights when upstream is the teacher), propagates schedule
    student_layers layers and runs the prune-train loop.
    @param upstream <StageArtifacts>:
        Intermediate model, or the teacher when the intermediate is disabled
    @param schedule <PruneSchedule>:
        Pruning schedule
    @return (<StageArtifacts>, <PruneOutcome>)
    """
    ablation = cfg.ablation
    if upstream.role == 'teacher':
        graph = build_graph(data)
        teacher_weights = np.ones(graph.num_edges)
    else:
        graph = upstream.checkpoint.graph()
        teacher_weights = upstream.edge_weights
        if teacher_weights is None:
            raise MissingTeacherWeightError("upstream '{}' carries no edge weights".format(upstream.role))

    table = _initial_table(data, cfg, 'student', upstream, cfg.train['init_student_from_intermediate'])
    params = reduce_layers(ModelParams(table, np.ones(graph.num_edges), cfg.model['layers']), schedule.student_layers)
    if ablation['disable_importance_distill']:
        beta1 = beta2 = 0.0
    else:
        beta1, beta2 = cfg.prune['beta1'], cfg.prune['beta2']
    weights = LossWeights.from_config(cfg.loss, kd=not ablation['disable_bilevel_kd'])
    delta = cfg.resolved_delta() if weights.lambda3 else None
    positive_sets = None if delta is None else build_positive_sets((table.user_mask, table.item_mask), delta)

    log = _fresh_log(None if directory is None else log_path(directory, 'student'))
    rounds_log = _fresh_log(None if directory is None else log_path(directory, 'student_rounds'))
    model = StageModel('student', graph, params, binary=ablation['binary_edge_weights'])
    trainer = Trainer(model, data, weights, rng_stream(cfg.seed, 'sampling/student'), cfg.train, cfg.loss,
                      target=KDTarget(upstream.user_final, upstream.item_final),
                      positive_sets=positive_sets, log_path=log)
    outcome = prune_train_loop(
        trainer, schedule, teacher_weights, upstream.final, beta1, beta2, delta=delta,
        random_edges=ablation['random_edge_drop'], random_embeddings=ablation['random_emb_drop'],
        rng=rng_stream(cfg.seed, 'prune/student'), log_path=rounds_log,
    )
    final = outcome.model
    ckpt, path = _save('student', final.graph, final.params, cfg, directory, weights=final.propagation_weights())

    return StageArtifacts.from_checkpoint(ckpt, path, log), outcome


def load_stage(directory, role):
    """StageArtifacts of a finished stage on disk."""
    path = checkpoint_path(directory, role)
    if not exists(path):
        raise MissingArtifactError("no {} checkpoint at '{}' (train that stage first)".format(role, path))
    return StageArtifacts.from_checkpoint(load_checkpoint(path), path, log_path(directory, role), reused=True)


def run_stage(role, data, cfg, directory, policy = REUSE, upstream = None):
    """Trains one stage unless an up-to-date checkpoint exists.
    @return <StageArtifacts>
    """
    path = checkpoint_path(directory, role)
    if exists(path):
        ckpt = load_checkpoint(path)
        if _check_reuse('{} checkpoint'.format(role), path, ckpt.config_hash, cfg.stage_hash(role), policy):
            return StageArtifacts.from_checkpoint(ckpt, path, log_path(directory, role), reused=True)
    if role == 'teacher':
        return train_teacher(data, cfg, directory)
    if role == 'intermediate':
        return train_intermediate(data, upstream, cfg, directory=directory)
    artifacts, _ = train_student(data, upstream, PruneSchedule.from_config(cfg), cfg, directory)
    return artifacts


def run_directory(cfg, out_dir):
    return os.path.join(out_dir, cfg.run['run_id'])


def run_pipeline(cfg, out_dir, policy = REUSE, build = None, timing = True):
    """Runs every stage in order, evaluates the models and writes the report.
    @param cfg <RunConfig>:
        Resolved configuration
    @param out_dir <str>:
        Artifact root, the run lives in out_dir/<run_id>
    @param policy <str>:
        'reuse', 'overwrite' or 'force' for stale artifacts
    @return <dict>:
        The report.json payload
    """
    directory = initialize(run_directory(cfg, out_dir))
    with RunLock(directory):
        atomic_write(os.path.join(directory, 'config.resolved'), cfg.dumps().encode('utf-8'))
        data = prepare_data(cfg, directory, policy)
        teacher = run_stage('teacher', data, cfg, directory, policy)
        stages = [teacher]
        upstream = teacher
        if cfg.ablation['disable_intermediate']:
            logger.info('intermediate stage disabled, the student distills from the teacher')
        else:
            upstream = run_stage('intermediate', data, cfg, directory, policy, teacher)
            stages.append(upstream)
        stages.append(run_stage('student', data, cfg, directory, policy, upstream))

        # Kept-edge ratios are relative to the graph each model started from
        starts = [teacher.checkpoint.num_edges] + [s.checkpoint.num_edges for s in stages[1:-1]]
        starts.append(upstream.checkpoint.num_edges)
        reports = [evaluate_model(s.checkpoint, data, cfg.eval, original_edges=n, seed=cfg.seed, timing=timing)
                   for s, n in zip(stages, starts)]
        payload = write_report(reports, directory, cfg.hash(), build)
        merge_logs(directory)

    return payload


def merge_logs(directory):
    """Concatenates the per-stage epoch logs into training_log.csv.
    @return <str>:
        Merged file, or None when no stage log exists
    """
    frames = []
    for role in STAGES:
        path = log_path(directory, role)
        if exists(path):
            frame = pd.read_csv(path)
            frame.insert(0, 'stage', role)
            frames.append(frame)
    if not frames:
        return None
    merged = os.path.join(directory, 'training_log.csv')
    atomic_write(merged, pd.concat(frames, ignore_index=True).to_csv(index=False).encode('utf-8'))
    return merged


def export_embeddings(artifacts, data, directory):
    """Writes final user and item embeddings as TSV keyed by raw id.
    @return list[<str>]:
        Written files
    """
    initialize(directory)
    written = []
    for side, final, ids in (('users', artifacts.user_final, data.user_ids), ('items', artifacts.item_final, data.item_ids)):
        frame = pd.DataFrame(final, columns=['e{}'.format(k) for k in range(final.shape[1])])
        frame.insert(0, 'raw_id', ids)
        path = os.path.join(directory, '{}_{}.tsv'.format(artifacts.role, side))
        frame.to_csv(path, sep='\t', index=False, float_format='%.10g')
        written.append(path)
    return written
