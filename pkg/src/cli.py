#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

# Python standard library
from __future__ import print_function
import os, sys, json, logging, traceback

# Local imports
from arguments import Parser, OptionsFormatter
from checkpoint import load_checkpoint
from config import load_config
from errors import LightPruneError, MissingArtifactError
from utils import err, configure_logging, initialize, permissions, RunLock, get_logger

logger = get_logger('cli')

DESCRIPTION = """
lightprune: Distills a graph collaborative-filtering model into a pruned
student (edges, embedding entries and layers) and measures what it costs.

USAGE:
    lightprune <command> [--config FILE] [--seed N] [--out-dir DIR] [options]

SYNOPSIS:
    'prepare' ingests and splits an interaction file. 'train-teacher',
'train-intermediate' and 'train-student' run one stage each, 'pipeline' runs
all three and evaluates them. Artifacts land in <out-dir>/<run-id>/.

EXIT CODES:
    0 success, 1 user error (bad input, config or files), 2 internal error.
"""

ABLATIONS = """
ablation flags (config section 'ablation'):
    ~EmbP   random_emb_drop            ~EdgeP  random_edge_drop
    ~BothP  both random flags          BnEdge  binary_edge_weights
    -BiAln  disable_bilevel_kd         -IntKD  disable_intermediate
    -ImpD   disable_importance_distill
"""


def _common(parser):
    """Options shared by every subcommand."""
    group = parser.add_argument_group('common options')
    group.add_argument('-c', '--config', type=lambda p: permissions(parser, p, os.R_OK), default=None,
                       help='Run configuration in YAML.')
    group.add_argument('-s', '--seed', type=int, default=None,
                       help='Global seed, overrides the config and LIGHTPRUNE_SEED.')
    group.add_argument('-o', '--out-dir', default='artifacts',
                       help='Artifact root; a run lives in <out-dir>/<run-id>. [default: artifacts]')
    group.add_argument('-t', '--threads', type=int, default=None,
                       help='BLAS/OpenMP threads, read by the launcher before numpy loads.')
    verbosity = group.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='Debug logging.')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='Warnings and errors only.')
    reuse = group.add_mutually_exclusive_group()
    reuse.add_argument('--force-reuse', action='store_true',
                       help='Reuse artifacts built under a different configuration.')
    reuse.add_argument('--overwrite', action='store_true',
                       help='Retrain stages whose artifacts are stale.')


def _policy(args):
    from pipeline import REUSE, OVERWRITE, FORCE
    if args.force_reuse:
        return FORCE
    if args.overwrite:
        return OVERWRITE
    return REUSE


def _config(args, extra = None):
    return load_config(args.config, seed=args.seed, extra=extra)


def _dump(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_prepare(args):
    from pipeline import prepare_data, run_directory
    extra = {'data': {'path': args.input}} if args.input else None
    cfg = _config(args, extra)
    directory = initialize(run_directory(cfg, args.out_dir))
    with RunLock(directory):
        ds = prepare_data(cfg, directory, _policy(args))
    _dump({'num_users': ds.num_users, 'num_items': ds.num_items, 'counts': ds.counts(),
           'directory': os.path.join(directory, 'data')})


def _stage(role):
    def run(args):
        from pipeline import prepare_data, run_directory, run_stage, load_stage
        cfg = _config(args)
        directory = initialize(run_directory(cfg, args.out_dir))
        with RunLock(directory):
            data = prepare_data(cfg, directory, _policy(args))
            upstream = None
            if role == 'intermediate':
                upstream = load_stage(directory, 'teacher')
            elif role == 'student':
                upstream = load_stage(directory, 'teacher' if cfg.ablation['disable_intermediate'] else 'intermediate')
            artifacts = run_stage(role, data, cfg, directory, _policy(args), upstream)
        _dump({'role': role, 'checkpoint': artifacts.path, 'reused': artifacts.reused,
               'edges': artifacts.checkpoint.num_edges, 'kept_entry_ratio': artifacts.checkpoint.table.kept_ratio()})
    return run


def cmd_pipeline(args):
    from pipeline import run_pipeline
    from evaluation import build_id
    cfg = _config(args)
    payload = run_pipeline(cfg, args.out_dir, _policy(args), build=build_id(args.version))
    _dump(payload)


def _dataset(args, cfg):
    from graph import load_prepared
    from pipeline import run_directory
    directory = args.data or os.path.join(run_directory(cfg, args.out_dir), 'data')
    return load_prepared(directory)


def cmd_evaluate(args):
    from evaluation import evaluate_model
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    report = evaluate_model(ckpt, _dataset(args, cfg), cfg.eval, seed=cfg.seed, split=args.split)
    _dump(report.to_dict())


def cmd_bench(args):
    from benchmark import timing_bench
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    graph = ckpt.graph()

    def work():
        out = ckpt.forward(graph)
        return out.user_final @ out.item_final.T

    reps = args.repetitions or cfg.eval['bench_repetitions']
    stats = timing_bench(work, reps, cfg.eval['bench_warmup'])
    _dump(dict(stats.to_dict(), role=ckpt.role, checkpoint=args.checkpoint))


def cmd_synth(args):
    from synth import synth_planted, write_planted
    cfg = _config(args)
    ds = synth_planted(args.users, args.items, args.clusters, args.intra_p, args.noise, cfg.seed)
    path, labels = write_planted(ds, args.output)
    _dump({'dataset': path, 'labels': labels, 'edges': ds.num_edges, 'noise': ds.num_noise})


def cmd_report(args):
    from pipeline import merge_logs, run_directory
    cfg = _config(args)
    directory = run_directory(cfg, args.out_dir)
    merged = merge_logs(directory)
    if merged is None:
        raise MissingArtifactError("no stage training logs found in '{}'".format(directory))
    _dump({'training_log': merged})


def cmd_export(args):
    from pipeline import StageArtifacts, export_embeddings
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config(args)
    files = export_embeddings(StageArtifacts.from_checkpoint(ckpt, args.checkpoint), _dataset(args, cfg), args.output)
    _dump({'files': files})


def parsed_arguments(argv = None):
    """Builds the command-line interface and parses argv."""
    parser = Parser(prog='lightprune', description=DESCRIPTION, epilog=ABLATIONS, formatter_class=OptionsFormatter)
    sub = parser.add_subparsers(dest='command', metavar='<command>')
    sub.required = True

    def command(name, func, text):
        p = sub.add_parser(name, help=text, description=text, formatter_class=OptionsFormatter)
        _common(p)
        p.set_defaults(func=func)
        return p

    p = command('prepare', cmd_prepare, 'Ingest, filter and split an interaction file.')
    p.add_argument('-i', '--input', default=None, help='Interaction file, overrides data.path.')
    command('train-teacher', _stage('teacher'), 'Train the teacher model.')
    command('train-intermediate', _stage('intermediate'), 'Distill the teacher into the augmented intermediate model.')
    command('train-student', _stage('student'), 'Distill and prune the student model.')
    command('pipeline', cmd_pipeline, 'Run all stages, evaluate them and write the report.')

    for name, func, text in (('evaluate', cmd_evaluate, 'Evaluate one checkpoint.'),
                             ('export-embeddings', cmd_export, 'Write final embeddings of a checkpoint as TSV.'),
                             ('bench', cmd_bench, 'Time full-graph inference of a checkpoint.')):
        p = command(name, func, text)
        p.add_argument('-k', '--checkpoint', required=True, help='Checkpoint file.')
        p.add_argument('-d', '--data', default=None, help='Prepared dataset directory [default: <run>/data].')
        if name == 'evaluate':
            p.add_argument('--split', choices=('test', 'val'), default='test', help='Split to rank against.')
        if name == 'export-embeddings':
            p.add_argument('--output', required=True, help='Output directory.')
        if name == 'bench':
            p.add_argument('-n', '--repetitions', type=int, default=None, help='Timed runs [default: eval.bench_repetitions].')

    p = command('synth', cmd_synth, 'Generate a planted-noise dataset with a label sidecar.')
    p.add_argument('--users', type=int, required=True)
    p.add_argument('--items', type=int, required=True)
    p.add_argument('--clusters', type=int, required=True)
    p.add_argument('--intra-p', type=float, default=0.05, help='Intra-cluster edge probability. [default: 0.05]')
    p.add_argument('--noise', type=float, default=0.0, help='Noise share of all edges, in [0, 0.5). [default: 0]')
    p.add_argument('--output', required=True, help='Dataset file; labels go to <output>.labels.tsv.')

    command('report', cmd_report, "Merge a run's stage logs into training_log.csv.")

    return parser.parse_args(argv)


def main(argv = None, version = None):
    """Entry point. Library errors become exit codes here and nowhere else.
    @return <int>:
        0 success, 1 user error, 2 internal error
    """
    try:
        args = parsed_arguments(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    args.version = version

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    configure_logging(level)
    try:
        args.func(args)
    except LightPruneError as e:
        err('\n\tFatal: {}\n\t└── {}'.format(type(e).__name__, e))
        return e.exit_code
    except Exception:
        err('\n\tFatal: unexpected internal error')
        err(traceback.format_exc())
        return 2

    return 0


if __name__ == '__main__':
    sys.exit(main())
