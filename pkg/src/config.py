#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Declarative run configuration.

A run is described by a YAML file with one mapping per section. Defaults
live in DEFAULTS below; every key is range checked by RULES, unknown keys
are rejected, and the resolved result is written back verbatim as
`config.resolved` next to the run's artifacts.

Precedence: --seed flag > LIGHTPRUNE_<SECTION>_<KEY> env > file > defaults.
"""

# Python standard library
from __future__ import print_function
import os, copy, json, math

# 3rd party imports from pypi
import yaml
import xxhash

# Local imports
from errors import ConfigError


# Defaults of every key, grouped by section
DEFAULTS = {
    'seed': 2024,
    'data': {
        'path': None,               # interaction file, <user>\t<item>[\t<rating>]
        'min_degree': 3,            # iterative k-core filter on users and items
        'ratios': [0.7, 0.05, 0.25],
        'split_mode': 'per_user',   # 'per_user' or 'global'
    },
    'model': {
        'dim': 32,
        'layers': 2,                # teacher L
        'student_layers': 1,        # L_s
        'precision': 'float64',     # checkpoint storage, 'float64' or 'float32'
    },
    'augment': {
        'hops': 3,
        'cap': None,                # absolute cap of augmented edges per user and per item
        'cap_factor': 10,           # or a multiple of the node's degree, None disables
        'budget': 50000000,         # max projected edges when uncapped
    },
    'loss': {
        'lambda0': 1.0,
        'lambda1': 1.0,
        'lambda2': 0.1,
        'lambda3': 1e-3,
        'lambda3_intermediate': 0.0,
        'lambda4': 1e-6,
        'tau_pred': 1.0,
        'tau_emb': 0.5,
        'tau_unif': 1.0,
        'negatives': 256,
        'contrast_anchors': 512,
        'delta': None,              # None resolves to ceil(0.1 * dim * emb_keep)
    },
    'prune': {
        'rounds': 5,
        'edge_keep': 0.2,
        'emb_keep': 0.1,
        'epochs_per_round': 20,
        'finetune_epochs': 50,
        'beta1': 1.0,
        'beta2': 1.0,
    },
    'train': {
        'lr': 1e-3,
        'edge_lr': None,            # step size of edge weights, None follows lr
        'batch_size': 4096,
        'epochs': 300,
        'eval_every': 3,
        'patience': 10,
        'init_intermediate_from_teacher': False,
        'init_student_from_intermediate': False,
    },
    'ablation': {
        'random_edge_drop': False,
        'random_emb_drop': False,
        'binary_edge_weights': False,
        'disable_bilevel_kd': False,
        'disable_intermediate': False,
        'disable_importance_distill': False,
    },
    'eval': {
        'topk': [20, 40],
        'mad_fraction': 0.2,
        'mad_cap': 1000,
        'bench_repetitions': 10,
        'bench_warmup': 2,
    },
    'run': {
        'run_id': 'default',
        'threads': None,
    },
}


def _positive(x):
    return _number(x) and x > 0


def _non_negative(x):
    return _number(x) and x >= 0


def _number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _integer(lo, hi = None):
    def check(x):
        return isinstance(x, int) and not isinstance(x, bool) and x >= lo and (hi is None or x <= hi)
    return check


def _fraction(x):
    return _number(x) and 0 < x <= 1


def _optional(check):
    return lambda x: x is None or check(x)


def _ratios(x):
    return (isinstance(x, (list, tuple)) and len(x) == 3 and all(_non_negative(r) for r in x)
            and x[0] > 0 and abs(sum(x) - 1.0) <= 1e-9)


def _topk(x):
    return isinstance(x, (list, tuple)) and len(x) > 0 and all(_integer(1)(n) for n in x)


def _boolean(x):
    return isinstance(x, bool)


# Range checks: (section, key) -> (predicate, human readable rule)
RULES = {
    ('seed', None): (_integer(0), 'a non-negative integer'),
    ('data', 'path'): (_optional(lambda x: isinstance(x, str)), 'a file path'),
    ('data', 'min_degree'): (_integer(1), 'an integer >= 1'),
    ('data', 'ratios'): (_ratios, 'three non-negative numbers, train > 0, summing to 1'),
    ('data', 'split_mode'): (lambda x: x in ('per_user', 'global'), "'per_user' or 'global'"),
    ('model', 'dim'): (_integer(1), 'an integer >= 1'),
    ('model', 'layers'): (_integer(1), 'an integer >= 1'),
    ('model', 'student_layers'): (_integer(1), 'an integer >= 1'),
    ('model', 'precision'): (lambda x: x in ('float64', 'float32'), "'float64' or 'float32'"),
    ('augment', 'hops'): (_integer(1, 4), 'an integer in [1, 4]'),
    ('augment', 'cap'): (_optional(_integer(0)), 'null or an integer >= 0'),
    ('augment', 'cap_factor'): (_optional(_non_negative), 'null or a number >= 0'),
    ('augment', 'budget'): (_integer(1), 'an integer >= 1'),
    ('loss', 'lambda0'): (_non_negative, 'a number >= 0'),
    ('loss', 'lambda1'): (_non_negative, 'a number >= 0'),
    ('loss', 'lambda2'): (_non_negative, 'a number >= 0'),
    ('loss', 'lambda3'): (_non_negative, 'a number >= 0'),
    ('loss', 'lambda3_intermediate'): (_non_negative, 'a number >= 0'),
    ('loss', 'lambda4'): (_non_negative, 'a number >= 0'),
    ('loss', 'tau_pred'): (_positive, 'a number > 0'),
    ('loss', 'tau_emb'): (_positive, 'a number > 0'),
    ('loss', 'tau_unif'): (_positive, 'a number > 0'),
    ('loss', 'negatives'): (_optional(_integer(1)), 'null (full softmax) or an integer >= 1'),
    ('loss', 'contrast_anchors'): (_integer(1), 'an integer >= 1'),
    ('loss', 'delta'): (_optional(_integer(0)), 'null or an integer >= 0'),
    ('prune', 'rounds'): (_integer(0), 'an integer >= 0'),
    ('prune', 'edge_keep'): (_fraction, 'a number in (0, 1]'),
    ('prune', 'emb_keep'): (_fraction, 'a number in (0, 1]'),
    ('prune', 'epochs_per_round'): (_integer(0), 'an integer >= 0'),
    ('prune', 'finetune_epochs'): (_integer(0), 'an integer >= 0'),
    ('prune', 'beta1'): (_number, 'a finite number'),
    ('prune', 'beta2'): (_number, 'a finite number'),
    ('train', 'lr'): (_positive, 'a number > 0'),
    ('train', 'edge_lr'): (_optional(_positive), 'null or a number > 0'),
    ('train', 'batch_size'): (_integer(1), 'an integer >= 1'),
    ('train', 'epochs'): (_integer(0), 'an integer >= 0'),
    ('train', 'eval_every'): (_integer(1), 'an integer >= 1'),
    ('train', 'patience'): (_integer(1), 'an integer >= 1'),
    ('train', 'init_intermediate_from_teacher'): (_boolean, 'true or false'),
    ('train', 'init_student_from_intermediate'): (_boolean, 'true or false'),
    ('eval', 'topk'): (_topk, 'a non-empty list of integers >= 1'),
    ('eval', 'mad_fraction'): (_fraction, 'a number in (0, 1]'),
    ('eval', 'mad_cap'): (_integer(2), 'an integer >= 2'),
    ('eval', 'bench_repetitions'): (_integer(1), 'an integer >= 1'),
    ('eval', 'bench_warmup'): (_integer(0), 'an integer >= 0'),
    ('run', 'run_id'): (lambda x: isinstance(x, str) and x and os.sep not in x, 'a non-empty name without path separators'),
    ('run', 'threads'): (_optional(_integer(1)), 'null or an integer >= 1'),
}
for _key in DEFAULTS['ablation']:
    RULES[('ablation', _key)] = (_boolean, 'true or false')


# Sections each stage depends on; a stage's hash also chains its upstream hash
STAGE_SECTIONS = {
    'data': ['data', 'seed'],
    'teacher': ['model.dim', 'model.layers', 'model.precision', 'train', 'loss.lambda0', 'loss.lambda4'],
    'intermediate': ['augment', 'loss', 'ablation.disable_intermediate'],
    'student': ['model.student_layers', 'prune', 'ablation'],
}
STAGE_ORDER = ['data', 'teacher', 'intermediate', 'student']


class RunConfig(object):
    """Resolved, validated configuration. Sections are read as attributes
    returning plain dicts, i.e. cfg.loss['lambda0'], cfg.seed."""

    def __init__(self, resolved):
        self._data = resolved

    def __getattr__(self, name):
        try:
            return self.__dict__['_data'][name]
        except KeyError:
            raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._data == other._data

    def __repr__(self):
        return 'RunConfig({!r})'.format(self._data)

    def to_dict(self):
        return copy.deepcopy(self._data)

    def dumps(self):
        return yaml.safe_dump(self._data, sort_keys=True, default_flow_style=False)

    def dump(self, path):
        with open(path, 'w') as fh:
            fh.write(self.dumps())

    def replace(self, **sections):
        """Copy with updated keys, i.e. cfg.replace(prune={'rounds': 0}). Revalidated."""
        data = self.to_dict()
        for section, value in sections.items():
            if isinstance(value, dict):
                data[section].update(value)
            else:
                data[section] = value
        return RunConfig(validate(data))

    def _select(self, dotted):
        section, _, key = dotted.partition('.')
        value = self._data[section]
        return value[key] if key else value

    def stage_hash(self, stage):
        """Chained xxhash64 over the sections the stage (and its upstream) depends on.
        @param stage <str>:
            One of 'data', 'teacher', 'intermediate', 'student'
        @return <str>:
            Hex digest
        """
        upstream = ''
        for name in STAGE_ORDER:
            payload = {s: self._select(s) for s in STAGE_SECTIONS[name]}
            blob = json.dumps({'upstream': upstream, 'stage': name, 'payload': payload}, sort_keys=True)
            upstream = xxhash.xxh64(blob.encode('utf-8')).hexdigest()
            if name == stage:
                return upstream
        raise KeyError(stage)

    def hash(self):
        return xxhash.xxh64(self.dumps().encode('utf-8')).hexdigest()

    def resolved_delta(self):
        """δ for positive sets: explicit value or ceil(0.1 * d * emb_keep)."""
        if self.loss['delta'] is not None:
            return self.loss['delta']
        return int(math.ceil(0.1 * self.model['dim'] * self.prune['emb_keep']))


def _merge(base, user, where = ''):
    for key, value in user.items():
        if key not in base:
            raise ConfigError("unknown config key '{}{}'".format(where, key))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("config section '{}{}' must be a mapping".format(where, key))
            _merge(base[key], value, '{}{}.'.format(where, key))
        else:
            base[key] = value


def validate(data):
    """Range checks every key of a fully merged config dict.
    @param data <dict>:
        Merged configuration
    @return data <dict>
    """
    for (section, key), (check, rule) in RULES.items():
        value = data[section] if key is None else data[section][key]
        if not check(value):
            name = section if key is None else '{}.{}'.format(section, key)
            raise ConfigError("invalid value for '{}': {!r} (expected {})".format(name, value, rule))
    if data['model']['student_layers'] > data['model']['layers']:
        raise ConfigError("model.student_layers ({}) must not exceed model.layers ({})".format(
            data['model']['student_layers'], data['model']['layers']))
    data['data']['ratios'] = [float(r) for r in data['data']['ratios']]
    data['eval']['topk'] = sorted(set(int(n) for n in data['eval']['topk']))
    return data


def env_overrides(environ = None):
    """Collects LIGHTPRUNE_<SECTION>_<KEY> overrides as a nested dict.
    Values are parsed as YAML scalars, so '0.01' is a float and 'true' a bool."""
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith('LIGHTPRUNE_'):
            continue
        rest = name[len('LIGHTPRUNE_'):].lower()
        value = yaml.safe_load(raw)
        if rest == 'seed':
            overrides['seed'] = value
            continue
        matched = False
        for section in DEFAULTS:
            if isinstance(DEFAULTS[section], dict) and rest.startswith(section + '_'):
                overrides.setdefault(section, {})[rest[len(section) + 1:]] = value
                matched = True
                break
        if not matched:
            raise ConfigError("unknown environment override '{}'".format(name))
    return overrides


def load_config(path = None, seed = None, environ = None, extra = None):
    """Builds the resolved RunConfig.
    @param path <str>:
        YAML config file or None for defaults only
    @param seed <int>:
        Seed given on the command line, beats every other source
    @param environ <dict>:
        Environment to read overrides from [default: os.environ]
    @param extra <dict>:
        Programmatic overrides applied after the environment
    @return <RunConfig>
    """
    data = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError("cannot read config file '{}': {}".format(path, e))
        except yaml.YAMLError as e:
            raise ConfigError("config file '{}' is not valid YAML: {}".format(path, e))
        if not isinstance(user, dict):
            raise ConfigError("config file '{}' must contain a mapping".format(path))
        _merge(data, user)
    _merge(data, env_overrides(environ))
    if extra:
        _merge(data, extra)
    if seed is not None:
        data['seed'] = seed
    return RunConfig(validate(data))
