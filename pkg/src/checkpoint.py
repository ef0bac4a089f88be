#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Model checkpoint container.

A checkpoint is a zip archive with fixed timestamps so the same model always
serializes to the same bytes:

    manifest.json        format_version, role, shapes, config hash, digest
    user_mask.npy        packed bits of the user keep mask (np.packbits)
    user_values.npy      unmasked user entries in row-major order
    item_mask.npy        as above for items
    item_values.npy
    rows.npy, cols.npy   surviving edges, int32 when indices fit
    weights.npy          per-edge propagation weights (weighted models)
    learned.npy          learnable edge parameters (weighted models)
    provenance.npy       packed bits, True for original edges

Only unmasked entries are stored, so the file shrinks as pruning proceeds.
The digest is an xxhash64 over every array entry in manifest order.
"""

# Python standard library
from __future__ import print_function
from dataclasses import dataclass
import io, os, json, zlib, zipfile

# 3rd party imports from pypi
import numpy as np

# Local imports
from errors import IntegrityError, MissingArtifactError, ContractError
from graph import BipartiteGraph
from propagation import EmbeddingTable, ModelParams, forward_plain, forward_weighted
from utils import atomic_write, digest_arrays

FORMAT_VERSION = 1
_DATE = (1980, 1, 1, 0, 0, 0)


def _stored(array, precision):
    """float64 copy of array rounded through the on-disk value dtype."""
    array = np.array(array, dtype=np.float64)
    if precision == 'float32':
        return array.astype(np.float32).astype(np.float64)
    return array


@dataclass
class ModelCheckpoint:
    """Everything needed to rebuild a trained model for inference."""
    role: str
    variant: str                   # 'plain' (teacher) or 'weighted'
    layers: int
    table: EmbeddingTable
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray = None     # propagation weights, compound for the student
    learned: np.ndarray = None     # learnable edge parameters (w^t or w^s)
    provenance: np.ndarray = None
    config_hash: str = ''
    precision: str = 'float64'

    def __post_init__(self):
        if self.variant not in ('plain', 'weighted'):
            raise ContractError("unknown forward variant '{}'".format(self.variant))
        if self.variant == 'weighted' and self.weights is None:
            raise ContractError('weighted checkpoints need per-edge weights')
        if self.provenance is None:
            self.provenance = np.ones(len(self.rows), dtype=bool)

    @classmethod
    def from_model(cls, role, graph, params, weights = None, config_hash = '', precision = 'float64'):
        """Snapshot of a trained model, holding the values exactly as they
        read back from disk at the given precision.
        @param graph <BipartiteGraph>:
            Graph the model propagates over
        @param params <ModelParams>:
            Trained parameters
        @param weights <np.ndarray>:
            Propagation weights if they differ from params.edge_weights
        """
        variant = 'plain' if params.edge_weights is None else 'weighted'
        learned = None if params.edge_weights is None else _stored(params.edge_weights, precision)
        if variant == 'weighted' and weights is None:
            weights = learned
        t = params.table
        table = EmbeddingTable(_stored(t.user, precision), _stored(t.item, precision), t.user_mask.copy(), t.item_mask.copy())
        return cls(
            role=role, variant=variant, layers=params.layers, table=table,
            rows=graph.rows.copy(), cols=graph.cols.copy(),
            weights=None if weights is None else _stored(weights, precision),
            learned=learned, provenance=graph.provenance.copy(),
            config_hash=config_hash, precision=precision,
        )

    @property
    def num_users(self):
        return self.table.num_users

    @property
    def num_items(self):
        return self.table.num_items

    @property
    def num_edges(self):
        return len(self.rows)

    def graph(self):
        return BipartiteGraph(self.num_users, self.num_items, self.rows, self.cols,
                              weights=self.weights, provenance=self.provenance)

    def params(self):
        return ModelParams(self.table.copy(), None if self.learned is None else self.learned.copy(), self.layers)

    def forward(self, graph = None):
        """Full-graph propagation with the variant the model was trained with."""
        graph = self.graph() if graph is None else graph
        if self.variant == 'plain':
            return forward_plain(graph, self.table, self.layers)
        return forward_weighted(graph, self.table, self.layers, self.weights)


def _index_dtype(ckpt):
    bound = max(ckpt.num_users, ckpt.num_items)
    return np.int32 if bound < np.iinfo(np.int32).max else np.int64


def _arrays(ckpt):
    """Ordered name -> array mapping written into the archive."""
    values = np.float32 if ckpt.precision == 'float32' else np.float64
    index = _index_dtype(ckpt)
    t = ckpt.table
    arrays = [
        ('user_mask', np.packbits(t.user_mask, axis=None)),
        ('user_values', t.user[t.user_mask].astype(values)),
        ('item_mask', np.packbits(t.item_mask, axis=None)),
        ('item_values', t.item[t.item_mask].astype(values)),
        ('rows', ckpt.rows.astype(index)),
        ('cols', ckpt.cols.astype(index)),
        ('provenance', np.packbits(ckpt.provenance, axis=None)),
    ]
    if ckpt.weights is not None:
        arrays.append(('weights', ckpt.weights.astype(values)))
    if ckpt.learned is not None:
        arrays.append(('learned', ckpt.learned.astype(values)))
    return arrays


def _npy(array):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def serialize(ckpt):
    """Deterministic archive bytes of a checkpoint.
    @param ckpt <ModelCheckpoint>:
        Checkpoint to serialize
    @return <bytes>
    """
    arrays = _arrays(ckpt)
    manifest = {
        'format_version': FORMAT_VERSION,
        'role': ckpt.role,
        'variant': ckpt.variant,
        'num_users': int(ckpt.num_users),
        'num_items': int(ckpt.num_items),
        'dim': int(ckpt.table.dim),
        'layers': int(ckpt.layers),
        'num_edges': int(ckpt.num_edges),
        'precision': ckpt.precision,
        'config_hash': ckpt.config_hash,
        'arrays': [name for name, _ in arrays],
        'digest': digest_arrays([a for _, a in arrays]),
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, 'w') as zf:
        _entry(zf, 'manifest.json', json.dumps(manifest, indent=2, sort_keys=True).encode('utf-8'))
        for name, array in arrays:
            _entry(zf, '{}.npy'.format(name), _npy(array))

    return buf.getvalue()


def save_checkpoint(ckpt, path):
    """Writes a checkpoint atomically (temp file then rename).
    @return <int>:
        Serialized size in bytes
    """
    payload = serialize(ckpt)
    atomic_write(path, payload)
    return len(payload)


def _unpack(packed, shape):
    n = int(np.prod(shape))
    return np.unpackbits(packed, count=n).astype(bool).reshape(shape)


def load_checkpoint(path):
    """Reads and verifies a checkpoint.
    @param path <str>:
        Checkpoint file
    @return <ModelCheckpoint>:
        Values are float64 regardless of the stored precision
    """
    if not os.path.isfile(path):
        raise MissingArtifactError("checkpoint '{}' not found".format(path))
    try:
        with zipfile.ZipFile(path, 'r') as zf:
            manifest = json.loads(zf.read('manifest.json').decode('utf-8'))
            if manifest.get('format_version') != FORMAT_VERSION:
                raise IntegrityError(path, 'unsupported format_version {!r}'.format(manifest.get('format_version')))
            arrays = {}
            for name in manifest['arrays']:
                with zf.open('{}.npy'.format(name)) as fh:
                    arrays[name] = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, zlib.error, KeyError, ValueError, EOFError) as e:
        raise IntegrityError(path, 'corrupted archive ({})'.format(e))

    if digest_arrays([arrays[name] for name in manifest['arrays']]) != manifest['digest']:
        raise IntegrityError(path, 'content digest mismatch')

    shape_u = (manifest['num_users'], manifest['dim'])
    shape_i = (manifest['num_items'], manifest['dim'])
    user_mask = _unpack(arrays['user_mask'], shape_u)
    item_mask = _unpack(arrays['item_mask'], shape_i)
    user = np.zeros(shape_u)
    item = np.zeros(shape_i)
    user[user_mask] = arrays['user_values']
    item[item_mask] = arrays['item_values']
    m = manifest['num_edges']

    def optional(name):
        return arrays[name].astype(np.float64) if name in arrays else None

    return ModelCheckpoint(
        role=manifest['role'],
        variant=manifest['variant'],
        layers=manifest['layers'],
        table=EmbeddingTable(user, item, user_mask, item_mask),
        rows=arrays['rows'].astype(np.int64),
        cols=arrays['cols'].astype(np.int64),
        weights=optional('weights'),
        learned=optional('learned'),
        provenance=_unpack(arrays['provenance'], (m,)),
        config_hash=manifest['config_hash'],
        precision=manifest['precision'],
    )
