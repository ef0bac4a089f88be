#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

# Python standard library
from __future__ import print_function
import os, sys, logging, tempfile

# 3rd party imports from pypi
import numpy as np
import xxhash

# Local imports
from errors import LockError


def digest_arrays(arrays):
    """Order-sensitive xxhash64 over a list of numpy arrays (dtype, shape and bytes).
    @param arrays list[<np.ndarray>]:
        Arrays to hash
    @return <str>:
        Hex digest
    """
    hasher = xxhash.xxh64()
    for a in arrays:
        a = np.ascontiguousarray(a)
        hasher.update(str(a.dtype).encode('utf-8'))
        hasher.update(str(a.shape).encode('utf-8'))
        hasher.update(a.tobytes())

    return hasher.hexdigest()


def permissions(parser, path, *args, **kwargs):
    """Checks permissions using os.access() to see the user is authorized to access
    a file/directory. Checks for existence, readability, writability and executability via:
    os.F_OK (tests existence), os.R_OK (tests read), os.W_OK (tests write), os.X_OK (tests exec).
    @param parser <argparse.ArgumentParser() object>:
        Argparse parser object
    @param path <str>:
        Name of path to check
    @return path <str>:
        If path exists and user can read from location
    """
    if not exists(path):
        parser.error("Path '{}' does not exists! Failed to provide vaild input.".format(path))
    if not os.access(path, *args, **kwargs):
        parser.error("Path '{}' exists, but cannot read path due to permissions!".format(path))

    return path


def exists(testpath):
    """Checks if file exists on the local filesystem.
    @param testpath <str>:
        Name of file/directory to check
    @return does_exist <boolean>:
        True when file/directory exists, False when file/directory does not exist
    """
    does_exist = True
    if not os.path.exists(testpath):
        does_exist = False # File or directory does not exist on the filesystem

    return does_exist


def initialize(output_path):
    """Initialize an output directory. If user provides a output
    directory path that already exists on the filesystem as a file
    (small chance of happening but possible), a OSError is raised. If the
    output directory PATH already EXISTS, it will not try to create the directory.
    @param output_path <str>:
        Output path, created if it does not exist
    @return output_path <str>
    """
    if not exists(output_path):
        os.makedirs(output_path)

    elif os.path.isfile(output_path):
        raise OSError("""\n\tFatal: Failed to create provided output directory!
        User provided --out-dir PATH already exists on the filesystem as a file.
        Please run {} again with a different --out-dir PATH.
        """.format(os.path.basename(sys.argv[0]))
        )

    return output_path


def atomic_write(path, payload):
    """Writes bytes to a temporary file in the destination directory
    and renames it over path, so readers never see a partial file.
    @param path <str>:
        Destination file
    @param payload <bytes>:
        Contents to write
    """
    dirname = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix='.tmp.', dir=dirname)
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if exists(tmp):
            os.remove(tmp)
        raise


def rng_stream(seed, name):
    """Named random stream derived from one global seed. Streams are
    independent, so toggling one component never shifts another's draws.
    @param seed <int>:
        Global run seed
    @param name <str>:
        Stream name, i.e. 'split', 'init/teacher', 'sampling/student'
    @return <np.random.Generator>
    """
    key = xxhash.xxh32_intdigest(name.encode('utf-8'))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


class RunLock(object):
    """Exclusive ownership of a run directory through an O_EXCL lock file."""

    def __init__(self, directory, name = '.lock'):
        self.path = os.path.join(directory, name)
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                "run directory is locked by another process: '{}' exists "
                "(remove it if no run is active)".format(self.path)
            )
        os.write(self.fd, str(os.getpid()).encode('utf-8'))
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.remove(self.path)
        return False


def get_logger(name):
    """Child logger of the 'lightprune' hierarchy."""
    return logging.getLogger('lightprune.{}'.format(name))


def configure_logging(level = logging.INFO):
    """Routes the 'lightprune' logger hierarchy to standard error."""
    logger = logging.getLogger('lightprune')
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter('[%(asctime)s] %(levelname)s %(name)s: %(message)s', '%H:%M:%S'))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger


def err(*message, **kwargs):
    """Prints any provided args to standard error.
    kwargs can be provided to modify print functions
    behavior.
    @param message <any>:
        Values printed to standard error
    @params kwargs <print()>
        Key words to modify print function behavior
    """
    print(*message, file=sys.stderr, **kwargs)
