"""Miscellaneous utility functions."""
import gzip
import hashlib
import os
import typing

import numpy as np


def is_compressed(filename: str | os.PathLike) -> bool:
    """Guess whether the file is compressed based on its name.

    Args:
        filename: Name of the file

    Returns:
        `True` if the filename ends with ".z" or ".gz", `False` otherwise
    """
    return os.fspath(filename).endswith((".z", ".gz"))


def open_maybe_compressed(filename: str | os.PathLike) -> typing.IO[bytes]:
    """Open a local file for binary reading, inflating it if it is gzipped.

    Args:
        filename: Path to the file

    Returns:
        A readable binary stream. Files ending with ".z" or ".gz" are
            decompressed transparently using [gzip][].
    """
    if is_compressed(filename):
        return gzip.open(filename, "rb")
    return open(filename, "rb")


def stable_label_hash(label: str) -> int:
    """Hash a label to a 32-bit integer that is stable across processes.

    Python's built-in `hash` is salted per interpreter, so it cannot be used
    to derive reproducible random streams.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def substream(seed: int, label: str) -> np.random.Generator:
    """Derive an independent, named random stream from a run seed.

    Args:
        seed: Run seed
        label: Name of the stream, e.g. `"init"` or `"batch_order"`

    Returns:
        A generator seeded from `seed` and the stable hash of `label`.

    Examples:
        >>> a = substream(7, "init").random()
        >>> b = substream(7, "init").random()
        >>> a == b
        True
    """
    return np.random.default_rng([seed, stable_label_hash(label)])
