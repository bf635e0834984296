import hashlib
import json
import logging
import os
import tempfile

import numpy as np
import torch


SEED_MASK = (1 << 63) - 1


def derive_seed(seed, purpose):
    """Derives an independent seed for one random stream

    The derived seed is ``seed XOR h(purpose)`` where ``h`` is the first 8 bytes of the SHA-256 digest of the purpose
    tag, masked to 63 bits so it is accepted by ``torch.Generator.manual_seed``.

    :param seed: int
        The user-facing seed

    :param purpose: str
        Tag naming the random stream, e.g. 'shuffle' or 'gumbel'

    :return: int
    """
    tag = int.from_bytes(hashlib.sha256(str(purpose).encode('utf-8')).digest()[:8], 'little')
    return (int(seed) ^ tag) & SEED_MASK


def make_generator(seed, purpose):
    """Returns a CPU torch.Generator seeded for the given purpose"""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, purpose))
    return gen


def canonical_json(obj):
    """Serialises to JSON with sorted keys so that equal objects give equal bytes"""
    return json.dumps(obj, sort_keys=True, indent=2) + '\n'


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    with open(path, 'rb') as f:
        return sha256_bytes(f.read())


def atomic_write(path, data):
    """Writes bytes to a temporary file in the target directory then renames it into place

    :param path: str or os.PathLike

    :param data: bytes or str
    """
    if isinstance(data, str):
        data = data.encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def mean_std(values):
    """Returns sample mean and standard deviation, ignoring missing values

    :param values: iterable of floats (None entries are skipped)

    :return: 2-tuple of floats (nan when no values are present; std is 0 for a single value)
    """
    arr = np.array([v for v in values if v is not None], dtype=np.float64)
    if len(arr) == 0:
        return float('nan'), float('nan')
    if len(arr) == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def setup_logging(level=logging.INFO):
    """Configures the root logger for command-line use"""
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    return logging.getLogger('protoquant')
