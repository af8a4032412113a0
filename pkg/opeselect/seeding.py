"""Named random-number streams and stable digests for run provenance.

Every consumer of randomness (environment spawn, network initialization, minibatch sampling,
state-space noise features) draws from its own stream, keyed by a seed and a label. Adding a new
consumer therefore never shifts the numbers another consumer sees.
"""
import dataclasses
import hashlib
import json
import zlib

import numpy as np


def stream_key(label: str) -> int:
    """Returns a stable 32-bit integer for a stream label.

    Args:
        label: Stream label, e.g. ``'lander-spawn'``.

    Returns:
        CRC-32 of the UTF-8 encoded label.
    """
    return zlib.crc32(label.encode('UTF-8'))


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Creates the generator for the stream ``label`` under ``seed``.

    Args:
        seed: Non-negative integer seed of the run or job.
        label: Stream label.

    Returns:
        A numpy Generator. Identical (seed, label) pairs give identical sequences.

    Raises:
        ValueError: if the seed is negative.
    """
    if seed < 0:
        raise ValueError(f'rng_stream: seed must be non-negative, got {seed}')
    return np.random.default_rng([int(seed), stream_key(label)])


def stable_hash(payload: object, length: int = 12) -> str:
    """Returns a short hex digest of a JSON-serializable payload.

    Dataclasses are converted with ``dataclasses.asdict``. Keys are sorted, so the digest depends
    only on content.

    Args:
        payload: Config object or plain data.
        length: Number of hex digits to keep.

    Returns:
        Leading ``length`` hex digits of the SHA-256 of the canonical JSON encoding.
    """
    if dataclasses.is_dataclass(payload) and not isinstance(payload, type):
        payload = dataclasses.asdict(payload)
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('UTF-8')).hexdigest()[:length]
