"""Labelled splitting of a master seed into independent numpy streams."""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(seed, *labels) -> np.random.SeedSequence:
    """Child ``SeedSequence`` of ``seed`` addressed by ``labels``.

    The same (seed, labels) pair always yields the same stream, and streams with
    different labels are independent, so adding draws under one label never
    shifts another label's numbers.
    """
    if isinstance(seed, np.random.SeedSequence):
        base_entropy, base_key = seed.entropy, tuple(seed.spawn_key)
    elif seed is None:
        raise ValueError("an explicit seed is required for reproducible runs")
    else:
        base_entropy, base_key = int(seed), ()
    key = base_key + tuple(_label_key(lbl) for lbl in labels)
    return np.random.SeedSequence(entropy=base_entropy, spawn_key=key)


def make_rng(seed, *labels) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        if labels:
            raise ValueError("labels cannot be applied to an existing Generator")
        return seed
    return np.random.default_rng(derive_seed(seed, *labels))
