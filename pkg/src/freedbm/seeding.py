"""Per-trial random streams derived from one master seed.

Trial k of experiment ``tag`` uses SeedSequence(master, spawn_key=(crc32(tag), k)),
so results never depend on trial order or thread count.
"""
from __future__ import annotations

import zlib

import numpy as np


def tag_key(tag) -> int:
    return tag if isinstance(tag, int) else zlib.crc32(str(tag).encode())


def trial_rng(master: int, tag, k: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master), spawn_key=(tag_key(tag), int(k)))
    return np.random.default_rng(ss)


def run_trials(fn, master: int, tag, trials: int, threads: int = 1) -> list:
    """[fn(k, rng_k) for k in range(trials)], optionally on a thread pool."""
    jobs = [(k, trial_rng(master, tag, k)) for k in range(trials)]
    if threads <= 1 or trials <= 1:
        return [fn(k, r) for k, r in jobs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda j: fn(*j), jobs))
