"""Shared plumbing: seed derivation, hashing, and a deterministic worker pool."""

from __future__ import annotations

import hashlib
import multiprocessing
from typing import Callable, Iterable, Sequence

import numpy as np


def rng_for(*seed_parts: int) -> np.random.Generator:
    """Deterministic generator derived from a tuple of integer seed parts.

    Derivation goes through SeedSequence so per-task seeds are independent
    of each other and of execution order (serial and parallel runs agree).
    """
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in seed_parts]))


def derive_seed(*seed_parts: int) -> int:
    """Collapse seed parts into a single 63-bit integer seed."""
    return int(np.random.SeedSequence([int(p) for p in seed_parts]).generate_state(1)[0])


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _limited(fn_and_args):
    fn, args = fn_and_args
    # Workers pin BLAS to one thread; process-level parallelism carries the load.
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return fn(args)
    except ImportError:
        return fn(args)


def parallel_map(fn: Callable, tasks: Sequence, threads: int = 1) -> list:
    """Map fn over tasks, preserving order.

    threads <= 1 runs serially in-process.  Tasks must be self-contained
    (seeded) so both modes produce identical results.
    """
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=min(threads, len(tasks))) as pool:
        return pool.map(_limited, [(fn, t) for t in tasks])
