"""PCGrad-online: conflict projection against a single running accumulator.

Only two shared-parameter-sized vectors exist during a step: the
accumulator and the buffer holding the current task's gradient. Buffers
are obtained through :func:`allocate_vector` so tests can count them.
"""

from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import daxpy

PCGRAD = "pcgrad"
NAIVE = "naive"
# projected gradients this small relative to the input are treated as exactly zero
NULL_TOL = 1e-12


class _AllocationTracker:
    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0

    def _release(self):
        self.live -= 1


_trackers: list[_AllocationTracker] = []


def allocate_vector(dim: int) -> np.ndarray:
    """Zeroed float64 vector for gradient storage, visible to trackers."""
    v = np.zeros(dim, dtype=np.float64)
    for tr in _trackers:
        tr.live += 1
        tr.total += 1
        tr.peak = max(tr.peak, tr.live)
        weakref.finalize(v, tr._release)
    return v


@contextlib.contextmanager
def track_allocations():
    """Count gradient vectors allocated (and still alive) inside the block.

    Vectors that already existed when the block started are not counted;
    ``peak`` is the maximum number simultaneously alive.
    """
    tr = _AllocationTracker()
    _trackers.append(tr)
    try:
        yield tr
    finally:
        _trackers.remove(tr)


@dataclass
class GradAccumulator:
    dim: int
    mode: str = PCGRAD
    flat: np.ndarray = field(init=False, repr=False)
    n_added: int = 0
    n_projected: int = 0

    def __post_init__(self):
        if self.mode not in (PCGRAD, NAIVE):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        self.flat = allocate_vector(self.dim)

    def reset(self) -> None:
        self.flat.fill(0.0)
        self.n_added = 0


def accumulate(acc: GradAccumulator, g: np.ndarray, task_id: str | None = None) -> np.ndarray:
    """Project ``g`` in place off the accumulator if they conflict, then add it.

    Returns ``g`` (now holding the projected gradient).
    """
    if g.shape != (acc.dim,):
        raise ValueError(f"gradient dim {g.shape} != accumulator dim {acc.dim}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient from task {task_id!r}")
    a = acc.flat
    if acc.mode == PCGRAD and acc.n_added:
        dot = float(np.dot(g, a))
        if dot < 0.0:
            nrm2 = float(np.dot(a, a))
            if nrm2 > 0.0:
                g_norm = float(np.linalg.norm(g))
                daxpy(a, g, a=-dot / nrm2)
                # one re-orthogonalisation pass removes the rounding residue along a
                dot = float(np.dot(g, a))
                if dot < 0.0:
                    daxpy(a, g, a=-dot / nrm2)
                    # anti-parallel input: what is left is pure rounding noise
                    if float(np.dot(g, a)) < 0.0 and float(np.linalg.norm(g)) <= NULL_TOL * g_norm:
                        g.fill(0.0)
                acc.n_projected += 1
    daxpy(g, a, a=1.0)
    acc.n_added += 1
    return g


def finalize(acc: GradAccumulator, out: np.ndarray | None = None) -> np.ndarray:
    """Mean of the accumulated (projected) gradients; resets ``acc``.

    Pass ``out`` (e.g. the now-free task buffer) to avoid a third vector.
    """
    if acc.n_added == 0:
        raise ValueError("finalize on an empty accumulator")
    if out is None:
        out = allocate_vector(acc.dim)
    np.divide(acc.flat, acc.n_added, out=out)
    acc.reset()
    return out


def shuffle_task_order(tasks: list, step: int, seed: int) -> list:
    """Deterministic per-(seed, step) permutation of ``tasks``."""
    if len(tasks) <= 1:
        return list(tasks)
    perm = np.random.default_rng([seed, step, 11]).permutation(len(tasks))
    return [tasks[i] for i in perm]


def pcgrad_full(grads: list[np.ndarray], order_seed: int = 0) -> np.ndarray:
    """Original pairwise PCGrad (stores every task gradient); test oracle."""
    rng = np.random.default_rng(order_seed)
    projected = []
    for i, g in enumerate(grads):
        gi = g.astype(np.float64).copy()
        others = [j for j in range(len(grads)) if j != i]
        rng.shuffle(others)
        for j in others:
            gj = grads[j]
            dot = float(np.dot(gi, gj))
            if dot < 0:
                gi -= dot / float(np.dot(gj, gj)) * gj
        projected.append(gi)
    return np.mean(projected, axis=0)
