"""Frame-parallel evaluation with a fixed reduction order."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import torch

T = TypeVar("T")

_threads = 1


def set_threads(n: int) -> None:
    """Worker threads used by :func:`map_frames`. Torch intra-op threading is pinned to 1."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n
    torch.set_num_threads(1)


def get_threads() -> int:
    return _threads


def map_frames(fn: Callable[[int], T], n_frames: int, threads: int | None = None) -> list[T]:
    """Evaluate ``fn(frame)`` for every frame; results come back in frame order."""
    threads = _threads if threads is None else threads
    if threads <= 1 or n_frames <= 1:
        return [fn(f) for f in range(n_frames)]
    with ThreadPoolExecutor(max_workers=min(threads, n_frames)) as pool:
        return list(pool.map(fn, range(n_frames)))


class _FanOut(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, n):
        return tuple(x.clone() for _ in range(n))

    @staticmethod
    def backward(ctx, *grads):
        return ordered_sum(list(grads)), None


def fan_out(x, n: int) -> tuple:
    """``n`` copies of ``x`` whose gradients are summed in copy order.

    Autograd numbers graph nodes per thread, so when several worker threads
    build graphs on one shared tensor the order in which their gradients
    accumulate depends on scheduling. Giving each worker its own copy, made
    on the calling thread, keeps that order fixed.
    """
    if not x.requires_grad:
        return (x,) * n
    return _FanOut.apply(x, n)


def ordered_sum(values):
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total
