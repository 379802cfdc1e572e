"""Analytic operation counts and wall-clock timing of the single-channel operators."""

from __future__ import annotations

import statistics
import time

import numpy as np

from vesselkit.convolution import (
    CROSSHAIR,
    FULL3D,
    CrossHairKernel,
    Kernel3D,
    conv3d_reference,
    crosshair_forward,
    op_count,
)
from vesselkit.rng import substream


def analytic_row(size: int, k: int) -> dict:
    """Whole-volume multiply/add totals for an ``size``³ volume and ``k``³ kernel."""
    voxels = size ** 3
    full = op_count((k, k, k), FULL3D)
    cross = op_count((k, k, k), CROSSHAIR)
    return {
        "size": size,
        "kernel": k,
        "full3d_mults": full.multiplications * voxels,
        "full3d_adds": full.additions * voxels,
        "crosshair_mults": cross.multiplications * voxels,
        "crosshair_adds": cross.additions * voxels,
        "mult_ratio": cross.multiplications / full.multiplications,
    }


def random_kernels(k: int, seed: int = 0, dtype=np.float32):
    rng = substream(seed, "bench", k)
    full = Kernel3D(rng.uniform(-1, 1, (k, k, k)).astype(dtype))
    cross = CrossHairKernel(*(rng.uniform(-1, 1, (k, k)).astype(dtype) for _ in range(3)))
    return full, cross


def time_call(fn, repeats: int = 5, warmup: int = 1) -> list[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def timing_row(size: int, k: int, repeats: int = 5, seed: int = 0) -> dict:
    """Median forward time of both operators on the same random float32 volume."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    vol = substream(seed, "bench-volume", size).uniform(0, 1, (size,) * 3).astype(np.float32)
    full, cross = random_kernels(k, seed)
    t_full = time_call(lambda: conv3d_reference(vol, full), repeats)
    t_cross = time_call(lambda: crosshair_forward(vol, cross), repeats)
    med_full = statistics.median(t_full)
    med_cross = statistics.median(t_cross)
    return {
        "size": size,
        "kernel": k,
        "repeats": repeats,
        "full3d_median_s": med_full,
        "crosshair_median_s": med_cross,
        "full3d_stdev_s": statistics.pstdev(t_full),
        "crosshair_stdev_s": statistics.pstdev(t_cross),
        "time_ratio": med_cross / med_full,
    }
