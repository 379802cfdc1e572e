"""Input channels and labels for the three tasks.

* vessel: normalized image -> vessel mask
* centerline: vessel probability map -> centerline mask
* bifurcation: vessel and centerline maps (two channels) -> bifurcation mask

For training the centerline and bifurcation tasks, the ground-truth masks
stand in for the upstream probability maps.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from vesselkit.vasculature import GrowthConfig, IntensityConfig, SyntheticSample, synthesize_sample, volume_seed
from vesselkit.volume import Volume3D, normalize_intensities

TASKS = ("vessel", "centerline", "bifurcation")
TASK_CHANNELS = {"vessel": 1, "centerline": 1, "bifurcation": 2}


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    return task


def task_inputs(task: str, sample: Optional[SyntheticSample] = None, *, image=None, vessel=None,
                centerline=None) -> np.ndarray:
    """``(C, nx, ny, nz)`` float32 inputs of ``task``.

    Components come from ``sample`` unless passed explicitly.
    """
    check_task(task)
    if sample is not None:
        image = sample.image if image is None else image
        vessel = sample.vessel if vessel is None else vessel
        centerline = sample.centerline if centerline is None else centerline
    need = {"vessel": ("image",), "centerline": ("vessel",), "bifurcation": ("vessel", "centerline")}[task]
    given = {"image": image, "vessel": vessel, "centerline": centerline}
    missing = [k for k in need if given[k] is None]
    if missing:
        raise ValueError(f"task {task!r} needs {', '.join(missing)} input")
    if task == "vessel":
        img = image if isinstance(image, Volume3D) else Volume3D(np.asarray(image))
        chans = [normalize_intensities(img).data]
    else:
        chans = [getattr(given[k], "data", given[k]) for k in need]
    shapes = {np.shape(c) for c in chans}
    if len(shapes) != 1:
        raise ValueError(f"input channels have different shapes: {sorted(shapes)}")
    return np.stack([np.asarray(c, dtype=np.float32) for c in chans])


def task_labels(task: str, sample: SyntheticSample) -> np.ndarray:
    check_task(task)
    return np.asarray(getattr(sample, task).data)


def synthetic_samples(n: int, shape=(64, 64, 64), seed: int = 0,
                      growth: Optional[GrowthConfig] = None,
                      intensity: Optional[IntensityConfig] = None) -> list[SyntheticSample]:
    """``n`` in-memory samples seeded exactly like ``generate_dataset``."""
    growth = (growth or GrowthConfig()).for_shape(shape)
    intensity = intensity or IntensityConfig()
    out = []
    for i in range(n):
        vs = volume_seed(seed, i)
        out.append(synthesize_sample(growth.with_seed(vs), intensity.with_seed(vs)))
    return out


def task_dataset(task: str, samples) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(task_inputs(task, s), task_labels(task, s)) for s in samples]


def as_volume(arr: np.ndarray) -> Volume3D:
    return Volume3D(np.asarray(arr, dtype=np.float32))
