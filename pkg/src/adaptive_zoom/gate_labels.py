"""Consistency-filtered Need-Refine labels from answers along a resolution trajectory."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class ResolutionTrajectory:
    resolutions: tuple[int, ...]
    correctness: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "correctness", tuple(int(c) for c in self.correctness))
        if len(self.resolutions) != len(self.correctness):
            raise ValueError("resolutions and correctness differ in length")
        if len(self.resolutions) < 2:
            raise ValueError("a trajectory needs at least two resolutions")
        if any(b <= a for a, b in zip(self.resolutions, self.resolutions[1:])):
            raise ValueError("resolutions must be strictly increasing")
        if any(c not in (0, 1) for c in self.correctness):
            raise ValueError("correctness entries must be 0 or 1")

    def correct_at(self, resolution: int) -> int:
        return self.correctness[self.resolutions.index(resolution)]


@dataclass(frozen=True)
class GateSample:
    scene_id: int
    query_id: int
    resolution: int
    label: int  # 1 = Need-Refine, 0 = No-Refine


def evaluate_trajectory(
    answer_at: Callable[[object, int], Sequence[int]],
    scene,
    resolutions: Sequence[int],
    judge: Callable[[Sequence[int], object], int],
) -> ResolutionTrajectory:
    """Judge a plain (no gate, no RoI) answer at each budget.

    ``answer_at(scene, budget)`` returns answer tokens; ``judge(tokens, scene)`` scores them.
    """
    resolutions = tuple(int(r) for r in resolutions)
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError("resolutions must be strictly increasing")
    return ResolutionTrajectory(resolutions, tuple(int(judge(answer_at(scene, r), scene)) for r in resolutions))


def consistency_filter(traj: ResolutionTrajectory) -> bool:
    """Accept only step-shaped trajectories: non-decreasing, starting wrong and ending right."""
    c = traj.correctness
    monotone = all(a <= b for a, b in zip(c, c[1:]))
    return monotone and c[0] == 0 and c[-1] == 1


def emit_gate_samples(
    traj: ResolutionTrajectory, draws: int, seed: int, scene_id: int = 0, query_id: int = 0
) -> list[GateSample]:
    """Draw budgets uniformly from an accepted trajectory; the label is 1 where the answer was wrong."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if not consistency_filter(traj):
        raise ValueError("only accepted trajectories can emit samples")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(traj.resolutions), size=draws)
    return [
        GateSample(scene_id, query_id, traj.resolutions[i], 1 - traj.correctness[i]) for i in picks.tolist()
    ]


FIELDS = ("scene_id", "query_id", "resolution", "label")


def write_gate_samples(samples: Sequence[GateSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIELDS)
        for s in samples:
            writer.writerow([s.scene_id, s.query_id, s.resolution, s.label])


def read_gate_samples(path: str | Path) -> list[GateSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [GateSample(*(int(row[f]) for f in FIELDS)) for row in reader]
