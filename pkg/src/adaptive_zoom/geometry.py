"""Boxes on token grids and budget-constrained grid sizing."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class NormalizedBBox:
    """Axis-aligned box in source-grid coordinates.

    Produced from a binary grid, the corners are inclusive cell indices, which
    coincide with the cell-center coordinates visual tokens are positioned at.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"degenerate box {self}: need x1 <= x2 and y1 <= y2")

    @property
    def width_cells(self) -> float:
        return self.x2 - self.x1 + 1

    @property
    def height_cells(self) -> float:
        return self.y2 - self.y1 + 1

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2

    def within(self, height: int, width: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width - 1 and self.y2 <= height - 1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled_to(self, src: tuple[int, int], dst: tuple[int, int]) -> "NormalizedBBox":
        """Map an inclusive cell box on an ``src`` grid to the covering cell box on ``dst``."""
        fy, fx = dst[0] / src[0], dst[1] / src[1]
        return NormalizedBBox(
            math.floor(self.x1 * fx),
            math.floor(self.y1 * fy),
            math.ceil((self.x2 + 1) * fx) - 1,
            math.ceil((self.y2 + 1) * fy) - 1,
        )


def box_iou(a: NormalizedBBox, b: NormalizedBBox) -> float:
    """IoU of two inclusive cell boxes (areas counted in cells)."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1) + 1
    iy = min(a.y2, b.y2) - max(a.y1, b.y1) + 1
    inter = max(ix, 0) * max(iy, 0)
    union = a.width_cells * a.height_cells + b.width_cells * b.height_cells - inter
    return inter / union


def grid_dims_for_budget(budget: int, aspect: float) -> tuple[int, int]:
    """Largest ``(rows, cols)`` with ``rows * cols <= budget`` and ``cols / rows ~= aspect``.

    ``aspect`` is width over height. Columns follow ``round(rows * aspect)``; among
    equally large grids the one with fewer rows wins.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if aspect <= 0:
        raise ValueError("aspect must be positive")
    best = (1, 1)
    for rows in range(1, budget + 1):
        cols = max(1, round(rows * aspect))
        if rows * cols <= budget and rows * cols > best[0] * best[1]:
            best = (rows, cols)
    return best
