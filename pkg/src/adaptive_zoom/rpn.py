"""Region proposal branch: layer copies plus a repurposed query/key head that scores visual tokens."""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .geometry import NormalizedBBox
from .sequence import Span
from .transformer import Backbone, HiddenStates, layer_norm, stable_layer_norm, stable_linear


class NoForeground(ValueError):
    """Raised when a binary map has no active cell to box."""


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # (H, W) float64
    activated: bool = False  # False: raw logits, True: post-sigmoid

    def activate(self) -> "Heatmap":
        if self.activated:
            return self
        return Heatmap(1.0 / (1.0 + np.exp(-self.grid)), activated=True)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape)


class RpnBranch(nn.Module):
    """R-1 layers copied from B+1..B+R-1; layer B+R donates its pre-norm and q/k projections."""

    def __init__(self, backbone: Backbone):
        super().__init__()
        cfg = backbone.cfg
        b, r = cfg.split_depth, cfg.branch_depth
        self.split_depth = b
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.eps = cfg.norm_epsilon
        self.init_source = tuple(range(b + 1, b + r + 1))
        self.layers = nn.ModuleList(copy.deepcopy(backbone.block(i)) for i in self.init_source[:-1])
        last = backbone.block(b + r)
        self.head_norm = nn.Parameter(last.ln1.detach().clone())
        self.proj_q = nn.Parameter(last.wq.detach().clone())
        self.proj_k = nn.Parameter(last.wk.detach().clone())
        for p in self.parameters():
            p.requires_grad_(True)

    @property
    def output_layer(self) -> int:
        return self.split_depth + len(self.layers)

    def _scores(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """Head-averaged inner products of one projected query (d,) with projected keys (n, d)."""
        nh, hd = self.num_heads, self.head_dim
        return (k.view(-1, nh, hd) * q.view(1, nh, hd)).sum(-1).mean(-1)

    def logits_batch(
        self, x: torch.Tensor, positions: torch.Tensor, terminal: torch.Tensor, visual: list[Span]
    ) -> list[torch.Tensor]:
        """Differentiable heatmap logits for an end-padded batch of taps."""
        for block in self.layers:
            x = block.forward_batch(x, positions)
        maps = []
        for i, span in enumerate(visual):
            q = layer_norm(x[i, int(terminal[i])], self.head_norm, self.eps) @ self.proj_q.t()
            k = layer_norm(x[i, span.start : span.stop], self.head_norm, self.eps) @ self.proj_k.t()
            maps.append(self._scores(q, k).view(span.grid))
        return maps


@torch.no_grad()
def rpn_forward(rpn: RpnBranch, tap: HiddenStates) -> HiddenStates:
    """Causal pass of the tap through the branch layers; with R = 1 this is the identity."""
    x = tap.activations
    for block in rpn.layers:
        x = block.forward_stable(x, tap.positions)[0]
    return HiddenStates(rpn.output_layer, x, tap.positions, tap.segments)


@torch.no_grad()
def predict_heatmap(rpn: RpnBranch, states: HiddenStates, terminal_index: int, visual_span: Span) -> Heatmap:
    """Raw logits ``LP_q(norm(h_query)) . LP_k(norm(h_v))`` averaged over heads, on the span's grid."""
    if visual_span.grid is None:
        raise ValueError("visual span has no grid dims")
    h, w = visual_span.grid
    if visual_span.length != h * w:
        raise ValueError(f"span of {visual_span.length} tokens cannot form a {h}x{w} map")
    n = states.activations.shape[0]
    if not 0 <= terminal_index < n:
        raise IndexError(f"terminal index {terminal_index} outside 0..{n - 1}")
    rows = states.activations[visual_span.start : visual_span.stop]
    q = stable_linear(stable_layer_norm(states.activations[terminal_index : terminal_index + 1], rpn.head_norm, rpn.eps), rpn.proj_q)
    k = stable_linear(stable_layer_norm(rows, rpn.head_norm, rpn.eps), rpn.proj_k)
    return Heatmap(rpn._scores(q[0], k).view(h, w).numpy().copy())


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian; ``sigma = 0`` gives the identity (a centered delta)."""
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    kernel = np.zeros((size, size))
    if sigma == 0:
        kernel[size // 2, size // 2] = 1.0
        return kernel
    ax = np.arange(size) - size // 2
    with np.errstate(over="ignore"):
        # (ax / sigma) stays well defined when sigma**2 would underflow
        g = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def smooth(grid: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Gaussian smoothing with reflect padding (edge cell not repeated)."""
    return ndimage.correlate(np.asarray(grid, dtype=np.float64), gaussian_kernel(size, sigma), mode="mirror")


def binarize(heatmap: Heatmap, tau_roi: float, kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Sigmoid, smooth, then keep cells strictly above ``tau_roi``."""
    if not 0.0 < tau_roi < 1.0:
        raise ValueError("tau_roi must lie in (0, 1)")
    probs = heatmap.activate().grid
    return (smooth(probs, kernel_size, sigma) > tau_roi).astype(np.int64)


def extract_bbox(binary: np.ndarray) -> NormalizedBBox:
    """Smallest inclusive cell box covering every 1-cell."""
    ys, xs = np.nonzero(np.asarray(binary))
    if ys.size == 0:
        raise NoForeground("binary map has no foreground cell")
    return NormalizedBBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def format_grid(grid: np.ndarray) -> str:
    """``"H W"`` then one line of W values per row; integer grids print as integers."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("expected a 2-D grid")
    lines = [f"{grid.shape[0]} {grid.shape[1]}"]
    integral = np.issubdtype(grid.dtype, np.integer)
    for row in grid:
        lines.append(" ".join(str(int(v)) if integral else repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_grid(text: str, dtype=np.float64) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    h, w = (int(v) for v in lines[0].split())
    if len(lines) - 1 != h:
        raise ValueError(f"expected {h} rows, found {len(lines) - 1}")
    grid = np.loadtxt(io.StringIO("\n".join(lines[1:])), dtype=dtype, ndmin=2)
    if grid.shape != (h, w):
        raise ValueError(f"grid shape {grid.shape} does not match header {h}x{w}")
    return grid


def dump_heatmap(heatmap: Heatmap | np.ndarray, path: str | Path) -> None:
    grid = heatmap.grid if isinstance(heatmap, Heatmap) else heatmap
    Path(path).write_text(format_grid(grid))


def load_heatmap(path: str | Path) -> Heatmap:
    return Heatmap(parse_grid(Path(path).read_text()))
