"""Pseudo-labels for the region branch, distilled from the frozen backbone's own attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import NormalizedBBox
from .rpn import format_grid, parse_grid
from .sequence import SegmentedSequence
from .transformer import Backbone

FOREGROUND, BACKGROUND, IGNORE = 1, 0, -1


class AllZeroAttention(ValueError):
    """The attention map has no positive entry, so no foreground can be defined."""


@dataclass
class RawAttentionMap:
    grid: np.ndarray  # (H, W), entries in [0, 1]
    source_layer: int
    response_token_count: int
    visual_norms: np.ndarray | None = None  # per visual token, row-major

    def replace_grid(self, grid: np.ndarray) -> "RawAttentionMap":
        return RawAttentionMap(grid, self.source_layer, self.response_token_count, self.visual_norms)


@dataclass(frozen=True)
class SinkFilterConfig:
    percentile: float = 97.5

    def __post_init__(self):
        if not 50.0 < self.percentile < 100.0:
            raise ValueError("sink percentile must lie in (50, 100)")

    def threshold(self, norms: np.ndarray) -> float:
        """Nearest-rank percentile of this sample's norms."""
        return float(np.percentile(np.asarray(norms, dtype=np.float64), self.percentile, method="inverted_cdf"))


@dataclass
class TriStateMap:
    grid: np.ndarray  # (H, W) int64 in {1, 0, -1}
    fg_box: NormalizedBBox | None
    tau_fg: float
    tau_bg: float
    source: np.ndarray | None = field(default=None, repr=False)  # the map the labels came from

    def validate(self, attention: np.ndarray | None = None) -> None:
        """Assert the structural invariants; ``attention`` additionally checks the thresholds."""
        g = self.grid
        if not np.isin(g, (FOREGROUND, BACKGROUND, IGNORE)).all():
            raise AssertionError("labels outside {1, 0, -1}")
        box = self.fg_box
        if box is not None:
            inside = np.zeros(g.shape, dtype=bool)
            inside[int(box.y1) : int(box.y2) + 1, int(box.x1) : int(box.x2) + 1] = True
            if (g[inside] == BACKGROUND).any():
                raise AssertionError("background cell inside the foreground box")
            if (g[~inside] == FOREGROUND).any():
                raise AssertionError("foreground cell outside the foreground box")
        attention = self.source if attention is None else attention
        if attention is not None:
            a_max = attention.max()
            if (attention[g == FOREGROUND] < self.tau_fg * a_max).any():
                raise AssertionError("foreground cell below tau_fg * a_max")
            if (attention[g == BACKGROUND] > self.tau_bg * a_max).any():
                raise AssertionError("background cell above tau_bg * a_max")


def mine_attention(
    model: Backbone, sample: SegmentedSequence, layer: int, visual_index: int = 0
) -> RawAttentionMap:
    """Post-softmax attention from the response tokens to one visual span, averaged over tokens and heads.

    Under teacher forcing, response token ``t`` is generated by the query at
    position ``t - 1``, so each token contributes the attention row of the
    position that emits it (the first one by the last user token). This is
    the row a decoder would compute while producing the answer.

    The returned map also carries the L2 norms of the visual tokens entering
    ``layer``, the features sink filtering inspects.
    """
    if not 1 <= layer <= model.cfg.num_layers:
        raise ValueError(f"layer {layer} outside 1..{model.cfg.num_layers}")
    responses = sample.spans_of("response")
    if not responses or responses[-1].length == 0:
        raise ValueError("sample has no response tokens to mine from")
    visual = sample.spans_of("visual")[visual_index]
    out = model.prefill(sample, record_attention_layer=layer, capture_layers=(layer - 1,))
    rows = torch.cat([out.attention[r.start - 1 : r.stop - 1] for r in responses], dim=0)
    grid = rows[:, visual.start : visual.stop].mean(0).reshape(visual.grid).numpy().copy()
    hidden = out.captured[layer - 1].activations[visual.start : visual.stop]
    norms = torch.linalg.vector_norm(hidden, dim=-1).numpy().copy()
    return RawAttentionMap(grid, layer, int(rows.shape[0]), norms)


def filter_sinks(
    raw: RawAttentionMap, visual_hidden_norms: np.ndarray | None = None, cfg: SinkFilterConfig = SinkFilterConfig()
) -> RawAttentionMap:
    """Zero the entries whose visual token norm exceeds this sample's percentile cutoff."""
    norms = raw.visual_norms if visual_hidden_norms is None else visual_hidden_norms
    norms = np.asarray(norms, dtype=np.float64).reshape(-1)
    if norms.size != raw.grid.size:
        raise ValueError(f"{norms.size} norms for a {raw.grid.shape[0]}x{raw.grid.shape[1]} map")
    sink = (norms > cfg.threshold(norms)).reshape(raw.grid.shape)
    out = raw.replace_grid(np.where(sink, 0.0, raw.grid))
    out.visual_norms = norms
    return out


def pool_map(grid: np.ndarray, out_dims: tuple[int, int]) -> np.ndarray:
    """Sum attention mass onto a coarser grid; each source cell goes to the cell containing its center."""
    h, w = grid.shape
    oh, ow = out_dims
    rows = np.floor((np.arange(h) + 0.5) * oh / h).astype(np.int64)
    cols = np.floor((np.arange(w) + 0.5) * ow / w).astype(np.int64)
    out = np.zeros((oh, ow))
    np.add.at(out, (rows[:, None], cols[None, :]), grid)
    return out


def assign_tristate(denoised: RawAttentionMap | np.ndarray, tau_fg: float = 0.20, tau_bg: float = 0.05) -> TriStateMap:
    """Confident foreground, confident background outside the foreground box, ignore elsewhere."""
    if not 0.0 < tau_bg < tau_fg <= 1.0:
        raise ValueError("need 0 < tau_bg < tau_fg <= 1")
    a = np.asarray(denoised.grid if isinstance(denoised, RawAttentionMap) else denoised, dtype=np.float64)
    a_max = a.max() if a.size else 0.0
    if not a_max > 0.0:
        raise AllZeroAttention("attention map has no positive entry")
    fg = a >= tau_fg * a_max
    ys, xs = np.nonzero(fg)
    box = NormalizedBBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    inside = np.zeros(a.shape, dtype=bool)
    inside[box.y1 : box.y2 + 1, box.x1 : box.x2 + 1] = True
    labels = np.full(a.shape, IGNORE, dtype=np.int64)
    labels[~inside & (a <= tau_bg * a_max)] = BACKGROUND
    labels[fg] = FOREGROUND
    return TriStateMap(labels, box, tau_fg, tau_bg, source=a)


def write_labels(records: list[tuple[str, TriStateMap]], path: str | Path) -> None:
    """One block per sample: a ``sample`` header line, then the grid in heatmap text layout."""
    chunks = []
    for sample_id, tri in records:
        chunks.append(f"sample {sample_id} tau_fg {tri.tau_fg!r} tau_bg {tri.tau_bg!r}\n" + format_grid(tri.grid))
    Path(path).write_text("\n".join(chunks))


def read_labels(path: str | Path) -> list[tuple[str, TriStateMap]]:
    out = []
    for block in Path(path).read_text().split("\n\n"):
        lines = block.strip().splitlines()
        if not lines:
            continue
        head = lines[0].split()
        if head[0] != "sample" or len(head) != 6:
            raise ValueError(f"bad label header {lines[0]!r}")
        grid = parse_grid("\n".join(lines[1:]), dtype=np.int64)
        fg = np.argwhere(grid == FOREGROUND)
        box = None
        if fg.size:
            box = NormalizedBBox(int(fg[:, 1].min()), int(fg[:, 0].min()), int(fg[:, 1].max()), int(fg[:, 0].max()))
        out.append((head[1], TriStateMap(grid, box, float(head[3]), float(head[5]))))
    return out


def attention_entropy(grid: np.ndarray) -> float:
    """Shannon entropy of a map renormalized to unit mass, divided by its maximum ``ln(H*W)``."""
    p = np.asarray(grid, dtype=np.float64).reshape(-1)
    total = p.sum()
    if p.size < 2 or total <= 0:
        return 1.0
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / np.log(p.size))


def select_mining_layer(model: Backbone, samples: list[SegmentedSequence]) -> int:
    """The layer whose response-to-visual attention is most concentrated on average.

    Uses no ground truth: sharper response attention is taken as the sign of
    the layer where the answer is read off the image.
    """
    if not samples:
        raise ValueError("need at least one sample")
    scores = []
    for layer in range(1, model.cfg.num_layers + 1):
        scores.append(np.mean([attention_entropy(mine_attention(model, s, layer).grid) for s in samples]))
    return int(np.argmin(scores)) + 1
