"""Segmented multimodal token streams and their (t, h, w) rotary coordinates."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import torch

from .geometry import NormalizedBBox

TEXT_KINDS = ("system", "user", "response")
VISUAL_KINDS = ("visual", "roi_visual")
KINDS = TEXT_KINDS + VISUAL_KINDS


class PositionTriple(NamedTuple):
    t: float
    h: float
    w: float


@dataclass(frozen=True)
class Segment:
    """One tagged span. Text spans hold token ids, visual spans an (H*W, d) tensor."""

    kind: str
    tokens: object
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.kind in VISUAL_KINDS and self.grid is not None:
            h, w = self.grid
            if len(self.tokens) != h * w:
                raise ValueError(f"{self.kind} span has {len(self.tokens)} tokens for a {h}x{w} grid")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def is_text(self) -> bool:
        return self.kind in TEXT_KINDS


@dataclass(frozen=True)
class Span:
    kind: str
    start: int
    length: int
    grid: tuple[int, int] | None = None

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SegmentedSequence:
    segments: tuple[Segment, ...]
    positions: torch.Tensor | None = None  # (n, 3) float64, columns t, h, w

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("a sequence needs at least one segment")
        if self.positions is not None and self.positions.shape != (len(self), 3):
            raise ValueError(f"positions shape {tuple(self.positions.shape)} != ({len(self)}, 3)")
        roi = [i for i, s in enumerate(self.segments) if s.kind == "roi_visual"]
        for i in roi:
            if i + 1 >= len(self.segments) or self.segments[i + 1].kind != "user":
                raise ValueError("a roi_visual span must immediately precede a user span")

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments)

    @property
    def spans(self) -> list[Span]:
        out, start = [], 0
        for seg in self.segments:
            out.append(Span(seg.kind, start, len(seg), seg.grid))
            start += len(seg)
        return out

    def spans_of(self, kind: str) -> list[Span]:
        return [s for s in self.spans if s.kind == kind]

    def terminal_index(self) -> int:
        """Last token of the most recent user span."""
        users = self.spans_of("user")
        if not users:
            raise ValueError("sequence has no user span")
        return users[-1].stop - 1

    def with_positions(self, positions: torch.Tensor) -> "SegmentedSequence":
        return replace(self, positions=positions)

    def slice_from(self, segment_index: int) -> "SegmentedSequence":
        """The suffix starting at a segment boundary, keeping its assigned positions."""
        offset = sum(len(s) for s in self.segments[:segment_index])
        pos = None if self.positions is None else self.positions[offset:]
        return SegmentedSequence(self.segments[segment_index:], pos)

    def embed(self, token_embedding: torch.Tensor) -> torch.Tensor:
        """Stack the input rows: text ids go through ``token_embedding``, visual rows pass as is."""
        rows = []
        for seg in self.segments:
            if seg.is_text:
                ids = torch.as_tensor(list(seg.tokens), dtype=torch.long)
                rows.append(token_embedding[ids])
            else:
                rows.append(torch.as_tensor(seg.tokens, dtype=token_embedding.dtype))
        return torch.cat(rows, dim=0)


def _roi_axis(lo: float, hi: float, count: int) -> torch.Tensor:
    if count == 1:
        return torch.full((1,), (lo + hi) / 2.0, dtype=torch.float64)
    idx = torch.arange(count, dtype=torch.float64)
    axis = lo + idx * (hi - lo) / (count - 1)
    # pin the far corner exactly; rounding must not step outside the box
    axis[-1] = hi
    return axis.clamp(lo, hi)


def assign_positions(
    seq: SegmentedSequence,
    roi_box: NormalizedBBox | None = None,
    start: float = 0.0,
) -> SegmentedSequence:
    """Fill in one (t, h, w) triple per token.

    Text tokens get (p, p, p) from a running scalar ``p``. A visual span that
    starts at ``p`` gets (p, i, j) and moves ``p`` to ``p + max(H, W)``. RoI tokens
    sit on a temporal layer ``t_src + min(H, W)`` above their source image with
    spatial coordinates interpolated across ``roi_box``; whatever follows resumes
    past the largest coordinate used so far.
    """
    p = float(start)
    max_seen = float("-inf")
    source = None  # (t_src, H, W) of the latest visual span
    rows: list[torch.Tensor] = []
    for seg in seq.segments:
        n = len(seg)
        if seg.is_text:
            scalar = p + torch.arange(n, dtype=torch.float64)
            rows.append(scalar[:, None].expand(n, 3))
            p += n
            max_seen = max(max_seen, p - 1)
        elif seg.kind == "visual":
            if seg.grid is None:
                raise ValueError("visual span is missing its grid dims")
            h, w = seg.grid
            ii, jj = torch.meshgrid(
                torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
            )
            rows.append(torch.stack([torch.full((h * w,), p, dtype=torch.float64), ii.flatten(), jj.flatten()], 1))
            source = (p, h, w)
            max_seen = max(max_seen, p, h - 1.0, w - 1.0)
            p = p + max(h, w)
        else:
            if roi_box is None:
                raise ValueError("roi_visual span present without a roi box")
            if source is None:
                raise ValueError("roi_visual span has no preceding visual span")
            if seg.grid is None:
                raise ValueError("roi_visual span is missing its grid dims")
            t_src, src_h, src_w = source
            rh, rw = seg.grid
            ys = _roi_axis(roi_box.y1, roi_box.y2, rh)
            xs = _roi_axis(roi_box.x1, roi_box.x2, rw)
            hh, ww = torch.meshgrid(ys, xs, indexing="ij")
            t = t_src + min(src_h, src_w)
            rows.append(torch.stack([torch.full((rh * rw,), t, dtype=torch.float64), hh.flatten(), ww.flatten()], 1))
            max_seen = max(max_seen, t, float(hh.max()), float(ww.max()))
            p = max(p, max_seen + 1.0)
    return seq.with_positions(torch.cat(rows, dim=0).contiguous())


def text_segment(kind: str, ids: Sequence[int]) -> Segment:
    return Segment(kind, tuple(int(i) for i in ids))


def visual_segment(tokens: torch.Tensor, grid: tuple[int, int], kind: str = "visual") -> Segment:
    return Segment(kind, tokens, tuple(grid))
