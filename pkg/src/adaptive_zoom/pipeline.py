"""Two-stage adaptive inference: coarse prefill, gate, and on demand a zoomed partial prefill."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import NormalizedBBox
from .router import COARSE, REFINE, GateBranch, RouteDecision, gate_forward, route
from .rpn import Heatmap, NoForeground, RpnBranch, binarize, extract_bbox, predict_heatmap, rpn_forward
from .scenes import PatchEncoder, SyntheticScene, build_sequence, crop_codes
from .sequence import SegmentedSequence, assign_positions, visual_segment
from .transformer import Backbone, LayerKVCache

MAX_ANSWER_TOKENS = 5


@dataclass(frozen=True)
class BudgetConfig:
    coarse_budget: int = 64
    roi_budget: int = 64
    tau_gate: float = 0.5
    tau_roi: float = 0.5

    def __post_init__(self):
        if self.coarse_budget < 1 or self.roi_budget < 1:
            raise ValueError("budgets must be >= 1")
        if not 0.0 <= self.tau_gate <= 1.0 or not 0.0 < self.tau_roi < 1.0:
            raise ValueError("tau_gate must lie in [0, 1] and tau_roi in (0, 1)")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "BudgetConfig":
        return cls(cfg.coarse_budget, cfg.roi_budget, cfg.tau_gate, cfg.tau_roi)


@dataclass
class InferenceTrace:
    route: RouteDecision | None  # None for plain baseline runs
    coarse_tokens: int
    roi_tokens: int = 0
    compute_units: int = 0
    answer: list[int] = field(default_factory=list)
    wall_ms: float = 0.0
    heatmap: Heatmap | None = None
    bbox: NormalizedBBox | None = None
    prefill_passes: int = 1
    no_foreground: bool = False
    scene_seed: int | None = None

    @property
    def visual_tokens(self) -> int:
        return self.coarse_tokens + self.roi_tokens

    @property
    def refined(self) -> bool:
        return self.roi_tokens > 0

    def dumps(self) -> str:
        r = self.route
        items = {
            "scene_seed": "none" if self.scene_seed is None else self.scene_seed,
            "route": "baseline" if r is None else r.branch,
            "y_pred": "none" if r is None else repr(r.y_pred),
            "tau_gate": "none" if r is None else repr(r.tau_gate),
            "coarse_tokens": self.coarse_tokens,
            "roi_tokens": self.roi_tokens,
            "compute_units": self.compute_units,
            "prefill_passes": self.prefill_passes,
            "no_foreground": int(self.no_foreground),
            "bbox": "none" if self.bbox is None else ",".join(str(v) for v in self.bbox.as_tuple()),
            "heatmap": "none"
            if self.heatmap is None
            else ";".join(",".join(repr(float(v)) for v in row) for row in self.heatmap.grid),
            "answer": " ".join(str(t) for t in self.answer),
            "wall_ms": repr(self.wall_ms),
        }
        return "".join(f"{k} = {v}\n" for k, v in items.items())

    @classmethod
    def loads(cls, text: str) -> "InferenceTrace":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, value = (part.strip() for part in line.split("=", 1))
                kv[key] = value
        decision = None
        if kv["route"] != "baseline":
            decision = RouteDecision(float(kv["y_pred"]), float(kv["tau_gate"]), kv["route"])
        heatmap = None
        if kv["heatmap"] != "none":
            heatmap = Heatmap(np.array([[float(v) for v in row.split(",")] for row in kv["heatmap"].split(";")]))
        bbox = None
        if kv["bbox"] != "none":
            bbox = NormalizedBBox(*(float(v) for v in kv["bbox"].split(",")))
        return cls(
            route=decision,
            coarse_tokens=int(kv["coarse_tokens"]),
            roi_tokens=int(kv["roi_tokens"]),
            compute_units=int(kv["compute_units"]),
            answer=[int(t) for t in kv["answer"].split()],
            wall_ms=float(kv["wall_ms"]),
            heatmap=heatmap,
            bbox=bbox,
            prefill_passes=int(kv["prefill_passes"]),
            no_foreground=bool(int(kv["no_foreground"])),
            scene_seed=None if kv["scene_seed"] == "none" else int(kv["scene_seed"]),
        )


def crop_and_reencode(scene: SyntheticScene, bbox: NormalizedBBox, source_dims, roi_budget: int, encoder: PatchEncoder):
    """Encode the fine cells under ``bbox`` (given on the ``source_dims`` grid) within ``roi_budget`` tokens."""
    codes = crop_codes(scene, bbox, source_dims, roi_budget)
    return encoder(codes), tuple(codes.shape)


def insertion_index(sequence: SegmentedSequence) -> int:
    """Segment index at which the RoI span goes: just before the first user span."""
    kinds = [s.kind for s in sequence.segments]
    if "user" not in kinds:
        raise ValueError("sequence has no user span to insert before")
    return kinds.index("user")


def align_and_insert(sequence: SegmentedSequence, roi_tokens, bbox: NormalizedBBox | None, grid_dims) -> SegmentedSequence:
    """The ``[roi_visual, user, ...]`` suffix with positions assigned as part of the full layout."""
    if bbox is None:
        raise ValueError("roi tokens need the box they were cropped from")
    at = insertion_index(sequence)
    segments = list(sequence.segments)
    segments.insert(at, visual_segment(roi_tokens, grid_dims, kind="roi_visual"))
    full = assign_positions(SegmentedSequence(tuple(segments)), roi_box=bbox)
    return full.slice_from(at)


class AdaptivePipeline:
    """Holds the shared immutable weights; every ``run_*`` call owns its own cache."""

    def __init__(
        self,
        backbone: Backbone,
        encoder: PatchEncoder,
        gate: GateBranch | None = None,
        rpn: RpnBranch | None = None,
        gaussian_kernel: int = 5,
        gaussian_sigma: float = 1.0,
    ):
        self.backbone = backbone
        self.encoder = encoder
        self.gate = gate
        self.rpn = rpn
        self.gaussian_kernel = gaussian_kernel
        self.gaussian_sigma = gaussian_sigma

    @property
    def cfg(self):
        return self.backbone.cfg

    def _coarse_units(self, n: int, refine: bool) -> int:
        cfg = self.cfg
        units = n * cfg.num_layers + n * cfg.branch_depth
        if refine:
            units += n * (cfg.branch_depth - 1)
        return units

    def baseline(self, scene: SyntheticScene, budget: int) -> tuple[list[int], InferenceTrace]:
        """Plain single-pass inference at ``budget``; never touches either branch."""
        start = time.perf_counter()
        seq = build_sequence(scene, self.encoder, budget)
        out = self.backbone.prefill(seq)
        answer, _ = self.backbone.decode_greedy(out.cache, MAX_ANSWER_TOKENS)
        n_vis = seq.spans_of("visual")[0].length
        trace = InferenceTrace(
            None, n_vis, compute_units=len(seq) * self.cfg.num_layers, answer=answer, scene_seed=scene.seed
        )
        trace.wall_ms = (time.perf_counter() - start) * 1e3
        return answer, trace

    def run_adaptive(
        self, scene: SyntheticScene, budgets: BudgetConfig, oracle_bbox: NormalizedBBox | None = None
    ) -> tuple[list[int], InferenceTrace]:
        """Gate, then either decode from the coarse cache or zoom.

        ``oracle_bbox`` (on the coarse grid) forces refinement with that box and
        skips both branches; it exists for evaluation.
        """
        start = time.perf_counter()
        seq = build_sequence(scene, self.encoder, budgets.coarse_budget)
        out = self.backbone.prefill(seq)
        visual = seq.spans_of("visual")[0]
        terminal = seq.terminal_index()
        if oracle_bbox is None:
            y_pred = gate_forward(self.gate, out.tap, terminal)
            decision = route(y_pred, budgets.tau_gate)
        else:
            decision = route(1.0, 0.0)
        trace = InferenceTrace(decision, visual.length, scene_seed=scene.seed)
        bbox = oracle_bbox
        if decision.branch == REFINE and bbox is None:
            states = rpn_forward(self.rpn, out.tap)
            trace.heatmap = predict_heatmap(self.rpn, states, terminal, visual)
            binary = binarize(trace.heatmap, budgets.tau_roi, self.gaussian_kernel, self.gaussian_sigma)
            try:
                bbox = extract_bbox(binary)
            except NoForeground:
                trace.no_foreground = True
        refine = decision.branch == REFINE
        units = self._coarse_units(len(seq), refine and oracle_bbox is None)
        if oracle_bbox is not None:
            units = len(seq) * self.cfg.num_layers
        if bbox is None:
            answer, _ = self.backbone.decode_greedy(out.cache, MAX_ANSWER_TOKENS)
        else:
            answer, suffix = self._zoom(scene, seq, out.cache, bbox, visual.grid, budgets.roi_budget)
            trace.bbox = bbox
            trace.roi_tokens = suffix.spans_of("roi_visual")[0].length
            trace.prefill_passes = 2
            units += len(suffix) * self.cfg.num_layers
        trace.compute_units = units
        trace.answer = answer
        trace.wall_ms = (time.perf_counter() - start) * 1e3
        return answer, trace

    def _zoom(self, scene, seq: SegmentedSequence, cache: LayerKVCache, bbox, source_dims, roi_budget: int):
        roi_tokens, roi_dims = crop_and_reencode(scene, bbox, source_dims, roi_budget, self.encoder)
        suffix = align_and_insert(seq, roi_tokens, bbox, roi_dims)
        prefix_len = seq.spans[insertion_index(seq)].start
        _, cache = self.backbone.partial_prefill(cache.truncate(prefix_len), suffix)
        answer, _ = self.backbone.decode_greedy(cache, MAX_ANSWER_TOKENS)
        return answer, suffix

    def run_full(self, scene: SyntheticScene, budgets: BudgetConfig, bbox: NormalizedBBox) -> list[int]:
        """From-scratch single prefill of the assembled ``[sys, v, roi, user]`` sequence (reference path)."""
        seq = build_sequence(scene, self.encoder, budgets.coarse_budget)
        source_dims = seq.spans_of("visual")[0].grid
        roi_tokens, roi_dims = crop_and_reencode(scene, bbox, source_dims, budgets.roi_budget, self.encoder)
        full = build_sequence(scene, self.encoder, budgets.coarse_budget, roi=(roi_tokens, roi_dims, bbox))
        out = self.backbone.prefill(full)
        return self.backbone.decode_greedy(out.cache, MAX_ANSWER_TOKENS)[0]


__all__ = [
    "AdaptivePipeline",
    "BudgetConfig",
    "COARSE",
    "InferenceTrace",
    "REFINE",
    "align_and_insert",
    "crop_and_reencode",
    "insertion_index",
]
