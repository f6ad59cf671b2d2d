"""Procedural scenes whose answers are only legible above a designed token budget.

A scene is a K x K grid of integer cell codes. The target region is a square
tiled with a 2 x 2 pattern of quadrants ``[tens, frame; frame, units]`` in the
target color. The quadrant side ``q`` sets the critical budget: majority
pooling by a factor larger than ``q`` turns every quadrant block into frame
color, so the two answer digits vanish while the region itself stays visible.
Distractor regions use other colors and other digits.

The query is ``read <color>`` and the answer echoes the color before the
number, e.g. ``c2 37``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .geometry import NormalizedBBox, grid_dims_for_budget
from .sequence import SegmentedSequence, assign_positions, text_segment, visual_segment

NUM_COLORS = 4
NUM_DIGITS = 10

# text vocabulary
SYS, EOS, READ = 0, 1, 2
COLOR0 = 3
TENS0 = COLOR0 + NUM_COLORS
UNITS0 = TENS0 + NUM_DIGITS
VOCAB_USED = UNITS0 + NUM_DIGITS
VOCAB_SIZE = 32

# cell codes; ordering matters because pooling ties go to the smallest code
BACKGROUND = 0
FRAME0 = 1
TENS_CODE0 = FRAME0 + NUM_COLORS
UNITS_CODE0 = TENS_CODE0 + NUM_COLORS * NUM_DIGITS
NUM_CODES = UNITS_CODE0 + NUM_COLORS * NUM_DIGITS

BUDGET_LADDER = (1, 4, 16, 64, 256, 1024)


def color_token(color: int) -> int:
    return COLOR0 + color


def tens_token(digit: int) -> int:
    return TENS0 + digit


def units_token(digit: int) -> int:
    return UNITS0 + digit


def frame_code(color: int) -> int:
    return FRAME0 + color


def tens_code(color: int, digit: int) -> int:
    return TENS_CODE0 + color * NUM_DIGITS + digit


def units_code(color: int, digit: int) -> int:
    return UNITS_CODE0 + color * NUM_DIGITS + digit


def token_text(token: int) -> str:
    if token == SYS:
        return "<sys>"
    if token == EOS:
        return "<eos>"
    if token == READ:
        return "read"
    if COLOR0 <= token < TENS0:
        return f"c{token - COLOR0}"
    if TENS0 <= token < UNITS0:
        return str(token - TENS0)
    if UNITS0 <= token < VOCAB_USED:
        return str(token - UNITS0)
    return f"<unk{token}>"


def _is_digit_token(token: int) -> bool:
    return TENS0 <= token < VOCAB_USED


def detokenize(tokens) -> str:
    """Space-separated words; runs of digit tokens fuse into one number."""
    words: list[str] = []
    prev_digit = False
    for t in (int(t) for t in tokens):
        text = token_text(t)
        if _is_digit_token(t) and prev_digit:
            words[-1] += text
        else:
            words.append(text)
        prev_digit = _is_digit_token(t)
    return " ".join(words)


def judge(answer_tokens, scene: "SyntheticScene") -> int:
    """Exact match after whitespace trimming."""
    return int(detokenize(answer_tokens).strip() == scene.answer.strip())


class PatchEncoder:
    """Fixed (untrained) embedding table for cell codes.

    Every code embedding is a sum of shared component vectors, and the same
    components seed the text embeddings of color and digit tokens, so a query
    naming a color is born aligned with the cells painted in it.
    """

    def __init__(self, hidden_dim: int, seed: int = 0, scale: float = 0.5):
        gen = torch.Generator().manual_seed(10_000 + seed)

        def vec(*shape):
            return torch.randn(*shape, hidden_dim, generator=gen, dtype=torch.float64) * scale

        self.hidden_dim = hidden_dim
        self.visual = vec()
        self.background = vec()
        self.frame = vec()
        self.color = vec(NUM_COLORS)
        self.tens_kind = vec()
        self.units_kind = vec()
        self.tens_digit = vec(NUM_DIGITS)
        self.units_digit = vec(NUM_DIGITS)
        table = torch.empty(NUM_CODES, hidden_dim, dtype=torch.float64)
        table[BACKGROUND] = self.visual + self.background
        for c in range(NUM_COLORS):
            table[frame_code(c)] = self.visual + self.color[c] + self.frame
            for v in range(NUM_DIGITS):
                table[tens_code(c, v)] = self.visual + self.color[c] + self.tens_kind + self.tens_digit[v]
                table[units_code(c, v)] = self.visual + self.color[c] + self.units_kind + self.units_digit[v]
        self.table = table

    def text_rows(self) -> dict[int, torch.Tensor]:
        """Initial text embeddings tied to the visual components."""
        rows = {color_token(c): self.color[c].clone() for c in range(NUM_COLORS)}
        for v in range(NUM_DIGITS):
            rows[tens_token(v)] = self.tens_kind + self.tens_digit[v]
            rows[units_token(v)] = self.units_kind + self.units_digit[v]
        return rows

    def __call__(self, codes: np.ndarray) -> torch.Tensor:
        return self.table[torch.as_tensor(np.asarray(codes).reshape(-1), dtype=torch.long)]


@dataclass(frozen=True)
class SceneParams:
    size: int = 16
    critical_budget: int = 256
    distractors: int = 2
    region: int = 8

    def __post_init__(self):
        if self.critical_budget > self.size**2:
            raise ValueError(f"critical budget {self.critical_budget} exceeds {self.size}^2 cells")
        side = math.isqrt(self.critical_budget)
        if side * side != self.critical_budget or self.size % side:
            raise ValueError("critical budget must be a square whose side divides the grid size")
        if self.region % (2 * self.quadrant) or self.region > self.size:
            raise ValueError("region must be a multiple of the pattern period and fit the grid")

    @property
    def quadrant(self) -> int:
        return self.size // math.isqrt(self.critical_budget)


@dataclass
class Region:
    color: int
    box: NormalizedBBox  # inclusive fine-cell coordinates
    digits: tuple[int, int]
    quadrant: int


@dataclass
class SyntheticScene:
    seed: int
    params: SceneParams
    grid: np.ndarray  # (K, K) int64 cell codes
    target: Region
    distractors: list[Region] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.params.size

    @property
    def target_box(self) -> NormalizedBBox:
        return self.target.box

    @property
    def answer(self) -> str:
        return f"c{self.target.color} {self.target.digits[0]}{self.target.digits[1]}"

    @property
    def answer_codes(self) -> tuple[int, int]:
        c = self.target.color
        return tens_code(c, self.target.digits[0]), units_code(c, self.target.digits[1])

    @property
    def critical_budget(self) -> int:
        return self.params.critical_budget

    def query_tokens(self) -> list[int]:
        return [READ, color_token(self.target.color)]

    def answer_tokens(self) -> list[int]:
        return [color_token(self.target.color), tens_token(self.target.digits[0]), units_token(self.target.digits[1])]

    def to_record(self) -> dict:
        def region(r: Region) -> dict:
            return {"color": r.color, "box": list(r.box.as_tuple()), "digits": list(r.digits), "quadrant": r.quadrant}

        return {
            "seed": self.seed,
            "params": asdict(self.params),
            "grid": self.grid.tolist(),
            "target": region(self.target),
            "distractors": [region(r) for r in self.distractors],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyntheticScene":
        def region(r: dict) -> Region:
            return Region(r["color"], NormalizedBBox(*r["box"]), tuple(r["digits"]), r["quadrant"])

        return cls(
            rec["seed"],
            SceneParams(**rec["params"]),
            np.asarray(rec["grid"], dtype=np.int64),
            region(rec["target"]),
            [region(r) for r in rec["distractors"]],
        )


def resample_codes(
    grid: np.ndarray, rect: tuple[float, float, float, float], out_dims: tuple[int, int]
) -> np.ndarray:
    """Pool or sample ``grid`` over ``rect = (r0, c0, r1, c1)`` onto ``out_dims``.

    A source cell votes for the output cell containing its center; each output
    cell takes the majority code of its voters (ties to the smallest code). An
    output cell without voters, which only happens when upsampling, copies the
    source cell under its own center.
    """
    r0, c0, r1, c1 = rect
    oh, ow = out_dims
    sh, sw = (r1 - r0) / oh, (c1 - c0) / ow
    rows = np.arange(max(0, math.floor(r0)), min(grid.shape[0], math.ceil(r1)))
    cols = np.arange(max(0, math.floor(c0)), min(grid.shape[1], math.ceil(c1)))
    orow = np.floor((rows + 0.5 - r0) / sh).astype(np.int64)
    ocol = np.floor((cols + 0.5 - c0) / sw).astype(np.int64)
    rmask = (orow >= 0) & (orow < oh)
    cmask = (ocol >= 0) & (ocol < ow)
    rows, orow = rows[rmask], orow[rmask]
    cols, ocol = cols[cmask], ocol[cmask]
    counts = np.zeros((oh * ow, NUM_CODES), dtype=np.int64)
    cell = (orow[:, None] * ow + ocol[None, :]).reshape(-1)
    codes = grid[np.ix_(rows, cols)].reshape(-1)
    np.add.at(counts, (cell, codes), 1)
    out = counts.argmax(axis=1)
    empty = counts.sum(axis=1) == 0
    if empty.any():
        ci = np.clip(np.floor(r0 + (np.arange(oh) + 0.5) * sh).astype(np.int64), 0, grid.shape[0] - 1)
        cj = np.clip(np.floor(c0 + (np.arange(ow) + 0.5) * sw).astype(np.int64), 0, grid.shape[1] - 1)
        centers = grid[np.ix_(ci, cj)].reshape(-1)
        out[empty] = centers[empty]
    return out.reshape(oh, ow)


def pooled_codes(scene: SyntheticScene, budget: int) -> np.ndarray:
    if budget < 1:
        raise ValueError("budget must be >= 1")
    k = scene.size
    dims = grid_dims_for_budget(budget, 1.0)
    return resample_codes(scene.grid, (0.0, 0.0, float(k), float(k)), dims)


def encode_scene(scene: SyntheticScene, budget: int, encoder: PatchEncoder) -> tuple[torch.Tensor, tuple[int, int]]:
    """Visual tokens for the whole scene under a token budget, plus the grid dims."""
    codes = pooled_codes(scene, budget)
    return encoder(codes), codes.shape


def crop_rect(
    box: NormalizedBBox, source_dims: tuple[int, int], size: int
) -> tuple[float, float, float, float]:
    """Fine-grid rectangle ``(r0, c0, r1, c1)`` covered by inclusive cells of a ``source_dims`` grid."""
    fy, fx = size / source_dims[0], size / source_dims[1]
    r0, r1 = box.y1 * fy, (box.y2 + 1) * fy
    c0, c1 = box.x1 * fx, (box.x2 + 1) * fx
    # never thinner than one fine cell
    if r1 - r0 < 1.0:
        mid = (r0 + r1) / 2
        r0, r1 = max(0.0, mid - 0.5), min(float(size), mid + 0.5)
    if c1 - c0 < 1.0:
        mid = (c0 + c1) / 2
        c0, c1 = max(0.0, mid - 0.5), min(float(size), mid + 0.5)
    return r0, c0, r1, c1


def crop_codes(
    scene: SyntheticScene, box: NormalizedBBox, source_dims: tuple[int, int], budget: int
) -> np.ndarray:
    """Cell codes of the scene inside ``box`` resampled to the largest aspect-true grid within ``budget``."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not box.within(*source_dims):
        raise ValueError(f"box {box.as_tuple()} lies outside the {source_dims} source grid")
    r0, c0, r1, c1 = crop_rect(box, source_dims, scene.size)
    dims = grid_dims_for_budget(budget, (c1 - c0) / (r1 - r0))
    return resample_codes(scene.grid, (r0, c0, r1, c1), dims)


def codes_readable(codes: np.ndarray, scene: SyntheticScene) -> bool:
    present = set(np.asarray(codes).reshape(-1).tolist())
    return all(c in present for c in scene.answer_codes)


def readable_at(scene: SyntheticScene, budget: int) -> bool:
    """Whether both gold digit codes survive pooling to ``budget``."""
    return codes_readable(pooled_codes(scene, budget), scene)


def _paint(grid: np.ndarray, region: Region) -> None:
    q = region.quadrant
    b = region.box
    for r in range(int(b.y1), int(b.y2) + 1):
        for c in range(int(b.x1), int(b.x2) + 1):
            qr, qc = ((r - int(b.y1)) // q) % 2, ((c - int(b.x1)) // q) % 2
            if (qr, qc) == (0, 0):
                grid[r, c] = tens_code(region.color, region.digits[0])
            elif (qr, qc) == (1, 1):
                grid[r, c] = units_code(region.color, region.digits[1])
            else:
                grid[r, c] = frame_code(region.color)


def _overlaps(a: NormalizedBBox, b: NormalizedBBox) -> bool:
    return not (a.x2 < b.x1 or b.x2 < a.x1 or a.y2 < b.y1 or b.y2 < a.y1)


def _place(rng, size: int, side: int, align: int, taken: list[NormalizedBBox]):
    """Uniformly random aligned slot for a ``side``-square that overlaps nothing taken, or None."""
    slots = range(0, size - side + 1, align)
    free = []
    for y in slots:
        for x in slots:
            box = NormalizedBBox(x, y, x + side - 1, y + side - 1)
            if not any(_overlaps(box, t) for t in taken):
                free.append(box)
    if not free:
        return None
    return free[int(rng.integers(len(free)))]


def _ladder_ok(scene: SyntheticScene) -> bool:
    for b in BUDGET_LADDER:
        if b > scene.size**2:
            break
        if readable_at(scene, b) != (b >= scene.critical_budget):
            return False
    return True


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Deterministic scene for ``seed``; regenerates internally until the pooling oracle agrees."""
    rng = np.random.default_rng(seed)
    k = params.size
    possible_quadrants = [k // math.isqrt(b) for b in BUDGET_LADDER if b <= k * k and (k // math.isqrt(b)) >= 1]
    while True:
        colors = rng.permutation(NUM_COLORS)
        digits = (int(rng.integers(NUM_DIGITS)), int(rng.integers(NUM_DIGITS)))
        q = params.quadrant
        box = _place(rng, k, params.region, max(2, q), [])
        target = Region(int(colors[0]), box, digits, q)
        taken = [box]
        distractors = []
        for i in range(min(params.distractors, NUM_COLORS - 1)):
            dq = int(rng.choice([x for x in possible_quadrants if 2 * x <= params.region]))
            sides = [s for s in range(params.region, 0, -2 * dq) if s >= 2 * dq]
            start = int(rng.integers(len(sides)))
            dbox = None
            for side in sides[start:]:
                dbox = _place(rng, k, side, max(2, dq), taken)
                if dbox is not None:
                    break
            if dbox is None:
                continue
            ddig = (
                int((digits[0] + 1 + rng.integers(NUM_DIGITS - 1)) % NUM_DIGITS),
                int((digits[1] + 1 + rng.integers(NUM_DIGITS - 1)) % NUM_DIGITS),
            )
            distractors.append(Region(int(colors[1 + i]), dbox, ddig, dq))
            taken.append(dbox)
        grid = np.zeros((k, k), dtype=np.int64)
        for region in [target, *distractors]:
            _paint(grid, region)
        scene = SyntheticScene(seed, params, grid, target, distractors)
        if _ladder_ok(scene):
            return scene


def build_sequence(
    scene: SyntheticScene,
    encoder: PatchEncoder,
    budget: int,
    with_response: bool = False,
    roi: tuple[torch.Tensor, tuple[int, int], NormalizedBBox] | None = None,
) -> SegmentedSequence:
    """``[system, visual, (roi_visual), user, (response)]`` with positions assigned."""
    tokens, dims = encode_scene(scene, budget, encoder)
    segs = [text_segment("system", [SYS]), visual_segment(tokens, dims)]
    box = None
    if roi is not None:
        roi_tokens, roi_dims, box = roi
        segs.append(visual_segment(roi_tokens, roi_dims, kind="roi_visual"))
    segs.append(text_segment("user", scene.query_tokens()))
    if with_response:
        segs.append(text_segment("response", scene.answer_tokens()))
    return assign_positions(SegmentedSequence(tuple(segs)), roi_box=box)
