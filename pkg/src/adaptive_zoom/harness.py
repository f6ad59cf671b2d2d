"""Desk-scale world and evaluation rig: pre-training, dataset building, branch training, bench."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .checkpoint import load_checkpoint, prefixed, save_checkpoint, unprefixed
from .config import ModelConfig, RunConfig
from .gate_labels import GateSample, consistency_filter, emit_gate_samples, evaluate_trajectory, write_gate_samples
from .geometry import NormalizedBBox, box_iou, grid_dims_for_budget
from .pipeline import AdaptivePipeline, BudgetConfig, InferenceTrace
from .pseudo_labels import (
    AllZeroAttention,
    SinkFilterConfig,
    TriStateMap,
    assign_tristate,
    filter_sinks,
    mine_attention,
    pool_map,
    select_mining_layer,
    write_labels,
)
from .router import GateBranch
from .rpn import NoForeground, RpnBranch, binarize, extract_bbox, predict_heatmap, rpn_forward
from .scenes import (
    EOS,
    VOCAB_SIZE,
    PatchEncoder,
    SceneParams,
    SyntheticScene,
    build_sequence,
    codes_readable,
    crop_codes,
    gen_scene,
    judge,
)
from .training import BranchTrainer, TrainConfig, collate_taps, gate_loss, lr_at, rpn_loss
from .transformer import DTYPE, Backbone, HiddenStates

log = logging.getLogger(__name__)

CRITICAL_LADDER = (16, 64, 256)
PRETRAIN_SEED_BASE = 50_000_000
CORPUS_SEED_BASE = 1_000


# -- world --------------------------------------------------------------------


def scene_for_seed(seed: int, size: int = 16, distractors: int = 2) -> SyntheticScene:
    """Scene whose difficulty cycles through the critical-budget ladder with the seed."""
    return gen_scene(seed, SceneParams(size, CRITICAL_LADDER[seed % len(CRITICAL_LADDER)], distractors))


@dataclass(frozen=True)
class Corpus:
    train: tuple[int, ...]
    held_out: tuple[int, ...]

    @classmethod
    def split(cls, count: int, base_seed: int = CORPUS_SEED_BASE, train_fraction: float = 0.8) -> "Corpus":
        """Seeds ``base .. base+count-1``; the first 80% train, the rest are held out."""
        if count < 2:
            raise ValueError("corpus needs at least two scenes")
        cut = int(round(count * train_fraction))
        seeds = range(base_seed, base_seed + count)
        return cls(tuple(seeds[:cut]), tuple(seeds[cut:]))


def init_backbone(model_cfg: ModelConfig, encoder: PatchEncoder, seed: int = 0) -> Backbone:
    """Fresh backbone whose color and digit embeddings start tied to the patch encoder."""
    model = Backbone(model_cfg, seed=seed, eos_id=EOS)
    with torch.no_grad():
        for token, row in encoder.text_rows().items():
            model.tok_emb[token] = row
    return model


# -- scripted backbone pre-training --------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 16
    peak_lr: float = 2e-3
    # batch kind -> probability; "roi" batches carry a coarse view plus a jittered crop
    mix: tuple[tuple[object, float], ...] = (("roi", 0.35), (16, 0.15), (64, 0.30), (256, 0.20))
    coarse_budget: int = 64
    roi_budget: int = 64


def _teacher_forced(seq, model: Backbone):
    """Inputs plus next-token targets over the answer and the closing EOS."""
    resp = seq.spans_of("response")[0]
    targets = list(seq.segments[-1].tokens) + [EOS]
    return model.embed(seq), seq.positions, resp.start - 1, targets


def _pretrain_sequence(seed: int, kind, rng, encoder: PatchEncoder, cfg: PretrainConfig):
    """A readable training sequence of the requested kind, searching seeds deterministically."""
    while True:
        scene = scene_for_seed(seed)
        seed += 7919
        if kind == "roi":
            dims = grid_dims_for_budget(cfg.coarse_budget, 1.0)
            gt = scene.target_box.scaled_to((scene.size, scene.size), dims)
            j = rng.integers(-1, 2, size=4)
            box = NormalizedBBox(
                max(0, gt.x1 + j[0]), max(0, gt.y1 + j[1]), min(dims[1] - 1, gt.x2 + j[2]), min(dims[0] - 1, gt.y2 + j[3])
            )
            codes = crop_codes(scene, box, dims, cfg.roi_budget)
            if not codes_readable(codes, scene):
                continue
            return build_sequence(scene, encoder, cfg.coarse_budget, True, (encoder(codes), codes.shape, box))
        if scene.critical_budget <= kind:
            return build_sequence(scene, encoder, kind, with_response=True)


def pretrain_backbone(
    model: Backbone, encoder: PatchEncoder, cfg: PretrainConfig, seed: int = 0, log_path=None
) -> list[float]:
    """Next-token training on 'read the <color> number' over readable scenes (all weights train)."""
    rng = np.random.default_rng(seed)
    train_cfg = TrainConfig(peak_lr=cfg.peak_lr, batch_size=cfg.batch_size)
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, betas=train_cfg.betas, weight_decay=0.0)
    kinds = [k for k, _ in cfg.mix]
    probs = np.array([p for _, p in cfg.mix], dtype=np.float64)
    probs /= probs.sum()
    next_seed = PRETRAIN_SEED_BASE + seed * 1_000_000
    losses = []
    writer = None
    if log_path:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(("step", "lr", "loss"))
    for step in range(cfg.steps):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        items = []
        for _ in range(cfg.batch_size):
            items.append(_teacher_forced(_pretrain_sequence(next_seed, kind, rng, encoder, cfg), model))
            next_seed += 1
        n = max(x.shape[0] for x, _, _, _ in items)
        x = torch.zeros(len(items), n, model.cfg.hidden_dim, dtype=DTYPE)
        pos = torch.zeros(len(items), n, 3, dtype=DTYPE)
        tgt = torch.full((len(items), n), -100, dtype=torch.long)
        for i, (xi, pi, first, targets) in enumerate(items):
            x[i, : xi.shape[0]] = xi
            pos[i, : xi.shape[0]] = pi
            tgt[i, first : first + len(targets)] = torch.tensor(targets)
        lr = lr_at(step, cfg.steps, train_cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        logits = model.logits(model.forward_batch(x, pos))
        loss = F.cross_entropy(logits.view(-1, VOCAB_SIZE), tgt.view(-1), ignore_index=-100)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        losses.append(loss.item())
        if writer:
            writer.writerow((step, lr, losses[-1]))
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    if writer:
        fh.close()
    for p in model.parameters():
        p.grad = None
    return losses


# -- datasets -------------------------------------------------------------------


@dataclass
class DatasetBundle:
    rpn_labels: list[tuple[int, TriStateMap]]
    gate_samples: list[GateSample]
    mining_layer: int
    skipped_all_zero: int = 0
    trajectories: int = 0
    accepted: int = 0

    @property
    def accepted_fraction(self) -> float:
        return self.accepted / self.trajectories if self.trajectories else 0.0

    @property
    def label_balance(self) -> float:
        return float(np.mean([s.label for s in self.gate_samples])) if self.gate_samples else float("nan")


def rpn_label_for(
    model: Backbone, encoder: PatchEncoder, scene: SyntheticScene, run_cfg: RunConfig, layer: int, mining_budget: int
) -> TriStateMap:
    """Mine, filter sinks, pool onto the coarse grid and assign tri-state labels."""
    seq = build_sequence(scene, encoder, mining_budget, with_response=True)
    raw = filter_sinks(mine_attention(model, seq, layer), cfg=SinkFilterConfig(run_cfg.sink_percentile))
    coarse = grid_dims_for_budget(run_cfg.coarse_budget, 1.0)
    return assign_tristate(pool_map(raw.grid, coarse), run_cfg.tau_fg, run_cfg.tau_bg)


def resolve_mining_layer(model: Backbone, encoder: PatchEncoder, scenes, run_cfg: RunConfig, mining_budget: int) -> int:
    """Configured layer, or with ``mining_layer = 0`` the most attention-concentrated layer."""
    if run_cfg.mining_layer:
        return run_cfg.mining_layer
    probe = [build_sequence(s, encoder, mining_budget, with_response=True) for s in scenes[:24]]
    return select_mining_layer(model, probe)


def gate_samples_for(
    pipeline: AdaptivePipeline, scenes: Sequence[SyntheticScene], run_cfg: RunConfig, draws: int, seed: int
) -> tuple[list[GateSample], int, int]:
    """Trajectory evaluation, consistency filtering and label emission over ``scenes``."""
    samples, total, accepted = [], 0, 0
    for scene in scenes:
        traj = evaluate_trajectory(lambda s, r: pipeline.baseline(s, r)[0], scene, run_cfg.gate_trajectory, judge)
        total += 1
        if consistency_filter(traj):
            accepted += 1
            samples.extend(emit_gate_samples(traj, draws, seed * 1_000_003 + scene.seed, scene.seed, 0))
    return samples, total, accepted


def build_datasets(
    scenes: Sequence[SyntheticScene],
    model: Backbone,
    encoder: PatchEncoder,
    run_cfg: RunConfig,
    mining_budget: int = 256,
    draws: int = 2,
    seed: int = 0,
) -> DatasetBundle:
    layer = resolve_mining_layer(model, encoder, list(scenes), run_cfg, mining_budget)
    labels, skipped = [], 0
    for scene in scenes:
        try:
            labels.append((scene.seed, rpn_label_for(model, encoder, scene, run_cfg, layer, mining_budget)))
        except AllZeroAttention:
            skipped += 1
    pipeline = AdaptivePipeline(model, encoder)
    gate, total, accepted = gate_samples_for(pipeline, scenes, run_cfg, draws, seed)
    return DatasetBundle(labels, gate, layer, skipped, total, accepted)


# -- branch training --------------------------------------------------------------


def coarse_tap(model: Backbone, encoder: PatchEncoder, scene: SyntheticScene, budget: int) -> HiddenStates:
    return model.prefill(build_sequence(scene, encoder, budget)).tap


def _epochs(n: int, cfg: TrainConfig, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            yield order[i : i + cfg.batch_size]


def _total_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.epochs * math.ceil(n / cfg.batch_size)


def train_rpn(
    rpn: RpnBranch,
    model: Backbone,
    taps: Sequence[HiddenStates],
    labels: Sequence[np.ndarray],
    cfg: TrainConfig,
    seed: int = 0,
    log_path=None,
) -> BranchTrainer:
    trainer = BranchTrainer(rpn, model, cfg, _total_steps(len(taps), cfg), log_path)
    for idx in _epochs(len(taps), cfg, seed):
        batch = collate_taps([taps[i] for i in idx])
        trainer.step(lambda: rpn_loss(rpn, batch, [labels[i] for i in idx]))
    return trainer


def train_gate(
    gate: GateBranch,
    model: Backbone,
    taps: Sequence[HiddenStates],
    labels: Sequence[int],
    cfg: TrainConfig,
    seed: int = 0,
    log_path=None,
) -> BranchTrainer:
    trainer = BranchTrainer(gate, model, cfg, _total_steps(len(taps), cfg), log_path)
    for idx in _epochs(len(taps), cfg, seed):
        batch = collate_taps([taps[i] for i in idx])
        trainer.step(lambda: gate_loss(gate, batch, [labels[i] for i in idx]))
    return trainer


def gate_taps(model: Backbone, encoder: PatchEncoder, samples: Sequence[GateSample], scenes: dict) -> list[HiddenStates]:
    return [coarse_tap(model, encoder, scenes[s.scene_id], s.resolution) for s in samples]


# -- evaluation ---------------------------------------------------------------------


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = int((labels == 1).sum()), int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - pos * (pos + 1) / 2) / (pos * neg))


def predicted_box(pipeline: AdaptivePipeline, scene: SyntheticScene, budgets: BudgetConfig) -> NormalizedBBox | None:
    """RPN box on the coarse grid, or None when nothing clears the threshold."""
    seq = build_sequence(scene, pipeline.encoder, budgets.coarse_budget)
    tap = pipeline.backbone.prefill(seq).tap
    states = rpn_forward(pipeline.rpn, tap)
    heat = predict_heatmap(pipeline.rpn, states, seq.terminal_index(), seq.spans_of("visual")[0])
    try:
        return extract_bbox(binarize(heat, budgets.tau_roi, pipeline.gaussian_kernel, pipeline.gaussian_sigma))
    except NoForeground:
        return None


def localization_ious(pipeline: AdaptivePipeline, scenes: Sequence[SyntheticScene], budgets: BudgetConfig) -> list[float]:
    """IoU between the RPN box (mapped to fine cells) and the true region; 0 when no box."""
    coarse = grid_dims_for_budget(budgets.coarse_budget, 1.0)
    out = []
    for scene in scenes:
        box = predicted_box(pipeline, scene, budgets)
        fine = (scene.size, scene.size)
        out.append(0.0 if box is None else box_iou(box.scaled_to(coarse, fine), scene.target_box))
    return out


def oracle_box(scene: SyntheticScene, budgets: BudgetConfig) -> NormalizedBBox:
    coarse = grid_dims_for_budget(budgets.coarse_budget, 1.0)
    return scene.target_box.scaled_to((scene.size, scene.size), coarse)


def gate_scores(pipeline: AdaptivePipeline, samples: Sequence[GateSample], scenes: dict) -> list[float]:
    from .router import gate_forward

    out = []
    for s in samples:
        seq = build_sequence(scenes[s.scene_id], pipeline.encoder, s.resolution)
        tap = pipeline.backbone.prefill(seq).tap
        out.append(gate_forward(pipeline.gate, tap, seq.terminal_index()))
    return out


def mine_hard_samples(
    scenes: Sequence[SyntheticScene],
    base: Callable[[SyntheticScene], Sequence[int]],
    roi: Callable[[SyntheticScene], Sequence[int]],
) -> list[int]:
    """Seeds where the base pipeline answers correctly and the RoI pipeline does not."""
    return [s.seed for s in scenes if judge(base(s), s) == 1 and judge(roi(s), s) == 0]


# -- bench ----------------------------------------------------------------------------

BENCH_HEADER = ("budget", "tau_gate", "accuracy", "mean_tokens", "mean_compute", "refine_ratio", "wall_ms")


@dataclass
class BenchRow:
    budget: int
    tau_gate: float | None  # None marks a plain baseline row
    accuracy: float
    mean_tokens: float
    mean_compute: float
    refine_ratio: float
    wall_ms: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or not 0.0 <= self.refine_ratio <= 1.0:
            raise ValueError("accuracy and refine ratio must lie in [0, 1]")

    @property
    def is_baseline(self) -> bool:
        return self.tau_gate is None

    def as_csv(self) -> list[str]:
        tau = "baseline" if self.tau_gate is None else repr(self.tau_gate)
        return [
            str(self.budget),
            tau,
            f"{self.accuracy:.6f}",
            f"{self.mean_tokens:.6f}",
            f"{self.mean_compute:.6f}",
            f"{self.refine_ratio:.6f}",
            f"{self.wall_ms:.3f}",
        ]


def _row(budget: int, tau, scenes, traces: list[InferenceTrace]) -> BenchRow:
    return BenchRow(
        budget,
        tau,
        float(np.mean([judge(t.answer, s) for t, s in zip(traces, scenes)])),
        float(np.mean([t.visual_tokens for t in traces])),
        float(np.mean([t.compute_units for t in traces])),
        float(np.mean([t.refined for t in traces])),
        float(np.mean([t.wall_ms for t in traces])),
    )


def bench(
    pipeline: AdaptivePipeline,
    scenes: Sequence[SyntheticScene],
    budgets: Sequence[int],
    taus: Sequence[float],
    roi_budget: int = 64,
    tau_roi: float = 0.5,
    baseline_budgets: Sequence[int] | None = None,
) -> list[BenchRow]:
    """One adaptive row per (coarse budget, tau_gate) and one plain baseline row per budget."""
    if not scenes:
        raise ValueError("bench needs a non-empty dataset")
    if not budgets or not taus:
        raise ValueError("sweep lists must be non-empty")
    rows = []
    for budget in budgets:
        for tau in taus:
            cfg = BudgetConfig(budget, roi_budget, tau, tau_roi)
            traces = [pipeline.run_adaptive(s, cfg)[1] for s in scenes]
            rows.append(_row(budget, float(tau), scenes, traces))
    for budget in baseline_budgets if baseline_budgets is not None else budgets:
        traces = [pipeline.baseline(s, budget)[1] for s in scenes]
        rows.append(_row(budget, None, scenes, traces))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())


def read_bench_csv(path: str | Path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BENCH_HEADER:
            raise ValueError(f"unexpected bench header {reader.fieldnames}")
        return [
            BenchRow(
                int(r["budget"]),
                None if r["tau_gate"] == "baseline" else float(r["tau_gate"]),
                float(r["accuracy"]),
                float(r["mean_tokens"]),
                float(r["mean_compute"]),
                float(r["refine_ratio"]),
                float(r["wall_ms"]),
            )
            for r in reader
        ]


def plot_pareto(rows: Sequence[BenchRow], path: str | Path) -> None:
    """Accuracy against mean visual tokens, one curve per coarse budget plus the baseline curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    base = sorted((r for r in rows if r.is_baseline), key=lambda r: r.mean_tokens)
    if base:
        ax.plot([r.mean_tokens for r in base], [r.accuracy for r in base], "s--", color="0.4", label="baseline")
        for r in base:
            ax.annotate(str(r.budget), (r.mean_tokens, r.accuracy), fontsize=7, xytext=(3, -8), textcoords="offset points")
    for budget in sorted({r.budget for r in rows if not r.is_baseline}):
        pts = sorted((r for r in rows if not r.is_baseline and r.budget == budget), key=lambda r: r.mean_tokens)
        ax.plot([r.mean_tokens for r in pts], [r.accuracy for r in pts], "o-", label=f"adaptive, coarse {budget}")
    ax.set_xlabel("mean visual tokens")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# -- persistence ------------------------------------------------------------------------


def save_system(path, model: Backbone, encoder_seed: int, gate: GateBranch | None = None, rpn: RpnBranch | None = None, meta=None):
    tensors = prefixed("backbone", model)
    if gate is not None:
        tensors.update(prefixed("gate", gate))
    if rpn is not None:
        tensors.update(prefixed("rpn", rpn))
    save_checkpoint(path, tensors, model.cfg.to_dict(), {"encoder_seed": encoder_seed, **(meta or {})})


def load_system(path) -> tuple[Backbone, PatchEncoder, GateBranch | None, RpnBranch | None, dict]:
    tensors, config, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config)
    encoder = PatchEncoder(cfg.hidden_dim, seed=meta.get("encoder_seed", 0))
    model = Backbone(cfg, eos_id=EOS)
    model.load_state_dict(unprefixed("backbone", tensors))
    gate = rpn = None
    if any(k.startswith("gate.") for k in tensors):
        gate = GateBranch(model)
        gate.load_state_dict(unprefixed("gate", tensors))
    if any(k.startswith("rpn.") for k in tensors):
        rpn = RpnBranch(model)
        rpn.load_state_dict(unprefixed("rpn", tensors))
    return model, encoder, gate, rpn, meta


# -- the scripted end-to-end run ------------------------------------------------------------


@dataclass
class HeadlineConfig:
    corpus_size: int = 1000
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rpn_train: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=1e-3, batch_size=16, epochs=4))
    gate_train: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=1e-3, batch_size=16, epochs=4))
    mining_budget: int = 256
    fine_budget: int = 256
    gate_draws: int = 2
    eval_scenes: int = 200


@dataclass
class HeadlineResult:
    ious: list[float]
    gate_auc: float
    adaptive: BenchRow
    always_refine: BenchRow
    fine: BenchRow
    coarse: BenchRow
    oracle_accuracy: float
    easy_refine_ratio: float
    bundle: DatasetBundle
    seconds: dict[str, float]

    @property
    def iou_pass_fraction(self) -> float:
        return float(np.mean(np.asarray(self.ious) >= 0.5))


def run_headline(
    out_dir: str | Path,
    seed: int = 0,
    cfg: HeadlineConfig = HeadlineConfig(),
    run_cfg: RunConfig = RunConfig(),
    model_cfg: ModelConfig = ModelConfig(),
) -> HeadlineResult:
    """Pre-train, build both datasets, train both branches, evaluate and bench on held-out scenes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clock = {}
    t0 = time.perf_counter()
    encoder = PatchEncoder(model_cfg.hidden_dim, seed=seed)
    model = init_backbone(model_cfg, encoder, seed=seed)
    pretrain_backbone(model, encoder, cfg.pretrain, seed=seed, log_path=out / "pretrain_log.csv")
    model.requires_grad_(False)
    clock["pretrain"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    corpus = Corpus.split(cfg.corpus_size)
    train_scenes = [scene_for_seed(s) for s in corpus.train]
    held = [scene_for_seed(s) for s in corpus.held_out]
    bundle = build_datasets(train_scenes, model, encoder, run_cfg, cfg.mining_budget, cfg.gate_draws, seed)
    write_labels([(str(sid), tri) for sid, tri in bundle.rpn_labels], out / "rpn_labels.txt")
    write_gate_samples(bundle.gate_samples, out / "gate_samples.csv")
    clock["datasets"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    by_seed = {s.seed: s for s in train_scenes}
    budgets = BudgetConfig.from_run_config(run_cfg)
    rpn = RpnBranch(model)
    taps = [coarse_tap(model, encoder, by_seed[sid], budgets.coarse_budget) for sid, _ in bundle.rpn_labels]
    train_rpn(rpn, model, taps, [t.grid for _, t in bundle.rpn_labels], cfg.rpn_train, seed, out / "rpn_log.csv")
    gate = GateBranch(model)
    gtaps = gate_taps(model, encoder, bundle.gate_samples, by_seed)
    train_gate(gate, model, gtaps, [s.label for s in bundle.gate_samples], cfg.gate_train, seed, out / "gate_log.csv")
    save_system(out / "system.bin", model, seed, gate, rpn, {"mining_layer": bundle.mining_layer})
    clock["branches"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pipeline = AdaptivePipeline(model, encoder, gate, rpn, run_cfg.gaussian_kernel, run_cfg.gaussian_sigma)
    evaluation = held[: cfg.eval_scenes]
    ious = localization_ious(pipeline, evaluation, budgets)
    held_gate, _, _ = gate_samples_for(pipeline, held, run_cfg, cfg.gate_draws, seed + 1)
    held_by_seed = {s.seed: s for s in held}
    g_auc = auc(gate_scores(pipeline, held_gate, held_by_seed), [s.label for s in held_gate])
    rows = bench(pipeline, evaluation, [budgets.coarse_budget], [budgets.tau_gate, 0.0], budgets.roi_budget,
                 budgets.tau_roi, baseline_budgets=[budgets.coarse_budget, cfg.fine_budget])
    write_bench_csv(rows, out / "bench.csv")
    plot_pareto(rows, out / "pareto.svg")
    adaptive = next(r for r in rows if r.tau_gate == budgets.tau_gate)
    always = next(r for r in rows if r.tau_gate == 0.0)
    fine = next(r for r in rows if r.is_baseline and r.budget == cfg.fine_budget)
    coarse = next(r for r in rows if r.is_baseline and r.budget == budgets.coarse_budget)
    hard = [s for s in evaluation if s.critical_budget > budgets.coarse_budget]
    oracle_acc = float(np.mean([judge(pipeline.run_adaptive(s, budgets, oracle_box(s, budgets))[0], s) for s in hard]))
    easy = [s for s in evaluation if s.critical_budget <= CRITICAL_LADDER[0]]
    easy_ratio = float(np.mean([pipeline.run_adaptive(s, budgets)[1].refined for s in easy])) if easy else 0.0
    clock["evaluate"] = time.perf_counter() - t0
    return HeadlineResult(ious, g_auc, adaptive, always, fine, coarse, oracle_acc, easy_ratio, bundle, clock)
