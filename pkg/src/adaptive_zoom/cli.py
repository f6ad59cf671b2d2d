"""Command-line entry point: ``adaptive-zoom <subcommand> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import ModelConfig, RunConfig
from .gate_labels import read_gate_samples, write_gate_samples
from .pipeline import AdaptivePipeline, BudgetConfig
from .pseudo_labels import read_labels, write_labels
from .router import GateBranch
from .rpn import RpnBranch
from .scenes import SyntheticScene, detokenize, judge
from .training import TrainConfig

log = logging.getLogger("adaptive_zoom")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenes(args, which: str) -> list[SyntheticScene]:
    corpus = harness.Corpus.split(args.corpus)
    return [harness.scene_for_seed(s) for s in getattr(corpus, which)]


def _checkpoint(args, out: Path, name: str) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / name


def cmd_gen_scenes(args) -> int:
    out = _out(args)
    corpus = harness.Corpus.split(args.corpus)
    for name, seeds in (("train", corpus.train), ("held_out", corpus.held_out)):
        with open(out / f"scenes_{name}.jsonl", "w") as fh:
            for seed in seeds:
                fh.write(json.dumps(harness.scene_for_seed(seed).to_record()) + "\n")
    print(f"wrote {len(corpus.train)} train and {len(corpus.held_out)} held-out scenes to {out}")
    return 0


def cmd_pretrain(args) -> int:
    out = _out(args)
    model_cfg = ModelConfig()
    encoder = harness.PatchEncoder(model_cfg.hidden_dim, seed=args.seed)
    model = harness.init_backbone(model_cfg, encoder, seed=args.seed)
    losses = harness.pretrain_backbone(
        model, encoder, harness.PretrainConfig(steps=args.steps), seed=args.seed, log_path=out / "pretrain_log.csv"
    )
    harness.save_system(out / "backbone.bin", model, args.seed)
    print(f"final loss {losses[-1]:.5f}; wrote {out / 'backbone.bin'}")
    return 0


def cmd_build_datasets(args) -> int:
    out = _out(args)
    run_cfg = _run_config(args)
    model, encoder, _, _, _ = harness.load_system(_checkpoint(args, out, "backbone.bin"))
    bundle = harness.build_datasets(_scenes(args, "train"), model, encoder, run_cfg, draws=args.draws, seed=args.seed)
    write_labels([(str(sid), tri) for sid, tri in bundle.rpn_labels], out / "rpn_labels.txt")
    write_gate_samples(bundle.gate_samples, out / "gate_samples.csv")
    stats = {
        "mining_layer": bundle.mining_layer,
        "rpn_labels": len(bundle.rpn_labels),
        "skipped_all_zero": bundle.skipped_all_zero,
        "trajectories": bundle.trajectories,
        "accepted_fraction": bundle.accepted_fraction,
        "gate_samples": len(bundle.gate_samples),
        "label_balance": bundle.label_balance,
    }
    (out / "dataset_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    for k, v in stats.items():
        print(f"{k} = {v}")
    return 0


def _train_cfg(args, run_cfg: RunConfig) -> TrainConfig:
    lr = args.lr if args.lr is not None else run_cfg.peak_lr
    return TrainConfig(peak_lr=lr, batch_size=run_cfg.batch_size, epochs=args.epochs)


def cmd_train_rpn(args) -> int:
    out = _out(args)
    run_cfg = _run_config(args)
    model, encoder, gate, _, meta = harness.load_system(_checkpoint(args, out, "backbone.bin"))
    labels = read_labels(args.labels or out / "rpn_labels.txt")
    taps = [harness.coarse_tap(model, encoder, harness.scene_for_seed(int(sid)), run_cfg.coarse_budget) for sid, _ in labels]
    rpn = RpnBranch(model)
    trainer = harness.train_rpn(rpn, model, taps, [t.grid for _, t in labels], _train_cfg(args, run_cfg), args.seed, out / "rpn_log.csv")
    harness.save_system(out / "system.bin", model, meta.get("encoder_seed", 0), gate, rpn, meta)
    print(f"trained rpn for {trainer.step_index} steps; wrote {out / 'system.bin'}")
    return 0


def cmd_train_gate(args) -> int:
    out = _out(args)
    run_cfg = _run_config(args)
    model, encoder, _, rpn, meta = harness.load_system(_checkpoint(args, out, "system.bin"))
    samples = read_gate_samples(args.samples or out / "gate_samples.csv")
    scenes = {s.scene_id: harness.scene_for_seed(s.scene_id) for s in samples}
    taps = harness.gate_taps(model, encoder, samples, scenes)
    gate = GateBranch(model)
    trainer = harness.train_gate(gate, model, taps, [s.label for s in samples], _train_cfg(args, run_cfg), args.seed, out / "gate_log.csv")
    harness.save_system(out / "system.bin", model, meta.get("encoder_seed", 0), gate, rpn, meta)
    print(f"trained gate for {trainer.step_index} steps; wrote {out / 'system.bin'}")
    return 0


def _pipeline(args, out: Path, run_cfg: RunConfig) -> AdaptivePipeline:
    model, encoder, gate, rpn, _ = harness.load_system(_checkpoint(args, out, "system.bin"))
    if gate is None or rpn is None:
        raise SystemExit("checkpoint lacks trained gate and rpn branches")
    return AdaptivePipeline(model, encoder, gate, rpn, run_cfg.gaussian_kernel, run_cfg.gaussian_sigma)


def cmd_infer(args) -> int:
    out = _out(args)
    run_cfg = _run_config(args)
    pipeline = _pipeline(args, out, run_cfg)
    scene = harness.scene_for_seed(args.scene)
    answer, trace = pipeline.run_adaptive(scene, BudgetConfig.from_run_config(run_cfg))
    print(trace.dumps(), end="")
    print(f"answer_text = {detokenize(answer)}")
    print(f"gold = {scene.answer}")
    print(f"correct = {judge(answer, scene)}")
    return 0


def cmd_mine_hard(args) -> int:
    out = _out(args)
    run_cfg = _run_config(args)
    pipeline = _pipeline(args, out, run_cfg)
    budgets = BudgetConfig.from_run_config(run_cfg)
    scenes = _scenes(args, "held_out")
    hard = harness.mine_hard_samples(
        scenes,
        lambda s: pipeline.baseline(s, budgets.coarse_budget)[0],
        lambda s: pipeline.run_adaptive(s, budgets)[0],
    )
    (out / "hard_samples.txt").write_text("".join(f"{h}\n" for h in hard))
    print(f"{len(hard)} hard samples out of {len(scenes)}")
    return 0


def cmd_bench(args) -> int:
    out = _out(args)
    run_cfg = _run_config(args)
    pipeline = _pipeline(args, out, run_cfg)
    scenes = _scenes(args, "held_out")[: args.limit]
    rows = harness.bench(
        pipeline, scenes, _ints(args.budgets), _floats(args.taus), run_cfg.roi_budget, run_cfg.tau_roi,
        baseline_budgets=_ints(args.baseline_budgets) if args.baseline_budgets else None,
    )
    harness.write_bench_csv(rows, out / "bench.csv")
    print((out / "bench.csv").read_text(), end="")
    return 0


def cmd_plot(args) -> int:
    out = _out(args)
    src = Path(args.bench) if args.bench else out / "bench.csv"
    harness.plot_pareto(harness.read_bench_csv(src), out / "pareto.svg")
    print(f"wrote {out / 'pareto.svg'}")
    return 0


def cmd_headline(args) -> int:
    out = _out(args)
    result = harness.run_headline(out, args.seed, run_cfg=_run_config(args))
    print(f"iou>=0.5 fraction = {result.iou_pass_fraction:.3f}")
    print(f"gate auc = {result.gate_auc:.3f}")
    print(f"adaptive accuracy = {result.adaptive.accuracy:.3f} tokens = {result.adaptive.mean_tokens:.1f}")
    print(f"fine accuracy = {result.fine.accuracy:.3f} tokens = {result.fine.mean_tokens:.1f}")
    print(f"seconds = {json.dumps({k: round(v, 1) for k, v in result.seconds.items()})}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value run configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--corpus", type=int, default=1000, help="scenes in the seed corpus")

    parser = argparse.ArgumentParser(prog="adaptive-zoom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(fn=fn)
        return p

    add("gen-scenes", cmd_gen_scenes, "write the train and held-out scene corpus as JSON lines")
    p = add("pretrain-backbone", cmd_pretrain, "scripted read-the-marker pre-training")
    p.add_argument("--steps", type=int, default=1500)
    p = add("build-datasets", cmd_build_datasets, "mine RPN labels and gate samples")
    p.add_argument("--checkpoint")
    p.add_argument("--draws", type=int, default=2)
    for name, fn, file_flag in (("train-rpn", cmd_train_rpn, "--labels"), ("train-gate", cmd_train_gate, "--samples")):
        p = add(name, fn, f"train the {name.split('-')[1]} branch on a frozen backbone")
        p.add_argument("--checkpoint")
        p.add_argument(file_flag)
        p.add_argument("--epochs", type=int, default=4)
        p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate (overrides peak_lr)")
    p = add("infer", cmd_infer, "run the adaptive pipeline on one scene and print its trace")
    p.add_argument("--checkpoint")
    p.add_argument("--scene", type=int, required=True, help="scene seed")
    p = add("mine-hard", cmd_mine_hard, "list scenes the baseline answers but the RoI pipeline misses")
    p.add_argument("--checkpoint")
    p = add("bench", cmd_bench, "sweep budgets and gate thresholds on held-out scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--budgets", default="16,64")
    p.add_argument("--taus", default="0.0,0.5,1.0")
    p.add_argument("--baseline-budgets", default="16,64,256")
    p.add_argument("--limit", type=int, default=200)
    p = add("plot", cmd_plot, "render bench.csv as an SVG Pareto plot")
    p.add_argument("--bench")
    add("headline", cmd_headline, "the full scripted run: pre-train, datasets, branches, bench")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
