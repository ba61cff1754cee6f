"""Command-line entry point: ``cathtrack <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import selftest
from .ablation import ABLATION_ROWS, ablate, held_out_set, row_label, track_and_score, write_ablation_csv
from .data import make_dataset
from .flow import FlowConfig
from .localizer import LocalizerConfig
from .metrics import EvalConfig, format_table, write_metrics
from .model import TrackerConfig, TrackerModel
from .plots import plot_loss_curve, plot_percentiles
from .seqio import load_sequence, save_sequence
from .synth import SCENARIOS, generate_sequence
from .tracker import Tracker, write_overlay, write_predictions_csv
from .train import (
    FlowTrainConfig, TrainConfig, desk_localizer_config, desk_train_config, evaluate_flow, flow_eval_pairs,
    full_localizer_config, load_flow, row_checkpoint_name, save_flow, tiny_flow_config, train_ablation_rows,
    train_end2end, train_flow, write_curve,
)

log = logging.getLogger("cathtrack")


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise SystemExit(f"{path}: config must be a JSON object")
    return cfg


def _scenarios(name: str):
    return SCENARIOS if name == "all" else (name,)


def _done(paths) -> None:
    for p in paths:
        print(p)


# -- subcommands ------------------------------------------------------------------------------

def cmd_generate(args, cfg) -> list:
    out = Path(args.out_dir)
    scen = _scenarios(args.scenario)
    paths = []
    for i in range(args.n_sequences):
        sc = scen[i % len(scen)]
        rec = generate_sequence(args.seed * 100003 + i, args.n_frames, sc, size=args.size)
        paths.append(save_sequence(rec, out / f"{sc}_{i:03d}"))
    return paths


def cmd_train_flow(args, cfg) -> list:
    fc = FlowConfig(**{**tiny_flow_config().to_dict(), **cfg.get("flow", {})})
    tc = FlowTrainConfig(**{**cfg.get("flow_train", {}), "seed": args.seed})
    if args.steps is not None:
        tc.steps = args.steps
    out = Path(args.out_dir)
    t0 = time.perf_counter()
    net, losses = train_flow(tc, fc, progress=_progress(len(str(tc.steps))))
    secs = time.perf_counter() - t0
    epe = evaluate_flow(net, flow_eval_pairs(args.seed))
    ck = save_flow(out / "flow.ckpt", net, {"train": vars(tc), "train_seconds": secs})
    curve = [{"step": i, "flow_l1": v} for i, v in enumerate(losses)]
    summary = out / "flow_eval.json"
    summary.write_text(json.dumps({"mean_epe_px": epe, "train_seconds": secs, "steps": tc.steps}, indent=2))
    print(f"held-out mean endpoint error {epe:.3f} px ({secs:.0f}s)")
    return [ck, write_curve(out / "flow_loss.csv", curve), plot_loss_curve(out / "flow_loss.png", curve), summary]


def _loc_config(args, cfg) -> LocalizerConfig:
    base = full_localizer_config if args.full_scale else desk_localizer_config
    return base(**cfg.get("localizer", {}))


def _train_config(args, cfg) -> TrainConfig:
    over = dict(cfg.get("train", {}))
    over["seed"] = args.seed
    for key in ("steps", "optimizer"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    if args.lr is not None:
        over["learning_rate"] = args.lr
    if args.no_flow:
        over["flow"] = False
    if args.no_multitask:
        over["multitask"] = False
    if args.single_template:
        over["multi_templates"] = False
    if args.also_without_flow:
        over["also_without_flow"] = True
    if args.full_scale:
        over.setdefault("image_size", 256)
    return desk_train_config(**over)


def cmd_train(args, cfg) -> list:
    loc = _loc_config(args, cfg)
    tc = _train_config(args, cfg)
    trk = TrackerConfig.from_dict(cfg.get("tracker", {}))
    flow_net = load_flow(args.flow_checkpoint) if args.flow_checkpoint else None
    out = Path(args.out_dir)
    if args.ablation:
        if flow_net is None:
            raise SystemExit("--ablation needs --flow-checkpoint")
        res = train_ablation_rows(tc, loc, flow_net, out, trk, progress=_progress(len(str(tc.steps))))
        paths = list(res["checkpoints"].values())
        for row, curve in res["curves"].items():
            stem = out / ("loss_" + row_checkpoint_name(row).replace(".ckpt", ""))
            paths += [write_curve(f"{stem}.csv", curve), plot_loss_curve(f"{stem}.png", curve)]
        return paths
    if tc.flow and flow_net is None:
        raise SystemExit("flow is enabled: pass --flow-checkpoint or --no-flow")
    t0 = time.perf_counter()
    models, curve = train_end2end(tc, loc, flow_net, trk, progress=_progress(len(str(tc.steps))))
    secs = time.perf_counter() - t0
    meta = {"train": tc.to_dict(), "train_seconds": secs}
    paths = []
    for name, model in models.items():
        fname = "model.ckpt" if name == ("flow" if tc.flow else "noflow") else f"model_{name}.ckpt"
        paths.append(model.save(out / fname, meta))
    paths += [write_curve(out / "loss_curve.csv", curve), plot_loss_curve(out / "loss_curve.png", curve)]
    return paths


def cmd_track(args, cfg) -> list:
    model = TrackerModel.load(args.checkpoint)
    if args.sequence:
        rec = load_sequence(args.sequence)
    else:
        rec = generate_sequence(args.seed, args.n_frames, args.scenario if args.scenario != "all" else "fluoro",
                                size=args.size)
    tracker = Tracker(model)
    preds = tracker.track_sequence(rec, keep_maps=args.overlay)
    out = Path(args.out_dir)
    paths = [write_predictions_csv(out / "predictions.csv", preds)]
    if args.overlay:
        for fr, p in zip(rec.frames, preds):
            paths.append(write_overlay(out / "overlays" / f"frame_{p.frame_index:05d}.png", fr, p,
                                       model.loc_config.search_size))
    return paths


def _eval_config(args, cfg) -> EvalConfig:
    e = dict(cfg.get("eval", {}))
    e["scenario"] = args.scenario
    if "percentiles" in e:
        e["percentiles"] = tuple(e["percentiles"])
    return EvalConfig(**e)


def cmd_eval(args, cfg) -> list:
    ec = _eval_config(args, cfg)
    model = TrackerModel.load(args.checkpoint)
    records = held_out_set(args.seed, args.n_per_scenario, args.n_frames, args.size, _scenarios(args.scenario))
    rep = track_and_score(model, records, ec, args.workers)
    print(format_table({Path(args.checkpoint).stem: rep}))
    out = Path(args.out_dir)
    return list(write_metrics(out, rep)) + [plot_percentiles(out / "percentiles.png", {"model": rep})]


def cmd_ablate(args, cfg) -> list:
    ec = _eval_config(args, cfg)
    ck_dir = Path(args.checkpoint_dir)
    models = {row: ck_dir / row_checkpoint_name(row) for row in ABLATION_ROWS}
    records = held_out_set(args.seed, args.n_per_scenario, args.n_frames, args.size, _scenarios(args.scenario))
    reports = ablate(models, records, ec, args.workers)
    print(format_table({row_label(r): rep for r, rep in reports.items()}))
    out = Path(args.out_dir)
    return [write_ablation_csv(out / "ablation.csv", reports),
            plot_percentiles(out / "ablation_percentiles.png", {row_label(r): v for r, v in reports.items()})]


def cmd_selftest(args, cfg) -> list:
    failures = selftest.run()
    if failures:
        raise SystemExit(1)
    return []


def _progress(width: int):
    def report(step, value):
        if step % 50 == 0:
            v = value["total"] if isinstance(value, dict) else value
            log.info("step %*d  loss %.4f", width, step, v)
    return report


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cathtrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out="out"):
        sp.add_argument("--config", help="JSON file with localizer/tracker/flow/train/eval blocks")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=out)
        return sp

    def dataset(sp, scenario="all"):
        sp.add_argument("--scenario", default=scenario, choices=list(SCENARIOS) + ["all"])
        sp.add_argument("--n-frames", type=int, default=40)
        sp.add_argument("--size", type=int, default=128)

    g = common(sub.add_parser("generate", help="write synthetic sequences"), "data")
    dataset(g, "fluoro")
    g.add_argument("--n-sequences", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    f = common(sub.add_parser("train-flow", help="train the mask flow network on synthetic warps"), "runs/flow")
    f.add_argument("--steps", type=int)
    f.set_defaults(func=cmd_train_flow)

    t = common(sub.add_parser("train", help="end-to-end training with the flow frozen"), "runs/model")
    t.add_argument("--flow-checkpoint")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--no-flow", action="store_true")
    t.add_argument("--no-multitask", action="store_true")
    t.add_argument("--single-template", action="store_true")
    t.add_argument("--also-without-flow", action="store_true",
                   help="also train a flow-off refinement head on the same localizer run")
    t.add_argument("--ablation", action="store_true", help="train checkpoints for all four ablation rows")
    t.add_argument("--full-scale", action="store_true")
    t.set_defaults(func=cmd_train)

    k = common(sub.add_parser("track", help="track one sequence"), "runs/track")
    dataset(k, "fluoro")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--sequence", help="sequence directory (default: generate one from --seed/--scenario)")
    k.add_argument("--overlay", action="store_true", help="write per-frame overlay PNGs")
    k.set_defaults(func=cmd_track)

    for name, func, hlp in (("eval", cmd_eval, "score a checkpoint on held-out sequences"),
                            ("ablate", cmd_ablate, "score the four ablation checkpoints")):
        e = common(sub.add_parser(name, help=hlp), f"runs/{name}")
        dataset(e)
        e.add_argument("--n-per-scenario", type=int, default=20)
        e.add_argument("--workers", type=int, default=1)
        if name == "eval":
            e.add_argument("--checkpoint", required=True)
        else:
            e.add_argument("--checkpoint-dir", required=True)
        e.set_defaults(func=func)

    s = sub.add_parser("selftest", help="run the built-in oracle and gradient checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = _load_config(getattr(args, "config", None))
    paths = args.func(args, cfg)
    _done(paths)
    return 0


if __name__ == "__main__":
    sys.exit(main())
