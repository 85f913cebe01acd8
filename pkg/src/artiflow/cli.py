"""Command-line entry point.

Subcommands: gen-data, train, eval-flow, rollout-eval, sweep, report.
Exit codes: 0 success, 2 usage error, 1 runtime failure. Every run writes a
resolved-config snapshot (run_config.json) into its output directory; the
wall-clock timestamp lives in its own field so artifact bytes stay
reproducible.

Flag precedence: built-in defaults < --config JSON file < explicit flags.
ARTIFLOW_OUT sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np


def _output_root() -> Path:
    return Path(os.environ.get("ARTIFLOW_OUT", "."))


def _write_snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "config": resolved,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out_dir / "run_config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Splice --config file values between defaults and explicit flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = Path(argv[i + 1])
    except IndexError:
        parser.error("--config needs a path")
    if not path.exists():
        parser.error(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        parser.error(f"config file is not valid JSON: {e}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    injected: list[str] = []
    for key, val in values.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            if val:
                injected.append(flag)
        else:
            injected.extend([flag, str(val)])
    pruned = argv[:i] + argv[i + 2:]
    return [pruned[0]] + injected + pruned[1:]


def _require_path(parser: argparse.ArgumentParser, path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        parser.error(f"{what} not found: {p}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artiflow",
                                     description="articulation-flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with flag defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=0,
                       help="cap worker threads (0 = leave defaults)")

    g = sub.add_parser("gen-data", help="generate a dataset")
    add_common(g)
    g.add_argument("--mix", choices=["RO", "MD", "HA"], default="RO")
    g.add_argument("--doors", type=int, default=4)
    g.add_argument("--drawers", type=int, default=2)
    g.add_argument("--samples-per-object", type=int, default=25)
    g.add_argument("--n-points", type=int, default=1200)
    g.add_argument("--handle-prob", type=float, default=0.5)
    g.add_argument("--ambiguous-doors", action="store_true",
                   help="doors come in 4-mode groups of identical dimensions")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the flow-diffusion model")
    add_common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=450)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--wd", type=float, default=1e-5)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--eval-period", type=int, default=20)
    t.add_argument("--wta-k", type=int, default=20)
    t.add_argument("--no-history", action="store_true",
                   help="ablation: ignore histories, always use the start vector")

    e = sub.add_parser("eval-flow", help="flow metrics, WTA, and multi-modality")
    add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--k", type=int, default=20, help="draws per record for WTA")
    e.add_argument("--mm-k", type=int, default=50, help="draws per object for modality")
    e.add_argument("--out", required=True)

    r = sub.add_parser("rollout-eval", help="policy evaluation over a dataset's objects")
    add_common(r)
    r.add_argument("--checkpoint")
    r.add_argument("--oracle", action="store_true", help="ground-truth-flow policy")
    r.add_argument("--dataset", required=True)
    r.add_argument("--trials", type=int, default=5)
    r.add_argument("--n-points", type=int, default=64)
    r.add_argument("--out", required=True)

    s = sub.add_parser("sweep", help="occlusion sweep over open ratios")
    add_common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--oracle", action="store_true")
    s.add_argument("--dataset", required=True)
    s.add_argument("--object-id", help="default: first door in the dataset")
    s.add_argument("--grid", type=int, default=21)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--n-points", type=int, default=64)
    s.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render plots from logs/CSVs")
    add_common(p)
    p.add_argument("--inputs", required=True, help="directory with CSVs / train_log.jsonl")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_gen_data(args, parser) -> int:
    from .synthgen import DatasetSpec, generate_dataset

    out = _output_root() / args.out
    spec = DatasetSpec(out_dir=out, mix=args.mix, doors=args.doors, drawers=args.drawers,
                       samples_per_object=args.samples_per_object, n_points=args.n_points,
                       seed=args.seed, handle_prob=args.handle_prob,
                       ambiguous_doors=args.ambiguous_doors)
    manifest = generate_dataset(spec)
    _write_snapshot(out, "gen-data", {**spec.to_dict(), "out": str(out)})
    print(f"wrote {manifest}")
    return 0


def _cmd_train(args, parser) -> int:
    from .flowdiff import TrainConfig, train

    dataset = _require_path(parser, args.dataset, "dataset")
    out = _output_root() / args.out
    config = TrainConfig(epochs=args.epochs, lr=args.lr, weight_decay=args.wd,
                         batch_size=args.batch, eval_period=args.eval_period,
                         wta_k=args.wta_k, seed=args.seed,
                         use_history=not args.no_history)
    _write_snapshot(out, "train", {**vars(args), "out": str(out)})
    _, log = train(dataset, config, out_dir=out,
                   log_fn=lambda e: print(f"epoch {e['epoch']:4d} loss {e['loss']:.4f}"
                                          + (f" wta {e['wta']:.4f}" if e.get("wta")
                                             is not None else "")))
    print(f"checkpoint at {out / 'checkpoint.pt'} "
          f"(best wta {min((e['wta'] for e in log if e['wta'] is not None), default=float('nan')):.4f})")
    return 0


def _cmd_eval_flow(args, parser) -> int:
    from .evalkit import multimodality_count
    from .flowdiff import DiffusionSampler, load_checkpoint, wta_rmse
    from .flowdiff.train import rmse_flow
    from .synthgen import dataset_objects, iter_records

    ckpt = _require_path(parser, args.checkpoint, "checkpoint")
    dataset = _require_path(parser, args.dataset, "dataset")
    out = _output_root() / args.out
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(ckpt)

    wta = wta_rmse(model, dataset, k=args.k, seed=args.seed)
    records = list(iter_records(dataset))
    sampler = DiffusionSampler(model, seed=args.seed)
    per_record = []
    for rec in records:
        draw = sampler.sample(rec.obs, rec.history, 1)[0]
        per_record.append({"object_id": rec.object_id,
                           "rmse": rmse_flow(draw.vectors, rec.gt_flow.vectors)})
    mm = multimodality_count(DiffusionSampler(model, seed=args.seed + 1),
                             dataset_objects(dataset), k=args.mm_k,
                             n_points=model.config.n_points, seed=args.seed)
    payload = {
        "wta_rmse": wta, "wta_k": args.k,
        "mean_single_rmse": float(np.mean([r["rmse"] for r in per_record])),
        "multimodal_objects": mm.flagged(),
        "multimodal_ratio_per_category": mm.per_category,
    }
    (out / "flow_eval.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    _write_snapshot(out, "eval-flow", {**vars(args), "out": str(out)})
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def _make_sampler_factory(args, parser):
    from .flowdiff import DiffusionSampler, load_checkpoint
    from .evalkit import oracle_sampler_factory

    if args.oracle:
        return oracle_sampler_factory, None
    if not args.checkpoint:
        parser.error("need --checkpoint or --oracle")
    model = load_checkpoint(_require_path(parser, args.checkpoint, "checkpoint"))

    def factory(env, episode_seed):
        return DiffusionSampler(model, seed=episode_seed)
    return factory, model


def _cmd_rollout_eval(args, parser) -> int:
    from .evalkit import evaluate_rollouts, report_to_csvs
    from .synthgen import dataset_objects

    dataset = _require_path(parser, args.dataset, "dataset")
    out = _output_root() / args.out
    factory, model = _make_sampler_factory(args, parser)
    n_points = model.config.n_points if model is not None else args.n_points
    objects = dataset_objects(dataset)
    report, traces = evaluate_rollouts(factory, objects, trials=args.trials,
                                       n_points=n_points, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json())
    report_to_csvs(report, out)
    traces_dir = out / "traces"
    traces_dir.mkdir(exist_ok=True)
    for i, t in enumerate(traces):
        t.to_jsonl(traces_dir / f"{t.object_id}_{i:03d}.jsonl")
    _write_snapshot(out, "rollout-eval", {**vars(args), "out": str(out)})
    print(f"AVG_s {report.avg_s:.3f}  AVG_c {report.avg_c:.3f}  "
          f"mean gap {report.mean_gap:.3f}")
    return 0


def _cmd_sweep(args, parser) -> int:
    from .evalkit import occlusion_sweep, sweep_to_csv
    from .synthgen import dataset_objects
    from .synthgen.objects import build_object

    dataset = _require_path(parser, args.dataset, "dataset")
    out = _output_root() / args.out
    objects = dataset_objects(dataset)
    if args.object_id:
        matches = [o for o in objects if o["object_id"] == args.object_id]
        if not matches:
            parser.error(f"object '{args.object_id}' not in dataset")
        obj = matches[0]
    else:
        doors = [o for o in objects if o["category"] == "door"]
        obj = (doors or objects)[0]

    if args.oracle:
        from .evalkit.analysis import GroundTruthSweepSampler
        tree = build_object(obj["spec"])
        sampler = GroundTruthSweepSampler(tree, obj["target_joint"])
        n_points = args.n_points
    else:
        from .flowdiff import DiffusionSampler, load_checkpoint
        if not args.checkpoint:
            parser.error("need --checkpoint or --oracle")
        model = load_checkpoint(_require_path(parser, args.checkpoint, "checkpoint"))
        sampler = DiffusionSampler(model, seed=args.seed)
        n_points = model.config.n_points
        tree = build_object(obj["spec"])

    result = occlusion_sweep(sampler, tree, obj["target_joint"], obj["camera"],
                             ratios=np.linspace(0, 1, args.grid), n_points=n_points,
                             k=args.k, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    sweep_to_csv(result, out / f"sweep_{obj['object_id']}.csv")
    _write_snapshot(out, "sweep", {**vars(args), "out": str(out)})
    print(f"sweep over {args.grid} ratios written; min panel visibility at "
          f"ratio {result.min_visibility_ratio():.2f}")
    return 0


def _cmd_report(args, parser) -> int:
    from .evalkit.plots import render_all

    in_dir = _require_path(parser, args.inputs, "inputs directory")
    out = _output_root() / args.out
    made = render_all(in_dir, out)
    _write_snapshot(out, "report", {**vars(args), "out": str(out)})
    print(f"rendered {len(made)} plot(s) into {out}")
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval-flow": _cmd_eval_flow,
    "rollout-eval": _cmd_rollout_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def run_cli(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and argv[0] in COMMANDS:
        argv = _apply_config_file(parser, argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "jobs", 0):
        import torch
        torch.set_num_threads(max(1, args.jobs))
    try:
        return COMMANDS[args.command](args, parser)
    except SystemExit as e:  # parser.error inside a command body
        return int(e.code or 0)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run_cli())


if __name__ == "__main__":
    main()
