"""Command-line entry point: gen, train, eval, predict, distill.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .backbone import ConfigError
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .scenegen import (FormatError, LabelParseError, format_labels, generate_dataset, read_cloud,
                       write_labels)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="li3detr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help="worker threads (1 = bit-exact mode)")
        return p

    p = common(sub.add_parser("gen", help="write a synthetic dataset"))
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = common(sub.add_parser("train", help="train from scratch or resume"))
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--split", help="training split (default from config)")
    p.add_argument("--plot", help="write the loss curve figure here")

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on a split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split to evaluate (default: validation split)")
    p.add_argument("--topk", type=int, default=None, help="detections kept per scene (300)")
    p.add_argument("--out", help="report path (default next to the checkpoint)")
    p.add_argument("--plot", help="figure path (default next to the report)")

    p = common(sub.add_parser("predict", help="detect objects in one .bin cloud"))
    p.add_argument("cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--out", help="detections file (default: stdout)")
    p.add_argument("--plot", help="BEV figure (.svg or .png)")
    p.add_argument("--min-score", type=float, default=0.0, help="report floor on scores")

    p = common(sub.add_parser("distill", help="train a student against a frozen teacher"))
    p.add_argument("--checkpoint", help="teacher checkpoint (default from config)")
    p.add_argument("--split", help="training split (default from config)")
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.train = dataclasses.replace(cfg.train, threads=args.threads)
    if getattr(args, "topk", None) is not None:
        if args.topk < 1:
            raise ConfigError("--topk must be >= 1")
        cfg.inference = dataclasses.replace(cfg.inference, topk=args.topk)
    return cfg


def _table(rows, header=None) -> str:
    lines = ["\t".join(header)] if header else []
    for r in rows:
        lines.append("\t".join("-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)
                               for v in r))
    return "\n".join(lines)


def cmd_gen(cfg: RunConfig, args) -> int:
    counts = {cfg.data.train_split: cfg.data.train, cfg.data.val_split: cfg.data.val}
    path = generate_dataset(cfg.data_root, counts, cfg.gen, cfg.data.seed, force=args.force)
    print(_table([(k, v) for k, v in sorted(counts.items())], ("split", "scenes")))
    print(f"manifest\t{path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, teacher: str | None = None) -> int:
    from . import train as T

    split = args.split or cfg.data.train_split
    scenes = T.load_split(cfg, split)
    val = T.load_split(cfg, cfg.data.val_split) if cfg.train.eval_every else []
    if teacher:
        res = T.distill(cfg, teacher, scenes, val, log=print)
    else:
        res = T.train(cfg, scenes, val, resume=getattr(args, "checkpoint", None), log=print)
    if res.history:
        print(_table([("initial_loss", res.history[0]["loss"]),
                      ("final_loss", res.history[-1]["loss"]), ("steps", len(res.history))],
                     ("metric", "value")))
    print(f"checkpoint\t{res.final_checkpoint}")
    if getattr(args, "plot", None) and res.history:
        from .plotting import plot_losses

        print(f"figure\t{plot_losses(args.plot, res.history)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from . import evalkit
    from . import train as T
    from .plotting import plot_eval

    split = args.split or cfg.data.val_split
    scenes = T.load_split(cfg, split)
    model = T.load_model(cfg, args.checkpoint)
    report, dets = T.evaluate_model(model, scenes, cfg, per_layer=True, return_detections=True)
    report["split"] = split
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"{Path(args.checkpoint).stem}_eval_{split}.json")
    evalkit.write_report(report, out)
    keys = ("mAP", "mAP_iou", "NDS_lite", "mATE", "mASE", "mAOE", "mAVE")
    print(_table([(k, report[k]) for k in keys], ("metric", "value")))
    print()
    thr = [f"{t:g}" for t in cfg.eval.distance_thresholds]
    rows = [(n, *[report["per_class"][n]["ap"][t] for t in thr], report["per_class"][n]["ap_iou"],
             report["per_class"][n]["num_gt"]) for n in report["classes"]]
    print(_table(rows, ("class", *[f"AP@{t}m" for t in thr], "AP_iou", "num_gt")))
    print()
    for mode, bins in report["stratified"].items():
        print(_table(list(bins.items()), (f"{mode}_bin", "mAP")))
        print()
    print(f"report\t{out}")
    fig = Path(args.plot) if args.plot else out.with_suffix(".png")
    plot_eval(fig, dets, [s.boxes for s in scenes], cfg.gen.class_names, report, cfg.eval)
    print(f"figure\t{fig}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    from . import train as T
    from .scenegen import Scene

    cloud = read_cloud(args.cloud)
    model = T.load_model(cfg, args.checkpoint)
    boxes = T.predict(model, [Scene(cloud, [], Path(args.cloud).stem)], cfg.inference.topk)[0][0]
    boxes = [b for b in boxes if b.score >= args.min_score]
    if args.out:
        write_labels(args.out, boxes, cfg.gen.class_names, with_score=True)
        print(f"detections\t{args.out}\t{len(boxes)}")
    else:
        sys.stdout.write(format_labels(boxes, cfg.gen.class_names, with_score=True))
    if args.plot:
        from .plotting import plot_bev

        plot_bev(args.plot, cloud.points, boxes, cfg.gen.class_names, cfg.gen.pc_range,
                 title=Path(args.cloud).name)
        print(f"figure\t{args.plot}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    teacher = args.checkpoint or cfg.distill.teacher
    if not teacher:
        raise ConfigError("distill needs a teacher: --checkpoint or [distill] teacher")
    teacher = str(cfg.resolve(teacher)) if not args.checkpoint else teacher
    return cmd_train(cfg, args, teacher=teacher)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "distill": cmd_distill}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    from .train import NumericError

    try:
        cfg = _config(args)
        with threadpool_limits(limits=cfg.train.threads if args.cmd != "train" else 1):
            return COMMANDS[args.cmd](cfg, args)
    except (ConfigError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FileExistsError, KeyError, FormatError, LabelParseError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
