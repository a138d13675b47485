"""Command line entry point: ``vplane {generate,train,eval,ablate,predict}``."""
import argparse
import json
import logging
import os
from pathlib import Path
import shutil
import sys
import tempfile

from . import __version__
from .config import (ConfigError, config_digest, eval_config, load_config,
                     model_config, synthetic_spec, train_config)
from .network import FusionTopology

logger = logging.getLogger("vplane")

VERBS = ("generate", "train", "eval", "ablate", "predict")


class CommandError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. model.topology=PARALLEL (repeatable)")
    common.add_argument("--workers", type=int, default=1, help="parallel data workers")
    common.add_argument("--checkpoint", default=None, help="shorthand for --set eval.checkpoint=PATH")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vplane", description=__doc__)
    sub = parser.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}")
    sub.required = True
    sub.add_parser("generate", parents=[common], help="write a synthetic CULane-style dataset")
    sub.add_parser("train", parents=[common], help="train one model")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    sub.add_parser("ablate", parents=[common], help="train and compare all four fusion topologies")
    sub.add_parser("predict", parents=[common], help="render lane and VP maps for test images")
    return parser


def write_run_info(out: Path, cfg: dict, verb: str) -> None:
    info = {"verb": verb, "config_digest": config_digest(cfg), "seed": cfg["seed"],
            "code_version": __version__, "config": cfg}
    tmp = out / "run_info.json.tmp"
    tmp.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / "run_info.json")


def _staging_dir(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))


def _publish(staging: Path, out: Path) -> None:
    """Move a fully written staging directory to ``out`` (which must be absent or empty)."""
    if out.exists():
        if any(out.iterdir()):
            raise CommandError(f"output directory {out} is not empty")
        out.rmdir()
    os.replace(staging, out)


def _load_data(cfg, split_key):
    from .dataset import load_split
    root = Path(cfg["data"]["root"])
    if not (root / "vp.txt").exists():
        raise CommandError(f"no dataset at {root} (expected vp.txt); run 'vplane generate' first")
    return load_split(root, cfg["data"][split_key], cfg["data"]["stroke_width"])


def cmd_generate(cfg, out: Path, workers: int):
    from .dataset import write_synthetic_dataset
    staging = _staging_dir(out)
    try:
        write_synthetic_dataset(staging, synthetic_spec(cfg), workers=workers)
        write_run_info(staging, cfg, "generate")
        _publish(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


def _train_one(cfg, data, out: Path, topology=None):
    from .dataset import LaneDataset, resize_sample
    from .network import build_model
    from .training import train
    model = build_model(model_config(cfg, topology))
    net = model.cfg.input_dims
    if data.dims != net:
        data = LaneDataset([resize_sample(s, net) for s in data.samples])
    result = train(model, data, train_config(cfg), out_dir=out)
    from .network import save_checkpoint
    save_checkpoint(out / "final.pt", result.model, {"epoch": len(result.val_history) - 1})
    return result


def cmd_train(cfg, out: Path, workers: int):
    data = _load_data(cfg, "train_split")
    out.mkdir(parents=True, exist_ok=True)
    write_run_info(out, cfg, "train")
    _train_one(cfg, data, out)


def _checkpoint_path(cfg) -> Path:
    ckpt = cfg["eval"]["checkpoint"]
    if not ckpt:
        raise CommandError("no checkpoint given (use --checkpoint or --set eval.checkpoint=PATH)")
    ckpt = Path(ckpt)
    if not ckpt.is_file():
        raise CommandError(f"checkpoint not found: {ckpt}")
    return ckpt


def cmd_eval(cfg, out: Path, workers: int):
    from .eval import model_predictor, run_evaluation, write_report
    from .network import load_checkpoint
    ckpt = _checkpoint_path(cfg)
    model, _ = load_checkpoint(ckpt)
    data = _load_data(cfg, "test_split")
    ecfg = eval_config(cfg, data.dims)
    report = run_evaluation(model_predictor(model, ecfg), data, ecfg, render=int(cfg["eval"]["render"]),
                            out_dir=None)
    staging = _staging_dir(out)
    try:
        write_report(staging, {model.cfg.topology.value: report},
                     title=f"Lane F1 (%) at IoU > {ecfg.iou_threshold}, width {ecfg.line_width}px")
        write_run_info(staging, cfg, "eval")
        _render_overlays(staging, model, data, ecfg, int(cfg["eval"]["render"]))
        _publish(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print((out / "report.txt").read_text(), end="")


def _render_overlays(out: Path, model, data, ecfg, n: int):
    if n <= 0:
        return
    from .eval import model_predictor, render_maps, render_overlay
    odir = out / "overlays"
    odir.mkdir(parents=True, exist_ok=True)
    samples = [data[i] for i in range(min(n, len(data)))]
    preds = model_predictor(model, ecfg, keep_maps=True)(samples)
    for i, (s, p) in enumerate(zip(samples, preds)):
        render_overlay(s, p).save(odir / f"{i:04d}_overlay.png")
        render_maps(s, p).save(odir / f"{i:04d}_maps.png")


def cmd_ablate(cfg, out: Path, workers: int):
    from .eval import format_ablation_table, model_predictor, run_evaluation, write_report
    train_data = _load_data(cfg, "train_split")
    test_data = _load_data(cfg, "test_split")
    ecfg = eval_config(cfg, test_data.dims)
    out.mkdir(parents=True, exist_ok=True)
    write_run_info(out, cfg, "ablate")
    reports = {}
    for topo in FusionTopology:
        logger.info("training %s", topo.value)
        result = _train_one(cfg, train_data, out / topo.value, topo)
        reports[topo.value] = run_evaluation(model_predictor(result.model, ecfg), test_data, ecfg)
    staging = _staging_dir(out / "report")
    try:
        write_report(staging, reports, title="Fusion topology comparison, lane F1 (%)")
        (staging / "ablation.txt").write_text(format_ablation_table(reports))
        _publish(staging, out / "report")
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print((out / "report" / "ablation.txt").read_text(), end="")


def cmd_predict(cfg, out: Path, workers: int):
    from .network import load_checkpoint
    model, _ = load_checkpoint(_checkpoint_path(cfg))
    data = _load_data(cfg, "test_split")
    ecfg = eval_config(cfg, data.dims)
    n = int(cfg["eval"]["render"]) or 8
    staging = _staging_dir(out)
    try:
        _render_overlays(staging, model, data, ecfg, n)
        write_run_info(staging, cfg, "predict")
        _publish(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.checkpoint:
            overrides.append(f"eval.checkpoint={args.checkpoint}")
        cfg = load_config(args.config, overrides, args.seed)
        COMMANDS[args.verb](cfg, Path(args.out), max(1, args.workers))
    except (ConfigError, CommandError, ValueError, OSError) as exc:
        print(f"vplane {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
