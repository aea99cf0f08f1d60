"""Command line: gen-data, train, eval, tree-dump, predict, render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every ``section.key`` of the run configuration is also a ``--section.key``
flag; flags override ``--config`` file values, which override defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from treeground.config import RunConfig, parse_text
from treeground.data import Dataset, generate_dataset, read_dataset, write_dataset
from treeground.errors import DataError, NumericError, TreeGroundError, UsageError
from treeground.grounding_model import GroundingModel
from treeground.numerics import load_checkpoint, save_checkpoint
from treeground.training import evaluate_model, format_metrics, train_loop

log = logging.getLogger("treeground")

CONFIG_ECHO = "run_config.txt"
SUBCOMMANDS = ("gen-data", "train", "eval", "tree-dump", "predict", "render")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is our data-error code
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("run configuration (section.key)")
    for key, value in RunConfig().items():
        group.add_argument(f"--{key}", dest=key, default=None, metavar=type(value).__name__.upper(),
                           help=f"default {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treeground", description="One-shot spatial video grounding on synthetic videos.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int, help="seed (data.seed for gen-data, train.seed otherwise)")
        _add_config_flags(p)
        return p

    p = command("gen-data", "generate a synthetic dataset into an ITVD file")
    p.add_argument("--out", required=True, help="output .itvd path")

    p = command("train", "train on a dataset; writes checkpoints, metrics log and config echo")
    p.add_argument("--data", required=True, help="ITVD dataset")
    p.add_argument("--out", required=True, help="output directory")

    p = command("eval", "evaluate a checkpoint on one split")
    _model_inputs(p)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--out", help="directory for the report, table and figures")

    p = command("tree-dump", "print the information tree built for one video")
    _model_inputs(p)
    p.add_argument("--video", type=int, required=True, help="video id")

    p = command("predict", "print the selected box for every frame")
    _model_inputs(p)
    p.add_argument("--video", type=int, help="video id (default: every video of --split)")
    p.add_argument("--split", default="eval", choices=("train", "eval"))

    p = command("render", "write per-frame SVG overlays of predicted and ground-truth boxes")
    _model_inputs(p)
    p.add_argument("--video", type=int, required=True, help="video id")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _model_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="ITVD dataset")
    p.add_argument("--checkpoint", help="ITGW checkpoint (default: untrained initial weights)")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.update(parse_text(path.read_text()))
    for key in RunConfig.keys():
        raw = getattr(args, key, None)
        if raw is not None:
            cfg.set(key, raw)
    return cfg


def echo_config(cfg: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_ECHO
    path.write_text(cfg.to_text())
    return path


def _load_dataset(path: str) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset not found: {p}")
    return read_dataset(p)


def _with_dataset(cfg: RunConfig, ds: Dataset) -> RunConfig:
    """The dataset's own generation settings win over whatever the config says."""
    cfg.data = ds.config
    return cfg


def _base_for_checkpoint(args) -> RunConfig | None:
    """A config echo sitting next to the checkpoint supplies the architecture."""
    if not args.checkpoint:
        return None
    echo = Path(args.checkpoint).parent / CONFIG_ECHO
    return RunConfig.from_file(echo) if echo.is_file() else None


def _load_model(args, cfg: RunConfig) -> GroundingModel:
    model = GroundingModel(cfg)
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path}")
        try:
            model.load_state_dict(load_checkpoint(path))
        except (KeyError, ValueError) as exc:
            raise DataError(f"checkpoint {path} does not fit the configured model: {exc}") from exc
    return model


def _fmt_box(box) -> str:
    return ",".join(f"{c:.6f}" for c in box)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, out) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    ds = generate_dataset(cfg.data)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, path)
    echo_config(cfg, path.parent)
    print(f"wrote {path} train={len(ds.split('train'))} eval={len(ds.split('eval'))}", file=out)
    return 0


def cmd_train(args, out) -> int:
    cfg = resolve_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    ds = _load_dataset(args.data)
    cfg = _with_dataset(cfg, ds)
    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    result = train_loop(ds, cfg, log_path=out_dir / "metrics.log")
    save_checkpoint(out_dir / "model.itgw", result.best_state)
    save_checkpoint(out_dir / "final.itgw", result.final_state)
    print(f"best_epoch={result.best_epoch} checkpoint={out_dir / 'model.itgw'}", file=out)
    return 0


def _prepare(args) -> tuple[RunConfig, Dataset, GroundingModel]:
    cfg = resolve_config(args, _base_for_checkpoint(args))
    ds = _load_dataset(args.data)
    cfg = _with_dataset(cfg, ds)
    return cfg, ds, _load_model(args, cfg)


def cmd_eval(args, out) -> int:
    from treeground.plotting import report_figures

    cfg, ds, model = _prepare(args)
    videos = ds.split(args.split)
    if not videos:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate_model(model, videos, cfg)
    line = format_metrics({"split": args.split, **report.metrics(),
                           "evaluated": report.evaluated, "excluded": report.excluded})
    print(line, file=out)
    print(report.table(), end="", file=out)
    if args.out:
        out_dir = Path(args.out)
        echo_config(cfg, out_dir)
        (out_dir / "report.txt").write_text(line + "\n" + report.table())
        rows = "".join(f"video={r.video_id} mean_iou={r.mean_iou!r} frames={r.frames}\n" for r in report.rows)
        (out_dir / "videos.txt").write_text(rows)
        report_figures(report, out_dir)
    return 0


def cmd_tree_dump(args, out) -> int:
    from treeground.info_tree import build_tree
    from treeground.pipeline import encode_video

    cfg, ds, model = _prepare(args)
    v = ds.by_id(args.video)
    feats = encode_video(model, v.frames, v.query)
    tree = build_tree(feats.pooled, feats.query.pooled, model.relevance, cfg.tree)
    print(tree.dump(), end="", file=out)
    return 0


def cmd_predict(args, out) -> int:
    from treeground.pipeline import predict_video

    cfg, ds, model = _prepare(args)
    videos = [ds.by_id(args.video)] if args.video is not None else ds.split(args.split)
    for v in videos:
        pred = predict_video(model, v.frames, v.query, cfg)
        for frame, box in pred.selected_boxes().items():
            p = pred.predictions[frame]
            prob = float(p.probs.max())
            print(f"video={v.video_id} frame={frame} box={_fmt_box(box)} p={prob:.6f}", file=out)
    return 0


def cmd_render(args, out) -> int:
    from treeground.pipeline import predict_video
    from treeground.plotting import render_video

    cfg, ds, model = _prepare(args)
    v = ds.by_id(args.video)
    boxes = predict_video(model, v.frames, v.query, cfg).selected_boxes()
    out_dir = Path(args.out)
    echo_config(cfg, out_dir)
    paths = render_video(v.frames, boxes, v.gt.unsealed(), out_dir, stem=f"video{v.video_id}")
    for p in paths:
        print(p, file=out)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "tree-dump": cmd_tree_dump, "predict": cmd_predict, "render": cmd_render,
}


def run(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"treeground: choose a command from {', '.join(SUBCOMMANDS)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return HANDLERS[args.command](args, out)
    except TreeGroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
