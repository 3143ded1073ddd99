"""Command-line entry point: synth, train, track, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
Failures print one JSON line on stderr: ``{"error": kind, "code": n, "message": ...}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import DataError, Sequence, load_sequence, parse_gt_line, synth_dataset, write_sequence
from .evaluation import THRESHOLDS, EvalReport, evaluate_sequence, precision_curve, success_curve
from .geometry import generate_anchors
from .model import response_size
from .tracker import format_results, track_sequence
from .trainer import Trainer

log = logging.getLogger("siamtol")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_run_info(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    info = {"command": command, "seed": cfg.seed, "tool_version": __version__,
            "torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version(),
            "deterministic": True}
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _sequence_dirs(path: Path) -> list[Path]:
    if (path / "img").is_dir():
        return [path]
    dirs = sorted(p for p in path.iterdir() if (p / "img").is_dir()) if path.is_dir() else []
    if not dirs:
        raise ValidationError(f"no OTB sequence directories under {path}")
    return dirs


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _write_run_info(out, cfg, "synth")
    for seq in synth_dataset(cfg.synth, args.count, cfg.seed, prefix=args.prefix):
        write_sequence(seq, out / seq.name)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    out = Path(args.out)
    _write_run_info(out, cfg, "train")
    sequences = [load_sequence(d) for d in _sequence_dirs(Path(args.data))]
    torch.use_deterministic_algorithms(True)
    model = build_model(cfg)
    anchors = generate_anchors(cfg.anchors, response_size(cfg.crop.search_size), cfg.crop.search_size)
    trainer = Trainer(model, cfg.train, anchors, cfg.labels, cfg.loss, cfg.crop)

    def on_epoch(epoch):
        save_checkpoint(out / f"checkpoint_e{epoch:03d}.npz", model, cfg, epoch, trainer.step)

    trainer.fit(sequences, out / "train_log.csv", on_epoch)
    save_checkpoint(out / "checkpoint.npz", model, cfg, cfg.train.epochs, trainer.step)
    return EXIT_OK


def cmd_track(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = replace(cfg, tracker=load_config(args.config).tracker)
    tracker_cfg = cfg.tracker
    if args.no_update:
        tracker_cfg = replace(tracker_cfg, update_enabled=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in _sequence_dirs(Path(args.sequence)):
        seq = load_sequence(d)
        results = track_sequence(model, seq, tracker_cfg, cfg.crop)
        (out / f"{seq.name}.txt").write_text(format_results(results))
    return EXIT_OK


def read_results(path: Path) -> list:
    boxes = []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        fields = line.strip().split(",")
        if len(fields) < 4:
            raise ValidationError(f"{path}:{i + 1}: expected x,y,w,h[,confidence]")
        box = parse_gt_line(",".join(fields[:4]), i + 1)
        if box is None:
            raise ValidationError(f"{path}:{i + 1}: invalid box")
        boxes.append(box)
    return boxes


def _variant_dirs(results: Path) -> dict[str, Path]:
    if any(results.glob("*.txt")):
        return {results.name: results}
    subs = {p.name: p for p in sorted(results.iterdir()) if p.is_dir() and any(p.glob("*.txt"))}
    if not subs:
        raise ValidationError(f"no result files under {results}")
    return subs


def cmd_eval(args) -> int:
    gt_root = Path(args.gt)
    gts: dict[str, Sequence] = {d.name: load_sequence(d) for d in _sequence_dirs(gt_root)}
    reports, curves = [], {}
    for variant, rdir in _variant_dirs(Path(args.results)).items():
        rep = EvalReport(variant, None)
        succ, prec = [], []
        for f in sorted(rdir.glob("*.txt")):
            if f.stem not in gts:
                raise ValidationError(f"no ground truth for result {f.name}")
            pred, gt = read_results(f), gts[f.stem].gt
            if len(pred) != len(gt):
                raise ValidationError(f"{f.name}: {len(pred)} results for {len(gt)} frames")
            rep.sequences.append(evaluate_sequence(f.stem, pred, gt))
            keep = [i for i, g in enumerate(gt) if g is not None]
            succ.append(success_curve([pred[i] for i in keep], [gt[i] for i in keep]))
            prec.append(precision_curve([pred[i] for i in keep], [gt[i] for i in keep]))
        reports.append(rep)
        curves[variant] = (np.mean(succ, axis=0), np.mean(prec, axis=0))
    write_report(reports, Path(args.report))
    if args.plots:
        write_curves(curves, Path(args.plots))
    return EXIT_OK


def write_report(reports: list[EvalReport], path: Path) -> None:
    base = path.with_suffix("") if path.suffix in (".csv", ".json") else path
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "sequence", "mean_iou", "success_auc", "precision", "error"])
        for r in reports:
            for s in r.sequences:
                w.writerow([r.variant, r.seed, s.name, f"{s.mean_iou:.6f}", f"{s.success_auc:.6f}",
                            f"{s.precision:.6f}", s.error or ""])
    summary = {"tool_version": __version__, "reports": [r.to_dict() for r in reports]}
    aggs = {r.variant: r.aggregate() for r in reports}
    if "baseline" in aggs and "updatable" in aggs:
        summary["delta"] = {k: aggs["updatable"][k] - aggs["baseline"][k] for k in aggs["baseline"]}
    base.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_curves(curves: dict, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out.mkdir(parents=True, exist_ok=True)
    radii = np.arange(0, 51)
    with open(out / "success_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", *curves])
        for i, t in enumerate(THRESHOLDS):
            w.writerow([f"{t:.2f}", *(f"{c[0][i]:.6f}" for c in curves.values())])
    with open(out / "precision_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", *curves])
        for i, r in enumerate(radii):
            w.writerow([int(r), *(f"{c[1][i]:.6f}" for c in curves.values())])
    for idx, (fname, xs, xlabel, ylabel) in enumerate([
            ("success.png", THRESHOLDS, "overlap threshold", "success rate"),
            ("precision.png", radii, "location error threshold (px)", "precision")]):
        fig, ax = plt.subplots(figsize=(5, 4))
        for variant, c in curves.items():
            score = c[0].mean() if idx == 0 else c[1][20]
            ax.plot(xs, c[idx], label=f"{variant} [{score:.3f}]")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 1.01)
        ax.legend(loc="lower left" if idx == 0 else "lower right")
        fig.tight_layout()
        fig.savefig(out / fname, dpi=100, metadata={"Software": None})
        plt.close(fig)


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    cfg = _config(args)
    ok = True
    for r in run_all(cfg.backbone, seed=cfg.seed):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:12s} max_rel_err={r.max_rel_err:.3e} checks={r.checks} "
              f"kinks_skipped={r.kinks_skipped} [{status}]")
        ok &= r.passed
    print(f"tolerance {TOLERANCE:.0e}: {'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="siamtol", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render synthetic drift sequences in OTB layout")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--prefix", default="synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a directory of OTB-layout sequences")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="track one sequence (or a directory of them)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="override the tracker section of the checkpoint config")
    s.add_argument("--no-update", action="store_true", help="disable template updates")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score result files against ground truth")
    s.add_argument("--results", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--plots")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("validation", EXIT_VALIDATION, str(exc))
    except (ValidationError, DataError, CheckpointError, FileNotFoundError) as exc:
        return _fail("validation", EXIT_VALIDATION, str(exc))
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        return _fail("runtime", EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
