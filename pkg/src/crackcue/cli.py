"""Command-line entry point: ``crackcue <command> ...``.

Every command prints a one-line JSON summary on stdout and writes its full
artifacts under the paths given on the command line. Exit codes: 0 success,
1 I/O or file-format error, 2 configuration/argument error, 3 training
diverged (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import gap_report
from .cuegen import coarse_background, coarse_cue
from .errors import ConfigError, CrackCueError, ParameterError, TrainingDiverged
from .imagecore import load_field, load_gray, load_image, load_mask, save_field, save_image, save_mask
from .metrics import evaluate
from .networks import CUE_MODES, load_checkpoint, save_checkpoint
from .perturb import KINDS, PerturbSpec
from .synthdata import domain_presets, generate_corpus, get_preset, load_corpus, render_corpus
from .trainer import TrainConfig, predict, train

log = logging.getLogger("crackcue")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

ABLATION_AXES = {
    "d": ("dilation_d", [2, 3, 4, 5]),
    "lambda": ("lam", [0.25, 1.0, 4.0]),
    "kernel": ("kernel", [4, 8, 12]),
    "cue_mode": ("cue_mode", list(CUE_MODES)),
}


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, separators=(",", ":")))


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("CRACKCUE_THREADS"):
        try:
            n = int(os.environ["CRACKCUE_THREADS"])
        except ValueError:
            raise ConfigError("CRACKCUE_THREADS must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _image_files(path) -> list[Path]:
    """A single file, a corpus directory (uses ``images/``), or a flat directory of PNGs."""
    p = Path(path)
    if p.is_file():
        return [p]
    if (p / "images").is_dir():
        p = p / "images"
    files = sorted(p.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"{path}: no PNG images found")
    return files


def _load_test_set(args):
    """(images, gts, rois) from --test-dir or a synthetic preset."""
    if args.test_dir:
        pairs, rois = load_corpus(args.test_dir, with_roi=True)
    else:
        pairs = render_corpus(get_preset(args.test_preset), args.test_n, args.test_seed,
                              args.size)
        rois = [None] * len(pairs)
    return [p.image for p in pairs], [p.gt for p in pairs], rois


def _training_data(config: TrainConfig):
    data = config.data
    if "train_dir" in data:
        return load_corpus(data["train_dir"])
    spec = get_preset(data["synthetic"])
    return render_corpus(spec, int(data.get("n", 200)), data.get("seed"), config.resolution)


def cmd_generate(args) -> dict:
    spec = get_preset(args.preset)
    t0 = time.perf_counter()
    manifest = generate_corpus(spec, args.n, args.out, seed=args.seed, size=args.size)
    return {"command": "generate", "preset": spec.name, "n": manifest["n"], "seed": manifest["seed"],
            "out": str(args.out), "seconds": round(time.perf_counter() - t0, 3)}


def cmd_train(args) -> dict:
    config = TrainConfig.load(args.config)
    dataset = _training_data(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(epoch, tlog):
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, tlog.epoch_means()[-1])

    ckpt, tlog = train(dataset, config, progress=progress)
    save_checkpoint(ckpt, out / "model.ckpt")
    tlog.to_csv(out / "trainlog.csv")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    means = tlog.epoch_means()
    return {"command": "train", "checkpoint": str(out / "model.ckpt"), "steps": ckpt.step,
            "cue_mode": config.cue_mode, "first_epoch_loss": means[0], "final_epoch_loss": means[-1],
            "seconds": round(time.perf_counter() - t0, 3)}


def cmd_infer(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    files = _image_files(args.images)
    out = Path(args.out)
    (out / "prob").mkdir(parents=True, exist_ok=True)
    if ckpt.cue_mode != "none":
        (out / "cue").mkdir(parents=True, exist_ok=True)
    cues, probs = predict([load_image(f) for f in files], ckpt, args.batch_size)
    for f, q, p in zip(files, cues, probs):
        save_field(p, out / "prob" / f.name)
        if q is not None:
            save_field(np.clip(q, 0.0, 1.0), out / "cue" / f.name)
    return {"command": "infer", "images": len(files), "cue_mode": ckpt.cue_mode, "out": str(out)}


def cmd_cue(args) -> dict:
    files = _image_files(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.cue_mode == "none":
            raise ConfigError("checkpoint was trained without a cue")
        cues, _ = predict([load_image(f) for f in files], ckpt)
        kind = ckpt.cue_mode
    else:
        cues = [coarse_cue(load_image(f), args.kernel) for f in files]
        kind = "coarse"
    for f, q in zip(files, cues):
        save_field(np.clip(q, 0.0, 1.0), out / f.name)
        save_field(q, out / (f.stem + ".ccf"), mode="rawf32")
        if args.background and kind == "coarse":
            save_image(coarse_background(load_image(f), args.kernel), out / (f.stem + "_bg.png"))
    return {"command": "cue", "kind": kind, "images": len(files), "out": str(out)}


def _load_prediction(path: Path) -> np.ndarray:
    if path.suffix == ".ccf":
        return load_field(path).astype(np.float64)
    return load_gray(path)


def cmd_evaluate(args) -> dict:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    preds = sorted(p for p in pred_dir.iterdir() if p.suffix in (".png", ".ccf"))
    if not preds:
        raise FileNotFoundError(f"{pred_dir}: no .png or .ccf predictions")
    names, probs, gts, rois = [], [], [], []
    for p in preds:
        gt_path = gt_dir / (p.stem + ".png")
        if not gt_path.exists():
            raise FileNotFoundError(f"no ground truth for {p.name} in {gt_dir}")
        names.append(p.stem)
        probs.append(_load_prediction(p))
        gts.append(load_mask(gt_path))
        roi = Path(args.roi_dir) / (p.stem + ".png") if args.roi_dir else None
        rois.append(load_mask(roi) if roi is not None and roi.exists() else None)
    with ThreadPoolExecutor(_threads(args)) as ex:
        report = evaluate(probs, gts, rois, tol=args.tolerance, names=names, executor=ex)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_curve_csv(out.with_suffix(".csv"))
    return {"command": "evaluate", "images": len(names), "ods": report.ods,
            "ods_threshold": report.ods_threshold, "ois": report.ois, "ap": report.ap,
            "out": str(out)}


def cmd_perturb(args) -> dict:
    spec = PerturbSpec(args.kind, args.severity)
    src = Path(args.images)
    files = _image_files(src)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for f in files:
        save_image(spec.apply(load_image(f)), out / "images" / f.name)
    copied = 0
    for sub in ("gt", "roi"):
        if (src / sub).is_dir():
            (out / sub).mkdir(exist_ok=True)
            for f in files:
                if (src / sub / f.name).exists():
                    save_mask(load_mask(src / sub / f.name), out / sub / f.name)
                    copied += sub == "gt"
    return {"command": "perturb", "kind": spec.kind, "severity": spec.severity,
            "parameter": spec.parameter, "images": len(files), "gt_copied": copied,
            "out": str(out)}


def cmd_analyze(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    a = [load_image(f) for f in _image_files(args.corpus_a)]
    b = [load_image(f) for f in _image_files(args.corpus_b)]
    rep = gap_report(a, b, ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    hist_files = {}
    for name, h in rep["histograms"].items():
        path = out.with_name(f"{out.stem}_{name}.csv")
        h.write_csv(path)
        hist_files[name] = path.name
    doc = {"raw_gap": rep["raw_gap"], "cue_gap": rep["cue_gap"], "pixels": rep["pixels"],
           "bins": rep["bins"], "cue_mode": ckpt.cue_mode, "histograms": hist_files}
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"command": "analyze", "raw_gap": rep["raw_gap"], "cue_gap": rep["cue_gap"],
            "out": str(out)}


def cmd_ablate(args) -> dict:
    base = TrainConfig.load(args.config)
    field_name, values = ABLATION_AXES[args.axis]
    dataset = _training_data(base)
    images, gts, rois = _load_test_set(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    with ThreadPoolExecutor(_threads(args)) as ex:
        for value in values:
            for seed in args.seeds:
                config = replace(base, seed=seed, **{field_name: value})
                ckpt, _ = train(dataset, config)
                _, probs = predict(images, ckpt)
                rep = evaluate(probs, gts, rois, tol=args.tolerance, executor=ex)
                rows.append({"axis": args.axis, "value": value, "seed": seed,
                             "ods": rep.ods, "ois": rep.ois, "ap": rep.ap})
                log.info("%s=%s seed=%d ODS %.4f", args.axis, value, seed, rep.ods)
    with open(out / f"ablate_{args.axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "seed", "ods", "ois", "ap"])
        w.writeheader()
        w.writerows(rows)
        for value in values:
            sel = [r for r in rows if r["value"] == value]
            w.writerow({"axis": args.axis, "value": value, "seed": "mean",
                        **{k: float(np.mean([r[k] for r in sel])) for k in ("ods", "ois", "ap")}})
    means = {str(v): float(np.mean([r["ods"] for r in rows if r["value"] == v])) for v in values}
    return {"command": "ablate", "axis": args.axis, "rows": len(rows), "mean_ods": means,
            "out": str(out / f"ablate_{args.axis}.csv")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crackcue", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $CRACKCUE_THREADS or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic crack corpus")
    p.add_argument("--preset", required=True, help=f"one of {sorted(domain_presets())}")
    p.add_argument("--n", type=int, required=True, help="number of image/GT pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="jointly train reconstruction and segmentation networks")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and trainlog.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write probability (and cue) maps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="PNG file, directory, or corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("cue", help="write crack cue maps as 16-bit PNG and rawf32")
    p.add_argument("--images", required=True, help="PNG file, directory, or corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--kernel", type=int, default=8, help="block size of the coarse background")
    p.add_argument("--checkpoint", default=None, help="use the checkpoint's cue path instead")
    p.add_argument("--background", action="store_true", help="also write coarse backgrounds")
    p.set_defaults(func=cmd_cue)

    p = sub.add_parser("evaluate", help="ODS / OIS / AP with tolerance matching")
    p.add_argument("--pred-dir", required=True, help="probability maps (.png or .ccf)")
    p.add_argument("--gt-dir", required=True, help="ground-truth masks with matching names")
    p.add_argument("--roi-dir", default=None, help="optional region-of-interest masks")
    p.add_argument("--tolerance", type=int, default=3, help="matching distance in pixels")
    p.add_argument("--out", required=True, help="report JSON path; curve CSV goes beside it")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("perturb", help="apply defocus blur or a contrast shift")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--severity", type=int, default=3, choices=range(1, 6))
    p.add_argument("--images", required=True, help="PNG file, directory, or corpus directory")
    p.add_argument("--out", required=True, help="output corpus directory (gt/ and roi/ copied)")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("analyze", help="raw vs cue intensity gap between two corpora")
    p.add_argument("--corpus-a", required=True)
    p.add_argument("--corpus-b", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="gap JSON path; histogram CSVs go beside it")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train/evaluate one setting per value of an axis")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--config", required=True, help="base training config JSON")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--test-dir", default=None, help="test corpus (default: synthetic preset)")
    p.add_argument("--test-preset", default="A")
    p.add_argument("--test-n", type=int, default=50)
    p.add_argument("--test-seed", type=int, default=2000)
    p.add_argument("--size", type=int, default=64, help="synthetic test image side")
    p.add_argument("--tolerance", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        torch.set_num_threads(_threads(args))
        summary = args.func(args)
    except TrainingDiverged as exc:
        log.error("training aborted: %s", exc)
        _emit({"command": args.command, "error": "diverged", "message": str(exc),
               "param_norms": exc.norms})
        return EXIT_DIVERGED
    except (ConfigError, ParameterError) as exc:
        log.error("%s", exc)
        _emit({"command": args.command, "error": "config", "message": str(exc)})
        return EXIT_CONFIG
    except (OSError, CrackCueError) as exc:
        log.error("%s", exc)
        _emit({"command": args.command, "error": "io", "message": str(exc)})
        return EXIT_IO
    _emit(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
