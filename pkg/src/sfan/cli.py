"""``sfan`` command line: synth -> prep -> train -> infer -> eval.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with the category's code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_EMPTY = 5

_CATEGORY = {
    EXIT_BAD_ARGS: "bad-arguments",
    EXIT_IO: "io-error",
    EXIT_DIVERGENCE: "numerical-divergence",
    EXIT_EMPTY: "empty-input",
}

log = logging.getLogger("sfan")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_BAD_ARGS, message)


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} values, got {text!r}")
    return vals


def _window(text):
    lo, hi = _floats(text, 2)
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"window needs lo < hi, got {text!r}")
    return lo, hi


def _scales(text):
    vals = _floats(text)
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"scales must be positive, got {text!r}")
    return tuple(vals)


def _size_mix(text):
    vals = _floats(text, 3)
    if any(v < 0 for v in vals) or sum(vals) == 0:
        raise argparse.ArgumentTypeError(f"size mix needs three non-negative weights, got {text!r}")
    return tuple(vals)


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return v


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_BAD_ARGS, f"{path}: invalid JSON ({exc})")


def _load_manifest(path):
    from .synthdata import read_manifest

    try:
        entries, root = read_manifest(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"no such manifest: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_IO, f"{path}: invalid manifest ({exc})")
    if not entries:
        raise CliError(EXIT_EMPTY, f"{path}: manifest lists no cases")
    return entries, root


def _select(entries, split):
    if split == "all":
        return entries
    return [e for e in entries if e.get("split", split) == split]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synthdata import generate_suite

    if args.cases < 1:
        raise CliError(EXIT_BAD_ARGS, "--cases must be >= 1")
    out = Path(args.out)
    manifest = generate_suite(args.cases, args.seed, args.size_mix, out)
    # first half trains, second half is held out
    n_train = args.cases - args.cases // 2
    for i, e in enumerate(manifest):
        e["split"] = "train" if i < n_train else "test"
    from .synthdata import write_manifest

    write_manifest(manifest, out / "manifest.json")
    print(f"wrote {len(manifest)} cases to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_prep(args) -> int:
    from .preprocess import crop, liver_roi, preprocess_volume
    from .synthdata import write_manifest
    from .volume_io import CtVolume, LabelSemantics, SegmentationMask, load_mask, load_volume, save_mask, save_volume

    entries, root = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prepped = []
    for e in entries:
        vol = load_volume(root / e["volume_path"], phase=e.get("phase"), case_id=e["case_id"])
        tumor = load_mask(root / e["tumor_mask_path"], vol.shape, LabelSemantics.TUMOR)
        liver = load_mask(root / e["liver_mask_path"], vol.shape, LabelSemantics.LIVER)
        vol, (tumor, liver) = preprocess_volume(vol, [tumor, liver], args.window)
        cid = e["case_id"]
        rec = {k: v for k, v in e.items() if k not in ("volume_path", "tumor_mask_path", "liver_mask_path")}
        rec.update(volume_path=f"{cid}_ct", tumor_mask_path=f"{cid}_tumor", liver_mask_path=f"{cid}_liver")
        save_volume(vol, out / rec["volume_path"])
        save_mask(tumor, out / rec["tumor_mask_path"])
        save_mask(liver, out / rec["liver_mask_path"])
        # ground-truth liver ROI for tumor-model training
        box = liver_roi(liver, args.margin_mm, vol.spacing)
        rec["roi"] = list(box.as_tuple())
        rec["roi_volume_path"] = f"{cid}_roi_ct"
        rec["roi_tumor_mask_path"] = f"{cid}_roi_tumor"
        save_volume(vol.replace(voxels=crop(vol, box)), out / rec["roi_volume_path"])
        save_mask(tumor.replace(labels=crop(tumor, box)), out / rec["roi_tumor_mask_path"])
        rec["preprocessed"] = True
        rec["window"] = list(args.window)
        prepped.append(rec)
    write_manifest(prepped, out / "manifest.json")
    print(f"preprocessed {len(prepped)} cases into {out / 'manifest.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .training import SliceDataset, TrainConfig, fit
    from .volume_io import load_mask, load_volume

    model_d = _read_json(args.model_config)
    train_d = _read_json(args.train_config)
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.max_steps is not None:
        train_d["max_steps"] = args.max_steps
    if args.learning_rate is not None:
        train_d["learning_rate"] = args.learning_rate
    try:
        if args.task == "liver":
            model_d.setdefault("arch", "unet")
            mcfg = ModelConfig.from_dict(model_d) if "encoder_channels" in model_d else \
                ModelConfig.unet(levels=model_d.get("levels", 5))
        else:
            mcfg = ModelConfig.from_dict(model_d)
        tcfg = TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_BAD_ARGS, f"invalid config: {exc}")
    entries, root = _load_manifest(args.manifest)
    entries = _select(entries, args.split)
    if not entries:
        raise CliError(EXIT_EMPTY, f"no cases in split {args.split!r}")
    images, labels = [], []
    for e in entries:
        if args.task == "liver":
            vol = load_volume(root / e["volume_path"])
            lb = load_mask(root / e["liver_mask_path"], vol.shape)
        else:
            vol = load_volume(root / e["roi_volume_path"])
            lb = load_mask(root / e["roi_tumor_mask_path"], vol.shape)
        images.append(vol.voxels)
        labels.append(lb.labels)
    ckpt = Path(args.ckpt_out)
    result = fit(SliceDataset(images, labels), mcfg, tcfg, ckpt.parent, name=ckpt.name)
    print(f"trained {args.task} model for {len(result.losses)} steps -> {result.checkpoint}.json")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .inference import InferenceOptions, predict_volume
    from .model import load_checkpoint
    from .preprocess import preprocess_volume
    from .volume_io import load_mask, load_volume, save_mask

    if not 0 <= args.threshold <= 1:
        raise CliError(EXIT_BAD_ARGS, "--threshold must lie in [0, 1]")
    if args.liver_ckpt is None and not args.gt_liver:
        raise CliError(EXIT_BAD_ARGS, "--liver-ckpt is required unless --gt-liver is given")
    opts = InferenceOptions(scales=args.scales, multi_scale=not args.no_msi, threshold=args.threshold,
                            margin_mm=args.margin_mm)
    src = Path(args.inp)
    jobs = []
    if src.name.endswith(".json") and src.exists() and isinstance(_read_json(src), list):
        entries, root = _load_manifest(src)
        for e in _select(entries, args.split):
            jobs.append((e, root))
    else:
        jobs.append((None, src))
    if not jobs:
        raise CliError(EXIT_EMPTY, f"no cases in split {args.split!r}")
    try:
        tumor_model = load_checkpoint(args.tumor_ckpt)
        liver_model = load_checkpoint(args.liver_ckpt) if args.liver_ckpt else None
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"checkpoint not found: {exc.filename}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e, root in jobs:
        liver_gt = None
        if e is None:
            vol, _ = preprocess_volume(load_volume(root))
        else:
            vol = load_volume(root / e["volume_path"], phase=e.get("phase"), case_id=e["case_id"])
            if not e.get("preprocessed"):
                vol, _ = preprocess_volume(vol)
            if args.gt_liver:
                liver_gt = load_mask(root / e["liver_mask_path"], vol.shape)
        if args.gt_liver and liver_gt is None:
            raise CliError(EXIT_BAD_ARGS, "--gt-liver needs a manifest input")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            mask = predict_volume(tumor_model, liver_model, vol, opts, liver_mask=liver_gt)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        save_mask(mask, out / f"{vol.case_id}_pred")
        print(f"{vol.case_id}: {int(mask.labels.sum())} tumor voxels")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, plot_report
    from .volume_io import MissingFileError, load_mask, load_volume

    entries, root = _load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise CliError(EXIT_IO, f"no such directory: {pred_dir}")
    cases = []
    for e in entries:
        try:
            pred = load_mask(pred_dir / f"{e['case_id']}_pred")
        except MissingFileError:
            continue
        vol = load_volume(root / e["volume_path"], phase=e.get("phase"), case_id=e["case_id"])
        gt = load_mask(root / e["tumor_mask_path"], vol.shape)
        cases.append((pred, gt, vol))
    if not cases:
        raise CliError(EXIT_EMPTY, f"no predictions in {pred_dir} match the manifest")
    report = evaluate(cases)
    if args.report_out:
        Path(args.report_out).write_text(report.to_json())
    if args.plot_out:
        plot_report(report, args.plot_out)
    print(report.to_table(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="sfan", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom suite", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cases", type=int, default=12, help="number of phantoms")
    p.add_argument("--seed", type=int, default=0, help="base random seed")
    p.add_argument("--size-mix", type=_size_mix, default=(1.0, 1.0, 1.0),
                   help="relative counts of small,middle,large tumors")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="canonicalize, window and ROI-crop a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="input dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", type=_window, default=(-75.0, 175.0), help="HU clip window lo,hi")
    p.add_argument("--margin-mm", type=float, default=10.0, help="liver ROI margin in mm")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train the liver U-Net or the tumor SFAN", formatter_class=fmt)
    p.add_argument("--task", choices=("liver", "tumor"), required=True, help="which model to train")
    p.add_argument("--manifest", required=True, help="preprocessed manifest from 'prep'")
    p.add_argument("--model-config", default=None, help="model config JSON")
    p.add_argument("--train-config", default=None, help="training config JSON")
    p.add_argument("--ckpt-out", required=True, help="checkpoint path prefix")
    p.add_argument("--seed", type=int, default=None, help="overrides the training config seed")
    p.add_argument("--max-steps", type=_nonneg_int, default=None, help="overrides max_steps")
    p.add_argument("--learning-rate", type=float, default=None, help="overrides learning_rate")
    p.add_argument("--split", default="train", help="manifest split to train on ('all' for every case)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="cascade inference to tumor masks", formatter_class=fmt)
    p.add_argument("--liver-ckpt", default=None, help="stage-1 liver checkpoint")
    p.add_argument("--tumor-ckpt", required=True, help="stage-2 tumor checkpoint")
    p.add_argument("--scales", type=_scales, default=(0.5, 1.0, 1.5), help="multi-scale inference scales")
    p.add_argument("--no-msi", action="store_true", help="disable multi-scale inference")
    p.add_argument("--threshold", type=float, default=0.5, help="tumor probability threshold")
    p.add_argument("--margin-mm", type=float, default=10.0, help="liver ROI margin in mm")
    p.add_argument("--gt-liver", action="store_true", help="use manifest liver masks instead of stage 1")
    p.add_argument("--split", default="test", help="manifest split to predict ('all' for every case)")
    p.add_argument("--in", dest="inp", required=True, help="preprocessed manifest or a single volume")
    p.add_argument("--out", required=True, help="directory for predicted masks")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice per case with size/phase breakdown", formatter_class=fmt)
    p.add_argument("--pred-dir", required=True, help="directory of predicted masks")
    p.add_argument("--manifest", required=True, help="manifest with ground-truth masks")
    p.add_argument("--report-out", default=None, help="report JSON path")
    p.add_argument("--plot-out", default=None, help="bar chart PNG path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    from .training import DivergenceError
    from .volume_io import VolumeIOError

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGENCE, str(exc)
    except (VolumeIOError, OSError) as exc:
        code, msg = EXIT_IO, str(exc)
    print(f"error: {_CATEGORY[code]}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
