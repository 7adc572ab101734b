"""Command-line interface.

Subcommands: synth, train, eval, heatmap, rf, inspect. Exit codes:
0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .architecture import compute_receptive_field, variant_config
from .checkpoint import load_checkpoint
from .data import (
    ManifestEntry,
    SyntheticSpec,
    describe_rawvol,
    generate_synthetic,
    load_volume,
    save_manifest,
    whiten,
    write_rawvol,
)
from .data.nifti import HEADER_SIZE, _unpack_header, parse_nifti1
from .data.volume import center_crop
from .errors import FormatError, VoxbagError
from .heatmap import export_slices, local_predictions, to_probability_map
from .train import TrainConfig, baseline_report, evaluate_manifest, train


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p.add_argument("--spec", required=True, help="JSON file with SyntheticSpec fields")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)


def cmd_synth(args) -> int:
    with open(args.spec) as f:
        raw = json.load(f)
    known = set(SyntheticSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise VoxbagError(f"unknown synth spec field(s) {sorted(unknown)}; known: {sorted(known)}")
    spec = SyntheticSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    spec.validate()
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for i, vol in enumerate(generate_synthetic(spec)):
        name = f"sample{i:05d}.rawvol"
        with open(os.path.join(args.out, name), "wb") as f:
            f.write(write_rawvol(vol.voxels))
        mask_name = f"sample{i:05d}_mask.rawvol"
        with open(os.path.join(args.out, mask_name), "wb") as f:
            f.write(write_rawvol(vol.mask.astype(np.uint8)))
        entries.append(ManifestEntry(path=name, age=vol.meta.age, sex=vol.meta.sex,
                                     mask_path=mask_name))
    manifest = os.path.join(args.out, "manifest.json")
    save_manifest(entries, manifest)
    print(f"wrote {len(entries)} volumes to {args.out} (manifest: {manifest})")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train a model per the standard protocol")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--task", choices=["age", "sex"])
    p.add_argument("--variant", choices=["rf9", "rf17", "rf33", "rf177"])
    p.add_argument("--preset", choices=["desk", "paper"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--crop", type=_crop_arg, help="D,H,W")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--resume", default="", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)


def _crop_arg(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"crop must be D,H,W, got {text!r}")
    return tuple(int(p) for p in parts)


def cmd_train(args) -> int:
    text = "{}"
    if args.config:
        with open(args.config) as f:
            text = f.read()
    config = TrainConfig.from_json(
        text, task=args.task, variant=args.variant, preset=args.preset,
        seed=args.seed, epochs=args.epochs, crop=args.crop,
        manifest=args.manifest, checkpoint_dir=args.checkpoint_dir)
    if not config.manifest:
        raise VoxbagError("no manifest given (use --manifest or the config file)")

    def log(rec):
        print(json.dumps(rec))

    train(config, log_fn=log, resume_from=args.resume)
    print(f"checkpoints in {config.checkpoint_dir}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--crop", type=_crop_arg, help="D,H,W (default: training crop)")
    p.add_argument("--baseline-mean", action="store_true",
                   help="report the predict-dataset-mean baseline instead")
    p.set_defaults(func=cmd_eval)


def cmd_eval(args) -> int:
    if args.baseline_mean:
        report = baseline_report(args.manifest, "age")
        print(json.dumps(report))
        return 0
    if not args.checkpoint:
        raise VoxbagError("--checkpoint is required unless --baseline-mean is given")
    model, _, meta = load_checkpoint(args.checkpoint)
    task = meta["task"]
    crop = args.crop or tuple(meta.get("train_config", {}).get("crop", ()))
    if not crop:
        raise VoxbagError("checkpoint carries no crop shape; pass --crop D,H,W")
    report = evaluate_manifest(model, args.manifest, task, crop)
    print(json.dumps(report))
    return 0


def _add_rf(sub):
    p = sub.add_parser("rf", help="receptive-field table for a variant or config")
    p.add_argument("--variant", choices=["rf9", "rf17", "rf33", "rf177"])
    p.add_argument("--preset", choices=["desk", "paper"], default="paper")
    p.add_argument("--config", help="architecture config JSON file")
    p.add_argument("--json", action="store_true", dest="as_json")
    p.set_defaults(func=cmd_rf)


def cmd_rf(args) -> int:
    if args.config:
        from .architecture import BagNetConfig
        with open(args.config) as f:
            cfg = BagNetConfig.from_json(f.read())
    elif args.variant:
        cfg = variant_config(args.variant, args.preset)
    else:
        raise VoxbagError("rf needs --variant or --config")
    rows, final = compute_receptive_field(cfg)
    if args.as_json:
        print(json.dumps({"layers": rows, "final_rf": final}))
    else:
        print(f"{'layer':24s} {'k':>2s} {'stride':>6s} {'rf':>5s} {'jump':>5s}")
        for r in rows:
            print(f"{r['layer']:24s} {r['kernel']:2d} {r['stride']:6d} {r['rf']:5d} {r['jump']:5d}")
        print(f"final receptive field: {final}")
    return 0


def _add_heatmap(sub):
    p = sub.add_parser("heatmap", help="export localized prediction slices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--mask")
    p.add_argument("--axis", type=int, choices=[0, 1, 2], required=True)
    p.add_argument("--index", default="middle")
    p.add_argument("--format", default="csv", help="comma list of csv,pgm")
    p.add_argument("--upsample", choices=["none", "nearest"], default="none")
    p.add_argument("--probability", action="store_true",
                   help="export the class-1 probability map (sex task)")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_heatmap)


def cmd_heatmap(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint)
    vol = whiten(load_volume(args.volume, args.mask))
    crop = tuple(meta.get("train_config", {}).get("crop", ())) or vol.shape
    vol = center_crop(vol, crop)
    from .tensor import Tensor

    pmap = local_predictions(model, Tensor(vol.voxels[None, None]))
    residual = pmap.mean_residual()
    print(f"mean(local) vs global residual: {residual:.3e}")

    if args.probability:
        maps = {"prob": to_probability_map(pmap).data}
    else:
        maps = {f"logit{k}": pmap.local_logits.data[k] for k in range(pmap.local_logits.shape[0])}
    os.makedirs(args.out, exist_ok=True)
    written = []
    for tag, arr in maps.items():
        for fmt in args.format.split(","):
            name = f"{meta['task']}_rf{pmap.rf}_axis{args.axis}_{args.index}_{tag}.{fmt}"
            blob = export_slices(arr, args.axis, args.index, fmt,
                                 upsample=args.upsample, stride=pmap.stride)
            path = os.path.join(args.out, name)
            with open(path, "wb") as f:
                f.write(blob)
            written.append(path)
    print("\n".join(written))
    return 0


def _add_inspect(sub):
    p = sub.add_parser("inspect", help="dump a .nii or .rawvol header")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)


def cmd_inspect(args) -> int:
    with open(args.path, "rb") as f:
        blob = f.read()
    ext = os.path.splitext(args.path)[1].lower()
    if ext == ".nii":
        if len(blob) >= HEADER_SIZE:
            header, _ = parse_nifti1(blob)
            print(header.describe())
        else:
            _unpack_header(blob)  # raises FormatError naming missing bytes
    elif ext == ".rawvol":
        print(describe_rawvol(blob))
    else:
        raise FormatError(f"inspect supports .nii and .rawvol, got {args.path!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxbag",
        description="3D bag-of-local-features networks: synthesize data, train, "
                    "evaluate, extract localized prediction maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_rf(sub)
    _add_heatmap(sub)
    _add_inspect(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VoxbagError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
