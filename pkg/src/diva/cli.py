"""Command-line entry point: ``diva {generate,train,eval,segment,video,export-panels}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .core import InputShapeError, NonFiniteInputError
from .diagnostic import evaluate
from .flowio import FlowField, FlowFormatError, flow_read, flow_to_rgb
from .infer import (
    FramePrediction, export_panels, merge_multi_delta, refine_fullres, segment_frame, segment_video, validate_pair,
)
from .metrics import summary_table, write_jsonl
from .synthgen import DirectoryAssets, GenerationError, build_split, generate_arrays, load_split, write_split
from .trainer import ArraySource, NumericalFailure, TrainConfig, load_checkpoint, load_model, run

log = logging.getLogger("diva")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DELTAS = (-2, -1, 1, 2)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    if h < 32 or w < 32 or h % 4 or w % 4:
        raise argparse.ArgumentTypeError(f"size {h}x{w} must be >= 32 and divisible by 4")
    return h, w


def _common(p, slots_default=4):
    p.add_argument("--slots", type=int, default=slots_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--tau-area", type=float, default=0.005)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diva", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic split to disk")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=int, default=300)
    g.add_argument("--split", default="val")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=parse_size, default=(64, 64))
    g.add_argument("--regions", default="2,3,4", help="comma-separated region counts")
    g.add_argument("--mask-dir", type=Path)
    g.add_argument("--background-dir", type=Path)

    t = sub.add_parser("train", help="train a model on a generated split")
    _common(t)
    t.add_argument("--config", type=Path, help="JSON or key=value file with TrainConfig fields")
    t.add_argument("--data", type=Path, help="split directory from `generate`")
    t.add_argument("--generate", type=int, default=0, help="train on N in-memory samples instead of --data")
    t.add_argument("--size", type=parse_size, default=(64, 64))
    t.add_argument("--regions", default="2,3,4", help="region counts for --generate")
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", action="store_true", help="continue from --checkpoint")

    e = sub.add_parser("eval", help="bIoU / SPC over a split")
    _common(e)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, help="per-sample JSON lines")

    s = sub.add_parser("segment", help="segment one image/flow pair")
    _common(s, slots_default=2)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--flow", type=Path, required=True)
    s.add_argument("--max-norm", type=float, help="color-wheel scale; defaults to the flow's peak magnitude")
    s.add_argument("--size", type=parse_size, help="model input size; native size when omitted")
    s.add_argument("--out", type=Path, required=True)

    v = sub.add_parser("video", help="segment a frame sequence")
    _common(v, slots_default=2)
    v.add_argument("--frames", type=Path, required=True,
                   help="directory of NAME.png + NAME.flo (or NAME_dt{-2,-1,1,2}.flo with --merge4)")
    v.add_argument("--max-norm", type=float, required=True)
    v.add_argument("--size", type=parse_size)
    v.add_argument("--recursive", action="store_true")
    v.add_argument("--merge4", action="store_true")
    v.add_argument("--out", type=Path, required=True)

    x = sub.add_parser("export-panels", help="image/flow/recon/per-slot/label panels for a split")
    _common(x)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--count", type=int, default=8)
    x.add_argument("--out", type=Path, required=True)
    return parser


def _require_checkpoint(args):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    return load_model(args.checkpoint)[0]


def cmd_generate(args) -> None:
    regions = tuple(int(r) for r in args.regions.split(","))
    manifest = build_split(args.seed, args.count, args.split, args.size, regions)
    assets = None
    if args.mask_dir or args.background_dir:
        if not (args.mask_dir and args.background_dir):
            raise UsageError("--mask-dir and --background-dir go together")
        assets = DirectoryAssets(args.mask_dir, args.background_dir)
        manifest["asset_pool"] = f"dir:{args.mask_dir}:{args.background_dir}"
    write_split(args.out, manifest, assets)
    print(f"wrote {args.count} samples to {args.out}")


def cmd_train(args) -> None:
    if args.resume:
        if args.checkpoint is None:
            raise UsageError("--resume needs --checkpoint")
        state = load_checkpoint(args.checkpoint)
        cfg = state.config
    else:
        state = None
        cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
        overrides = {"n_slots": args.slots, "seed": args.seed}
        if args.lam is not None:
            overrides.update(lam=args.lam, lam_final=args.lam)
        if args.steps is not None:
            overrides["steps"] = args.steps
        if args.batch_size is not None:
            overrides["batch_size"] = args.batch_size
        cfg = replace(cfg, **overrides)
    if args.data:
        arrays = load_split(args.data)
    elif args.generate:
        regions = tuple(int(r) for r in args.regions.split(","))
        arrays = generate_arrays(build_split(cfg.seed, args.generate, "train", args.size, regions))
    else:
        raise UsageError("either --data or --generate is required")
    source = ArraySource(arrays["flow_rgb"], arrays["image"], seed=cfg.seed)

    def on_log(rec):
        if rec["step"] % 50 == 0:
            log.info("step %(step)d total %(total).5f recon %(reconstruction).5f lambda %(lambda).3f", rec)

    run(cfg, source, out_dir=args.out, resume=state, on_log=on_log)
    print(f"checkpoint: {args.out / 'checkpoint.pt'}")


def cmd_eval(args) -> None:
    model = _require_checkpoint(args)
    arrays = load_split(args.data)
    res = evaluate(model, arrays, args.slots, seed=args.seed, tau_area=args.tau_area)
    if args.out:
        rows = []
        for rec in res["records"]:
            sid = arrays["ids"][rec["index"]]
            rows += [{"sample": sid, "metric": k, "value": rec[k]} for k in ("biou", "count", "regions", "entropy")]
        write_jsonl(rows, args.out)
    print(summary_table({str(args.checkpoint): {
        "bIoU": res["biou"], "SPC": res["spc"], "SPC_objects": res["spc_objects_only"], "samples": res["count"],
    }}))


def _load_pair(image_path, flow_path, max_norm, size):
    image = np.asarray(PILImage.open(image_path).convert("RGB"), dtype=np.float32) / 255.0
    vectors = flow_read(flow_path)
    if vectors.shape[:2] != image.shape[:2]:
        raise InputShapeError(f"image {image.shape[:2]} and flow {vectors.shape[:2]} differ")
    if max_norm is None:
        max_norm = max(float(np.linalg.norm(vectors, axis=-1).max()), 1e-6)
    native = FlowField(vectors, max_norm)
    # spatial resize only: vectors stay in native pixel units so refinement can compare directly
    rgb = flow_to_rgb(native)
    if size and tuple(size) != image.shape[:2]:
        h, w = size
        image = np.asarray(PILImage.fromarray((image * 255).astype(np.uint8)).resize((w, h), PILImage.BILINEAR),
                           dtype=np.float32) / 255.0
        small = np.stack([np.asarray(PILImage.fromarray(vectors[..., c]).resize((w, h), PILImage.BILINEAR))
                          for c in range(2)], axis=-1)
        rgb = flow_to_rgb(np.clip(small, -max_norm, max_norm), max_norm)
    validate_pair(image, rgb)
    return image, rgb, native


def _save_prediction(out: Path, pred: FramePrediction, native_labels, prefix=""):
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{prefix}masks.npy", pred.masks)
    PILImage.fromarray(native_labels.astype(np.uint8)).save(out / f"{prefix}labels.png")


def cmd_segment(args) -> None:
    model = _require_checkpoint(args)
    image, rgb, native = _load_pair(args.image, args.flow, args.max_norm, args.size)
    pred = segment_frame(model, image, rgb, args.slots, torch.Generator().manual_seed(args.seed))
    labels = refine_fullres(pred, native)
    _save_prediction(args.out, pred, labels)
    export_panels(args.out, image, rgb, pred, prefix="panel_")
    print(f"wrote masks and panels to {args.out}")


def cmd_video(args) -> None:
    model = _require_checkpoint(args)
    names = sorted(p.stem for p in args.frames.glob("*.png"))
    if not names:
        raise FileNotFoundError(f"no frames in {args.frames}")
    mode = "recursive" if args.recursive else "independent"
    gen = torch.Generator().manual_seed(args.seed)
    offsets = DELTAS if args.merge4 else (None,)
    per_offset = []
    for dt in offsets:
        pairs, natives = [], []
        for name in names:
            flow_path = args.frames / (f"{name}.flo" if dt is None else f"{name}_dt{dt}.flo")
            image, rgb, native = _load_pair(args.frames / f"{name}.png", flow_path, args.max_norm, args.size)
            pairs.append((image, rgb))
            natives.append(native)
        per_offset.append((segment_video(model, pairs, args.slots, mode, gen), natives))
    for t, name in enumerate(names):
        preds = [p[0][t] for p in per_offset]
        pred = merge_multi_delta(preds) if args.merge4 else preds[0]
        labels = refine_fullres(pred, per_offset[-1][1][t]) if not args.merge4 else pred.labels
        _save_prediction(args.out, pred, labels, prefix=f"{name}_")
    print(f"segmented {len(names)} frames ({mode}{', merged' if args.merge4 else ''}) into {args.out}")


def cmd_export_panels(args) -> None:
    model = _require_checkpoint(args)
    arrays = load_split(args.data)
    gen = torch.Generator().manual_seed(args.seed)
    for i in range(min(args.count, len(arrays["ids"]))):
        pred = segment_frame(model, arrays["image"][i], arrays["flow_rgb"][i], args.slots, gen)
        export_panels(args.out, arrays["image"][i], arrays["flow_rgb"][i], pred, prefix=f"{arrays['ids'][i]}_")
    print(f"wrote panels to {args.out}")


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
    "segment": cmd_segment, "video": cmd_video, "export-panels": cmd_export_panels,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"diva: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"diva: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FlowFormatError, InputShapeError, NonFiniteInputError, GenerationError,
            FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"diva: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
