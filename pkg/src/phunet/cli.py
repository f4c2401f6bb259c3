"""Command-line entry point: ``phunet {synth,train,correct,eval}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

import argparse
import glob
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .errors import (CheckpointError, ContractError, DimensionError, NumericError,
                     UndefinedMetricError, VolumeFormatError)
from .metrics import cv_metric, otsu_masks, snr_metric
from .phantom import make_dataset
from .train import TrainConfig, train
from .volume_io import read_volume, write_volume
from .wht import is_power_of_two

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATASET_MANIFEST = "dataset.json"
RUN_MANIFEST = "run_manifest.json"
# Subdirectories of a synthetic dataset, one raw volume per item in each.
KINDS = ("biased", "clean", "bias", "tissue", "background")


class DataError(Exception):
    """Missing, unreadable or inconsistent input data."""


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_manifest(args, command, timings, **extra):
    return {"command": command, "argv": sys.argv[1:],
            "args": {k: v for k, v in vars(args).items() if k != "func"},
            "timings": timings, **extra}


def _makedirs(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc


# --------------------------------------------------------------------- synth


def cmd_synth(args):
    if not is_power_of_two(args.size) or args.size < 32:
        raise ContractError(f"--size must be a power of two >= 32, got {args.size}")
    if args.n < 1:
        raise ContractError("--n must be >= 1")
    t0 = time.monotonic()
    phantoms, manifest = make_dataset(args.seed, args.n, args.size)
    t1 = time.monotonic()
    for kind in KINDS:
        _makedirs(os.path.join(args.out, kind))
    try:
        for item, ph in zip(manifest["items"], phantoms):
            arrays = {"biased": ph.biased, "clean": ph.clean, "bias": ph.bias,
                      "tissue": ph.tissue_mask, "background": ph.background_mask}
            for kind, a in arrays.items():
                path = os.path.join(args.out, kind, item["id"] + ".f32")
                write_volume(path, np.asarray(a, dtype=np.float32)[:, :, None], seed=item["seed"])
        _write_json(os.path.join(args.out, DATASET_MANIFEST), manifest)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from exc
    t2 = time.monotonic()
    timings = {"generate": t1 - t0, "write": t2 - t1}
    _write_json(os.path.join(args.out, RUN_MANIFEST),
                _run_manifest(args, "synth", timings, seed=args.seed))
    print(f"wrote {args.n} phantoms to {args.out}")


def load_dataset(path, kinds=("biased", "clean")):
    """Read a synth directory; returns (ids, {kind: [2D arrays]})."""
    mpath = os.path.join(path, DATASET_MANIFEST)
    if not os.path.exists(mpath):
        raise DataError(f"dataset manifest not found: {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    ids = [it["id"] for it in manifest["items"]]
    out = {}
    for kind in kinds:
        slices = []
        for i in ids:
            f = os.path.join(path, kind, i + ".f32")
            if not os.path.exists(f):
                raise DataError(f"missing {kind} volume for {i}: {f}")
            vol, _ = read_volume(f)
            slices.append(vol[0].astype(np.float64))
        out[kind] = slices
    return ids, out


# --------------------------------------------------------------------- train


def _train_config(args):
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {args.config}") from exc
        except ValueError as exc:
            raise ContractError(f"config file {args.config} is not valid JSON: {exc}") from exc
    base = TrainConfig.desk().to_dict() if args.desk else TrainConfig().to_dict()
    weights = {**base["loss_weights"], **data.get("loss_weights", {})}
    base.update(data)
    base["loss_weights"] = weights
    flags = {"epochs": args.epochs, "batch_size": args.batch_size,
             "learning_rate": args.lr, "seed": args.seed}
    base.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.from_dict(base)


def cmd_train(args):
    t0 = time.monotonic()
    ids, data = load_dataset(args.data)
    pairs = list(zip(data["biased"], data["clean"]))
    config = _train_config(args)
    size = pairs[0][0].shape[0]
    if config.image_size != size:
        config = TrainConfig.from_dict({**config.to_dict(), "image_size": size})
    _makedirs(args.out)
    ckpt = os.path.join(args.out, "checkpoint.phu")
    resume = ckpt if args.resume and os.path.exists(ckpt) else None
    t1 = time.monotonic()

    def log(row):
        print(json.dumps({"epoch": row["epoch"], "weighted": row["weighted"],
                          "total": row["total"]}, sort_keys=True), flush=True)

    result = train(pairs, config, out_dir=args.out, resume=resume, log=log)
    t2 = time.monotonic()
    timings = {"load": t1 - t0, "train": t2 - t1}
    _write_json(os.path.join(args.out, RUN_MANIFEST),
                _run_manifest(args, "train", timings, seed=config.seed,
                              config=config.to_dict(), epochs_run=len(result.history),
                              resumed_from=resume, checkpoint=ckpt))


# ------------------------------------------------------------------- correct


def _stem(path):
    base = os.path.basename(path)
    return base.split(".")[0]


def _suffix(path):
    return ".f32" if path.endswith((".f32", ".json")) else ".nii"


def cmd_correct(args):
    if args.samples < 1:
        raise ContractError("--samples must be >= 1")
    t0 = time.monotonic()
    model, _, _ = load_checkpoint(args.model, np.float32)
    size = model.config.size
    load_seconds = time.monotonic() - t0
    _makedirs(args.out)
    records = []
    rng = np.random.default_rng(args.seed)
    for path in args.inputs:
        slices, _ = read_volume(path)
        shape = slices[0].shape
        if not (is_power_of_two(shape[0]) and shape[0] == shape[1]):
            raise DimensionError(
                f"{path}: slice size {shape[0]}x{shape[1]} is not square with a power-of-two "
                f"side; supported sizes are 2^k x 2^k (this model: {size}x{size})")
        if shape != (size, size):
            raise DimensionError(f"{path}: slices are {shape[0]}x{shape[1]} but the model "
                                 f"was built for {size}x{size}")
        corrected = [[] for _ in range(args.samples)]
        fields, slice_seconds = [], []
        tv = time.monotonic()
        with ad.no_grad():
            for s in slices:
                ts = time.monotonic()
                c = model.correct(s, rng, args.samples)
                slice_seconds.append(time.monotonic() - ts)
                if not all(np.all(np.isfinite(o)) for o in c.samples):
                    raise NumericError(f"{path}: non-finite output")
                for k, o in enumerate(c.samples):
                    corrected[k].append(o)
                fields.append(c.field)
        volume_seconds = time.monotonic() - tv
        stem, ext = _stem(path), _suffix(path)
        outputs = []
        for k, vol in enumerate(corrected):
            out = os.path.join(args.out, f"{stem}.s{k}{ext}")
            write_volume(out, np.stack(vol, axis=-1).astype(np.float32), seed=args.seed)
            outputs.append(out)
        field_path = os.path.join(args.out, f"{stem}.field{ext}")
        write_volume(field_path, np.stack(fields, axis=-1).astype(np.float32), seed=args.seed)
        records.append({"input": path, "id": stem, "slices": len(slices),
                        "corrected": outputs, "field": field_path,
                        "volume_seconds": volume_seconds, "slice_seconds": slice_seconds})
        print(f"{path}: {len(slices)} slices in {volume_seconds:.3f} s")
    timings = {"load_model": load_seconds, "total": time.monotonic() - t0}
    _write_json(os.path.join(args.out, RUN_MANIFEST),
                _run_manifest(args, "correct", timings, seed=args.seed, volumes=records))


# ---------------------------------------------------------------------- eval


def _row(vid, before, after, fg, bg):
    return {"id": vid,
            "cv_before": cv_metric(before, fg), "cv_after": cv_metric(after, fg),
            "snr_before": snr_metric(before, fg, bg), "snr_after": snr_metric(after, fg, bg)}


def _corrected_files(directory):
    found = {}
    for path in sorted(glob.glob(os.path.join(directory, "*"))):
        if path.endswith(".json") or ".field." in os.path.basename(path):
            continue
        base = os.path.basename(path)
        # Prefer the first sample when a correction wrote several.
        if ".s" in base and not base.split(".")[1] == "s0":
            continue
        found.setdefault(_stem(path), path)
    return found


def cmd_eval(args):
    rows = []
    if args.pairs:
        ids, data = load_dataset(args.pairs, ("biased", "clean", "tissue", "background"))
        for i, vid in enumerate(ids):
            rows.append(_row(vid, data["biased"][i], data["clean"][i],
                             data["tissue"][i] > 0.5, data["background"][i] > 0.5))
    else:
        if not (args.corrected and args.reference):
            raise ContractError("eval needs --pairs, or both --corrected and --reference")
        found = _corrected_files(args.corrected)
        if os.path.exists(os.path.join(args.reference, DATASET_MANIFEST)):
            ids, data = load_dataset(args.reference, ("biased", "tissue", "background"))
            refs = {vid: (data["biased"][i], data["tissue"][i] > 0.5, data["background"][i] > 0.5)
                    for i, vid in enumerate(ids)}
        else:
            refs = {}
            for path in sorted(glob.glob(os.path.join(args.reference, "*"))):
                if path.endswith(".json"):
                    continue
                img = read_volume(path)[0][0].astype(np.float64)
                fg, bg = otsu_masks(img)
                refs[_stem(path)] = (img, fg, bg)
        unmatched = sorted(set(found) ^ set(refs))
        if unmatched:
            raise DataError(f"ids without a counterpart: {', '.join(unmatched)}")
        for vid in sorted(refs):
            before, fg, bg = refs[vid]
            after = read_volume(found[vid])[0][0].astype(np.float64)
            rows.append(_row(vid, before, after, fg, bg))
    keys = ("cv_before", "cv_after", "snr_before", "snr_after")
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    lines.append(json.dumps({"aggregate": aggregate, "count": len(rows)}, sort_keys=True))
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            with open(args.out, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise DataError(f"cannot write report {args.out}: {exc}") from exc
    sys.stdout.write(text)


# ---------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="phunet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a synthetic dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--out", required=True)
    t.add_argument("--desk", action="store_true", help="start from desk-scale defaults")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true",
                   help="continue from OUT/checkpoint.phu if present")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("correct", help="correct volumes with a trained checkpoint")
    c.add_argument("--model", required=True)
    c.add_argument("--in", dest="inputs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--samples", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_correct)

    e = sub.add_parser("eval", help="CV/SNR report before and after correction")
    e.add_argument("--pairs", help="synthetic dataset; compares biased with clean")
    e.add_argument("--corrected", help="directory of corrected volumes")
    e.add_argument("--reference", help="dataset or directory of uncorrected volumes")
    e.add_argument("--out", help="report file (JSON lines)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, VolumeFormatError, CheckpointError, UndefinedMetricError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
