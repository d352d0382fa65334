"""Command-line entry point: ``imted <command> --config FILE [--set key=value ...]``.

Every command prints a short human summary and writes a JSON result to
``<out_dir>/<command>.result.json`` (or to stdout with ``--json``). Exit status is 0 on
success, 2 for configuration or input errors and 3 for numeric failures.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from ..config import (ConfigError, DetectorConfig, VIT_SIZES, apply_overrides, desk_config,
                      detector_from_dict, load_config_file, full_config, to_dict, train_from_dict)
from ..detector import Detector
from ..migration.accounting import count_params, estimate_flops
from ..migration.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..migration.migrate import MigrationError, migrate
from .ablation import default_rows, format_table, run_ablation
from .data import SyntheticSpec, filter_occluded, gen_synthetic_dataset, load_dataset, save_dataset
from .evaluate import evaluate
from .mae import MaeConfig, pretrain_mae
from .train import NumericFailure, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("gen-data", "pretrain-mae", "migrate", "train", "eval", "count-params", "flops",
            "filter-occluded", "ablate")

log = logging.getLogger("imted")


# -- config plumbing -----------------------------------------------------------------

def _merge(base, extra):
    out = dict(base)
    for k, v in (extra or {}).items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def detector_config(doc) -> DetectorConfig:
    preset = doc.get("preset", "desk")
    if preset == "desk":
        base = desk_config()
    elif preset == "full":
        size = doc.get("vit_size", "S")
        if size not in VIT_SIZES:
            raise ConfigError(f"vit_size must be one of {sorted(VIT_SIZES)}")
        base = full_config(size)
    else:
        raise ConfigError(f"unknown preset {preset!r} (expected 'desk' or 'full')")
    return detector_from_dict(_merge(to_dict(base), doc.get("detector")))


def _dataclass_from(cls, data):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data or {}) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in (data or {}).items()}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def synthetic_spec(doc, key, default_n, default_seed):
    data = {"n_images": default_n, "seed": default_seed, **(doc.get(key) or {})}
    return _dataclass_from(SyntheticSpec, data)


def _path(doc, key):
    return (doc.get("paths") or {}).get(key)


def _out_dir(doc):
    out = _path(doc, "out_dir") or "runs/default"
    os.makedirs(out, exist_ok=True)
    return out


def _dataset(doc, key, data_key, default_n, default_seed):
    path = _path(doc, key)
    if path:
        try:
            return load_dataset(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load dataset {path}: {exc}") from None
    return gen_synthetic_dataset(synthetic_spec(doc, data_key, default_n, default_seed))


def _source(doc):
    path = _path(doc, "source")
    return load_checkpoint(path) if path else None


def _load_detector(doc, cfg):
    path = _path(doc, "checkpoint")
    if not path:
        raise ConfigError("paths.checkpoint is required")
    det = Detector(cfg, seed=0)
    arch = load_checkpoint(path)
    try:
        det.load_state_dict(dict(arch.items()))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {path} does not fit the configured detector: {exc}") from None
    return det


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(doc, args):
    out = _out_dir(doc)
    res = {}
    for split, key, n, seed in (("train", "data", 500, 1), ("val", "val_data", 100, 2)):
        ds = gen_synthetic_dataset(synthetic_spec(doc, key, n, seed))
        path = save_dataset(ds, os.path.join(out, split))
        res[split] = {"path": path, "images": len(ds), "objects": int(sum(len(b) for b in ds.boxes))}
    summary = "\n".join(f"{k}: {v['images']} images, {v['objects']} objects -> {v['path']}" for k, v in res.items())
    return res, summary


def cmd_pretrain_mae(doc, args):
    cfg = detector_config(doc)
    mcfg = _dataclass_from(MaeConfig, doc.get("mae"))
    ds = gen_synthetic_dataset(synthetic_spec(doc, "mae_data", 2000, 123))
    arch, history = pretrain_mae(ds.images, cfg.vit, mcfg)
    path = os.path.join(_out_dir(doc), "source.ckpt")
    save_checkpoint(arch, path)
    res = {"path": path, "tensors": len(arch), "loss_per_epoch": history}
    return res, f"masked-autoencoder loss {history[0]:.4f} -> {history[-1]:.4f}; wrote {path}"


def cmd_migrate(doc, args):
    cfg = detector_config(doc)
    src = _source(doc)
    if src is None:
        raise ConfigError("paths.source is required for migrate")
    det, report = migrate(src, cfg, seed=int(doc.get("seed", 0)))
    out = _out_dir(doc)
    ckpt = os.path.join(out, "migrated.ckpt")
    save_checkpoint(det.named_parameters(), ckpt)
    with open(os.path.join(out, "migration_report.txt"), "w") as fh:
        fh.write(report.to_text())
    t = report.totals
    res = {"checkpoint": ckpt, "report": report.to_dict()}
    summary = (f"mapped {len(report.mapped)} tensors, scratch {len(report.scratch)}, "
               f"orphaned {len(report.orphaned)}; pretrained {t['pretrained_params']:,} / "
               f"scratch {t['scratch_params']:,} params ({100 * t['scratch_fraction']:.1f}% scratch)")
    return res, summary


def cmd_train(doc, args):
    cfg = detector_config(doc)
    tcfg = train_from_dict(doc.get("train") or {})
    ds = _dataset(doc, "train", "data", 500, 1)
    src = _source(doc)
    if src is not None:
        det, _ = migrate(src, cfg, seed=tcfg.seed)
    else:
        det = Detector(cfg, seed=tcfg.seed)
    start = time.time()
    result = train(det, ds, tcfg, progress=lambda r: log.info("epoch %d iter %d total %.4f",
                                                                r["epoch"], r["iter"], r["total"]))
    out = _out_dir(doc)
    csv_path = os.path.join(out, "losses.csv")
    result.write_csv(csv_path)
    ckpt = os.path.join(out, "detector.ckpt")
    save_checkpoint(det.named_parameters(), ckpt)
    with open(os.path.join(out, "detector.json"), "w") as fh:
        json.dump(to_dict(cfg), fh, indent=1)
    res = {"checkpoint": ckpt, "loss_csv": csv_path, "epoch_means": result.epoch_means,
           "seconds": time.time() - start}
    first, last = result.epoch_means[0]["total"], result.epoch_means[-1]["total"]
    return res, f"trained {tcfg.epochs} epochs: mean total loss {first:.4f} -> {last:.4f}; wrote {ckpt}"


def cmd_eval(doc, args):
    cfg = detector_config(doc)
    det = _load_detector(doc, cfg)
    ds = _dataset(doc, "val", "val_data", 100, 2)
    m = evaluate(det, ds)
    return m, f"AP {m['AP']:.4f}  AP50 {m['AP50']:.4f}  AP75 {m['AP75']:.4f}"


def cmd_count_params(doc, args):
    cfg = detector_config(doc)
    c = count_params(cfg)
    lines = [f"{k:<26}{v:>14,}" for k, v in c["modules"].items()]
    lines.append(f"{'pretrained':<26}{c['pretrained']:>14,}")
    lines.append(f"{'scratch':<26}{c['scratch']:>14,}")
    lines.append(f"{'total':<26}{c['total']:>14,}  (scratch fraction {c['scratch_fraction']:.4f})")
    return c, "\n".join(lines)


def cmd_flops(doc, args):
    cfg = detector_config(doc)
    fl = doc.get("flops") or {}
    hw = tuple(fl.get("input_hw", (800, 1344)))
    f = estimate_flops(cfg, hw, int(fl.get("num_rois", 512)), int(fl.get("flops_per_mac", 1)))
    return f, "\n".join(f"{k:<10}{v / 1e9:>12.3f} G" for k, v in f.items())


def cmd_filter_occluded(doc, args):
    ds = _dataset(doc, "train", "data", 200, 1)
    thresh = float((doc.get("filter") or {}).get("iou_thresh", 0.5))
    sub = filter_occluded(ds, thresh)
    path = save_dataset(sub, os.path.join(_out_dir(doc), "occluded"))
    res = {"path": path, "selected_ids": [int(i) for i in sub.ids], "selected": len(sub), "total": len(ds)}
    return res, f"{len(sub)} of {len(ds)} images hold a ground-truth pair with IoU > {thresh}; wrote {path}"


def cmd_ablate(doc, args):
    cfg = detector_config(doc)
    tcfg = train_from_dict(doc.get("train") or {})
    tr = _dataset(doc, "train", "data", 500, 1)
    va = _dataset(doc, "val", "val_data", 100, 2)
    table = run_ablation(default_rows(cfg), tr, va, tcfg, _source(doc), seed=tcfg.seed)
    return {"rows": table}, format_table(table)


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain-mae": cmd_pretrain_mae, "migrate": cmd_migrate,
    "train": cmd_train, "eval": cmd_eval, "count-params": cmd_count_params, "flops": cmd_flops,
    "filter-occluded": cmd_filter_occluded, "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="imted", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", "-c", help="YAML or JSON config file")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. detector.head.use_mfm=false")
        s.add_argument("--json", action="store_true", help="print the JSON result on stdout")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = load_config_file(args.config) if args.config else {}
        doc = apply_overrides(doc, args.overrides)
        result, summary = HANDLERS[args.command](doc, args)
    except (ConfigError, CheckpointError, MigrationError, FileNotFoundError) as exc:
        print(f"imted {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, FloatingPointError) as exc:
        print(f"imted {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    payload = json.dumps({"command": args.command, "result": _jsonable(result)}, indent=1)
    if args.json:
        print(summary, file=sys.stderr)
        print(payload)
    else:
        out = _out_dir(doc)
        with open(os.path.join(out, f"{args.command}.result.json"), "w") as fh:
            fh.write(payload)
        print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
