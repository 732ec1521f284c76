"""Command-line driver: dataset synthesis, training, evaluation, inference,
gradient probes, feature export, and the one-command ablation sweeps.

Conventions: data goes to files or standard output, diagnostics to standard
error, exit code 0 iff the command succeeded.  Every command is deterministic
given its flags; run directories carry a manifest with a content hash of the
package sources plus the resolved config.  DSFPN_THREADS caps how many
ablation runs execute in parallel processes (default 1).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as D
from . import instrument, metrics, training
from .model import DetectionModel, ModelConfig, load_checkpoint
from .netpbm import read_netpbm
from .training import TrainConfig


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def content_hash(config: dict) -> str:
    """Hash of the package sources plus the resolved config."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for src in sorted(pkg.glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    h.update(json.dumps(config, sort_keys=True).encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   outputs: list, argv: list) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "config": config,
        "content_hash": content_hash(config),
        "outputs": sorted(str(o) for o in outputs),
        "package_version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# --- config resolution -------------------------------------------------------

_MODEL_FLAGS = {
    "ds": "ds_enabled", "dc": "dc_enabled", "masks": "with_masks",
    "stages": "num_stages", "aux_box_source": "aux_box_source",
}
_TRAIN_FLAGS = ("iterations", "lr", "seed", "batch_size", "eval_interval")


def resolve_configs(args) -> tuple:
    """(ModelConfig, TrainConfig, raw dict) from --config JSON plus flag
    overrides.  Validation failures name the offending field."""
    raw = {"model": {}, "train": {}}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"--config {args.config}: malformed JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ValueError(f"--config {args.config}: expected an object")
        for key in loaded:
            if key not in ("model", "train"):
                raise ValueError(f"--config: unknown section {key!r}")
        raw["model"].update(loaded.get("model", {}))
        raw["train"].update(loaded.get("train", {}))
    for flag, dest in _MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            raw["model"][dest] = v
    for flag in _TRAIN_FLAGS:
        v = getattr(args, flag, None)
        if v is not None:
            raw["train"][flag] = v
    try:
        model_cfg = ModelConfig.from_dict(raw["model"])
    except (TypeError, ValueError) as e:
        raise ValueError(f"model config: {e}") from e
    try:
        train_cfg = TrainConfig(**raw["train"])
    except (TypeError, ValueError) as e:
        raise ValueError(f"train config: {e}") from e
    return model_cfg, train_cfg, {"model": model_cfg.to_dict(),
                                  "train": train_cfg.__dict__.copy()}


def load_data_dir(path) -> list:
    ann = Path(path) / "annotations.json"
    if not ann.is_file():
        raise ValueError(f"{path}: no annotations.json found")
    return D.coco_read(ann)


def _image_from_file(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


# --- commands ----------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = D.synth_generate(args.n, (args.size, args.size), args.classes, args.seed)
    from .netpbm import write_ppm
    outputs = []
    for s in ds:
        p = out / D.image_file_name(s.image_id)
        write_ppm(p, s.pixels)
        outputs.append(p.name)
    D.coco_write(ds, out / "annotations.json")
    outputs.append("annotations.json")
    cfg = {"n": args.n, "size": args.size, "classes": args.classes, "seed": args.seed}
    write_manifest(out, "synth", cfg, args.seed, outputs, argv)
    _log(f"wrote {len(ds)} images + annotations to {out}")
    return 0


def cmd_train(args, argv) -> int:
    model_cfg, train_cfg, raw = resolve_configs(args)
    data = load_data_dir(args.data)
    val = load_data_dir(args.val_data) if args.val_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(raw, indent=2, sort_keys=True))
    dtype = np.float64 if args.float64 else np.float32
    model = DetectionModel(model_cfg, dtype=dtype, seed=train_cfg.seed)
    _log(f"training {train_cfg.iterations} iterations on {len(data)} images")
    history = training.train(model, train_cfg, data, out_dir=out, val_set=val)
    write_manifest(out, "train", raw, train_cfg.seed,
                   ["config.json", "train_log.csv", "checkpoint_final.ckpt"], argv)
    summary = history[-1] if history else {}
    print(json.dumps({"out": str(out), "final": summary}, sort_keys=True))
    return 0


def _dets_by_image(model, data) -> list:
    return [model.forward_infer(s.image) for s in data]


def cmd_eval(args, argv) -> int:
    data = load_data_dir(args.data)
    if args.detections:
        by_id = D.detections_read(args.detections)
        dets = [by_id.get(s.image_id, []) for s in data]
    else:
        if not args.checkpoint:
            raise ValueError("eval needs --checkpoint or --detections")
        model = load_checkpoint(args.checkpoint)
        dets = _dets_by_image(model, data)
    rep = metrics.evaluate_full(dets, [s.gt for s in data])
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_infer(args, argv) -> int:
    model = load_checkpoint(args.checkpoint)
    image = _image_from_file(args.image)
    dets = model.forward_infer(image)
    rows = []
    for d in dets:
        row = {"category_id": int(d.label), "bbox": D.xyxy_to_xywh(d.box),
               "score": float(d.score)}
        if d.mask is not None:
            row["segmentation"] = D.rle_encode(d.mask.astype(np.uint8))
        rows.append(row)
    print(json.dumps(rows))
    return 0


def cmd_probe(args, argv) -> int:
    model_cfg, train_cfg, raw = resolve_configs(args)
    w, h = model_cfg.image_size
    batches = D.synth_generate(args.batches, (w, h), model_cfg.num_classes,
                               seed=args.data_seed)
    reports = {}
    for label, ds_on in (("ds_on", True), ("ds_off", False)):
        cfg = replace(model_cfg, ds_enabled=ds_on)
        model = DetectionModel(cfg, dtype=np.float64, seed=train_cfg.seed)
        reports[label] = instrument.grad_probe(model, batches, args.n,
                                               probe_seed=train_cfg.seed,
                                               config_label=label)
    s0 = {k: r.prefix_norm("backbone.s0") for k, r in reports.items()}
    ratio = s0["ds_on"] / s0["ds_off"] if s0["ds_off"] > 0 else float("inf")
    doc = {
        "ds_on": reports["ds_on"].to_dict(),
        "ds_off": reports["ds_off"].to_dict(),
        "earliest_stage": {"on": s0["ds_on"], "off": s0["ds_off"], "ratio": ratio},
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_export_features(args, argv) -> int:
    model = load_checkpoint(args.checkpoint)
    image = _image_from_file(args.image)
    paths = instrument.export_feature_maps(model, image, args.out_prefix)
    print(json.dumps(paths))
    return 0


# --- ablations ---------------------------------------------------------------

_DS_DC_GRID = (
    ("baseline", False, False),
    ("ds", True, False),
    ("dc", False, True),
    ("ds_dc", True, True),
)


def _ablate_worker(payload: dict) -> dict:
    """One training run; top-level so process pools can pickle it."""
    size = payload["size"]
    data = D.synth_generate(payload["train_n"], (size, size), payload["classes"],
                            seed=payload["data_seed"])
    val = D.synth_generate(payload["val_n"], (size, size), payload["classes"],
                           seed=payload["data_seed"] + 1)
    model_cfg = ModelConfig.from_dict(payload["model"])
    train_cfg = TrainConfig(**payload["train"])
    model = DetectionModel(model_cfg, dtype=np.float32, seed=train_cfg.seed)
    out_dir = Path(payload["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if payload.get("curve_interval"):
        rows = instrument.learning_curve(model, train_cfg, data, val,
                                         payload["curve_interval"], out_dir=out_dir)
    else:
        history = training.train(model, train_cfg, data, out_dir=out_dir, val_set=val)
        rows = [{k: r.get(k) for k in ("iteration", "val_ap", "val_ap50")}
                for r in history if "val_ap50" in r]
    final = rows[-1] if rows else {}
    return {"name": payload["name"], "seed": train_cfg.seed,
            "val_ap50": final.get("val_ap50", 0.0), "val_ap": final.get("val_ap", 0.0),
            "rows": rows}


def _run_jobs(jobs: list) -> list:
    workers = int(os.environ.get("DSFPN_THREADS", "1") or "1")
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablate_worker, jobs))
    return [_ablate_worker(j) for j in jobs]


def _mean_sd(vals: list) -> tuple:
    m = statistics.fmean(vals)
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return m, sd


def _write_table(out: Path, name: str, header: list, rows: list) -> None:
    with open(out / f"{name}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    (out / f"{name}.md").write_text("\n".join(lines) + "\n")


def _job(args, name, seed, model_kwargs, curve_interval=None) -> dict:
    model_kwargs = dict(model_kwargs, image_size=(args.size, args.size),
                        num_classes=args.classes)
    model = ModelConfig.from_dict(model_kwargs).to_dict()
    train = {"iterations": args.iterations, "seed": seed,
             "lr_decay_at": max(1, int(args.iterations * 0.9))}
    return {"name": name, "seed": seed, "model": model, "train": train,
            "train_n": args.train_n, "val_n": args.val_n, "size": args.size,
            "classes": args.classes, "data_seed": args.data_seed,
            "out_dir": str(Path(args.out) / f"run_{name}_s{seed}"),
            "curve_interval": curve_interval}


def cmd_ablate(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))
    jobs = []
    if args.which == "ds_dc":
        for name, ds, dc in _DS_DC_GRID:
            for seed in seeds:
                jobs.append(_job(args, name, seed,
                                 {"ds_enabled": ds, "dc_enabled": dc}))
    elif args.which == "box_source":
        for src in (0, 1, 2):
            for seed in seeds:
                jobs.append(_job(args, f"source{src}", seed,
                                 {"num_stages": 3, "aux_box_source": src,
                                  "ds_enabled": True, "dc_enabled": True}))
    else:  # convergence
        for name, ds, dc in (_DS_DC_GRID[0], _DS_DC_GRID[3]):
            for seed in seeds:
                jobs.append(_job(args, name, seed,
                                 {"ds_enabled": ds, "dc_enabled": dc},
                                 curve_interval=args.interval))
    _log(f"{args.which}: {len(jobs)} runs "
         f"({int(os.environ.get('DSFPN_THREADS', '1') or '1')} workers)")
    results = _run_jobs(jobs)
    (out / "runs.json").write_text(json.dumps(results, indent=2, sort_keys=True))

    by_name: dict = {}
    for r in results:
        by_name.setdefault(r["name"], []).append(r)
    if args.which == "ds_dc":
        rows = []
        for name, ds, dc in _DS_DC_GRID:
            a50 = [r["val_ap50"] for r in by_name[name]]
            ap = [r["val_ap"] for r in by_name[name]]
            m50, s50 = _mean_sd(a50)
            ma, sa = _mean_sd(ap)
            rows.append([name, "v" if ds else "x", "v" if dc else "x",
                        len(a50), f"{m50:.4f}", f"{s50:.4f}", f"{ma:.4f}", f"{sa:.4f}"])
        _write_table(out, "ds_dc",
                     ["config", "ds", "dc", "seeds", "val_ap50_mean", "val_ap50_sd",
                      "val_ap_mean", "val_ap_sd"], rows)
    elif args.which == "box_source":
        rows = []
        for src in (0, 1, 2):
            a50 = [r["val_ap50"] for r in by_name[f"source{src}"]]
            m50, s50 = _mean_sd(a50)
            rows.append([f"stage{src}", len(a50), f"{m50:.4f}", f"{s50:.4f}"])
        _write_table(out, "box_source",
                     ["source", "seeds", "val_ap50_mean", "val_ap50_sd"], rows)
    else:
        rows = []
        for seed in seeds:
            base = next(r for r in by_name["baseline"] if r["seed"] == seed)
            dsdc = next(r for r in by_name["ds_dc"] if r["seed"] == seed)
            tau = 0.5 * base["rows"][-1]["val_ap50"]
            rows.append([seed, f"{tau:.4f}",
                         _iters_to(dsdc["rows"], tau), _iters_to(base["rows"], tau),
                         f"{dsdc['rows'][-1]['val_ap50']:.4f}",
                         f"{base['rows'][-1]['val_ap50']:.4f}"])
        _write_table(out, "convergence",
                     ["seed", "tau", "iters_dsfpn", "iters_baseline",
                      "dsfpn_final_ap50", "baseline_final_ap50"], rows)
        med = {
            "iters_dsfpn_median": statistics.median(r[2] for r in rows),
            "iters_baseline_median": statistics.median(r[3] for r in rows),
        }
        (out / "convergence_summary.json").write_text(json.dumps(med, sort_keys=True))
    cfg = {"which": args.which, "seeds": args.seeds, "iterations": args.iterations,
           "train_n": args.train_n, "val_n": args.val_n, "size": args.size,
           "classes": args.classes, "data_seed": args.data_seed}
    write_manifest(out, f"ablate:{args.which}", cfg, args.data_seed,
                   [f"{args.which}.csv", f"{args.which}.md", "runs.json"], argv)
    _log(f"ablation tables in {out}")
    return 0


def _iters_to(rows: list, tau: float) -> int:
    """First grid iteration whose val AP50 reaches tau; one past the last
    grid point if never reached."""
    for r in rows:
        if r["val_ap50"] >= tau:
            return int(r["iteration"])
    return int(rows[-1]["iteration"]) + 1 if rows else 0


# --- parser ------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _onoff(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {text!r}")
    return text == "on"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config with 'model'/'train' sections")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--ds", type=_onoff, help="aux supervision on|off")
    p.add_argument("--dc", type=_onoff, help="decoupled heads on|off")
    p.add_argument("--masks", type=_onoff, help="mask heads on|off")
    p.add_argument("--stages", type=int, choices=(1, 3))
    p.add_argument("--aux-box-source", dest="aux_box_source", type=int, choices=(0, 1, 2))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualfpn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--out", required=True)
    p.add_argument("--float64", action="store_true", help="train in 64-bit")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or detections file")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--detections", help="detections JSON instead of a model")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run inference on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("probe", help="gradient-norm probe, ds on vs off")
    _add_config_flags(p)
    p.add_argument("--n", type=_positive_int, default=20)
    p.add_argument("--batches", type=_positive_int, default=8)
    p.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("export-features", help="write per-level feature maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix", dest="out_prefix", required=True)
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("ablate", help="run a sweep and emit its table")
    p.add_argument("--which", choices=("ds_dc", "box_source", "convergence"),
                   required=True)
    p.add_argument("--seeds", type=_positive_int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--train-n", dest="train_n", type=_positive_int, default=500)
    p.add_argument("--val-n", dest="val_n", type=_positive_int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--iterations", type=_positive_int, default=2000)
    p.add_argument("--interval", type=_positive_int, default=250,
                   help="eval grid for convergence curves")
    p.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args, argv)
    except (ValueError, OSError, KeyError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
