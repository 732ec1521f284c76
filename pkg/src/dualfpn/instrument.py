"""Measurement tools: per-layer gradient-norm probes, feature-map exports,
and learning curves on a fixed evaluation grid.

The probe quantifies where supervision actually lands: with aux heads
enabled, bottom-up stages receive gradient directly instead of only through
the top-down pathway, and the per-layer norms make that visible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import training
from .netpbm import write_pgm
from .tensor import Tape
from .training import SkipStep, TrainConfig


@dataclass
class GradProbeReport:
    layer_norms: dict            # param name -> mean L2/sqrt(count) over batches
    n_batches: int
    config_label: str = ""

    def to_dict(self) -> dict:
        return {"config_label": self.config_label, "n_batches": self.n_batches,
                "layer_norms": {k: float(v) for k, v in sorted(self.layer_norms.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def prefix_norm(self, prefix: str) -> float:
        """Mean normalized norm over parameters whose name starts with
        ``prefix``; 0.0 when none match."""
        vals = [v for k, v in self.layer_norms.items() if k.startswith(prefix)]
        return float(np.mean(vals)) if vals else 0.0


def grad_probe(model, batches: list, n: int, probe_seed: int = 0,
               config_label: str = "") -> GradProbeReport:
    """Mean per-parameter gradient norms over ``n`` forward+backward passes.

    Weights are never updated; pass ``i`` uses ``batches[i % len(batches)]``
    with a generator seeded by (probe_seed, i), so two models probed with the
    same seed see identical sampling decisions.  Norms are L2 divided by
    sqrt(parameter count) so layers of different sizes are comparable.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not batches:
        raise ValueError("need at least one probe batch")
    sums = {name: 0.0 for name in model.params}
    for i in range(n):
        sample = batches[i % len(batches)]
        rng = np.random.default_rng([probe_seed, i])
        for p in model.params.values():
            p.zero_grad()
        with Tape():
            try:
                outs = model.forward_train(sample.image, sample.gt, rng)
            except SkipStep:
                continue
            rep = model.compute_loss(outs)
            rep.total_tensor.backward()
        for name, p in model.params.items():
            if p.grad is not None:
                sums[name] += float(np.linalg.norm(p.grad)) / np.sqrt(p.data.size)
    for p in model.params.values():
        p.zero_grad()
    return GradProbeReport(layer_norms={k: v / n for k, v in sums.items()},
                           n_batches=n, config_label=config_label)


def export_feature_maps(model, image, path_prefix) -> list:
    """Channel-sum each pyramid level, min-max scale to [0,255], write PGM.

    Emits one file per bottom-up and per top-down level:
    ``{prefix}_bu{k}.pgm`` and ``{prefix}_td{k}.pgm``.  Returns the paths.
    """
    bu, td = model._pyramids(image)
    prefix = str(path_prefix)
    paths = []
    for tag, maps in (("bu", bu), ("td", td)):
        for k, fmap in enumerate(maps):
            arr = fmap.data[0].sum(axis=0)
            lo, hi = float(arr.min()), float(arr.max())
            if hi > lo:
                img = np.round((arr - lo) / (hi - lo) * 255.0).astype(np.uint8)
            else:
                img = np.zeros(arr.shape, dtype=np.uint8)
            path = f"{prefix}_{tag}{k}.pgm"
            write_pgm(path, img)
            paths.append(path)
    return paths


CURVE_FIELDS = ("iteration", "train_ap", "train_ap50", "val_ap", "val_ap50")


def learning_curve(model, train_cfg: TrainConfig, dataset: list, val_set: list,
                   interval: int, out_dir=None, subsample_size: int = 100,
                   subsample_seed: int = 0) -> list:
    """Train while evaluating every ``interval`` iterations on a fixed seeded
    train subsample plus the full val set; returns the eval rows and writes
    ``curve.csv`` under ``out_dir``.  ``interval`` must divide the schedule so
    that compared runs share one iteration grid.
    """
    if interval < 1 or train_cfg.iterations % interval != 0:
        raise ValueError(f"interval {interval} must divide {train_cfg.iterations}")
    pick = np.sort(np.random.default_rng(subsample_seed).choice(
        len(dataset), size=min(subsample_size, len(dataset)), replace=False))
    sub = [dataset[i] for i in pick]
    cfg = replace(train_cfg, eval_interval=interval)
    history = training.train(model, cfg, dataset, out_dir=out_dir,
                             val_set=val_set, train_eval_set=sub)
    rows = [{k: r.get(k) for k in CURVE_FIELDS} for r in history if "val_ap50" in r]
    if out_dir is not None:
        with open(Path(out_dir) / "curve.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(CURVE_FIELDS))
            wr.writeheader()
            wr.writerows(rows)
    return rows
