"""Behavior gates, one test per advertised guarantee.

Each test prints a single [PASS]/[FAIL] line with the measured quantity;
the lines are also collected into acceptance_report.txt at the repo root.

The three training sweeps (c07/c08/c09) cost the better part of an hour on
one core.  Their run directories are cached under .acceptance/ keyed by a
hash of the package sources plus the sweep arguments, so editing the
package invalidates them and forces a clean rerun.
"""

import json
import shutil
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dualfpn import ops
from dualfpn import dataset as D
from dualfpn import instrument, metrics
from dualfpn.cli import content_hash
from dualfpn.cli import main as cli_main
from dualfpn.dataset import GroundTruth
from dualfpn.model import Detection, DetectionModel, ModelConfig, strip_aux_heads
from dualfpn.pyramid import PyramidConfig
from dualfpn.roi_align import RoiConfig, roi_align, roi_align_many
from dualfpn.rpn import (RpnConfig, generate_anchors, proposal_boxes,
                         select_proposals)
from dualfpn.tensor import Tape, tensor
from dualfpn.training import match_proposals
from dualfpn.boxes import iou as boxes_iou
from dualfpn.boxes import nms
from oracles import (ap_from_matches, check_grads, greedy_match, iou_ref,
                     nms_ref, roi_align_ref, select_proposals_ref)

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".acceptance"
_LINES = []


@pytest.fixture(scope="session", autouse=True)
def _collect_report():
    _LINES.clear()
    yield
    if _LINES:
        (ROOT / "acceptance_report.txt").write_text("\n".join(_LINES) + "\n")


def record(tag, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    _LINES.append(line)
    print(line)
    assert ok, line


def scene(size=64):
    rng = np.random.default_rng(0)
    img = rng.random((3, size, size))
    boxes = np.array([[2.0, 2, 8, 8], [10.0, 12, 22, 24],
                      [28.0, 30, 48, 50], [4.0, 20, 44, 60]])
    masks = np.zeros((4, size, size), dtype=np.uint8)
    for m, b in zip(masks, boxes):
        m[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = 1
    return img, GroundTruth(boxes, np.array([1, 2, 3, 1]), masks)


# --- c1: finite differences --------------------------------------------------

def _op_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    img = rng.normal(size=(1, 2, 6, 6))
    cw = rng.normal(size=(3, 2, 3, 3)) * 0.5
    cb = rng.normal(size=3)
    lw = rng.normal(size=(5, 4))
    lb = rng.normal(size=5)
    logits = rng.normal(size=(3, 4))
    hard = (rng.random((2, 5)) > 0.5).astype(np.float64)
    near = rng.uniform(-0.8, 0.8, (3, 4))
    far = rng.uniform(1.5, 3.0, (3, 4))
    feat = rng.normal(size=(1, 2, 8, 8))
    box = np.array([[1.1, 0.7, 20.3, 17.9]])
    roi_cfg = RoiConfig(output_size=(3, 3), sampling_ratio=2)
    return [
        ("add", lambda a, b: ops.sum_all(ops.sigmoid(ops.add(a, b))), [x, y]),
        ("scale", lambda a: ops.sum_all(ops.scale(a, -1.7)), [x]),
        ("relu", lambda a: ops.sum_all(ops.relu(a)), [x + 0.3]),
        ("sigmoid", lambda a: ops.sum_all(ops.sigmoid(a)), [x]),
        ("sum_all", lambda a: ops.sum_all(a), [x]),
        ("reshape", lambda a: ops.sum_all(ops.sigmoid(ops.reshape(a, (2, 6)))), [x]),
        ("take_flat",
         lambda a: ops.sum_all(ops.sigmoid(ops.take_flat(a, np.array([0, 5, 7, 11])))),
         [x]),
        ("concat_rows",
         lambda a, b: ops.sum_all(ops.sigmoid(ops.concat_rows([a, b]))), [x, y]),
        ("upsample",
         lambda a: ops.sum_all(ops.sigmoid(ops.nearest_upsample2x(a))), [img]),
        ("linear", lambda a, w, b: ops.sum_all(ops.sigmoid(ops.linear(a, w, b))),
         [x, lw, lb]),
        ("conv2d_s1",
         lambda a, w, b: ops.sum_all(ops.sigmoid(ops.conv2d(a, w, b))), [img, cw, cb]),
        ("conv2d_s2p1",
         lambda a, w, b: ops.sum_all(ops.sigmoid(ops.conv2d(a, w, b, stride=2, pad=1))),
         [img, cw, cb]),
        ("softmax_ce",
         lambda a: ops.softmax_cross_entropy(a, np.array([0, 2, 1])), [logits]),
        ("smooth_l1_quad", lambda a, b: ops.smooth_l1(a, b), [near, near * 0.0]),
        ("smooth_l1_lin", lambda a, b: ops.smooth_l1(a, b), [far, far * 0.0]),
        ("bce", lambda a: ops.binary_cross_entropy_with_logits(a, tensor(hard)),
         [rng.normal(size=(2, 5))]),
        ("roi_align",
         lambda f: ops.sum_all(ops.sigmoid(roi_align_many(f, box, stride=4, cfg=roi_cfg))),
         [feat]),
    ]


def _micro_model_fd():
    """Worst relative error between tape and central-difference gradients of
    the full training loss, sampled at two coordinates per parameter.

    The forward pass is made a smooth function of the weights by replaying a
    frozen sampling plan; the frozen regression targets get noise added so
    those loss terms sit away from their minimum, and weights are moved off
    the relu kinks before differencing.
    """
    pyr = PyramidConfig(num_levels=3, backbone_channels=(8, 16, 32),
                        level_strides=(2, 4, 8))
    cfg = ModelConfig(image_size=(32, 32), hidden_width=16, pyramid=pyr)
    model = DetectionModel(cfg, dtype=np.float64, seed=0)
    redraw = np.random.default_rng(9)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = 0.05
        elif p.data.ndim == 2:
            p.data[...] = redraw.normal(0.0, 0.05, p.data.shape)

    img = np.random.default_rng(1).random((3, 32, 32))
    boxes = np.array([[2.0, 2, 6, 6], [3.0, 16, 15, 28], [16.0, 2, 30, 30]])
    masks = np.zeros((3, 32, 32), dtype=np.uint8)
    for m, b in zip(masks, boxes):
        m[int(b[1]):int(b[3]), int(b[0]):int(b[2])] = 1
    gt = GroundTruth(boxes, np.array([1, 2, 3]), masks)

    with Tape():
        outs = model.forward_train(img, gt, np.random.default_rng(2))
    plan = outs.plan
    noise = np.random.default_rng(5)
    sb, sm, ct, fg, rt = plan["stage1"]
    plan["stage1"] = (sb, sm, ct, fg, rt + noise.normal(0.0, 0.3, rt.shape))
    plan["aux"] = plan["stage1"]
    si, lab, pos, rr = plan["rpn"]
    plan["rpn"] = (si, lab, pos, rr + noise.normal(0.0, 0.3, rr.shape))

    def loss_value():
        with Tape():
            o = model.forward_train(img, gt, np.random.default_rng(2), plan=plan)
            return model.compute_loss(o).total

    with Tape():
        o = model.forward_train(img, gt, np.random.default_rng(2), plan=plan)
        model.compute_loss(o).total_tensor.backward()

    worst = 0.0
    pick = np.random.default_rng(7)
    for name, p in model.params.items():
        assert p.grad is not None, f"no gradient reached {name}"
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for idx in pick.choice(flat.size, size=min(2, flat.size), replace=False):
            w0 = flat[idx]
            h = 1e-5 * max(1.0, abs(w0))
            flat[idx] = w0 + h
            lp = loss_value()
            flat[idx] = w0 - h
            lm = loss_value()
            flat[idx] = w0
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-6)
            worst = max(worst, rel)
    return worst


def test_c01_finite_difference_gradients():
    t0 = time.monotonic()
    cases = _op_cases()
    for name, build, arrays in cases:
        check_grads(build, arrays, eps=1e-6, rtol=1e-4, atol=1e-7)
    worst = _micro_model_fd()
    dt = time.monotonic() - t0
    record("c1", worst < 1e-4 and dt < 120.0,
           f"{len(cases)} op families exact to 1e-4, full-model worst rel err "
           f"{worst:.2e} (< 1e-4), {dt:.1f}s (< 120s)")


# --- c2: randomized oracle suites --------------------------------------------

def _rand_boxes(rng, n, span=40.0):
    b = np.zeros((n, 4))
    b[:, :2] = rng.integers(0, 2 * span, (n, 2)) / 2.0
    b[:, 2:] = b[:, :2] + rng.integers(2, 30, (n, 2)) / 2.0 + 1.0
    return b


def test_c02_randomized_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    n_cases = 500

    worst_iou = 0.0
    for _ in range(n_cases):
        a = _rand_boxes(rng, 1)[0]
        b = _rand_boxes(rng, 1)[0]
        worst_iou = max(worst_iou, abs(boxes_iou(a, b) - iou_ref(a, b)))
    assert worst_iou <= 1e-12

    for _ in range(n_cases):
        boxes = _rand_boxes(rng, rng.integers(1, 12))
        scores = rng.random(len(boxes))
        thr = rng.choice([0.3, 0.5, 0.7])
        got = nms(boxes, scores, thr)
        want = nms_ref(boxes, scores, thr)
        assert np.array_equal(np.asarray(got), np.asarray(want))

    all_anchors = np.concatenate(
        generate_anchors(PyramidConfig(), RpnConfig(), (64, 64)))
    worst_prop = 0.0
    for _ in range(n_cases):
        pick = rng.choice(len(all_anchors), 40, replace=False)
        anchors = all_anchors[pick]
        logits = np.round(rng.normal(size=40), 1)
        deltas = rng.normal(0, 0.2, (40, 4))
        thr = float(rng.choice([0.5, 0.7]))
        cfg = RpnConfig(pre_nms_k=32, post_nms_n=16, nms_thresh=thr)
        props = select_proposals(anchors, logits, deltas, cfg, (64, 64))
        ref_boxes, ref_scores = select_proposals_ref(
            anchors, logits, deltas, 32, thr, 16, (64, 64))
        got = proposal_boxes(props)
        assert got.shape == ref_boxes.shape
        assert [p.objectness for p in props] == list(ref_scores)
        worst_prop = max(worst_prop, float(np.abs(got - ref_boxes).max()))
    assert worst_prop < 1e-9

    for _ in range(n_cases):
        props = _rand_boxes(rng, rng.integers(1, 10))
        gts = _rand_boxes(rng, rng.integers(1, 5))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        matched, best = match_proposals(props, gts, thr)
        for i, p in enumerate(props):
            ious = np.array([iou_ref(p, g) for g in gts])
            want = int(ious.argmax()) if ious.max() >= thr else -1
            assert matched[i] == want
            assert abs(best[i] - ious.max()) < 1e-12

    worst_roi = 0.0
    for _ in range(n_cases):
        c = int(rng.integers(1, 3))
        feat = rng.normal(size=(1, c, 8, 8))
        stride = int(rng.choice([1, 2, 4]))
        side = 8 * stride
        x1, y1 = rng.uniform(0, side - 4, 2)
        box = [x1, y1, x1 + rng.uniform(2, side - x1 - 1),
               y1 + rng.uniform(2, side - y1 - 1)]
        out = int(rng.integers(2, 5))
        ratio = int(rng.integers(1, 4))
        cfg = RoiConfig(output_size=(out, out), sampling_ratio=ratio)
        got = roi_align(tensor(feat), box, stride=stride, cfg=cfg).data
        want = roi_align_ref(feat[0], box, out_size=out, sampling_ratio=ratio,
                             spatial_scale=1.0 / stride)
        worst_roi = max(worst_roi, float(np.abs(got - want).max()))
    assert worst_roi < 1e-6

    worst_ap = 0.0
    for _ in range(n_cases):
        gtb = _rand_boxes(rng, rng.integers(1, 6))
        dtb = _rand_boxes(rng, rng.integers(1, 8))
        sc = rng.random(len(dtb))
        thr = float(rng.choice([0.3, 0.5, 0.75]))
        dets = [[Detection(box=dtb[i], label=1, score=sc[i]) for i in range(len(dtb))]]
        gt = [GroundTruth(gtb, np.ones(len(gtb), dtype=np.int64), None)]
        got = metrics.evaluate_ap(dets, gt, iou_thresholds=[thr]).ap
        flags = greedy_match(dtb, sc, gtb, thr)
        want = ap_from_matches(np.asarray(flags, dtype=bool), sc, len(gtb))
        worst_ap = max(worst_ap, abs(got - want))
    assert worst_ap < 1e-9

    dt = time.monotonic() - t0
    record("c2", dt < 120.0,
           f"{n_cases} cases/family: iou max {worst_iou:.1e}, nms exact, "
           f"matching exact, proposal selection exact scores + boxes max "
           f"{worst_prop:.1e}, roi_align max {worst_roi:.1e} (< 1e-6), "
           f"ap max {worst_ap:.1e} (< 1e-9), {dt:.1f}s (< 120s)")


# --- c3: aux heads removable -------------------------------------------------

def test_c03_strip_aux_heads_restores_baseline():
    img, gt = scene()
    cfg = ModelConfig()
    full = DetectionModel(cfg, seed=0)
    base = DetectionModel(replace(cfg, ds_enabled=False), seed=0)
    stripped = DetectionModel(replace(cfg, ds_enabled=False),
                              params=strip_aux_heads(full.params, cfg))
    inv_ok = list(stripped.params) == list(base.params)
    with Tape() as t1:
        d1 = stripped.forward_infer(img)
    with Tape() as t2:
        d2 = base.forward_infer(img)
    trace_ok = t1.trace() == t2.trace()
    out_ok = len(d1) == len(d2) and all(
        np.array_equal(a.box, b.box) and a.score == b.score
        and a.label == b.label and np.array_equal(a.mask, b.mask)
        for a, b in zip(d1, d2))
    record("c3", inv_ok and trace_ok and out_ok,
           f"inventory identical ({len(stripped.params)} tensors), op trace "
           f"identical ({len(t1.trace())} nodes), outputs identical "
           f"({len(d1)} detections)")


# --- c4: decoupled head isolation --------------------------------------------

def test_c04_decoupled_gradient_isolation():
    model = DetectionModel(ModelConfig(ds_enabled=False), seed=0)
    reg_tower = [n for n in model.params if n.startswith("det1.reg")]
    cls_tower = [n for n in model.params if n.startswith("det1.cls")]
    batches = D.synth_generate(3, (64, 64), 3, seed=5)
    for i, sample in enumerate(batches):
        img = sample.image.astype(np.float64)
        with Tape():
            st = model.forward_train(img, sample.gt,
                                     np.random.default_rng(i)).stages[0]
            ops.softmax_cross_entropy(st.cls_logits, st.cls_targets).backward()
        assert all(model.params[n].grad is None for n in reg_tower)
        assert model.params["det1.cls.w"].grad is not None
        for p in model.params.values():
            p.zero_grad()
        with Tape():
            st = model.forward_train(img, sample.gt,
                                     np.random.default_rng(i)).stages[0]
            ops.sum_all(st.reg_deltas).backward()
        assert all(model.params[n].grad is None for n in cls_tower)
        assert model.params["det1.reg.w"].grad is not None
        for p in model.params.values():
            p.zero_grad()
    record("c4", True,
           f"{len(batches)} random batches: cls loss leaves {len(reg_tower)} "
           f"reg-tower tensors untouched, reg output leaves {len(cls_tower)} "
           f"cls-tower tensors untouched")


# --- c5: zero aux weights reproduce the baseline loss ------------------------

def test_c05_zeroed_aux_weights_match_baseline():
    img, gt = scene()
    zeroed = DetectionModel(ModelConfig(alpha1=0.0, alpha3=0.0), seed=0)
    base = DetectionModel(ModelConfig(ds_enabled=False), seed=0)
    with Tape():
        rep_z = zeroed.compute_loss(zeroed.forward_train(img, gt, np.random.default_rng(3)))
    with Tape():
        rep_b = base.compute_loss(base.forward_train(img, gt, np.random.default_rng(3)))
    delta = abs(rep_z.total - rep_b.total)
    record("c5", delta <= 1e-12,
           f"|L(aux weights 0) - L(baseline)| = {delta:.1e} (<= 1e-12)")


# --- c6: aux gradient reach --------------------------------------------------

def test_c06_aux_gradients_reach_bottom_up_only():
    img, gt = scene()
    cfg = ModelConfig(alpha2=0.0, alpha4=0.0, rpn_loss_weight=0.0)
    model = DetectionModel(cfg, seed=0)
    with Tape():
        outs = model.forward_train(img, gt, np.random.default_rng(2))
        model.compute_loss(outs).total_tensor.backward()
    bottom_up = [n for n in model.params
                 if n.startswith(("backbone.", "aux."))]
    excluded = [n for n in model.params
                if n.startswith(("td.", "rpn.", "det1.", "mask."))]
    reach_ok = all(model.params[n].grad is not None
                   and np.any(model.params[n].grad != 0) for n in bottom_up)
    zero_ok = all(model.params[n].grad is None for n in excluded)

    batches = D.synth_generate(20, (64, 64), 3, seed=11)
    on = instrument.grad_probe(DetectionModel(ModelConfig(), seed=0),
                               batches, 20, probe_seed=0)
    off = instrument.grad_probe(DetectionModel(ModelConfig(ds_enabled=False), seed=0),
                                batches, 20, probe_seed=0)
    ratio = on.prefix_norm("backbone.s0") / off.prefix_norm("backbone.s0")
    record("c6", reach_ok and zero_ok and ratio > 1.0,
           f"aux-only loss: {len(bottom_up)} bottom-up tensors all nonzero, "
           f"{len(excluded)} top-down-path tensors all zero; earliest-stage "
           f"grad-norm ratio on/off = {ratio:.4f} over 20 fixed batches (> 1)")


# --- c7..c9: training sweeps -------------------------------------------------

def _harness(which, extra):
    argv = ["ablate", "--which", which] + extra
    key = content_hash({"argv": argv})[:16]
    out = CACHE / f"{which}_{key}"
    if not (out / "runs.json").exists():
        if out.exists():
            shutil.rmtree(out)
        t0 = time.monotonic()
        assert cli_main(argv + ["--out", str(out)]) == 0
        (out / "elapsed.json").write_text(
            json.dumps({"seconds": time.monotonic() - t0}))
    return out


@pytest.fixture(scope="session")
def ds_dc_dir():
    return _harness("ds_dc", [])


@pytest.fixture(scope="session")
def box_source_dir():
    return _harness("box_source", ["--iterations", "1000"])


@pytest.fixture(scope="session")
def convergence_dir():
    return _harness("convergence", ["--interval", "250"])


def _by_name(out_dir):
    runs = json.loads((out_dir / "runs.json").read_text())
    grouped = {}
    for r in runs:
        grouped.setdefault(r["name"], []).append(r)
    return grouped


def test_c07_ds_dc_ablation(ds_dc_dir):
    table = (ds_dc_dir / "ds_dc.csv").read_text().splitlines()
    grouped = _by_name(ds_dc_dir)
    base = statistics.fmean(r["val_ap50"] for r in grouped["baseline"])
    both = statistics.fmean(r["val_ap50"] for r in grouped["ds_dc"])
    minutes = json.loads((ds_dc_dir / "elapsed.json").read_text())["seconds"] / 60.0
    per_cfg = minutes / 4.0
    ok = (len(table) == 5 and len(grouped["ds_dc"]) == 3
          and both >= base and per_cfg < 30.0)
    record("c7", ok,
           f"4-row table, 3 seeds, 2000 iters: mean val AP50 ds_dc {both:.4f} "
           f">= baseline {base:.4f}; {per_cfg:.1f} min/config (< 30)")


def test_c08_aux_box_source(box_source_dir):
    table = (box_source_dir / "box_source.csv").read_text().splitlines()
    grouped = _by_name(box_source_dir)
    means = {s: statistics.fmean(r["val_ap50"] for r in grouped[f"source{s}"])
             for s in (0, 1, 2)}
    ok = len(table) == 4 and means[0] >= means[2]
    record("c8", ok,
           f"3-row table: mean val AP50 by aux box source "
           f"{{0: {means[0]:.4f}, 1: {means[1]:.4f}, 2: {means[2]:.4f}}}; "
           f"stage0 >= stage2")


def test_c09_convergence(convergence_dir):
    grouped = _by_name(convergence_dir)
    its_ds, its_base = [], []
    for seed in (0, 1, 2):
        base = next(r for r in grouped["baseline"] if r["seed"] == seed)
        dsdc = next(r for r in grouped["ds_dc"] if r["seed"] == seed)
        tau = 0.5 * base["rows"][-1]["val_ap50"]

        def first_at(rows):
            for row in rows:
                if row["val_ap50"] >= tau:
                    return row["iteration"]
            return rows[-1]["iteration"] + 1

        grid = [r["iteration"] for r in base["rows"]]
        assert grid == [r["iteration"] for r in dsdc["rows"]]
        its_ds.append(first_at(dsdc["rows"]))
        its_base.append(first_at(base["rows"]))
    med_ds = statistics.median(its_ds)
    med_base = statistics.median(its_base)
    record("c9", med_ds <= med_base,
           f"shared 250-iter grid: median iterations to half the baseline "
           f"final AP50: with aux+decoupling {med_ds:.0f} <= baseline "
           f"{med_base:.0f} (per-seed {its_ds} vs {its_base})")


# --- c10: evaluator ground truth ---------------------------------------------

def test_c10_ap_reference_cases():
    gt = [GroundTruth(np.array([[10.0, 10, 20, 20]]), np.array([1]), None)]
    dets = [[Detection(box=np.array([40.0, 40, 50, 50]), label=1, score=0.9),
             Detection(box=np.array([10.0, 10, 20, 20]), label=1, score=0.8)]]
    half = metrics.evaluate_ap(dets, gt).ap50

    data = D.synth_generate(5, (64, 64), 3, seed=21)
    perfect = [[Detection(box=s.gt.boxes[i], label=int(s.gt.labels[i]), score=0.9)
                for i in range(len(s.gt.labels))] for s in data]
    rep = metrics.evaluate_ap(perfect, [s.gt for s in data])
    record("c10", half == 0.5 and rep.ap == 1.0 and rep.ap50 == 1.0,
           f"hand case ap50 = {half} (exact 0.5), perfect detector "
           f"ap = {rep.ap}, ap50 = {rep.ap50} (exact 1.0)")
