"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line.

Criteria 5, 6 and 8 share one smoke ablation run (300 train / 60 val synthetic
images, smoke preset, seed 0) driven through the command-line tool.
"""
import csv
import json
import statistics
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from fdcheck import fd_relative_errors, projected_loss
from rcdet.cafm import CAFM, attention_matrix, channel_shuffle
from rcdet.cli import main
from rcdet.config import build_config
from rcdet.data import load_dataset, synth_generate
from rcdet.detector import C2PSA, build_model, conv_macs, count_params_flops, load_checkpoint
from rcdet.metrics import average_precision, map_at, map_range, per_class_ap, iou
from rcdet.rcm import RCM, axial_context
from rcdet.training import assign_targets, detection_loss, evaluate_model, train
from test_metrics import _random_instance, ap_threshold_sweep, iou_by_pixel_count, match_by_replay

BUDGET_S = 30 * 60
SMOKE_MAP50 = 0.80


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


# --------------------------------------------------------------------------
# 1. gradient battery


@pytest.mark.criterion(1, "finite-difference gradient battery (double precision, rel. err < 1e-4)")
def test_gradient_battery(request):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(3):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        cases = {
            "CAFM": (CAFM(4, groups=2).double(), (1, 4, 4, 5)),
            "RCM": (RCM(4, k=3).double(), (1, 4, 5, 6)),
            "C2PSA_CAFM": (C2PSA(8, n=1, use_cafm=True, groups=2).double(), (2, 8, 4, 4)),
        }
        for name, (m, shape) in cases.items():
            x = torch.randn(shape, dtype=torch.float64, generator=g, requires_grad=True)
            errs = fd_relative_errors(projected_loss(lambda: m(x), shape, seed=seed), [x, *m.parameters()])
            worst[name] = max(worst.get(name, 0.0), max(errs))
        rng = np.random.default_rng(seed)
        box = np.array([[rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6), rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8)]])
        ta = assign_targets([(box, np.array([seed % 3]))], 3, 32, dtype=torch.float64)
        raw = [torch.randn(1, 7, n, n, generator=g, dtype=torch.float64, requires_grad=True) for n in (4, 2, 1)]
        errs = fd_relative_errors(lambda: detection_loss(raw, ta)[0], raw)
        worst["detection_loss"] = max(worst.get("detection_loss", 0.0), max(errs))
    elapsed = time.perf_counter() - t0
    _detail(request, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s")
    assert all(v < 1e-4 for v in worst.values()), worst
    assert elapsed < 120


# --------------------------------------------------------------------------
# 2. block arithmetic fixtures


@pytest.mark.criterion(2, "block arithmetic fixtures (axial context, softmax columns, shuffle table, residuals)")
def test_block_arithmetic_fixtures(request):
    x = torch.tensor([[1.0, 3.0], [5.0, 7.0]]).view(1, 1, 2, 2)
    assert axial_context(x)[0, 0].tolist() == [[5.0, 7.0], [9.0, 11.0]]

    g = torch.Generator().manual_seed(0)
    q, k = torch.randn(2, 8, 5, 5, generator=g), torch.randn(2, 8, 5, 5, generator=g)
    col_err = float((attention_matrix(q, k, torch.tensor(1.0)).sum(dim=1) - 1).abs().max())
    assert col_err <= 1e-6

    tagged = torch.arange(8.0).view(1, 8, 1, 1).expand(1, 8, 2, 2)
    assert channel_shuffle(tagged, 2)[0, :, 0, 0].tolist() == [0, 4, 1, 5, 2, 6, 3, 7]

    rcm = RCM(8).double()
    with torch.no_grad():
        rcm.mlp[-1].weight.zero_()
        rcm.mlp[-1].bias.zero_()
    y = torch.randn(2, 8, 6, 6, dtype=torch.float64, generator=g)
    assert torch.equal(rcm(y), y)

    c2 = C2PSA(16, n=1, use_cafm=True)
    with torch.no_grad():
        for blk in c2.blocks:
            for conv in (blk.cafm.dw, blk.cafm.pw_out, blk.ffn[-1]):
                conv.weight.zero_()
                conv.bias.zero_()
    half = torch.randn(1, 8, 5, 5, generator=g)
    assert torch.equal(c2.blocks(half), half)
    _detail(request, f"max column-sum error {col_err:.1e}")


# --------------------------------------------------------------------------
# 3. metric oracles


@pytest.mark.criterion(3, "metrics match brute-force oracles (AP 1e-9, IoU 1e-3) and mAP50-95 <= mAP50")
def test_metrics_oracles(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_ap, n_cls = 0.0, 0
    for _ in range(1000):
        dets, gts = _random_instance(rng, max_det=8, max_gt=5)
        aps = per_class_ap([dets], [gts], 0.5)
        for c, ap in aps.items():
            cd = [d for d in dets if d.class_id == c]
            flags = match_by_replay(cd, [g for g in gts if g[1] == c], 0.5)
            scores = sorted((d.score for d in cd), reverse=True)
            oracle = ap_threshold_sweep(list(zip(scores, flags)), sum(1 for g in gts if g[1] == c))
            worst_ap = max(worst_ap, abs(ap - oracle))
            n_cls += 1
        assert map_range([dets], [gts]) <= map_at([dets], [gts], 0.5) + 1e-12
    worst_iou = 0.0
    from rcdet.detector import BBox

    for _ in range(100):
        corners = []
        for _ in range(2):
            x1, y1 = rng.uniform(0, 0.6, 2)
            w, h = rng.uniform(0.1, 0.4, 2)
            corners.append((x1, y1, x1 + w, y1 + h))
        worst_iou = max(worst_iou, abs(iou(BBox.from_xyxy(*corners[0]), BBox.from_xyxy(*corners[1])) - iou_by_pixel_count(*corners)))
    elapsed = time.perf_counter() - t0
    _detail(request, f"AP max diff {worst_ap:.1e} over {n_cls} class-instances, IoU max diff {worst_iou:.1e}; {elapsed:.0f}s")
    assert worst_ap < 1e-9 and worst_iou < 1e-3 and elapsed < 60
    assert average_precision([], 0) == 1.0


# --------------------------------------------------------------------------
# 4. cost accounting


@pytest.mark.criterion(4, "parameter/MAC hand counts (448 params, 442,368 MACs) and 2-layer enumeration")
def test_cost_accounting(request):
    conv = nn.Conv2d(3, 16, 3, padding=1)
    params, gflops = count_params_flops(conv, 32)
    assert params == 448
    assert conv_macs(conv, (32, 32)) == 442_368 and gflops * 1e9 / 2 == 442_368
    net = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.Conv2d(8, 16, 3, stride=2, padding=1))
    params2, gflops2 = count_params_flops(net, 32)
    enum_params = sum(m.weight.numel() + m.bias.numel() for m in net if isinstance(m, nn.Conv2d))
    enum_macs = conv_macs(net[0], (32, 32)) + conv_macs(net[2], (16, 16))
    assert params2 == enum_params == 1392
    assert gflops2 == 2 * enum_macs / 1e9 and enum_macs == 516_096
    _detail(request, f"conv {params} params / 442368 MACs; 2-layer {params2} params / {enum_macs} MACs")


# --------------------------------------------------------------------------
# shared smoke run


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    synth_generate(300, 101, root / "train", prefix="train")
    synth_generate(60, 202, root / "val", prefix="val")
    out = root / "ablate"
    code = main(
        ["ablate", "--data", str(root / "train"), "--val-data", str(root / "val"), "--preset", "smoke", "--seed", "0", "--out", str(out)]
    )
    manifest = json.loads((out / "manifest.json").read_text())
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    return SimpleNamespace(root=root, out=out, code=code, manifest=manifest, rows=rows)


def _history(run_dir):
    with open(run_dir / "metrics.csv") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


@pytest.mark.slow
@pytest.mark.criterion(5, "smoke training: cr reaches val mAP@50 >= 0.80 in 60 epochs under 30 min; loss(10) < loss(1), median of 3 seeds")
def test_smoke_training(smoke, request):
    hist = _history(smoke.out / "cr")
    seconds = smoke.manifest["train_seconds"]["cr"]
    best = max(r["val_map50"] for r in hist)
    drops = [hist[9]["loss_total"] - hist[0]["loss_total"]]
    rc = build_config({"use_cafm": True, "use_rcm": True}, preset="smoke")
    train_items = load_dataset(smoke.root / "train")
    for seed in (1, 2):
        rc.train.seed = seed
        torch.manual_seed(seed)
        h = train(build_model(rc.model), train_items, [], rc.train, stop_after=10)
        drops.append(h[9]["loss_total"] - h[0]["loss_total"])
    _detail(
        request,
        f"{len(hist)} epochs, best val mAP@50 {best:.4f} (final {hist[-1]['val_map50']:.4f}), "
        f"{seconds:.0f}s; loss(10)-loss(1) per seed {[round(d, 3) for d in drops]}",
    )
    assert len(hist) == 60
    assert best >= SMOKE_MAP50
    assert seconds < BUDGET_S
    assert statistics.median(drops) < 0


@pytest.mark.slow
@pytest.mark.criterion(6, "ablation harness: four variants within budget, 4-row CSV, params(cr) != params(base)")
def test_ablation_harness(smoke, request):
    assert smoke.code == 0
    assert [r["variant"] for r in smoke.rows] == ["base", "rcm", "cafm", "cr"]
    assert list(smoke.rows[0]) == ["variant", "precision", "recall", "map50", "map50_95", "params", "gflops"]
    by = {r["variant"]: r for r in smoke.rows}
    assert by["cr"]["params"] != by["base"]["params"]
    assert all(0 <= float(r[k]) <= 1 for r in smoke.rows for k in ("precision", "recall", "map50", "map50_95"))
    times = smoke.manifest["train_seconds"]
    assert all(t < BUDGET_S for t in times.values())
    _detail(
        request,
        ", ".join(f"{v}: mAP50 {float(by[v]['map50']):.3f} params {by[v]['params']} {times[v]:.0f}s" for v in by),
    )


# --------------------------------------------------------------------------
# 7. determinism


@pytest.mark.criterion(7, "determinism: same seed gives same epoch-1 loss, eval JSON bytes, dataset bytes")
def test_determinism(tmp_path, request):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["gen", "--n", "40", "--seed", "5", "--out", str(d)]) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "manifest.json")
    assert files and all((a / f).read_bytes() == (b / f).read_bytes() for f in files)

    rc = build_config({"use_cafm": True, "use_rcm": True, "seed": 3}, preset="smoke")
    items = load_dataset(a)
    losses = []
    for run in ("r1", "r2"):
        torch.manual_seed(3)
        h = train(build_model(rc.model), items, items[:8], rc.train, tmp_path / run, stop_after=1)
        losses.append(h[0]["loss_total"])
    assert losses[0] == losses[1]

    ckpt = tmp_path / "r1" / "last.pt"
    for out in ("e1", "e2"):
        assert main(["eval", "--data", str(a), "--ckpt", str(ckpt), "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "e1" / "report.json").read_bytes() == (tmp_path / "e2" / "report.json").read_bytes()
    _detail(request, f"{len(files)} dataset files identical; epoch-1 loss {losses[0]:.6f} twice; report.json identical")


# --------------------------------------------------------------------------
# 8. threshold monotonicity


def _det_lines(d):
    return {p.name: set(p.read_text().splitlines()) for p in sorted(Path(d).glob("*.txt"))}


@pytest.mark.slow
@pytest.mark.criterion(8, "detect at conf 0.99 is a subset of detect at conf 0.25 on 20 synthetic images")
def test_threshold_monotonicity(smoke, tmp_path, request):
    synth_generate(20, 303, tmp_path / "imgs", prefix="det")
    ckpt = smoke.out / "cr" / "last.pt"
    for conf in ("0.99", "0.25"):
        assert main(["detect", "--ckpt", str(ckpt), "--images", str(tmp_path / "imgs"), "--conf", conf, "--out", str(tmp_path / conf)]) == 0
    hi, lo = _det_lines(tmp_path / "0.99"), _det_lines(tmp_path / "0.25")
    assert len(hi) == len(lo) == 20
    assert all(hi[k] <= lo[k] for k in hi)
    _detail(request, f"{sum(map(len, hi.values()))} detections at 0.99, {sum(map(len, lo.values()))} at 0.25")


# --------------------------------------------------------------------------
# behaviour checks on the trained smoke model (not separate criteria)


@pytest.mark.slow
def test_blank_image_gives_near_empty_output(smoke, tmp_path):
    from PIL import Image

    for name, value in (("gray", 128), ("black", 0), ("white", 255)):
        Image.new("RGB", (160, 160), (value,) * 3).save(tmp_path / f"{name}.png")
    out = tmp_path / "det"
    assert main(["detect", "--ckpt", str(smoke.out / "cr" / "last.pt"), "--images", str(tmp_path), "--conf", "0.5", "--out", str(out)]) == 0
    counts = [len(p.read_text().splitlines()) for p in out.glob("*.txt")]
    assert len(counts) == 3 and max(counts) <= 1


@pytest.mark.slow
def test_train_split_scores_at_least_held_out(smoke):
    model, _ = load_checkpoint(smoke.out / "cr" / "last.pt")
    train_map = evaluate_model(model, load_dataset(smoke.root / "train")).map50
    val_map = evaluate_model(model, load_dataset(smoke.root / "val")).map50
    assert train_map >= val_map
