"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line.

The trend criteria (5-8) share one session fixture that runs the full desk-scale
pipeline for three seeds: synthesize -> source-only -> region tables -> probes
-> adapt (defaults) -> adapt with gamma = 0.
"""
import json
import os
import time

import numpy as np
import pytest
import torch

from bfda import cli
from bfda.adaptation.discriminator import LongShortDiscriminator
from bfda.adaptation.losses import LossWeights, dis_loss, gen_loss, grl, total_loss, weighted_dis_loss
from bfda.adaptation.modules import BackgroundDecoupler, BdmConfig, FeatureGenerator, FgmConfig
from bfda.adaptation.trainer import AdaptConfig
from bfda.config import ExperimentConfig
from bfda.datamodel import BBox, GTAnnotation
from bfda.detector import DetectorConfig, detection_loss, make_anchors
from bfda.evaluation import ap50, fppi_curve, log_avg_miss_rate, match_detections
from bfda.experiments import (
    REGION_VARIANTS,
    RANGE_VARIANTS,
    adapt_from,
    domain_probe,
    region_table,
    synth_data,
    train_source_only,
)
from bfda.region_ablation import FOREGROUND, INNER_BG, OUTER_BG, FillPolicy, RegionSelector, build_region_mask

from conftest import pixel_in_box, scan_mask
from oracles import brute_ap, brute_curve, brute_mr2, central_fd, random_micro_dataset, rel_err, to_types
from test_adaptation_modules import tiny_lsd_cfg

SEEDS = (0, 1, 2)
MR2_MARGIN = 0.01  # smallest reasonable-MR-2 change counted as a gain


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def majority(flags):
    return sum(bool(f) for f in flags) >= 2


# --- 1. metric oracle -------------------------------------------------------


def test_criterion_1_metric_oracle(capsys):
    t0 = time.time()
    rng = np.random.default_rng(20261018)
    worst, checked = 0.0, 0
    while checked < 200:
        images = random_micro_dataset(rng, max_images=20, max_boxes=10)
        d, g = to_types(images)
        thr, fppi, miss, tps, fps, num_gt = brute_curve(images)
        if num_gt == 0:
            continue  # metrics are undefined without ground truth; draw another
        curve = fppi_curve([match_detections(a, b) for a, b in zip(d, g)], len(images))
        if thr:
            assert len(curve) == len(fppi)
            worst = max(worst, float(np.max(np.abs(curve.fppi - fppi))), float(np.max(np.abs(curve.miss_rate - miss))))
        else:
            assert curve.points() == [(0.0, 1.0)]
        worst = max(worst, abs(log_avg_miss_rate(curve) - brute_mr2(fppi, miss)), abs(ap50(d, g) - brute_ap(tps, fps, num_gt)))
        checked += 1
    elapsed = time.time() - t0
    report(capsys, 1, worst < 1e-9 and elapsed < 60,
           f"{checked} datasets, max |delta| {worst:.2e}, {elapsed:.1f}s")


# --- 2. mask algebra --------------------------------------------------------


def test_criterion_2_mask_algebra(capsys):
    t0 = time.time()
    rng = np.random.default_rng(7)
    h, w = 40, 48
    failures = 0
    for _ in range(100):
        n = int(rng.integers(0, 5))
        boxes = [BBox(float(rng.uniform(-5, w)), float(rng.uniform(-5, h)), float(rng.uniform(1, 15)),
                      float(rng.uniform(1, 20))) for _ in range(n)]
        anns = [GTAnnotation(b) for b in boxes]
        # visible masks inside each box, as instance masks are
        masks = []
        for b in boxes:
            inside = scan_mask(h, w, lambda i, j, b=b: pixel_in_box(b, i, j))
            masks.append(inside & (rng.random((h, w)) < 0.6))
        parts = [build_region_mask((h, w), anns, RegionSelector(k), masks) for k in (FOREGROUND, INNER_BG, OUTER_BG)]
        count = np.zeros((h, w), int)
        for p in parts:
            count += p
        failures += int(not (count == 1).all())
        lo, hi = sorted(rng.uniform(1.0, 4.0, size=2))
        mid = float(rng.uniform(lo, hi))
        if hi - lo < 1e-3:
            continue
        whole = build_region_mask((h, w), anns, RegionSelector.band(lo, hi))
        a = build_region_mask((h, w), anns, RegionSelector.band(lo, mid)) if mid > lo else np.zeros_like(whole)
        b = build_region_mask((h, w), anns, RegionSelector.band(mid, hi)) if hi > mid else np.zeros_like(whole)
        failures += int((a & b).any() or not np.array_equal(a | b, whole))
    elapsed = time.time() - t0
    report(capsys, 2, failures == 0 and elapsed < 60, f"100 layouts, {failures} violations, {elapsed:.1f}s")


# --- 3. gradients -----------------------------------------------------------


def _fd(fn, x, w):
    x.grad = None
    (fn(x) * w).sum().backward()
    analytic = x.grad.detach().reshape(-1).numpy().copy()
    return rel_err(analytic, central_fd(lambda: (fn(x) * w).sum(), x))


def test_criterion_3_gradients(capsys):
    t0 = time.time()
    errs = {}
    g = torch.Generator().manual_seed(11)

    # reconstruction loss, away from the |.| kink
    target = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    sign = torch.where(torch.rand(2, 3, 4, 4, generator=g) < 0.5, -1.0, 1.0).double()
    recon = (target + sign * (0.05 + 0.2 * torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64))).requires_grad_()
    errs["gen_loss"] = _fd(lambda r: gen_loss(r, target), recon, torch.ones((), dtype=torch.float64))

    # domain loss, probability form and weighted patch form
    ps = torch.tensor([0.2, 0.55, 0.9, 0.35], dtype=torch.float64, requires_grad=True)
    errs["dis_loss"] = _fd(lambda p: dis_loss(p, [0, 1, 1, 0]), ps, torch.ones((), dtype=torch.float64))
    z = torch.randn(2, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    wts = 1 + torch.rand(2, 3, 3, generator=g, dtype=torch.float64)
    errs["weighted_dis_loss"] = _fd(lambda v: weighted_dis_loss(v, [0, 1], wts), z, torch.ones((), dtype=torch.float64))

    # detection loss on a toy head
    cfg = DetectorConfig(input_size=32, strides=(8,), channels=(8,), stem_channels=4, head_channels=8,
                         anchor_sizes=(12.0,), aspect_ratios=(0.5, 1.0))
    anchors = make_anchors(cfg, torch.float64)
    head = (0.3 * torch.randn(1, 2, 4, 4, 5, generator=g, dtype=torch.float64)).requires_grad_()
    gts = [[GTAnnotation(BBox(6.0, 4.0, 7.0, 13.0)), GTAnnotation(BBox(18.0, 15.0, 9.0, 11.0))]]
    errs["detection_loss"] = _fd(lambda hd: detection_loss([hd], anchors, gts, cfg).total, head,
                                 torch.ones((), dtype=torch.float64))

    torch.manual_seed(1)
    bdm = BackgroundDecoupler(BdmConfig(in_channels=2, widths=(3, 4))).double()
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    errs["bdm"] = _fd(bdm, x, torch.randn(1, 2, 4, 4, dtype=torch.float64))

    fgm = FeatureGenerator(FgmConfig(in_channels=2, width=3, res_blocks=1, up_widths=(2, 2))).double()
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
    errs["fgm"] = _fd(fgm, x, torch.randn(1, 3, 12, 12, dtype=torch.float64))

    for name, (lng, sht) in {"lsd": (True, True), "lsd_long": (True, False), "lsd_short": (False, True)}.items():
        lsd = LongShortDiscriminator(tiny_lsd_cfg(use_long=lng, use_short=sht)).double()
        x = torch.randn(2, 2, 16, 16, dtype=torch.float64, requires_grad=True)
        errs[name] = _fd(lsd.patch_logits, x, torch.randn(2, 2, 2, dtype=torch.float64))

    # gradient reversal: bit-identical forward, exactly -lambda * g backward
    grl_ok = True
    for lam in (0.0, 0.37, 1.0, 2.5):
        x = torch.randn(3, 4, 5, requires_grad=True)
        y = grl(x, lam)
        up = torch.randn_like(x)
        y.backward(up)
        grl_ok &= torch.equal(y, x) and torch.equal(x.grad, up * (-lam))
    elapsed = time.time() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    report(capsys, 3, worst < 1e-4 and grl_ok and elapsed < 300,
           f"max rel err {worst:.1e} ({detail}); GRL exact: {grl_ok}; {elapsed:.1f}s")


# --- 4. loss composition ----------------------------------------------------


def test_criterion_4_loss_composition(capsys):
    exact = total_loss(2.0, 5.0, 10.0, LossWeights(1.0, 0.1, 0.01)).total == 2.6
    rng = np.random.default_rng(4)
    linear = True
    for _ in range(200):
        w = LossWeights(*rng.uniform(0, 2, 3))
        a, b, c, k = rng.uniform(-5, 5, 4)
        base = total_loss(a, b, c, w).total
        for i in range(3):
            args = [a, b, c]
            args2 = list(args)
            args2[i] += k
            coef = (w.alpha, w.beta, w.gamma)[i]
            linear &= abs(total_loss(*args2, w).total - base - coef * k) < 1e-9
    report(capsys, 4, exact and linear, f"total_loss(2,5,10) == 2.6 exactly: {exact}; linear over grid: {linear}")


# --- shared desk-scale pipeline ---------------------------------------------


@pytest.fixture(scope="session")
def pipeline():
    """Per seed: source-only results, region tables, probes, and both adaptation runs."""
    base = ExperimentConfig()
    out = {}
    t_all = time.time()
    for seed in SEEDS:
        cfg = base.with_seed(seed)
        t0 = time.time()
        data = synth_data(cfg.synth)
        det, _ = train_source_only(data, cfg.detector, cfg.train)
        t_source = time.time() - t0
        src_state = {k: v.clone() for k, v in det.state_dict().items()}
        black = FillPolicy("black")
        variants = list(dict.fromkeys([*REGION_VARIANTS, *RANGE_VARIANTS]))
        t0 = time.time()
        table = {r["variant"]: r for r in region_table(det, data.target_test, variants, black)["rows"]}
        t_tables = time.time() - t0

        t0 = time.time()
        probe_source = domain_probe(det, None, data, cfg.probe)  # raw tap of the frozen detector
        t_probe = time.time() - t0

        runs = {}
        for name, gamma in (("bfda", cfg.adapt.gamma), ("gamma0", 0.0)):
            acfg = AdaptConfig(**{**cfg.adapt.to_dict(), "gamma": gamma})
            t0 = time.time()
            adet, result, state = adapt_from(src_state, data, cfg.detector, acfg)
            runs[name] = {"result": result, "state": state, "det": adet, "time": time.time() - t0}
        t0 = time.time()
        probe_adapted = domain_probe(runs["bfda"]["det"], runs["bfda"]["state"].bdm, data, cfg.probe)
        t_probe += time.time() - t0

        initial = runs["bfda"]["result"].initial
        out[seed] = {
            "source_mr2": initial["target"]["mr2"]["reasonable"],
            "source_ap50": initial["target"]["ap50"],
            "source_test_ap50": initial["source"]["ap50"],
            "table": table,
            "probe_source": probe_source,
            "probe_adapted": probe_adapted,
            "bfda_last_mr2": runs["bfda"]["result"].history[-1]["target_mr2"],
            "gamma0_last_mr2": runs["gamma0"]["result"].history[-1]["target_mr2"],
            "bfda_history": runs["bfda"]["result"].history,
            "gamma0_history": runs["gamma0"]["result"].history,
            "times": {"source": t_source, "tables": t_tables, "probes": t_probe,
                      "adapt_bfda": runs["bfda"]["time"], "adapt_gamma0": runs["gamma0"]["time"]},
        }
    out["total_time"] = time.time() - t_all
    summary = {str(k): {kk: vv for kk, vv in v.items() if kk not in ("table",)} if isinstance(v, dict) else v
               for k, v in out.items()}
    path = os.environ.get("BFDA_ACCEPTANCE_SUMMARY")
    if path:
        with open(path, "w") as f:
            json.dump({"summary": summary,
                       "tables": {str(s): out[s]["table"] for s in SEEDS}}, f, indent=1, default=float)
    return out


def test_criterion_5_adversarial_mechanics(pipeline, capsys):
    a = [pipeline[s]["probe_source"] for s in SEEDS]
    b = [pipeline[s]["probe_adapted"] for s in SEEDS]
    probe_time = sum(pipeline[s]["times"]["probes"] for s in SEEDS)
    ok_a, ok_b = majority(x >= 0.90 for x in a), majority(x <= 0.65 for x in b)
    report(capsys, 5, ok_a and ok_b and probe_time <= 1800,
           f"(a) frozen source-only probe acc {[round(x, 3) for x in a]} (need >= 0.90): {ok_a}; "
           f"(b) adapted probe acc {[round(x, 3) for x in b]} (need <= 0.65): {ok_b}; probes {probe_time:.0f}s")


def test_criterion_6_region_trend(pipeline, capsys):
    drops = []
    for s in SEEDS:
        t = pipeline[s]["table"]
        drops.append((-t["no_O"]["delta_ap50"], -t["no_F"]["delta_ap50"]))
    ok = majority(o > f for o, f in drops)
    report(capsys, 6, ok, "AP50 drop (outer, foreground) per seed: "
           + ", ".join(f"({o:.3f}, {f:.3f})" for o, f in drops))


def test_criterion_7_range_trend(pipeline, capsys):
    deg = []
    for s in SEEDS:
        t = pipeline[s]["table"]
        deg.append(tuple(t[v]["delta_mr2"] for v in ("no_1.0_2.0", "no_1.5_2.5", "no_2.0_3.0")))
    ok = majority(a >= b >= c for a, b, c in deg)
    report(capsys, 7, ok, "MR-2 degradation (1.0-2.0, 1.5-2.5, 2.0-3.0) per seed: "
           + ", ".join("(" + ", ".join(f"{x:.3f}" for x in d) + ")" for d in deg))


def test_criterion_8_adaptation_gain(pipeline, capsys):
    rows = [(pipeline[s]["source_mr2"], pipeline[s]["bfda_last_mr2"], pipeline[s]["gamma0_last_mr2"]) for s in SEEDS]
    gains = majority(src - ada >= MR2_MARGIN for src, ada, _ in rows)
    control = not majority(src - g0 >= MR2_MARGIN for src, _, g0 in rows)
    # the timed pipeline is synth + source training + adaptation with per-epoch evaluation;
    # the gamma=0 control, probes and region tables are extra diagnostics
    total = sum(pipeline[s]["times"]["source"] + pipeline[s]["times"]["adapt_bfda"] for s in SEEDS)
    report(capsys, 8, gains and control and total <= 3600,
           "target MR-2 (source-only, adapted, gamma=0) per seed: "
           + ", ".join(f"({a:.3f}, {b:.3f}, {c:.3f})" for a, b, c in rows)
           + f"; adapted gains: {gains}; gamma=0 shows no systematic gain: {control}; pipeline {total / 60:.1f} min")


# --- 9. determinism ---------------------------------------------------------


def _tree(root):
    files = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            if n == "log.txt" or n.endswith(".pt"):
                continue  # logs and pickled checkpoints are not reports
            p = os.path.join(dirpath, n)
            with open(p, "rb") as f:
                files[os.path.relpath(p, root)] = f.read()
    return files


def _all_commands(root):
    cfg = os.path.join(root, "cfg.json")
    with open(cfg, "w") as f:
        json.dump({"synth": {"n_train": 8, "n_test": 4, "max_instances": 2}, "train": {"epochs": 1},
                   "adapt": {"epochs": 1, "batch_size": 4}}, f)
    data, src = os.path.join(root, "data"), os.path.join(root, "src")
    ckpt = os.path.join(src, "checkpoints", "source.pt")
    common = ["--config", cfg, "--seed", "9"]
    cmds = [
        ["synth", *common, "--out", data],
        ["train-source", *common, "--data", data, "--out", src],
        ["adapt", *common, "--data", data, "--checkpoint", ckpt, "--out", os.path.join(root, "adapt")],
        ["eval", *common, "--manifest", os.path.join(data, "target_test.json"), "--checkpoint", ckpt,
         "--out", os.path.join(root, "eval"), "--plot", os.path.join(root, "eval", "fppi.png")],
        ["ablate-regions", *common, "--checkpoint", ckpt, "--data", data, "--out", os.path.join(root, "abl")],
        ["mask", *common, "--manifest", os.path.join(data, "target_test.json"), "--selector", "band",
         "--band", "1.0", "2.0", "--fill", "random", "--output", os.path.join(root, "mask", "m.json"),
         "--out", os.path.join(root, "mask")],
        ["vis", *common, "--run", os.path.join(root, "adapt"), "--data", data, "--out", os.path.join(root, "vis")],
        ["sweep", *common, "--data", data, "--checkpoint", ckpt, "--grid", "gamma=0,0.01",
         "--out", os.path.join(root, "sweep")],
    ]
    for argv in cmds:
        assert cli.main(argv) == 0, argv
    return [c[0] for c in cmds]


def test_criterion_9_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    names = _all_commands(str(a))
    _all_commands(str(b))
    ta, tb = _tree(str(a)), _tree(str(b))
    # paths inside manifests are relative, so trees compare byte for byte
    differing = sorted(k for k in ta if ta[k] != tb.get(k))
    reports_checked = sum(1 for k in ta if k.endswith(".json"))
    report(capsys, 9, not differing and set(ta) == set(tb),
           f"{len(names)} commands run twice, {len(ta)} files ({reports_checked} JSON) compared, "
           f"differing: {differing[:5]}")
