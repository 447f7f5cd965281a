"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and timings.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from sfodkit.backends import ToyDetector, calibrate_noise_sigma
from sfodkit.corrupt import KINDS, CorruptionSpec, corrupt_image, file_seed, generate_dataset
from sfodkit.ema import ema_init, ema_update
from sfodkit.evaluation import FP, TP, average_precision, evaluate
from sfodkit.geometry import OrientedBox, rotated_iou, to_horizontal
from sfodkit.imageops import psnr, rng_stream, save_image_png
from sfodkit.pipeline import (
    PipelineConfig,
    corrupted_scene,
    generate_scenes,
    lambda_sweep,
    run_experiment_matrix,
    train_source,
)
from sfodkit.pseudo_label import cga_refine
from oracles import (
    aabb_corner_extrema,
    finite_difference_grads,
    rasterized_iou,
    reference_voc_eval,
)


def report(number: int, name: str, ok: bool, elapsed: float, budget: float, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    extra = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {number} {name}: {status} in {elapsed:.1f}s (budget {budget:.0f}s){extra}")
    assert ok, f"criterion {number} {name} failed{extra}"
    assert elapsed < budget, f"criterion {number} exceeded runtime budget: {elapsed:.1f}s"


def random_box(rng):
    return OrientedBox(
        cx=rng.uniform(-3, 3), cy=rng.uniform(-3, 3),
        w=rng.uniform(0.5, 3.0), h=rng.uniform(0.5, 3.0),
        theta=rng.uniform(-math.pi / 2, math.pi / 2),
    )


def test_criterion_1_geometry_exactness():
    start = time.time()
    rng = np.random.default_rng(101)
    worst_wh = 0.0
    for _ in range(10_000):
        box = random_box(rng)
        hb = to_horizontal(box)
        ow, oh = aabb_corner_extrema(box)
        worst_wh = max(worst_wh, abs(hb.w - ow), abs(hb.h - oh))
    worst_iou = 0.0
    for _ in range(1_000):
        a = OrientedBox(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.8, 3),
                        rng.uniform(0.8, 3), rng.uniform(-math.pi / 2, math.pi / 2))
        b = OrientedBox(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.8, 3),
                        rng.uniform(0.8, 3), rng.uniform(-math.pi / 2, math.pi / 2))
        worst_iou = max(worst_iou, abs(rotated_iou(a, b) - rasterized_iou(a, b, grid=2048)))
    elapsed = time.time() - start
    report(1, "geometry-exactness", worst_wh < 1e-9 and worst_iou < 1e-3, elapsed, 30,
           f"max |dwh|={worst_wh:.2e}, max |diou|={worst_iou:.2e}")


def test_criterion_2_cga_correctness():
    start = time.time()
    rng = np.random.default_rng(202)
    k = 6
    y_w = rng.dirichlet(np.ones(k), size=10_000)
    y_c = rng.dirichlet(np.ones(k), size=10_000)
    lam = 0.37
    out = cga_refine(y_w, y_c, lam)
    agree = np.argmax(y_w, axis=1) == np.argmax(y_c, axis=1)
    agree_exact = np.array_equal(out[agree], y_w[agree])
    blend = (1.0 - lam) * y_w[~agree] + lam * y_c[~agree]
    disagree_close = float(np.max(np.abs(out[~agree] - blend))) if (~agree).any() else 0.0
    simplex = float(np.max(np.abs(out.sum(axis=1) - 1.0)))
    nonneg = float(out.min()) >= 0.0
    elapsed = time.time() - start
    report(2, "cga-correctness",
           agree_exact and disagree_close <= 1e-12 and simplex < 1e-9 and nonneg,
           elapsed, 5,
           f"agree rows bit-identical={agree_exact}, max blend err={disagree_close:.1e}, "
           f"max row-sum err={simplex:.1e}")


def test_criterion_3_ema_dynamics():
    start = time.time()
    rng = np.random.default_rng(303)
    ok = True
    worst = 0.0
    for alpha in (0.9, 0.998, 1.0):
        t0 = rng.normal(size=8) + 2.0  # bounded away from zero
        state = ema_init({"w": t0}, alpha=alpha)
        student = {"w": np.zeros(8)}  # closed-form oracle: |t_n - 0| = alpha^n |t_0|
        for n in range(1, 501):
            ema_update(state, student)
            expected = alpha ** n * np.abs(t0)
            actual = np.abs(state.teacher_params["w"])
            rel = np.max(np.abs(actual - expected) / expected)
            worst = max(worst, float(rel))
            ok = ok and rel < 1e-9
    elapsed = time.time() - start
    report(3, "ema-dynamics", ok, elapsed, 1, f"max relative deviation {worst:.1e} over 500 steps")


def test_criterion_4_gradient_check():
    start = time.time()
    rng = np.random.default_rng(404)
    worst = 0.0
    for trial in range(20):
        k = int(rng.integers(2, 5))
        det = ToyDetector(num_classes=k, init_seed=1000 + trial)
        n = int(rng.integers(2, 5))
        patches = rng_stream(trial, "accept-patches").random((n, 3, 12, 12))
        targets = [int(t) for t in rng.integers(-1, k, size=n)]
        _, grads = det.loss_and_grad(patches, targets)

        def loss_fn():
            return det.loss_and_grad(patches, targets)[0].total

        fd = finite_difference_grads(loss_fn, det.parameters())
        for name in grads:
            num = np.linalg.norm(grads[name] - fd[name])
            den = max(np.linalg.norm(fd[name]), 1e-8)
            worst = max(worst, num / den)
    elapsed = time.time() - start
    report(4, "gradient-check", worst < 1e-4, elapsed, 10, f"max relative error {worst:.2e}")


def test_criterion_5_voc_ap():
    start = time.time()
    # hand-derived precision envelope: recall steps at p=1 then p=2/3
    ap = average_precision([0.9, 0.8, 0.7], [TP, FP, TP], num_gt=2)
    hand_ok = abs(ap - 5.0 / 6.0) < 1e-12
    hand_ok &= average_precision([0.9, 0.8], [TP, TP], num_gt=2) == 1.0
    hand_ok &= average_precision([], [], num_gt=3) == 0.0

    rng = np.random.default_rng(505)
    oracle_ok = True
    from sfodkit.evaluation import GtBox
    from sfodkit.pseudo_label import PseudoLabel
    for _ in range(200):
        k = int(rng.integers(1, 4))
        gts = [GtBox(random_box(rng), int(rng.integers(0, k)), bool(rng.random() < 0.15))
               for _ in range(int(rng.integers(0, 4)))]
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            if gts and rng.random() < 0.6:
                base = gts[int(rng.integers(0, len(gts)))].box
                box = OrientedBox(base.cx + rng.normal(0, 0.5), base.cy + rng.normal(0, 0.5),
                                  base.w, base.h, base.theta + rng.normal(0, 0.15))
            else:
                box = random_box(rng)
            dets.append(PseudoLabel(box, int(rng.integers(0, k)), float(rng.random())))
        mine = evaluate([dets], [gts], num_classes=k)
        ref_aps, ref_map = reference_voc_eval(
            [[(d.box, d.class_id, d.score) for d in dets]],
            [[(g.box, g.class_id, g.difficult) for g in gts]],
            num_classes=k,
        )
        same = np.allclose(mine.per_class_ap, ref_aps, atol=1e-9, equal_nan=True)
        same &= (math.isnan(ref_map) and math.isnan(mine.mean_ap)) or \
                abs(mine.mean_ap - ref_map) < 1e-9
        oracle_ok = oracle_ok and same
    elapsed = time.time() - start
    report(5, "voc-average-precision", hand_ok and bool(oracle_ok), elapsed, 10,
           "hand cases exact, 200 random micro-instances match the reference oracle")


def _probe_set():
    scenes = generate_scenes(10, 4, seed=600, size=64)
    return [s.image for s in scenes]


def test_criterion_6_corruption_pipeline(tmp_path):
    start = time.time()
    probes = _probe_set()

    # determinism + label preservation through the dataset generator
    src = tmp_path / "src"
    src.mkdir()
    for i in range(3):
        save_image_png(src / f"img{i}.png", probes[i])
        (src / f"img{i}.txt").write_text(f"0 32.0 32.0 16.0 8.0 0.{i}\n")
    a = generate_dataset(src, tmp_path / "a", ["gaussian_noise", "fog", "jpeg"], 3, seed=42)
    b = generate_dataset(src, tmp_path / "b", ["gaussian_noise", "fog", "jpeg"], 3, seed=42)
    determinism = [(e.path, e.sha256) for e in a] == [(e.path, e.sha256) for e in b]
    labels_ok = all(
        (tmp_path / "a" / kind / f"img{i}.txt").read_bytes() == (src / f"img{i}.txt").read_bytes()
        for kind in ("gaussian_noise", "fog", "jpeg") for i in range(3)
    )

    # PSNR monotone in severity for every kind, averaged over the probe set
    monotone_ok, worst_kind = True, ""
    for kind in KINDS:
        means = []
        for severity in range(1, 6):
            vals = [
                psnr(img, corrupt_image(img, CorruptionSpec(kind, severity,
                                                            file_seed(42, f"p{i}", kind))))
                for i, img in enumerate(probes)
            ]
            means.append(float(np.mean(vals)))
        if not all(x >= y - 1e-9 for x, y in zip(means, means[1:])):
            monotone_ok = False
            worst_kind = f"{kind}: {['%.1f' % m for m in means]}"
    elapsed = time.time() - start
    report(6, "corruption-pipeline", determinism and labels_ok and monotone_ok, elapsed, 120,
           worst_kind or "determinism, label preservation, 20-kind PSNR monotonicity")


MATRIX_KINDS = ["gaussian_noise", "frost", "cloudy"]


def _acceptance_config(seed: int, sigma: float) -> PipelineConfig:
    return PipelineConfig(seed=seed, learning_rate=0.05, weight_decay=0.002, epochs=1,
                          batch_size=4, alpha=0.9, tau=0.7, lam=0.5,
                          classifier_sigma=sigma)


def test_criterion_7_table_analogue():
    start = time.time()
    sigma90 = calibrate_noise_sigma(0.9, 4, 64, seed=100)
    methods = ["direct", "self_train", "cga"]
    per_method = {m: [] for m in methods}
    clean_vals, corrupted_direct = [], []
    for seed in range(5):
        cfg = _acceptance_config(seed, sigma90)
        results, clean = run_experiment_matrix(methods, MATRIX_KINDS, cfg, n_scenes=200)
        clean_vals.append(clean.mean_ap)
        corrupted_direct.append(np.mean([results["direct"][k].mean_ap for k in MATRIX_KINDS]))
        for m in methods:
            per_method[m].append(np.mean([results[m][k].mean_ap for k in MATRIX_KINDS]))
    direct = float(np.mean(per_method["direct"]))
    self_tr = float(np.mean(per_method["self_train"]))
    cga = float(np.mean(per_method["cga"]))
    clean_mean = float(np.mean(clean_vals))
    corrupted_mean = float(np.mean(corrupted_direct))
    ordering = direct < self_tr <= cga
    drop = corrupted_mean < clean_mean
    elapsed = time.time() - start
    report(7, "table-analogue-ordering", ordering and drop, elapsed, 600,
           f"direct {direct:.3f} < self {self_tr:.3f} <= cga {cga:.3f}; "
           f"corrupted {corrupted_mean:.3f} < clean {clean_mean:.3f}")


def test_criterion_8_lambda_ablation_shape():
    start = time.time()
    sigma70 = calibrate_noise_sigma(0.7, 4, 64, seed=100)
    lambdas = [0.0, 0.2, 0.5, 0.8, 1.0]
    curves = []
    for seed in range(5):
        cfg = PipelineConfig(seed=seed, learning_rate=0.05, weight_decay=0.002, epochs=2,
                             batch_size=4, alpha=0.9, tau=0.65, distractors=4,
                             classifier_sigma=sigma70)
        scenes = generate_scenes(120, cfg.num_classes, cfg.seed, cfg.image_size)
        train, test = scenes[:80], scenes[80:]
        source = train_source(train, cfg)
        train_c = [corrupted_scene(s, "cloudy", 3, cfg.seed, i) for i, s in enumerate(train)]
        test_c = [corrupted_scene(s, "cloudy", 3, cfg.seed, 80 + i) for i, s in enumerate(test)]
        res = lambda_sweep(cfg, lambdas, source, train_c, test_c)
        curves.append([res[l].mean_ap for l in lambdas])
    mean = np.mean(curves, axis=0)
    interior = float(mean[1:-1].max())
    strict = interior > mean[0] and interior > mean[-1]
    elapsed = time.time() - start
    report(8, "lambda-ablation-shape", strict, elapsed, 900,
           "mean curve " + " ".join(f"{v:.3f}" for v in mean) +
           f"; interior max {interior:.3f} vs endpoints {mean[0]:.3f}/{mean[-1]:.3f}")


def test_criterion_9_end_to_end_reproducibility(tmp_path):
    start = time.time()
    cfg = {
        "num_classes": 3, "image_size": 64, "learning_rate": 0.05, "weight_decay": 0.002,
        "epochs": 1, "batch_size": 2, "alpha": 0.9, "tau": 0.6, "classifier_sigma": 0.3,
        "source_epochs": 2, "source_batch": 4,
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    outputs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "sfodkit.cli", "adapt", "--out", str(out),
             "--config", str(cfg_path), "--count", "12", "--seed", "7", "--kind", "cloudy"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append(out)
    report_same = (outputs[0] / "run_report.txt").read_bytes() == \
                  (outputs[1] / "run_report.txt").read_bytes()
    params_same = (outputs[0] / "teacher_params.tensors").read_bytes() == \
                  (outputs[1] / "teacher_params.tensors").read_bytes()
    elapsed = time.time() - start
    report(9, "end-to-end-reproducibility", report_same and params_same, elapsed, 120,
           "byte-identical run reports and parameter files")
