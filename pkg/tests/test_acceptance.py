"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-9 share one desk-profile pipeline (synthetic data, translator
training, transfer) built once per session.  Expect about 18 minutes on
one CPU core.
"""
import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from gradcheck import check_gradients
from oracles import GRID, brute_force_match, oracle_iou, to_grid

from lightaug import config as C
from lightaug import datasets as ds
from lightaug import experiments as X
from lightaug.detector import (DetectionLossWeights, DetectorConfig, DetectorOutput,
                               build_detector, detection_loss)
from lightaug.evaluator import EvalConfig, evaluate_dataset, iou_matrix, match_lanes
from lightaug.imaging import crop_to_trace, pad_to_multiple
from lightaug.postprocess import decode_lanes
from lightaug.simcyclegan import (Discriminator, DiscriminatorConfig, GanBundle, GanConfig,
                                  Generator, GeneratorConfig, LossParts, LossWeights,
                                  adversarial_loss, cycle_loss, discriminator_forward,
                                  generator_objective, patch_map_shape, total_loss)


# ---- 1. scale information match ------------------------------------------------

def test_criterion_1_shape_contract(verdict):
    t0 = time.time()
    rng = np.random.default_rng(1)
    torch.manual_seed(0)
    gen = Generator(GeneratorConfig(base_channels=4, downsample_stages=2, residual_blocks=1)).eval()
    bad_shapes, bad_trips = [], 0
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(8, 258, 2))
        with torch.no_grad():
            out = gen(torch.zeros(1, 3, h, w).uniform_(-1, 1))
        if tuple(out.shape[-2:]) != (h, w):
            bad_shapes.append((h, w))
        img = rng.uniform(-1, 1, (h, w, 3)).astype(np.float32)
        back = crop_to_trace(*pad_to_multiple(img, 4))
        bad_trips += back.tobytes() != img.tobytes()
    took = time.time() - t0
    ok = not bad_shapes and bad_trips == 0 and took < 60
    verdict(1, ok, f"50 sizes, shape mismatches {bad_shapes}, round-trip failures {bad_trips}, "
                   f"{took:.1f}s")
    assert ok


# ---- 2. loss fixtures ----------------------------------------------------------

def test_criterion_2_loss_fixtures(verdict):
    half = np.full((4, 6, 6), 0.5)
    loss_d, loss_g = adversarial_loss(half, half)
    x = torch.zeros(2, 3, 5, 5).uniform_(-1, 1)
    y = torch.zeros(2, 3, 5, 5).uniform_(-1, 1)
    cyc = cycle_loss(x, x + 0.1, y, y)
    tot = total_loss(LossParts(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(0.2)),
                     LossWeights(10.0))
    L = 4
    probs = torch.full((2, L + 1, 6, 7), 1.0 / (L + 1), dtype=torch.float64)
    seg = np.random.default_rng(0).integers(0, L + 1, (2, 6, 7))
    ex = np.random.default_rng(1).integers(0, 2, (2, L)).astype(float)
    det = detection_loss(DetectorOutput(probs, torch.full((2, L), 0.5, dtype=torch.float64)),
                         seg, ex, DetectionLossWeights(0.9, 0.1))
    checks = {
        "loss_D=2ln2": (loss_d.item(), 2 * math.log(2)),
        "loss_G=ln2": (loss_g.item(), math.log(2)),
        "cycle=0.1": (cyc.item(), 0.1),
        "total=4.0": (tot.item(), 4.0),
        "detection=0.9ln5+0.1ln2": (det.item(), 0.9 * math.log(5) + 0.1 * math.log(2)),
    }
    errs = {k: abs(a - b) for k, (a, b) in checks.items()}
    ok = max(errs.values()) <= 1e-6
    verdict(2, ok, "max |err| %.1e (%s)" % (max(errs.values()), max(errs, key=errs.get)))
    assert ok


# ---- 3. gradient checks --------------------------------------------------------

def test_criterion_3_gradient_checks(verdict):
    t0 = time.time()
    # GAN: 8x8 inputs, so the classifier has a single strided layer (see notes)
    cfg = GanConfig(generator=GeneratorConfig(base_channels=4, residual_blocks=1),
                    discriminator=DiscriminatorConfig(base_channels=4, n_layers=1))
    bundle = GanBundle(cfg, seed=0)
    for net in bundle.nets().values():
        net.double()
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    y = torch.as_tensor(rng.uniform(-1, 1, (1, 3, 8, 8)))
    gan_probes, gan_rej = check_gradients(
        lambda: generator_objective(bundle, x, y, LossWeights())[0],
        {n: list(net.parameters()) for n, net in bundle.nets().items()}, 5, rng)

    model = build_detector(DetectorConfig(channels=8, encoder_stages=2, blocks_per_stage=1,
                                          exist_hidden=8), seed=0).double().train()
    rng = np.random.default_rng(0)
    img = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 16, 32)))
    trng = np.random.default_rng(1)
    seg, ex = trng.integers(0, 5, (2, 16, 32)), trng.integers(0, 2, (2, 4)).astype(float)
    groups = {k: list(getattr(model, k).parameters())
              for k in ("encoder", "decoder", "classifier", "exist")}
    det_probes, det_rej = check_gradients(lambda: detection_loss(model(img), seg, ex), groups, 5, rng)

    took = time.time() - t0
    worst_g = max(p.rel_error for p in gan_probes)
    worst_d = max(p.rel_error for p in det_probes)
    ok = (len(gan_probes) == len(det_probes) == 20 and worst_g < 1e-2 and worst_d < 1e-2
          and took < 120)
    verdict(3, ok, f"GAN worst rel err {worst_g:.1e} ({gan_rej} kink-straddling draws skipped), "
                   f"detector {worst_d:.1e} ({det_rej} skipped), {took:.0f}s")
    assert ok


# ---- 4. patch classifier geometry ----------------------------------------------

def test_criterion_4_patch_map(verdict):
    torch.manual_seed(0)
    disc = Discriminator(DiscriminatorConfig(base_channels=4))
    size = 256
    for m in disc.modules():
        if isinstance(m, nn.Conv2d):
            k, s, p = m.kernel_size[0], m.stride[0], m.padding[0]
            size = (size + 2 * p - k) // s + 1
    got = discriminator_forward(disc, np.zeros((256, 256, 3))).shape
    ok = got == (30, 30) == (size, size) == patch_map_shape(256, 256)
    verdict(4, ok, f"256x256 -> {got[0]}x{got[1]}, oracle {size}x{size}")
    assert ok


# ---- 5. evaluator vs brute force -----------------------------------------------

def _scene(rng):
    h, w = (int(v) for v in rng.integers(16, 65, 2))
    width = int(rng.integers(2 * GRID, 12 * GRID + 1)) / GRID

    def lane():
        n = int(rng.integers(2, 5))
        ys = np.sort(rng.choice(np.arange(-2 * GRID, (h + 2) * GRID), n, replace=False)) / GRID
        return np.stack([rng.integers(-2 * GRID, (w + 2) * GRID, n) / GRID, ys], 1)

    gts = [lane() for _ in range(int(rng.integers(0, 4)))]
    preds = [g + rng.integers(-3 * GRID, 3 * GRID + 1, (1, 2)) / GRID
             for g in gts if rng.random() < 0.8]
    while len(preds) < 3 and rng.random() < 0.4:
        preds.append(lane())
    return EvalConfig(line_width=width, canvas=(h, w)), preds, gts


def test_criterion_5_evaluator_oracle(verdict, tmp_path):
    rng = np.random.default_rng(5)
    count_mismatch, worst_iou = 0, 0.0
    for _ in range(200):
        cfg, preds, gts = _scene(rng)
        h, w = cfg.canvas
        ious = np.array([[oracle_iou(to_grid(p), to_grid(g), int(cfg.line_width * GRID), h, w)
                          for g in gts] for p in preds]).reshape(len(preds), len(gts))
        ref = brute_force_match(ious, cfg.iou_threshold)[:3]
        count_mismatch += match_lanes(preds, gts, cfg)[:3] != ref
        if ious.size:
            worst_iou = max(worst_iou, float(np.abs(iou_matrix(preds, gts, cfg) - ious).max()))
    lanes = [[(10.0, 0.0), (12.0, 63.0)], [(40.0, 0.0), (44.0, 63.0)]]
    for sub in ("gt", "pred"):
        ds.write_lines_file(tmp_path / sub / "a.lines.txt", lanes)
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "gt", {"a.png": "Normal"},
                           EvalConfig(line_width=6, canvas=(64, 64)))
    ok = count_mismatch == 0 and worst_iou < 0.02 and rep.total.f1 == 1.0
    verdict(5, ok, f"200 scenes, {count_mismatch} count mismatches, worst IoU gap {worst_iou:.4f}, "
                   f"identical-lane F1 {rep.total.f1}")
    assert ok


# ---- 6. decoding rule ---------------------------------------------------------

def test_criterion_6_decoding(verdict):
    pm = np.zeros((5, 200, 120))
    pm[1, :, 57] = 0.9
    pm[2, :, 30] = 0.9
    pm[3, :, 80] = 0.9
    dec = decode_lanes(pm, [0.9, 0.5, 0.51, 0.1])
    pts = dict(dec.lanes)[0]
    stride_ok = list(pts[:, 1]) == list(range(19, 200, 20)) and (pts[:, 0] == 57).all()
    strict_ok = [k for k, _ in dec.lanes] == [0, 2]

    pm = np.zeros((5, 40, 30))
    pm[1, 39, 3] = pm[1, 39, 20] = 0.8
    pm[1, 19, 7], pm[1, 19, 8] = 0.95, 0.6
    argmax_ok = np.array_equal(decode_lanes(pm, [0.9] * 4).lanes[0][1], [[7, 19], [3, 39]])

    pm = np.zeros((5, 40, 30))
    pm[1, :, 5] = 0.29
    below = decode_lanes(pm, [0.9] * 4).lanes
    pm[1, :, 5] = 0.3
    at = decode_lanes(pm, [0.9] * 4).lanes
    pm2 = np.zeros((5, 40, 30))
    pm2[1, 39, 4] = 0.9
    floor_ok = below == [] and len(at) == 1 and decode_lanes(pm2, [0.9] * 4).lanes == []
    ok = stride_ok and strict_ok and argmax_ok and floor_ok
    verdict(6, ok, f"stride {stride_ok}, strict threshold {strict_ok}, argmax {argmax_ok}, "
                   f"row floor {floor_ok}")
    assert ok


# ---- 7-9. desk pipeline ------------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Synthetic data, translator and transferred training set on the desk profile."""
    cfg = C.build_config("desk", environ={})
    X.set_threads(1)
    torch.use_deterministic_algorithms(True)
    root = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    lay = X.prepare_synthetic(cfg, root / "data")
    ckpt = X.train_gan(cfg, lay.gan_bright, lay.gan_dark, root / "gan")
    manifest = X.run_transfer(ckpt, lay.train, root / "transfer", cfg["data"]["num_lanes"])
    n = cfg["data"]["num_lanes"]
    return dict(cfg=cfg, root=root, lay=lay, manifest=manifest,
                real=ds.load_train_list(lay.train, n), val=ds.load_train_list(lay.val, n),
                setup_seconds=time.time() - t0)


@pytest.mark.slow
def test_criterion_7_night_gain(verdict, desk):
    cfg, lay = desk["cfg"], desk["lay"]
    t0 = time.time()
    results = X.compare_arms(cfg, cfg["compare"]["seeds"], desk["real"], desk["val"],
                             desk["manifest"], lay.test_root, lay.category_index,
                             desk["root"] / "compare")
    took = desk["setup_seconds"] + time.time() - t0
    gains = [100 * (a - b) for b, a in (r.f1("Night") for r in results)]
    wins = sum(g >= 3.0 for g in gains)
    ok = len(gains) == 5 and wins >= 4 and took < 45 * 60
    per_seed = ", ".join(f"{r.seed}:{100 * r.f1('Night')[0]:.1f}->{100 * r.f1('Night')[1]:.1f}"
                         for r in results)
    verdict(7, ok, f"Night F1 per seed {per_seed}; {wins}/5 seeds gain >= 3 points; "
                   f"{took / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_8_ratio_grid(verdict, desk):
    cfg, lay = desk["cfg"], desk["lay"]
    runs = []
    for rep in ("a", "b"):
        X.ablate_ratio(cfg, [0.25, 1, 4], desk["real"], desk["val"], desk["manifest"],
                       lay.test_root, lay.category_index, desk["root"] / f"ablate_{rep}")
        runs.append((desk["root"] / f"ablate_{rep}" / "grid.json").read_text())
    grid = json.loads(runs[0])
    cols = sorted(grid)
    cells = [grid[c]["per_category"][k]["f1"] for c in cols for k in ("Normal", "Night")]
    filled = all(isinstance(v, float) and math.isfinite(v) for v in cells) and \
        all("Crossroad" in grid[c]["fp_only_categories"] for c in cols)
    ok = cols == ["N=0.25", "N=1", "N=4"] and filled and runs[0] == runs[1]
    verdict(8, ok, f"columns {cols}, all cells populated {filled}, "
                   f"repeat run identical {runs[0] == runs[1]}")
    assert ok


@pytest.mark.slow
def test_criterion_9_label_reuse(verdict, desk):
    from PIL import Image
    man = desk["manifest"]
    sources = {e.image_path: e for e in desk["real"]}
    label_ok = size_ok = 0
    for r in man.records:
        src = sources[r.source]
        same_lines = ds.lines_path_for(r.generated).read_bytes() == \
            ds.lines_path_for(r.source).read_bytes()
        label_ok += same_lines and r.label == src.seg_label_path
        with Image.open(r.source) as a, Image.open(r.generated) as b:
            size_ok += a.size == b.size
    n = len(man.records)
    ok = n == len(desk["real"]) > 0 and label_ok == size_ok == n == len(man.converted)
    verdict(9, ok, f"{label_ok}/{n} labels byte-identical, {size_ok}/{n} resolutions equal")
    assert ok
