"""End-to-end workflows shared by the command line and the acceptance suite.

All functions take the merged run configuration dict (see :mod:`lightaug.config`).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from . import datasets as ds
from .detector import (DetectionLossWeights, DetectorConfig, LaneDetector, Sample,
                       TrainConfig, detector_forward, load_sample, train_detector)
from .evaluator import EvalConfig, EvalReport, evaluate_dataset, format_grid, write_report
from .postprocess import DecodedLanes, decode_lanes, lanes_to_culane_lines
from .transfer import (TransferConfig, TransferManifest, build_augmented_trainset, train_transfer,
                       transfer_batch)

log = logging.getLogger(__name__)


# ---- config adapters -------------------------------------------------------

def scene_config(cfg: dict, domain: str, seed: int, lanes=(2, 4)) -> ds.SyntheticSceneConfig:
    d = cfg["data"]
    looks = {k: ds.DomainLook(**v) for k, v in d["looks"].items()}
    return ds.SyntheticSceneConfig(canvas=tuple(d["canvas"]), lane_count=tuple(lanes),
                                   light_domain=domain, looks=looks,
                                   seg_width=d["seg_width"], num_lanes=d["num_lanes"], seed=seed)


def transfer_config(cfg: dict) -> TransferConfig:
    g = dict(cfg["gan"])
    keys = ("epochs", "batch_size", "resize", "lambda_cyc")
    top = {k: g.pop(k) for k in keys}
    return TransferConfig(seed=cfg["seed"], gan=g, **top)


def detector_config(cfg: dict) -> tuple[DetectorConfig, TrainConfig, DetectionLossWeights]:
    return (DetectorConfig(**cfg["detector"]), TrainConfig(**cfg["train"]),
            DetectionLossWeights(**cfg["loss"]))


def eval_config(cfg: dict) -> EvalConfig:
    e = cfg["eval"]
    return EvalConfig(line_width=e["line_width"], iou_threshold=e["iou_threshold"],
                      canvas=tuple(e["canvas"]), fp_only_categories=tuple(e["fp_only_categories"]))


# ---- synthetic data --------------------------------------------------------

@dataclass
class SyntheticLayout:
    root: Path
    train: Path  # list file
    val: Path
    gan_bright: Path  # directory
    gan_dark: Path
    test_root: Path
    category_index: Path


def synthetic_layout(root) -> SyntheticLayout:
    root = Path(root)
    return SyntheticLayout(root, root / "train" / "list.txt", root / "val" / "list.txt",
                           root / "gan_bright", root / "gan_dark", root / "test",
                           root / "test" / "index.tsv")


def prepare_synthetic(cfg: dict, root) -> SyntheticLayout:
    """Render the desk-scale dataset.

    Labeled bright train/val pools, unlabeled-role bright and dark pools for
    the translator, and a test tree with Normal (bright), Night (dark) and
    lane-free Crossroad scenes indexed by category.
    """
    lay = synthetic_layout(root)
    d = cfg["data"]
    base = int(cfg["seed"]) * 1000
    ds.synth_generate(scene_config(cfg, "bright", base + 1), d["train_count"], lay.root / "train")
    ds.synth_generate(scene_config(cfg, "bright", base + 2), d["val_count"], lay.root / "val")
    ds.synth_generate(scene_config(cfg, "bright", base + 3), d["gan_count"], lay.gan_bright)
    ds.synth_generate(scene_config(cfg, "dark", base + 4), d["gan_count"], lay.gan_dark)
    index = {}
    n_test = d["test_count"]
    splits = [("normal", "bright", base + 5, (2, 4), n_test, "Normal"),
              ("night", "dark", base + 6, (2, 4), n_test, "Night"),
              ("crossroad", "bright", base + 7, (0, 0), max(1, n_test // 5), "Crossroad")]
    for name, domain, seed, lanes, n, category in splits:
        out = lay.test_root / name
        made = ds.synth_generate(scene_config(cfg, domain, seed, lanes), n, out)
        for e in made.entries:
            index[str(Path(e.image_path).relative_to(lay.test_root))] = category
    ds.write_category_index(lay.category_index, index)
    return lay


# ---- GAN side ------------------------------------------------------------------

def train_gan(cfg: dict, domain_x_dir, domain_y_dir, out_dir) -> Path:
    n = cfg["data"]["num_lanes"]
    x = ds.dataset_from_dir(domain_x_dir, "X", n, cfg["seed"])
    y = ds.dataset_from_dir(domain_y_dir, "Y", n, cfg["seed"])
    return train_transfer(transfer_config(cfg), x, y, out_dir)


def run_transfer(checkpoint, sources_list, out_dir, num_lanes: int) -> TransferManifest:
    src = ds.DomainDataset("X", ds.load_train_list(sources_list, num_lanes))
    return transfer_batch(checkpoint, src, out_dir)


# ---- detector side ---------------------------------------------------------

class SampleCache:
    """Decoded training samples keyed by image path."""

    def __init__(self, num_lanes: int, input_size=None):
        self.num_lanes = num_lanes
        self.input_size = input_size
        self._cache: dict[Path, Sample] = {}

    def get(self, entries) -> list[Sample]:
        out = []
        for e in entries:
            key = Path(e.image_path).resolve()
            if key not in self._cache:
                self._cache[key] = load_sample(e, self.num_lanes, self.input_size)
            out.append(self._cache[key])
        return out


def predict_image(model: LaneDetector, path, cfg: dict) -> DecodedLanes:
    """Detect lanes and express them in the evaluation frame."""
    size = cfg["train"]["input_size"]
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        if size is not None:
            im = im.resize((int(size[1]), int(size[0])), PILImage.BILINEAR)
        img = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    maps = detector_forward(model, img)
    dec = decode_lanes(maps.prob_maps, maps.existence, **cfg["decode"])
    ch, cw = cfg["eval"]["canvas"]
    h, w = img.shape[:2]
    if (h, w) != (ch, cw):
        scale = np.array([cw / w, ch / h])
        dec.lanes = [(k, pts * scale) for k, pts in dec.lanes]
    return dec


def predict_dir(model: LaneDetector, test_root, category_index, pred_dir, cfg: dict) -> Path:
    index = category_index if isinstance(category_index, dict) else \
        ds.load_category_index(category_index)
    test_root, pred_dir = Path(test_root), Path(pred_dir)
    for rel in index:
        dec = predict_image(model, test_root / rel, cfg)
        out = ds.lines_path_for(pred_dir / rel)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(lanes_to_culane_lines(dec))
    return pred_dir


def evaluate_model(model: LaneDetector, cfg: dict, test_root, category_index, out_dir) -> EvalReport:
    out_dir = Path(out_dir)
    predict_dir(model, test_root, category_index, out_dir / "preds", cfg)
    ecfg = eval_config(cfg)
    report = evaluate_dataset(out_dir / "preds", test_root, category_index, ecfg)
    write_report(report, out_dir, ecfg)
    return report


def fit_detector(cfg: dict, train_entries, val_entries, seed: int, out_dir,
                 cache: SampleCache | None = None):
    det, train, loss = detector_config(cfg)
    cache = cache or SampleCache(det.num_lanes, train.input_size)
    return train_detector(det, train, train_entries, val_entries, seed=seed, loss_weights=loss,
                          out_dir=out_dir, train_samples=cache.get(train_entries),
                          val_samples=cache.get(val_entries))


def augmented_entries(cfg: dict, real_entries, manifest: TransferManifest, ratio_n: float,
                      seed: int, out_path) -> list[ds.ListEntry]:
    n = cfg["data"]["num_lanes"]
    path = build_augmented_trainset(real_entries, manifest, ratio_n, seed, out_path, n,
                                    cfg.get("lowlight_count"))
    return ds.load_train_list(path, n)


def ablate_ratio(cfg: dict, n_values, real_entries, val_entries, manifest: TransferManifest,
                 test_root, category_index, out_dir) -> dict[str, EvalReport]:
    """Train one detector per ratio N (shared seed) and evaluate each."""
    seen, values = set(), []
    for n in n_values:
        n = float(n)
        if n <= 0:
            raise ValueError(f"ratio N must be > 0, got {n}")
        if n in seen:
            log.warning("duplicate ratio N=%g ignored", n)
            continue
        seen.add(n)
        values.append(n)
    if not values:
        raise ValueError("no ratio values given")
    out_dir = Path(out_dir)
    det, train, _ = detector_config(cfg)
    cache = SampleCache(det.num_lanes, train.input_size)
    reports = {}
    for n in values:
        col = f"N={n:g}"
        sub = out_dir / col.replace("=", "_")
        entries = augmented_entries(cfg, real_entries, manifest, n, cfg["seed"], sub / "train.txt")
        run = fit_detector(cfg, entries, val_entries, cfg["seed"], sub, cache)
        reports[col] = evaluate_model(run.model, cfg, test_root, category_index, sub)
    (out_dir / "grid.txt").write_text(format_grid(reports))
    (out_dir / "grid.json").write_text(json.dumps(
        {k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n")
    return reports


@dataclass
class ArmResult:
    seed: int
    baseline: EvalReport
    augmented: EvalReport

    def f1(self, category: str) -> tuple[float, float]:
        return (self.baseline.per_category[category].f1,
                self.augmented.per_category[category].f1)


def compare_arms(cfg: dict, seeds, real_entries, val_entries, manifest: TransferManifest,
                 test_root, category_index, out_dir) -> list[ArmResult]:
    """Baseline (real only) vs real + generated at ``cfg['ratio_n']``, per seed."""
    out_dir = Path(out_dir)
    det, train, _ = detector_config(cfg)
    cache = SampleCache(det.num_lanes, train.input_size)
    results = []
    for seed in seeds:
        sub = out_dir / f"seed_{seed}"
        base = fit_detector(cfg, real_entries, val_entries, seed, sub / "baseline", cache)
        rep_b = evaluate_model(base.model, cfg, test_root, category_index, sub / "baseline")
        aug_entries = augmented_entries(cfg, real_entries, manifest, cfg["ratio_n"], seed,
                                        sub / "augmented" / "train.txt")
        aug = fit_detector(cfg, aug_entries, val_entries, seed, sub / "augmented", cache)
        rep_a = evaluate_model(aug.model, cfg, test_root, category_index, sub / "augmented")
        results.append(ArmResult(seed, rep_b, rep_a))
        log.info("seed %d: baseline %.3f, augmented %.3f", seed, rep_b.total.f1, rep_a.total.f1)
        (sub / "grid.txt").write_text(format_grid({"baseline": rep_b, "augmented": rep_a}))
    rows = [{"seed": r.seed, "baseline": r.baseline.to_dict(), "augmented": r.augmented.to_dict()}
            for r in results]
    (out_dir / "compare.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return results


def set_threads(n: int = 1) -> None:
    """Fix intra-op threads so repeated runs reduce in the same order."""
    torch.set_num_threads(n)
