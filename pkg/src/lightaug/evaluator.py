"""CULane-protocol lane scoring: 30 px line IoU, one-to-one matching, F1."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datasets import lines_path_for, load_category_index, parse_lines_file
from .imaging import ContractError, rasterize_lane

log = logging.getLogger(__name__)

CULANE_ORDER = ["Normal", "Crowded", "Night", "No line", "Shadow", "Arrow",
                "Dazzle light", "Curve", "Crossroad"]
FP_ONLY = ("crossroad",)


@dataclass
class EvalConfig:
    line_width: float = 30
    iou_threshold: float = 0.5
    canvas: tuple[int, int] = (590, 1640)  # (h, w)
    fp_only_categories: tuple[str, ...] = FP_ONLY

    def __post_init__(self):
        if self.line_width < 1:
            raise ContractError("line_width must be >= 1")
        if not 0 < self.iou_threshold <= 1:
            raise ContractError("iou_threshold must be in (0, 1]")


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "Counts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def row(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


@dataclass
class EvalReport:
    per_category: dict[str, Counts] = field(default_factory=dict)
    fp_only_categories: dict[str, int] = field(default_factory=dict)
    total: Counts = field(default_factory=Counts)

    def to_dict(self) -> dict:
        return {"per_category": {k: v.row() for k, v in self.per_category.items()},
                "fp_only_categories": dict(self.fp_only_categories),
                "total": self.total.row()}

    def format_table(self, title: str = "F1") -> str:
        return format_grid({title: self})


def lane_masks(lanes, cfg: EvalConfig) -> list[np.ndarray]:
    h, w = cfg.canvas
    return [rasterize_lane(p, cfg.line_width, h, w) for p in lanes]


def iou_matrix(preds, gts, cfg: EvalConfig) -> np.ndarray:
    pm = lane_masks(preds, cfg)
    gm = lane_masks(gts, cfg)
    out = np.zeros((len(pm), len(gm)))
    areas_p = [m.sum() for m in pm]
    areas_g = [m.sum() for m in gm]
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            inter = np.logical_and(a, b).sum()
            union = areas_p[i] + areas_g[j] - inter
            out[i, j] = inter / union if union else 0.0
    return out


def lane_iou(pred, gt, cfg: EvalConfig) -> float:
    return float(iou_matrix([pred], [gt], cfg)[0, 0])


def match_from_ious(ious: np.ndarray, threshold: float):
    """Maximum-cardinality matching on ``iou > threshold``, ties by total IoU."""
    n_p, n_g = ious.shape
    if n_p == 0 or n_g == 0:
        return Counts(0, n_p, n_g), []
    edge = ious > threshold
    # cardinality dominates: one extra edge outweighs any IoU sum of the rest
    big = min(n_p, n_g) + 1.0
    weight = np.where(edge, big + ious, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if edge[i, j]]
    tp = len(pairs)
    return Counts(tp, n_p - tp, n_g - tp), pairs


def match_lanes(preds, gts, cfg: EvalConfig):
    """Return ``(tp, fp, fn, assignment)`` for one image."""
    counts, pairs = match_from_ious(iou_matrix(preds, gts, cfg), cfg.iou_threshold)
    return counts.tp, counts.fp, counts.fn, pairs


def _is_fp_only(category: str, cfg: EvalConfig) -> bool:
    return category.lower() in {c.lower() for c in cfg.fp_only_categories}


def evaluate_dataset(pred_dir, gt_dir, category_index, cfg: EvalConfig) -> EvalReport:
    """Score every image listed in ``category_index``.

    ``category_index`` maps image paths (relative to ``gt_dir`` / ``pred_dir``)
    to category names, or is the path of a ``path<TAB>category`` file.
    Annotations live at ``<dir>/<image stem>.lines.txt``.  A missing prediction
    file counts as no predicted lanes.
    """
    if not isinstance(category_index, dict):
        category_index = load_category_index(category_index)
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    report = EvalReport()
    for rel, category in category_index.items():
        gt_file = lines_path_for(gt_dir / rel)
        if not gt_file.is_file():
            raise FileNotFoundError(f"ground truth missing: {gt_file}")
        gts = parse_lines_file(gt_file)
        pred_file = lines_path_for(pred_dir / rel)
        if pred_file.is_file():
            preds = parse_lines_file(pred_file)
        else:
            log.warning("no prediction for %s; counting its lanes as missed", rel)
            preds = []
        counts, _ = match_from_ious(iou_matrix(preds, gts, cfg), cfg.iou_threshold)
        if _is_fp_only(category, cfg):
            report.fp_only_categories[category] = (
                report.fp_only_categories.get(category, 0) + counts.fp)
            continue
        report.per_category.setdefault(category, Counts())
        report.per_category[category] += counts
        report.total += counts
    return report


def _ordered(categories) -> list[str]:
    known = [c for c in CULANE_ORDER if c in categories]
    return known + sorted(c for c in categories if c not in CULANE_ORDER)


def format_grid(reports: dict[str, EvalReport]) -> str:
    """Text table: one row per category, one column per report.

    F1 is shown as a one-decimal percentage; FP-only categories show the FP
    count; the last row is the pooled total.
    """
    cats: set[str] = set()
    fp_cats: set[str] = set()
    for r in reports.values():
        cats.update(r.per_category)
        fp_cats.update(r.fp_only_categories)
    names = list(reports)
    width = max([len("Category")] + [len(c) for c in cats | fp_cats] + [len("Total")]) + 2
    colw = max([8] + [len(n) + 2 for n in names])
    head = "Category".ljust(width) + "".join(n.rjust(colw) for n in names)
    lines = [head, "-" * len(head)]
    for c in _ordered(cats | fp_cats):
        cells = []
        for n in names:
            r = reports[n]
            if c in r.fp_only_categories:
                cells.append(str(r.fp_only_categories[c]))
            elif c in r.per_category:
                cells.append(f"{100 * r.per_category[c].f1:.1f}")
            else:
                cells.append("-")
        lines.append(c.ljust(width) + "".join(s.rjust(colw) for s in cells))
    lines.append("-" * len(head))
    lines.append("Total".ljust(width)
                 + "".join(f"{100 * reports[n].total.f1:.1f}".rjust(colw) for n in names))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir, cfg: EvalConfig | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "report.txt"
    table.write_text(report.format_table())
    data = report.to_dict()
    if cfg is not None:
        data["config"] = asdict(cfg)
    js = out_dir / "report.json"
    js.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return table, js
