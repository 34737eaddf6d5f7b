"""CULane-style lists and annotations, plus a synthetic light/dark road scene generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .imaging import rasterize_lane

log = logging.getLogger(__name__)

DEFAULT_LANES = 4


class AnnotationError(ValueError):
    """Malformed annotation, list or index file; message names file and line."""


@dataclass
class ListEntry:
    image_path: Path
    seg_label_path: Path | None = None
    existence_flags: list[int] | None = None
    category: str | None = None
    lines_path: Path | None = None


@dataclass
class DomainDataset:
    domain_tag: str  # "X" (suitable light) or "Y" (low light)
    entries: list[ListEntry]
    sampler_seed: int = 0

    def __len__(self):
        return len(self.entries)


# ---- annotation files ------------------------------------------------------

def parse_lines_text(text: str, source: str = "<string>") -> list[np.ndarray]:
    """Parse ``.lines.txt`` content: one lane per line of alternating ``x y`` values."""
    lanes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) % 2:
            raise AnnotationError(f"{source}:{lineno}: odd number of coordinates ({len(tokens)})")
        try:
            vals = [float(t) for t in tokens]
        except ValueError as exc:
            raise AnnotationError(f"{source}:{lineno}: {exc}") from None
        lanes.append(np.asarray(vals, dtype=np.float64).reshape(-1, 2))
    return lanes


def parse_lines_file(path) -> list[np.ndarray]:
    path = Path(path)
    return parse_lines_text(path.read_text(), str(path))


def _fmt(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return f"{v:.3f}"


def format_lines(lanes) -> str:
    out = []
    for pts in lanes:
        pts = np.asarray(pts).reshape(-1, 2)
        out.append(" ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in pts))
    return "".join(line + "\n" for line in out)


def write_lines_file(path, lanes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_lines(lanes))
    return path


def lines_path_for(image_path) -> Path:
    """CULane keeps ``foo.lines.txt`` next to ``foo.jpg``."""
    p = Path(image_path)
    return p.with_name(p.stem + ".lines.txt")


# ---- list and index files --------------------------------------------------

def load_train_list(path, num_lanes: int = DEFAULT_LANES, root=None) -> list[ListEntry]:
    """Read ``image seg_label f1 .. fL`` lines.  Relative paths resolve against
    ``root`` (default: the list file's directory)."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        cols = line.split()
        if not cols:
            continue
        if len(cols) != 2 + num_lanes:
            raise AnnotationError(
                f"{path}:{lineno}: expected {2 + num_lanes} columns "
                f"(image, label, {num_lanes} flags), got {len(cols)}")
        try:
            flags = [int(c) for c in cols[2:]]
        except ValueError:
            raise AnnotationError(f"{path}:{lineno}: existence flags must be 0/1") from None
        if any(f not in (0, 1) for f in flags):
            raise AnnotationError(f"{path}:{lineno}: existence flags must be 0/1")
        img = root / cols[0]
        entries.append(ListEntry(img, root / cols[1], flags, lines_path=lines_path_for(img)))
    return entries


def write_train_list(path, entries, root=None) -> Path:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for e in entries:
        flags = " ".join(str(int(f)) for f in e.existence_flags)
        lines.append(f"{_rel(e.image_path, root)} {_rel(e.seg_label_path, root)} {flags}\n")
    path.write_text("".join(lines))
    return path


def _rel(p, root: Path) -> str:
    p = Path(p)
    try:
        return str(p.resolve().relative_to(root.resolve()))
    except ValueError:
        return str(p.resolve())


def load_category_index(path) -> dict[str, str]:
    """``image_path<TAB>category`` per line."""
    path = Path(path)
    index = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise AnnotationError(f"{path}:{lineno}: expected 'path<TAB>category'")
        index[parts[0].strip()] = parts[1].strip()
    return index


def write_category_index(path, mapping: dict[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}\t{v}\n" for k, v in mapping.items()))
    return path


def existence_from_lanes(lanes, num_lanes: int = DEFAULT_LANES) -> list[int]:
    """A lane slot exists iff its annotation has at least two points."""
    flags = [0] * num_lanes
    for i, pts in enumerate(lanes[:num_lanes]):
        flags[i] = int(pts is not None and len(pts) >= 2)
    return flags


def seg_mask(lanes, height: int, width: int, band: float) -> np.ndarray:
    """Class-index mask: 0 background, k+1 for lane slot k."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for k, pts in enumerate(lanes):
        if pts is None or len(pts) < 2:
            continue
        mask[rasterize_lane(pts, band, height, width)] = k + 1
    return mask


# ---- synthetic scenes ------------------------------------------------------

@dataclass
class DomainLook:
    gamma: float = 1.0
    brightness: float = 1.0
    noise: float = 0.01
    tint: tuple[float, float, float] = (1.0, 1.0, 1.0)


DEFAULT_LOOKS = {
    "bright": DomainLook(),
    "dark": DomainLook(gamma=2.2, brightness=0.35, noise=0.02),
}


@dataclass
class SyntheticSceneConfig:
    canvas: tuple[int, int] = (64, 128)  # (h, w)
    lane_count: tuple[int, int] = (2, 4)
    curvature: tuple[float, float] = (-0.12, 0.12)  # bend as a fraction of width
    light_domain: str = "bright"
    looks: dict[str, DomainLook] = field(default_factory=lambda: dict(DEFAULT_LOOKS))
    seg_width: float = 6.0  # training band width in pixels
    num_lanes: int = DEFAULT_LANES
    seed: int = 0

    def look(self) -> DomainLook:
        if self.light_domain not in self.looks:
            raise ValueError(f"unknown light domain {self.light_domain!r}")
        return self.looks[self.light_domain]


@dataclass
class Scene:
    image: np.ndarray  # HxWx3 float in [0, 1]
    lanes: list[np.ndarray | None]  # per slot, ordered polyline or None


def _lane_curve(y, horizon, bottom, vp_x, xb, bend):
    t = (y - horizon) / (bottom - horizon)
    return vp_x + (xb - vp_x) * t + bend * t * (1 - t)


def render_geometry(cfg: SyntheticSceneConfig, rng: np.random.Generator):
    """Draw the light-independent scene layout: lanes, road and clutter."""
    h, w = cfg.canvas
    L = cfg.num_lanes
    horizon = h * rng.uniform(0.3, 0.4)
    bottom = h - 1.0
    vp_x = w * rng.uniform(0.42, 0.58)
    spacing = w * rng.uniform(0.3, 0.4)
    ego = rng.uniform(-0.2, 0.2) * spacing
    bend = w * rng.uniform(*cfg.curvature)
    xb = [w / 2 + ego + (k - (L - 1) / 2) * spacing for k in range(L)]

    lo, hi = cfg.lane_count
    n = int(rng.integers(lo, hi + 1))
    inner = [L // 2 - 1, L // 2]
    outer = [k for k in range(L) if k not in inner]
    rng.shuffle(outer)
    if n == 0:
        present = []
    else:
        present = sorted(inner[:n] + outer[: max(0, n - len(inner))])

    step = max(1, h // 32)
    y_top = horizon + 0.12 * (bottom - horizon)
    ys = np.arange(np.ceil(y_top), bottom + 1, step, dtype=np.float64)
    if ys[-1] != bottom:
        ys = np.append(ys, bottom)
    lanes: list[np.ndarray | None] = [None] * L
    for k in present:
        xs = _lane_curve(ys, horizon, bottom, vp_x, xb[k], bend)
        keep = (xs >= 0) & (xs <= w - 1)
        pts = np.stack([np.round(xs[keep], 3), ys[keep]], 1)
        lanes[k] = pts if len(pts) >= 2 else None
    road_edges = (xb[0] - 0.6 * spacing, xb[-1] + 0.6 * spacing)
    return dict(horizon=horizon, bottom=bottom, vp_x=vp_x, bend=bend, xb=xb,
                road_edges=road_edges, lanes=lanes, present=present, spacing=spacing)


def render_scene(cfg: SyntheticSceneConfig, index: int) -> Scene:
    """Render scene ``index``; geometry depends only on (seed, index)."""
    h, w = cfg.canvas
    geo_rng = np.random.default_rng([cfg.seed, index, 0])
    g = render_geometry(cfg, geo_rng)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    hz = g["horizon"]

    sky_top = np.array([0.55, 0.7, 0.9]) * geo_rng.uniform(0.85, 1.0)
    img = np.empty((h, w, 3))
    frac = np.clip(yy / max(hz, 1), 0, 1)[..., None]
    img[:] = sky_top * (1 - 0.3 * frac)
    ground = np.array([0.35, 0.45, 0.25]) * geo_rng.uniform(0.8, 1.1)
    below = yy >= hz
    img[below] = ground

    left = _lane_curve(yy, hz, g["bottom"], g["vp_x"], g["road_edges"][0], g["bend"])
    right = _lane_curve(yy, hz, g["bottom"], g["vp_x"], g["road_edges"][1], g["bend"])
    road = below & (xx >= left) & (xx <= right)
    asphalt = geo_rng.uniform(0.3, 0.42)
    texture = geo_rng.normal(0, 0.03, (h, w))
    img[road] = (asphalt + texture[road])[:, None]

    # roadside clutter: buildings / trees near the horizon, cars on shoulders
    for _ in range(int(geo_rng.integers(3, 8))):
        cw = w * geo_rng.uniform(0.04, 0.15)
        ch = h * geo_rng.uniform(0.05, 0.25)
        cx = geo_rng.uniform(0, w)
        cy = hz - geo_rng.uniform(-0.05, 0.6) * ch
        box = (np.abs(xx - cx) < cw / 2) & (yy > cy - ch) & (yy < cy) & ~road
        img[box] = geo_rng.uniform(0.1, 0.8, 3)
    # shadows across the road
    for _ in range(int(geo_rng.integers(0, 3))):
        y0 = geo_rng.uniform(hz, h)
        band = road & (np.abs(yy - y0) < h * geo_rng.uniform(0.02, 0.08))
        img[band] *= 0.6

    marking = np.array([0.95, 0.95, 0.95])
    for k in g["present"]:
        pts = g["lanes"][k]
        if pts is None:
            continue
        color = marking if geo_rng.random() < 0.8 else np.array([0.95, 0.85, 0.3])
        dashed = geo_rng.random() < 0.5
        period = geo_rng.uniform(0.15, 0.3)
        for a, b in zip(pts[:-1], pts[1:]):
            t = (b[1] - hz) / (g["bottom"] - hz)
            if dashed and ((t / period) % 1.0) > 0.6:
                continue
            width = max(1.0, 0.018 * w * t + 0.6)
            seg = rasterize_lane(np.stack([a, b]), width, h, w)
            img[seg] = color
    img = np.clip(img, 0, 1)

    look = cfg.look()
    app_rng = np.random.default_rng([cfg.seed, index, 1])
    img = look.brightness * img ** look.gamma * np.asarray(look.tint)
    img = img + app_rng.normal(0, look.noise, img.shape)
    return Scene(np.clip(img, 0, 1).astype(np.float32), g["lanes"])


def synth_generate(cfg: SyntheticSceneConfig, n: int, out_dir, start_index: int = 0,
                   category: str | None = None) -> DomainDataset:
    """Render ``n`` scenes with images, ``.lines.txt``, label masks and a list file.

    Layout under ``out_dir``: ``images/NNNNN.png``, ``images/NNNNN.lines.txt``,
    ``labels/NNNNN.png`` and ``list.txt`` (``image label f1 .. fL``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    h, w = cfg.canvas
    entries = []
    for i in range(start_index, start_index + n):
        scene = render_scene(cfg, i)
        img_path = out / "images" / f"{i:05d}.png"
        lab_path = out / "labels" / f"{i:05d}.png"
        PILImage.fromarray(np.rint(scene.image * 255).astype(np.uint8)).save(img_path)
        PILImage.fromarray(seg_mask(scene.lanes, h, w, cfg.seg_width)).save(lab_path)
        lanes = [p for p in scene.lanes if p is not None]
        write_lines_file(lines_path_for(img_path), lanes)
        entries.append(ListEntry(img_path, lab_path, existence_from_lanes(scene.lanes, cfg.num_lanes),
                                 category, lines_path_for(img_path)))
    write_train_list(out / "list.txt", entries, root=out)
    tag = "Y" if cfg.light_domain == "dark" else "X"
    return DomainDataset(tag, entries, cfg.seed)


def read_image(path) -> np.ndarray:
    """Decode to HxWx3 float32 in [-1, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def write_image(path, img: np.ndarray) -> Path:
    """Write an HxWx3 [-1, 1] image as lossless PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)
    return path


def dataset_from_dir(directory, domain_tag: str, num_lanes: int = DEFAULT_LANES,
                     seed: int = 0) -> DomainDataset:
    """Build a dataset from ``list.txt`` if present, else from every image file."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"domain directory not found: {directory}")
    lst = directory / "list.txt"
    if lst.is_file():
        entries = load_train_list(lst, num_lanes)
    else:
        exts = {".png", ".jpg", ".jpeg", ".bmp"}
        files = sorted(p for p in directory.rglob("*") if p.suffix.lower() in exts)
        entries = [ListEntry(p, lines_path=lines_path_for(p)) for p in files]
    return DomainDataset(domain_tag, entries, seed)
