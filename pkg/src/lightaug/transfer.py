"""Light-condition style transfer: train the translator, convert well-lit
images to low light, and assemble augmented detector training lists.

Generated images reuse the annotation of the image they were made from.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .datasets import (DomainDataset, ListEntry, lines_path_for, read_image, write_image,
                       write_train_list)
from .imaging import ContractError
from .simcyclegan import GanBundle, GanConfig, LossWeights, gan_training_step, generator_forward

log = logging.getLogger(__name__)

LOWLIGHT_CATEGORIES = {"night", "dark", "low-light", "lowlight", "shadow"}


class ConfigurationError(ValueError):
    pass


@dataclass
class TransferConfig:
    epochs: int = 100
    batch_size: int = 1
    resize: list[int] | None = None  # [h, w]; None trains at native resolution
    lambda_cyc: float = 10.0
    seed: int = 0
    max_skip_fraction: float = 0.1
    gan: dict = field(default_factory=dict)


def _load_domain(ds: DomainDataset, resize, max_skip: float) -> list[torch.Tensor]:
    images, skipped = [], 0
    for e in ds.entries:
        try:
            if resize is not None:
                with PILImage.open(e.image_path) as im:
                    im = im.convert("RGB").resize((int(resize[1]), int(resize[0])),
                                                  PILImage.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
            else:
                arr = read_image(e.image_path)
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", e.image_path, exc)
            continue
        images.append(torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))))
    if ds.entries and skipped / len(ds.entries) > max_skip:
        raise ConfigurationError(
            f"domain {ds.domain_tag}: {skipped} of {len(ds.entries)} images unreadable")
    return images


def _stack(batch: list[torch.Tensor]) -> torch.Tensor:
    if len({tuple(t.shape) for t in batch}) > 1:
        raise ContractError("mixed resolutions need batch_size=1 or a resize")
    return torch.stack(batch)


def train_transfer(cfg: TransferConfig, domain_x: DomainDataset, domain_y: DomainDataset,
                   out_dir) -> Path:
    """Train the translator on unpaired sets; returns the checkpoint path.

    A checkpoint is written after every epoch (``gan.pt``, overwritten) and
    per-epoch mean losses are appended to ``gan_log.jsonl``.
    """
    if len(domain_x) == 0 or len(domain_y) == 0:
        raise ConfigurationError("both domains need at least one image")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "gan.pt"
    log_path = out_dir / "gan_log.jsonl"
    log_path.write_text("")

    xs = _load_domain(domain_x, cfg.resize, cfg.max_skip_fraction)
    ys = _load_domain(domain_y, cfg.resize, cfg.max_skip_fraction)
    if not xs or not ys:
        raise ConfigurationError("no readable images in one of the domains")
    bundle = GanBundle(GanConfig.from_dict(cfg.gan), cfg.seed)
    weights = LossWeights(cfg.lambda_cyc)
    rng = np.random.default_rng(cfg.seed)
    bundle.save(ckpt)

    n_steps = max(len(xs), len(ys))
    bs = cfg.batch_size
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            ox = rng.permutation(n_steps) % len(xs)
            oy = rng.permutation(n_steps) % len(ys)
            records = []
            for s in range(0, n_steps, bs):
                bx = _stack([xs[i] for i in ox[s:s + bs]])
                by = _stack([ys[i] for i in oy[s:s + bs]])
                bundle, rec = gan_training_step(bundle, bx, by, weights)
                records.append(rec)
            bundle.epoch = epoch
            summary = {"epoch": epoch, "seconds": round(time.time() - t0, 3)}
            for k in ("g_adv_xy", "g_adv_yx", "cycle", "g_total", "d_a", "d_b"):
                summary[k] = float(np.mean([getattr(r, k) for r in records]))
            if not all(np.isfinite(v) for v in summary.values()):
                raise FloatingPointError(f"non-finite GAN loss at epoch {epoch}: {summary}")
            with log_path.open("a") as fh:
                fh.write(json.dumps(summary) + "\n")
            log.info("gan epoch %d: %s", epoch, summary)
            bundle.save(ckpt)
    return ckpt


@dataclass
class TransferRecord:
    source: Path
    generated: Path | None
    label: Path | None
    skipped: str | None = None  # reason, when the source could not be converted


@dataclass
class TransferManifest:
    records: list[TransferRecord] = field(default_factory=list)
    checkpoint_id: str = ""
    timestamp: str = ""

    @property
    def converted(self) -> list[TransferRecord]:
        return [r for r in self.records if r.skipped is None]

    def write(self, path) -> Path:
        """Tab-separated ``source  generated  label`` lines; ``#`` lines are metadata."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# checkpoint\t{self.checkpoint_id}", f"# timestamp\t{self.timestamp}"]
        for r in self.records:
            if r.skipped is not None:
                lines.append(f"# skipped\t{r.source}\t{r.skipped}")
            else:
                lines.append(f"{r.source}\t{r.generated}\t{r.label if r.label else ''}")
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "TransferManifest":
        m = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line:
                continue
            cols = line.split("\t")
            if line.startswith("#"):
                key = cols[0][1:].strip()
                if key == "checkpoint":
                    m.checkpoint_id = cols[1]
                elif key == "timestamp":
                    m.timestamp = cols[1]
                elif key == "skipped":
                    m.records.append(TransferRecord(Path(cols[1]), None, None, cols[2]))
                continue
            if len(cols) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns")
            m.records.append(TransferRecord(Path(cols[0]), Path(cols[1]),
                                            Path(cols[2]) if cols[2] else None))
        return m


def file_digest(path, n: int = 16) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:n]


def transfer_batch(checkpoint, sources: DomainDataset, out_dir,
                   max_skip_fraction: float = 0.1) -> TransferManifest:
    """Convert every source with ``G_A`` at native resolution.

    Writes ``out_dir/images/<i>_<stem>.png`` plus a byte copy of the source's
    ``.lines.txt`` beside it, and ``out_dir/manifest.tsv``.  The manifest's
    label column is the source's segmentation label (or its ``.lines.txt``
    when there is none).
    """
    checkpoint = Path(checkpoint)
    bundle = GanBundle.load(checkpoint)
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = TransferManifest(checkpoint_id=file_digest(checkpoint),
                                timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    gen = bundle.G_A
    for i, e in enumerate(sources.entries):
        src = Path(e.image_path)
        try:
            img = read_image(src)
        except (OSError, ValueError) as exc:
            log.warning("cannot decode %s: %s", src, exc)
            manifest.records.append(TransferRecord(src, None, None, f"decode failed: {exc}"))
            continue
        out_path = write_image(img_dir / f"{i:05d}_{src.stem}.png", generator_forward(gen, img))
        src_lines = e.lines_path or lines_path_for(src)
        if Path(src_lines).is_file():
            shutil.copyfile(src_lines, lines_path_for(out_path))
        label = e.seg_label_path or (src_lines if Path(src_lines).is_file() else None)
        manifest.records.append(TransferRecord(src, out_path, Path(label) if label else None))
    n_skip = len(manifest.records) - len(manifest.converted)
    if manifest.records and n_skip / len(manifest.records) > max_skip_fraction:
        manifest.write(out_dir / "manifest.tsv")
        raise RuntimeError(f"{n_skip} of {len(manifest.records)} sources failed to decode")
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def flags_from_label(label_path, num_lanes: int) -> list[int]:
    """Lane slot k exists iff class k+1 occurs in the segmentation label."""
    with PILImage.open(label_path) as im:
        present = set(np.unique(np.asarray(im)).tolist())
    return [int(k + 1 in present) for k in range(num_lanes)]


def count_lowlight(entries) -> int:
    return sum(1 for e in entries if e.category and e.category.lower() in LOWLIGHT_CATEGORIES)


def build_augmented_trainset(real, manifest: TransferManifest, ratio_n: float, seed: int,
                             out_path, num_lanes: int = 4,
                             lowlight_count: int | None = None) -> Path:
    """Write a training list: every real entry plus ``round(N * lowlight)``
    generated entries sampled uniformly without replacement.

    ``lowlight_count`` defaults to the number of real entries whose category
    is a low-light one (night, shadow, ...).
    """
    if ratio_n <= 0:
        raise ConfigurationError("ratio_n must be > 0")
    available = [r for r in manifest.converted if r.label is not None]
    if not available:
        raise ConfigurationError("manifest has no converted records")
    real_entries = list(real.entries if isinstance(real, DomainDataset) else real)
    base = count_lowlight(real_entries) if lowlight_count is None else lowlight_count
    k = int(round(ratio_n * base))
    if k > len(available):
        raise ConfigurationError(
            f"ratio {ratio_n} needs {k} generated images but only {len(available)} "
            f"are available (short by {k - len(available)})")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(available), size=k, replace=False).tolist())
    generated = []
    for i in chosen:
        r = available[i]
        generated.append(ListEntry(r.generated, r.label, flags_from_label(r.label, num_lanes),
                                   "generated", lines_path_for(r.generated)))
    out_path = Path(out_path)
    return write_train_list(out_path, real_entries + generated, root=out_path.parent)
