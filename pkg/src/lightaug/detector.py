"""Segmentation lane detector with a lane-existence branch.

The backbone follows the ERFNet recipe (downsampler blocks and
factorized-convolution residual blocks) at configurable depth and width.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image as PILImage

from .imaging import ContractError, padded_size, reflect_index

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lightaug.detector/1"
EPS = 1e-7
MIN_INPUT = 32


@dataclass
class DetectorConfig:
    num_lanes: int = 4
    channels: int = 16
    encoder_stages: int = 3
    blocks_per_stage: int = 2
    exist_hidden: int = 128
    in_channels: int = 3

    @property
    def pad_multiple(self) -> int:
        return 2 ** self.encoder_stages


@dataclass
class DetectionLossWeights:
    lambda_1: float = 0.9
    lambda_2: float = 0.1
    background_weight: float = 0.4

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_2 < 0:
            raise ContractError("loss weights must be >= 0")


@dataclass
class DetectorOutput:
    prob_maps: torch.Tensor  # N x (L+1) x H x W, softmax over classes
    existence: torch.Tensor  # N x L, in [0, 1]
    seg_logits: torch.Tensor | None = None
    exist_logits: torch.Tensor | None = None

    def numpy(self, i: int = 0) -> "DecodedMaps":
        return DecodedMaps(self.prob_maps[i].detach().numpy(),
                           self.existence[i].detach().numpy())


@dataclass
class DecodedMaps:
    """Single-image detector output as numpy arrays."""
    prob_maps: np.ndarray
    existence: np.ndarray


class DownsamplerBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout - cin, 3, stride=2, padding=1)
        self.pool = nn.MaxPool2d(2, stride=2)
        self.bn = nn.BatchNorm2d(cout, eps=1e-3)

    def forward(self, x):
        return F.relu(self.bn(torch.cat([self.conv(x), self.pool(x)], 1)))


class NonBottleneck1d(nn.Module):
    """Residual block of 3x1 / 1x3 factorized convolutions."""

    def __init__(self, ch: int, dilation: int = 1):
        super().__init__()
        d = dilation
        self.c31a = nn.Conv2d(ch, ch, (3, 1), padding=(1, 0))
        self.c13a = nn.Conv2d(ch, ch, (1, 3), padding=(0, 1))
        self.bn1 = nn.BatchNorm2d(ch, eps=1e-3)
        self.c31b = nn.Conv2d(ch, ch, (3, 1), padding=(d, 0), dilation=(d, 1))
        self.c13b = nn.Conv2d(ch, ch, (1, 3), padding=(0, d), dilation=(1, d))
        self.bn2 = nn.BatchNorm2d(ch, eps=1e-3)

    def forward(self, x):
        out = F.relu(self.c31a(x))
        out = F.relu(self.bn1(self.c13a(out)))
        out = F.relu(self.c31b(out))
        out = self.bn2(self.c13b(out))
        return F.relu(out + x)


class UpsamplerBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)
        self.bn = nn.BatchNorm2d(cout, eps=1e-3)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class LaneDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        L = cfg.num_lanes
        enc: list[nn.Module] = []
        cin, c = cfg.in_channels, cfg.channels
        for stage in range(cfg.encoder_stages):
            enc.append(DownsamplerBlock(cin, c))
            last = stage == cfg.encoder_stages - 1
            for b in range(cfg.blocks_per_stage):
                # dilated context only in the deepest stage, as in ERFNet
                enc.append(NonBottleneck1d(c, 2 ** (b % 4 + 1) if last else 1))
            cin, c = c, c * 2
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = []
        c = cin
        for _ in range(cfg.encoder_stages - 1):
            dec += [UpsamplerBlock(c, c // 2), NonBottleneck1d(c // 2)]
            c //= 2
        self.decoder = nn.Sequential(*dec)
        self.classifier = nn.ConvTranspose2d(c, L + 1, 2, stride=2)
        self.exist = nn.Sequential(
            nn.Linear(cin, cfg.exist_hidden), nn.ReLU(True), nn.Linear(cfg.exist_hidden, L))

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        if x.shape[1] != self.cfg.in_channels:
            raise ContractError(f"expected {self.cfg.in_channels}-channel input, got {x.shape[1]}")
        h, w = x.shape[2:]
        m = self.cfg.pad_multiple
        if h < m or w < m:
            raise ContractError(f"input {h}x{w} is smaller than one {m}x{m} encoder cell")
        ph, pw = padded_size(h, m), padded_size(w, m)
        if (ph, pw) != (h, w):
            x = x.index_select(2, torch.from_numpy(reflect_index(h, ph)))
            x = x.index_select(3, torch.from_numpy(reflect_index(w, pw)))
        feats = self.encoder(x)
        seg = self.classifier(self.decoder(feats))
        if seg.shape[2:] != (ph, pw):
            seg = F.interpolate(seg, size=(ph, pw), mode="bilinear", align_corners=False)
        seg = seg[:, :, :h, :w]
        ex = self.exist(feats.mean(dim=(2, 3)))
        return DetectorOutput(torch.softmax(seg, 1), torch.sigmoid(ex), seg, ex)


def build_detector(cfg: DetectorConfig, seed: int = 0) -> LaneDetector:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return LaneDetector(cfg)


@torch.no_grad()
def detector_forward(model: LaneDetector, img: np.ndarray) -> DecodedMaps:
    """Eval-mode forward of one HxWx3 image in [-1, 1], at least 32x32."""
    h, w = np.shape(img)[:2]
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ContractError(f"input {h}x{w} is below the {MIN_INPUT}x{MIN_INPUT} minimum")
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(img, np.float32).transpose(2, 0, 1)))
    return model(x[None]).numpy(0)


def detection_loss(out: DetectorOutput, seg_target, exist_target,
                   w: DetectionLossWeights | None = None) -> torch.Tensor:
    """Weighted sum of segmentation NLL and existence binary cross entropy.

    The segmentation term is a class-weighted mean over pixels (background
    weighted by ``w.background_weight``); it reduces to the plain mean NLL
    when predictions are uniform.
    """
    w = w or DetectionLossWeights()
    probs = out.prob_maps
    n_cls = probs.shape[1]
    seg_target = torch.as_tensor(seg_target, dtype=torch.long)
    exist_target = torch.as_tensor(exist_target, dtype=probs.dtype)
    if seg_target.ndim == 2:
        seg_target = seg_target[None]
    if exist_target.ndim == 1:
        exist_target = exist_target[None]
    if seg_target.shape != (probs.shape[0], *probs.shape[2:]):
        raise ContractError(f"segmentation target {tuple(seg_target.shape)} does not match "
                            f"prediction {tuple(probs.shape)}")
    if exist_target.shape != out.existence.shape:
        raise ContractError("existence target shape mismatch")
    if seg_target.numel() and (seg_target.min() < 0 or seg_target.max() >= n_cls):
        raise ContractError(f"class index outside [0, {n_cls - 1}]")

    if out.seg_logits is not None:
        logp = F.log_softmax(out.seg_logits, 1)
    else:
        logp = torch.log(probs.clamp(EPS, 1.0))
    cw = torch.ones(n_cls, dtype=probs.dtype)
    cw[0] = w.background_weight
    seg = F.nll_loss(logp, seg_target, weight=cw)

    if out.exist_logits is not None:
        exist = F.binary_cross_entropy_with_logits(out.exist_logits, exist_target)
    else:
        p = out.existence.clamp(EPS, 1 - EPS)
        exist = -(exist_target * torch.log(p) + (1 - exist_target) * torch.log1p(-p)).mean()
    return w.lambda_1 * seg + w.lambda_2 * exist


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 12
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    input_size: list[int] | None = None  # [h, w]; None keeps native resolution
    max_skip_fraction: float = 0.1


@dataclass
class Sample:
    image: np.ndarray  # HxWx3 float32 in [-1, 1]
    seg: np.ndarray  # HxW int64 class indices
    exist: np.ndarray  # L float32 flags


def load_sample(entry, num_lanes: int, input_size=None) -> Sample:
    """Read one list entry's image and segmentation label."""
    img = PILImage.open(entry.image_path).convert("RGB")
    lab = PILImage.open(entry.seg_label_path)
    if input_size is not None:
        size = (int(input_size[1]), int(input_size[0]))
        img = img.resize(size, PILImage.BILINEAR)
        lab = lab.resize(size, PILImage.NEAREST)
    seg = np.asarray(lab, dtype=np.int64)
    if seg.ndim == 3:
        seg = seg[..., 0]
    if seg.shape != (img.height, img.width):
        raise ContractError(f"label {entry.seg_label_path} does not match image size")
    if seg.max(initial=0) > num_lanes:
        raise ContractError(f"label {entry.seg_label_path} has class > {num_lanes}")
    flags = entry.existence_flags
    if flags is None or len(flags) != num_lanes:
        raise ContractError(f"entry {entry.image_path} lacks {num_lanes} existence flags")
    image = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return Sample(image, seg, np.asarray(flags, dtype=np.float32))


def load_samples(entries, num_lanes: int, input_size=None,
                 max_skip_fraction: float = 0.1) -> list[Sample]:
    samples, skipped = [], 0
    for e in entries:
        try:
            samples.append(load_sample(e, num_lanes, input_size))
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", e.image_path, exc)
    if entries and skipped / len(entries) > max_skip_fraction:
        raise RuntimeError(f"{skipped} of {len(entries)} training entries unreadable")
    return samples


def collate(samples: Sequence[Sample]):
    x = torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in samples]))
    seg = torch.from_numpy(np.stack([s.seg for s in samples]))
    ex = torch.from_numpy(np.stack([s.exist for s in samples]))
    return x, seg, ex


def confusion_miou(pred: np.ndarray, target: np.ndarray, n_cls: int) -> np.ndarray:
    """Accumulate an n_cls x n_cls confusion matrix (rows = target)."""
    idx = target.reshape(-1) * n_cls + pred.reshape(-1)
    return np.bincount(idx, minlength=n_cls * n_cls).reshape(n_cls, n_cls)


def lane_miou(conf: np.ndarray) -> float:
    """Mean IoU over lane classes (1..L) that occur in target or prediction."""
    tp = np.diag(conf)[1:].astype(float)
    union = conf[1:].sum(1) + conf[:, 1:].sum(0) - np.diag(conf)[1:]
    valid = union > 0
    if not valid.any():
        return 0.0
    return float((tp[valid] / union[valid]).mean())


@torch.no_grad()
def evaluate_miou(model: LaneDetector, samples: Sequence[Sample], batch_size: int = 16) -> float:
    model.eval()
    n_cls = model.cfg.num_lanes + 1
    conf = np.zeros((n_cls, n_cls), dtype=np.int64)
    for i in range(0, len(samples), batch_size):
        x, seg, _ = collate(samples[i:i + batch_size])
        pred = model(x).prob_maps.argmax(1).numpy()
        conf += confusion_miou(pred, seg.numpy(), n_cls)
    return lane_miou(conf)


def save_detector(model: LaneDetector, path, epoch: int, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "config": asdict(model.cfg), "epoch": epoch,
                "params": model.state_dict(), "extra": extra or {}}, path)
    return path


def load_detector(path) -> tuple[LaneDetector, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"detector checkpoint not found: {path}")
    state = torch.load(path, weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    model = LaneDetector(DetectorConfig(**state["config"]))
    model.load_state_dict(state["params"])
    model.eval()
    return model, state


@dataclass
class DetectorRun:
    model: LaneDetector
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train_detector(det_cfg: DetectorConfig, train_cfg: TrainConfig, train_entries, val_entries,
                   seed: int = 0, loss_weights: DetectionLossWeights | None = None,
                   out_dir=None, train_samples=None, val_samples=None) -> DetectorRun:
    """SGD with momentum and polynomial learning-rate decay.

    Writes ``detector.pt`` and ``metrics.jsonl`` (one record per epoch) to
    ``out_dir`` when given.  Preloaded ``train_samples`` / ``val_samples``
    skip disk reads.
    """
    if not train_entries and train_samples is None:
        raise ContractError("training list is empty")
    loss_weights = loss_weights or DetectionLossWeights()
    model = build_detector(det_cfg, seed)
    if train_samples is None:
        train_samples = load_samples(train_entries, det_cfg.num_lanes, train_cfg.input_size,
                                     train_cfg.max_skip_fraction)
    if val_samples is None:
        val_samples = load_samples(val_entries or [], det_cfg.num_lanes, train_cfg.input_size,
                                   train_cfg.max_skip_fraction)
    if not train_samples:
        raise ContractError("no readable training samples")

    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.lr, momentum=train_cfg.momentum,
                          weight_decay=train_cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_samples) / train_cfg.batch_size)
    total_steps = max(1, steps_per_epoch * train_cfg.epochs)
    rng = np.random.default_rng(seed)
    run = DetectorRun(model)
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")

    step = 0
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        for epoch in range(1, train_cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(train_samples))
            losses = []
            t0 = time.time()
            for b in range(steps_per_epoch):
                batch = [train_samples[i] for i in order[b * train_cfg.batch_size:
                                                         (b + 1) * train_cfg.batch_size]]
                if len(batch) < 2 and len(train_samples) >= 2:
                    # a lone sample cannot drive batch statistics
                    continue
                lr = train_cfg.lr * (1 - step / total_steps) ** train_cfg.poly_power
                for g in opt.param_groups:
                    g["lr"] = lr
                x, seg, ex = collate(batch)
                loss = detection_loss(model(x), seg, ex, loss_weights)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
                step += 1
            record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else None,
                      "val_miou": evaluate_miou(model, val_samples) if val_samples else None,
                      "seconds": round(time.time() - t0, 3)}
            run.history.append(record)
            log.info("detector epoch %d: %s", epoch, record)
            if metrics_path is not None:
                with metrics_path.open("a") as fh:
                    fh.write(json.dumps(record) + "\n")
    model.eval()
    if out_dir is not None:
        run.checkpoint = save_detector(model, out_dir / "detector.pt", train_cfg.epochs,
                                       {"train": asdict(train_cfg), "seed": seed})
    return run
