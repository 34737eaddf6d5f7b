"""Unpaired light-condition translator: generators, patch discriminators, losses.

Generators accept any spatial size.  Inputs are reflection-padded to a
multiple of ``2 ** downsample_stages``, the spatial size before every
downsampling stage is recorded, and each upsampled feature map is cropped or
padded back to the recorded size before the final crop to the input size.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ContractError, ScaleTrace, padded_size, reflect_index, reflect_positions

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lightaug.gan/1"
EPS = 1e-7


@dataclass
class GeneratorConfig:
    in_channels: int = 3
    base_channels: int = 64
    downsample_stages: int = 2
    residual_blocks: int = 9

    def __post_init__(self):
        if self.downsample_stages < 1 or self.residual_blocks < 1:
            raise ContractError("downsample_stages and residual_blocks must be >= 1")

    @property
    def pad_multiple(self) -> int:
        return 2 ** self.downsample_stages


@dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    base_channels: int = 64
    # 3 gives the standard 5-conv, 70x70 receptive field classifier
    n_layers: int = 3


@dataclass
class GanConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    pool_capacity: int = 50
    pool_replace_prob: float = 0.5
    loss_mode: str = "log"  # "log" (cross-entropy form) or "lsq" (least squares)

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        d = dict(d)
        g = GeneratorConfig(**d.pop("generator", {}))
        disc = DiscriminatorConfig(**d.pop("discriminator", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        cfg = cls(generator=g, discriminator=disc, **d)
        if cfg.loss_mode not in ("log", "lsq"):
            raise ContractError(f"unknown loss_mode {cfg.loss_mode!r}")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0

    def __post_init__(self):
        if self.lambda_cyc < 0:
            raise ContractError("lambda_cyc must be >= 0")


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization; also valid on 1x1 maps."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)


def reflect_pad(x: torch.Tensor, bottom: int, right: int) -> torch.Tensor:
    """Bottom/right reflection padding of an NCHW tensor by any amount."""
    if bottom:
        h = x.shape[2]
        x = x.index_select(2, torch.from_numpy(reflect_index(h, h + bottom)))
    if right:
        w = x.shape[3]
        x = x.index_select(3, torch.from_numpy(reflect_index(w, w + right)))
    return x


def match_dims(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Center-crop or reflection-pad ``x`` so its spatial size equals ``hw``."""
    for axis, target in ((2, hw[0]), (3, hw[1])):
        n = x.shape[axis]
        if n > target:
            x = x.narrow(axis, (n - target) // 2, target)
        elif n < target:
            before = (target - n) // 2
            idx = reflect_positions(np.arange(target) - before, n)
            x = x.index_select(axis, torch.from_numpy(idx))
    return x


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), InstanceNorm(), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), InstanceNorm(),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder / residual / decoder translator that preserves input size."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c, 7), InstanceNorm(), nn.ReLU(True))
        self.down = nn.ModuleList()
        for _ in range(cfg.downsample_stages):
            self.down.append(nn.Sequential(
                nn.Conv2d(c, c * 2, 3, stride=2, padding=1), InstanceNorm(), nn.ReLU(True)))
            c *= 2
        self.res = nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.residual_blocks)])
        self.up = nn.ModuleList()
        for _ in range(cfg.downsample_stages):
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                InstanceNorm(), nn.ReLU(True)))
            c //= 2
        self.head = nn.Conv2d(c, cfg.in_channels, 7)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, ScaleTrace]:
        h, w = x.shape[2:]
        m = self.cfg.pad_multiple
        trace = ScaleTrace(h, w, padded_size(h, m) - h, padded_size(w, m) - w)
        x = reflect_pad(x, trace.pad_bottom, trace.pad_right)
        x = self.stem(reflect_pad_both(x, 3))
        for stage in self.down:
            trace.per_stage_dims.append((x.shape[2], x.shape[3]))
            x = stage(x)
        return x, trace

    def decode(self, x: torch.Tensor, trace: ScaleTrace) -> torch.Tensor:
        for stage, hw in zip(self.up, reversed(trace.per_stage_dims)):
            x = match_dims(stage(x), hw)
        x = torch.tanh(self.head(reflect_pad_both(x, 3)))
        return x[:, :, : trace.original_height, : trace.original_width]

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ContractError(
                f"expected {self.cfg.in_channels} channels, got {x.shape[1]}")
        z, trace = self.encode(x)
        return self.decode(self.res(z), trace)


def reflect_pad_both(x: torch.Tensor, p: int) -> torch.Tensor:
    """Symmetric reflection pad of ``p`` on all four sides, for any map size."""
    h, w = x.shape[2:]
    if h > p and w > p:
        return F.pad(x, (p, p, p, p), mode="reflect")
    rows = reflect_positions(np.arange(-p, h + p), h)
    cols = reflect_positions(np.arange(-p, w + p), w)
    return x.index_select(2, torch.from_numpy(rows)).index_select(3, torch.from_numpy(cols))


def discriminator_layers(n_layers: int = 3) -> list[tuple[int, int, int]]:
    """(kernel, stride, padding) of each conv in the patch classifier."""
    return [(4, 2, 1)] * n_layers + [(4, 1, 1), (4, 1, 1)]


def patch_map_shape(h: int, w: int, n_layers: int = 3) -> tuple[int, int]:
    for k, s, p in discriminator_layers(n_layers):
        h = (h + 2 * p - k) // s + 1
        w = (w + 2 * p - k) // s + 1
    return h, w


class Discriminator(nn.Module):
    """Fully convolutional patch classifier emitting per-patch probabilities."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.in_channels, c, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        for n in range(1, cfg.n_layers):
            nxt = cfg.base_channels * min(2 ** n, 8)
            layers += [nn.Conv2d(c, nxt, 4, 2, 1), InstanceNorm(), nn.LeakyReLU(0.2, True)]
            c = nxt
        nxt = cfg.base_channels * min(2 ** cfg.n_layers, 8)
        layers += [nn.Conv2d(c, nxt, 4, 1, 1), InstanceNorm(), nn.LeakyReLU(0.2, True),
                   nn.Conv2d(nxt, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        ph, pw = patch_map_shape(x.shape[2], x.shape[3], self.cfg.n_layers)
        if ph < 1 or pw < 1:
            raise ContractError(
                f"{x.shape[2]}x{x.shape[3]} input is smaller than one discriminator patch")
        return torch.sigmoid(self.model(x))


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a))


def _flat(scores) -> torch.Tensor:
    if isinstance(scores, (list, tuple)):
        return torch.cat([_as_tensor(s).reshape(-1) for s in scores])
    return _as_tensor(scores).reshape(-1)


def adversarial_loss(d_real, d_fake, mode: str = "log"):
    """Discriminator and generator adversarial losses from patch scores.

    ``mode="log"``: ``loss_D = -mean log D(real) - mean log(1 - D(fake))`` and
    the non-saturating ``loss_G = -mean log D(fake)``.  ``mode="lsq"`` is the
    least-squares variant.  Scores are clamped to ``[EPS, 1 - EPS]``.
    Either argument may be ``None`` to skip the terms that need it.
    """
    loss_d = loss_g = None
    real = None if d_real is None else _flat(d_real).clamp(EPS, 1 - EPS)
    fake = None if d_fake is None else _flat(d_fake).clamp(EPS, 1 - EPS)
    if mode == "log":
        if fake is not None:
            loss_g = -torch.log(fake).mean()
            if real is not None:
                loss_d = -torch.log(real).mean() - torch.log1p(-fake).mean()
    elif mode == "lsq":
        if fake is not None:
            loss_g = ((fake - 1) ** 2).mean()
            if real is not None:
                loss_d = ((real - 1) ** 2).mean() + (fake ** 2).mean()
    else:
        raise ContractError(f"unknown adversarial loss mode {mode!r}")
    return loss_d, loss_g


def cycle_loss(x, x_rec, y, y_rec) -> torch.Tensor:
    """Mean absolute reconstruction error of both cycles."""
    x, x_rec, y, y_rec = map(_as_tensor, (x, x_rec, y, y_rec))
    if x.shape != x_rec.shape or y.shape != y_rec.shape:
        raise ContractError(
            f"reconstruction shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}, "
            f"{tuple(y.shape)} vs {tuple(y_rec.shape)}")
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


@dataclass
class LossParts:
    adv_xy: object  # L_GAN(G_A, D_B, X, Y)
    adv_yx: object  # L_GAN(G_B, D_A, Y, X)
    cyc: object


def total_loss(parts: LossParts, weights: LossWeights):
    return parts.adv_xy + parts.adv_yx + weights.lambda_cyc * parts.cyc


class ImagePool:
    """History buffer of generated images for discriminator updates."""

    def __init__(self, capacity: int = 50, replace_prob: float = 0.5, seed: int = 0):
        self.capacity = capacity
        self.replace_prob = replace_prob
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.images)

    def query(self, image: torch.Tensor) -> torch.Tensor:
        """Insert one CxHxW fake; return it or a stored one it displaced."""
        image = image.detach().clone()
        if self.capacity <= 0:
            return image
        if len(self.images) < self.capacity:
            self.images.append(image)
            return image
        if self.rng.random() < self.replace_prob:
            i = int(self.rng.integers(len(self.images)))
            old = self.images[i]
            self.images[i] = image
            return old
        return image

    def state_dict(self) -> dict:
        return {"images": [t.clone() for t in self.images],
                "rng": self.rng.bit_generator.state,
                "capacity": self.capacity, "replace_prob": self.replace_prob}

    def load_state_dict(self, state: dict) -> None:
        self.images = [t.clone() for t in state["images"]]
        self.rng.bit_generator.state = state["rng"]
        self.capacity = state["capacity"]
        self.replace_prob = state["replace_prob"]


NETS = ("G_A", "G_B", "D_A", "D_B")


class GanBundle:
    """The four networks, their optimizers and the two image pools.

    ``G_A`` maps domain X (suitable light) to Y (low light), ``G_B`` the
    reverse; ``D_A`` judges domain X and ``D_B`` judges domain Y.
    Training mutates the bundle in place: serialize access externally.
    """

    def __init__(self, cfg: GanConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.epoch = 0
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.G_A = Generator(cfg.generator)
            self.G_B = Generator(cfg.generator)
            self.D_A = Discriminator(cfg.discriminator)
            self.D_B = Discriminator(cfg.discriminator)
            for net in self.nets().values():
                init_weights(net)
        self.opt = {name: torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
                    for name, net in self.nets().items()}
        self.pool_A = ImagePool(cfg.pool_capacity, cfg.pool_replace_prob, seed + 1)
        self.pool_B = ImagePool(cfg.pool_capacity, cfg.pool_replace_prob, seed + 2)

    def nets(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in NETS}

    def set_lr(self, lr: float) -> None:
        for opt in self.opt.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.cfg.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "nets": {n: net.state_dict() for n, net in self.nets().items()},
            "opt": {n: o.state_dict() for n, o in self.opt.items()},
            "pool_A": self.pool_A.state_dict(),
            "pool_B": self.pool_B.state_dict(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "GanBundle":
        if state.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"not a {CHECKPOINT_FORMAT} checkpoint: {state.get('format')!r}")
        bundle = cls(GanConfig.from_dict(state["config"]), state["seed"])
        bundle.epoch = state["epoch"]
        for n, net in bundle.nets().items():
            net.load_state_dict(state["nets"][n])
            bundle.opt[n].load_state_dict(state["opt"][n])
        bundle.pool_A.load_state_dict(state["pool_A"])
        bundle.pool_B.load_state_dict(state["pool_B"])
        return bundle

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def load(cls, path) -> "GanBundle":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"GAN checkpoint not found: {path}")
        return cls.from_state_dict(torch.load(path, weights_only=False))

    def snapshot(self) -> "GanBundle":
        return copy.deepcopy(self)


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class LossRecord:
    g_adv_xy: float
    g_adv_yx: float
    cycle: float
    g_total: float
    d_a: float
    d_b: float


def _to_batch(batch) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch))
    if batch.ndim == 3:
        batch = batch.unsqueeze(0)
    return batch


def generator_objective(bundle: GanBundle, x, y, weights: LossWeights):
    """Generator-side total loss and the intermediate tensors."""
    mode = bundle.cfg.loss_mode
    fake_y = bundle.G_A(x)
    fake_x = bundle.G_B(y)
    rec_x = bundle.G_B(fake_y)
    rec_y = bundle.G_A(fake_x)
    _, adv_xy = adversarial_loss(None, bundle.D_B(fake_y), mode)
    _, adv_yx = adversarial_loss(None, bundle.D_A(fake_x), mode)
    cyc = cycle_loss(x, rec_x, y, rec_y)
    parts = LossParts(adv_xy, adv_yx, cyc)
    return total_loss(parts, weights), parts, fake_x, fake_y


def discriminator_objective(bundle: GanBundle, x, y, fake_x, fake_y):
    """Discriminator losses for D_A (domain X) and D_B (domain Y)."""
    mode = bundle.cfg.loss_mode
    loss_a, _ = adversarial_loss([bundle.D_A(x)], [bundle.D_A(f[None]) for f in fake_x], mode)
    loss_b, _ = adversarial_loss([bundle.D_B(y)], [bundle.D_B(f[None]) for f in fake_y], mode)
    return loss_a, loss_b


def gan_training_step(bundle: GanBundle, batch_x, batch_y, weights: LossWeights | None = None,
                      freeze_discriminators: bool = False) -> tuple[GanBundle, LossRecord]:
    """One generator update followed by one discriminator update.

    ``batch_x`` and ``batch_y`` are NCHW tensors (or CHW / numpy) in [-1, 1];
    the two domains may have different resolutions.
    """
    weights = weights or LossWeights()
    x, y = _to_batch(batch_x), _to_batch(batch_y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ContractError("empty batch")
    for net in bundle.nets().values():
        net.train()

    for d in (bundle.D_A, bundle.D_B):
        d.requires_grad_(False)
    bundle.opt["G_A"].zero_grad()
    bundle.opt["G_B"].zero_grad()
    g_total, parts, fake_x, fake_y = generator_objective(bundle, x, y, weights)
    g_total.backward()
    bundle.opt["G_A"].step()
    bundle.opt["G_B"].step()
    for d in (bundle.D_A, bundle.D_B):
        d.requires_grad_(True)

    pooled_x = [bundle.pool_A.query(f) for f in fake_x.detach()]
    pooled_y = [bundle.pool_B.query(f) for f in fake_y.detach()]
    d_a = d_b = torch.tensor(float("nan"))
    if not freeze_discriminators:
        bundle.opt["D_A"].zero_grad()
        bundle.opt["D_B"].zero_grad()
        d_a, d_b = discriminator_objective(bundle, x, y, pooled_x, pooled_y)
        (d_a + d_b).backward()
        bundle.opt["D_A"].step()
        bundle.opt["D_B"].step()

    record = LossRecord(
        g_adv_xy=parts.adv_xy.item(), g_adv_yx=parts.adv_yx.item(), cycle=parts.cyc.item(),
        g_total=g_total.item(), d_a=d_a.item(), d_b=d_b.item())
    return bundle, record


@torch.no_grad()
def generator_forward(gen: Generator, img: np.ndarray) -> np.ndarray:
    """Translate one HxWxC image in [-1, 1]; output has the same shape."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    gen.eval()
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    out = gen(x)[0].numpy().transpose(1, 2, 0)
    return np.ascontiguousarray(out)


@torch.no_grad()
def discriminator_forward(disc: Discriminator, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    disc.eval()
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    return disc(x)[0, 0].numpy()


def receptive_field(n_layers: int = 3) -> tuple[int, int, int]:
    """(size, jump, start offset) of one output score's input window."""
    size, jump, start = 1, 1, 0.0
    for k, s, p in discriminator_layers(n_layers):
        size += (k - 1) * jump
        start -= p * jump
        jump *= s
    return size, jump, int(start)
