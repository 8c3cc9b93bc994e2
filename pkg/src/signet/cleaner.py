"""Grayscale CycleGAN that strips stamps, text and form lines from signature crops.

Domain X holds raw crops, domain Y isolated signatures. ``G`` maps X to Y
(cleaning) and ``F`` maps Y back to X. Training mixes the unpaired
adversarial + cycle objective with an L1 term on manually cleaned pairs.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .checkpoints import load_checkpoint, save_checkpoint
from .core import CANVAS, ImageState, SignatureImage
from .errors import DataError, InvalidInput

log = logging.getLogger(__name__)

DEFAULT_ARCH = {"ngf": 32, "ndf": 32, "n_res": 6, "n_down": 2, "d_layers": 4, "norm": "instance",
                "output": "mask"}


@dataclass
class CleanTrainingSet:
    unpaired_X: List[SignatureImage]
    unpaired_Y: List[SignatureImage]
    paired: List[Tuple[SignatureImage, SignatureImage]] = field(default_factory=list)


def _norm(kind: str, ch: int) -> nn.Module:
    return nn.InstanceNorm2d(ch) if kind == "instance" else nn.Identity()


class ResBlock(nn.Module):
    def __init__(self, ch, norm):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """ResNet encoder-decoder, 1x256x256 in and out, values in [0, 1].

    ``output="direct"`` predicts the image outright. ``output="mask"`` predicts
    a per-pixel fraction instead: with ``role="remove"`` that fraction of the
    existing ink is erased, with ``role="add"`` that fraction of the remaining
    paper is inked. A remover therefore can never darken a pixel.
    """

    def __init__(self, ngf=32, n_res=6, n_down=2, norm="instance", output="direct", role="remove"):
        super().__init__()
        if output not in ("direct", "mask") or role not in ("remove", "add"):
            raise InvalidInput(f"unknown generator output {output!r} / role {role!r}")
        self.output = output
        self.role = role
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(1, ngf, 7), _norm(norm, ngf), nn.ReLU(inplace=True)]
        ch = ngf
        for _ in range(n_down):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(norm, ch * 2), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResBlock(ch, norm) for _ in range(n_res)]
        for _ in range(n_down):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                       _norm(norm, ch // 2), nn.ReLU(inplace=True)]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 1, 7)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # works on ink (1 - intensity) so blank paper is the zero signal
        ink = 1.0 - x
        m = torch.sigmoid(self.net(ink))
        if self.output == "direct":
            return 1.0 - m
        if self.role == "remove":
            return 1.0 - ink * (1.0 - m)
        return 1.0 - (ink + (1.0 - ink) * m)


class Discriminator(nn.Module):
    """Strided conv stack reduced to one logit per image by global pooling."""

    def __init__(self, ndf=32, n_layers=4, norm="instance"):
        super().__init__()
        layers = [nn.Conv2d(1, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = ndf
        for _ in range(n_layers - 1):
            nxt = min(ch * 2, ndf * 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), _norm(norm, nxt), nn.LeakyReLU(0.2, inplace=True)]
            ch = nxt
        layers += [nn.Conv2d(ch, 1, 3, padding=1), nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(1.0 - x).squeeze(1)


class CleanerModel:
    kind = "cleaner"

    def __init__(self, arch: Optional[dict] = None):
        self.arch = {**DEFAULT_ARCH, **(arch or {})}
        a = self.arch
        self.G = Generator(a["ngf"], a["n_res"], a["n_down"], a["norm"], a["output"], "remove")
        self.F = Generator(a["ngf"], a["n_res"], a["n_down"], a["norm"], a["output"], "add")
        self.D_X = Discriminator(a["ndf"], a["d_layers"], a["norm"])
        self.D_Y = Discriminator(a["ndf"], a["d_layers"], a["norm"])
        self.eval()

    def modules(self):
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}

    def eval(self):
        for m in self.modules().values():
            m.eval()

    @torch.no_grad()
    def discriminate_y(self, images: Sequence[SignatureImage]) -> np.ndarray:
        """Probability that each image is a genuine isolated signature."""
        self.D_Y.eval()
        return torch.sigmoid(self.D_Y(_batch(images))).numpy()

    def save(self, path, meta=None):
        return save_checkpoint(path, self.kind, self.arch,
                               {k: m.state_dict() for k, m in self.modules().items()}, meta)

    @classmethod
    def load(cls, path) -> "CleanerModel":
        payload = load_checkpoint(path, cls.kind)
        model = cls(payload["arch"])
        for k, m in model.modules().items():
            m.load_state_dict(payload["state"][k])
        model.eval()
        return model


def _batch(images) -> torch.Tensor:
    arrs = []
    for img in images:
        px = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
        if px.shape != (CANVAS, CANVAS):
            raise InvalidInput(f"expected a {CANVAS}x{CANVAS} image, got {px.shape}")
        arrs.append(px)
    return torch.from_numpy(np.stack(arrs)[:, None])


def _tensor(batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch
    if isinstance(batch, (list, tuple)) and batch and hasattr(batch[0], "pixels"):
        batch = np.stack([b.pixels for b in batch])
    return torch.as_tensor(np.asarray(batch, dtype=np.float64))


def _l1(a: torch.Tensor, b: torch.Tensor, reduction: str) -> torch.Tensor:
    if a.shape != b.shape:
        raise InvalidInput(f"reconstruction shape {tuple(a.shape)} != input shape {tuple(b.shape)}")
    per_image = (a - b).abs().flatten(1)
    per_image = per_image.sum(1) if reduction == "sum" else per_image.mean(1)
    return per_image.mean()


def cycle_loss(G: Callable, F: Callable, batch_X, batch_Y, reduction: str = "mean") -> torch.Tensor:
    """Cycle-consistency loss E_x ||F(G(x)) - x||_1 + E_y ||G(F(y)) - y||_1.

    Batches are (N, ...) arrays or tensors. The expectation is the batch
    mean; with ``reduction="mean"`` the L1 norm is averaged over pixels (the
    usual CycleGAN scaling), with ``"sum"`` it is the plain sum.
    """
    x, y = _tensor(batch_X), _tensor(batch_Y)
    if x.ndim < 1 or y.ndim < 1 or x.shape[0] == 0 or y.shape[0] == 0:
        raise InvalidInput("cycle_loss needs non-empty batches")
    if x.ndim < 2:
        x, y = x.reshape(-1, 1), y.reshape(-1, 1)
    return _l1(F(G(x)), x, reduction) + _l1(G(F(y)), y, reduction)


class _ImagePool:
    """History of generated images fed to the discriminators (optional)."""

    def __init__(self, size: int, rng: random.Random):
        self.size, self.rng, self.items = size, rng, []

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch.detach():
            if len(self.items) < self.size:
                self.items.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                j = self.rng.randrange(self.size)
                out.append(self.items[j])
                self.items[j] = img
            else:
                out.append(img)
        return torch.stack(out)


def train_cleaner(data: CleanTrainingSet, epochs: int, lambda_cyc: float = 10.0, lambda_pair: float = 5.0,
                  rng_seed: int = 0, *, arch: Optional[dict] = None, batch_size: int = 4,
                  lr: float = 2e-4, lambda_id: float = 0.0, pool_size: int = 0, log_every: int = 0
                  ) -> Tuple[CleanerModel, List[dict]]:
    """Adversarial + cycle + paired-L1 training.

    History rows hold per-epoch means of ``cycle`` (unweighted cycle loss),
    ``adversarial`` (generator side), ``discriminator``, ``paired`` and
    ``total`` (the weighted generator objective).
    """
    if not data.unpaired_X or not data.unpaired_Y:
        raise DataError("cleaner training needs non-empty unpaired X and Y sets")
    torch.manual_seed(rng_seed)
    pyrng = random.Random(rng_seed)
    model = CleanerModel(arch)
    G, F, D_X, D_Y = model.G, model.F, model.D_X, model.D_Y
    opt_g = torch.optim.Adam(list(G.parameters()) + list(F.parameters()), lr=lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(list(D_X.parameters()) + list(D_Y.parameters()), lr=lr, betas=(0.5, 0.999))
    bce = nn.BCEWithLogitsLoss()
    X, Y = _batch(data.unpaired_X), _batch(data.unpaired_Y)
    use_pairs = bool(data.paired) and lambda_pair > 0
    if use_pairs:
        P_raw = _batch([p[0] for p in data.paired])
        P_clean = _batch([p[1] for p in data.paired])
    pool_x, pool_y = _ImagePool(pool_size, pyrng), _ImagePool(pool_size, pyrng)
    steps = max(1, -(-max(len(X), len(Y)) // batch_size))
    history = []
    for epoch in range(epochs):
        for m in model.modules().values():
            m.train()
        ix = torch.tensor(_cycle_order(len(X), steps * batch_size, pyrng))
        iy = torch.tensor(_cycle_order(len(Y), steps * batch_size, pyrng))
        sums = dict(cycle=0.0, adversarial=0.0, discriminator=0.0, paired=0.0, total=0.0)
        for s in range(steps):
            x = X[ix[s * batch_size:(s + 1) * batch_size]]
            y = Y[iy[s * batch_size:(s + 1) * batch_size]]

            opt_g.zero_grad()
            fake_y, fake_x = G(x), F(y)
            cyc = _l1(F(fake_y), x, "mean") + _l1(G(fake_x), y, "mean")
            pred_fy, pred_fx = D_Y(fake_y), D_X(fake_x)
            adv = bce(pred_fy, torch.ones_like(pred_fy)) + bce(pred_fx, torch.ones_like(pred_fx))
            total = adv + lambda_cyc * cyc
            pair = torch.zeros(())
            if use_pairs:
                k = torch.tensor(pyrng.sample(range(len(P_raw)), min(batch_size, len(P_raw))))
                pair = _l1(G(P_raw[k]), P_clean[k], "mean")
                total = total + lambda_pair * pair
            if lambda_id > 0:
                total = total + lambda_id * (_l1(G(y), y, "mean") + _l1(F(x), x, "mean"))
            total.backward()
            opt_g.step()

            opt_d.zero_grad()
            d_loss = 0.0
            for D, real, fake in ((D_Y, y, pool_y(fake_y)), (D_X, x, pool_x(fake_x))):
                pr, pf = D(real), D(fake.detach())
                d_loss = d_loss + 0.5 * (bce(pr, torch.ones_like(pr)) + bce(pf, torch.zeros_like(pf)))
            d_loss.backward()
            opt_d.step()

            sums["cycle"] += cyc.item()
            sums["adversarial"] += adv.item()
            sums["discriminator"] += d_loss.item()
            sums["paired"] += pair.item()
            sums["total"] += total.item()
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("cleaner epoch %d %s", epoch, row)
    model.eval()
    return model, history


def _cycle_order(n: int, length: int, rng: random.Random) -> List[int]:
    out: List[int] = []
    while len(out) < length:
        perm = list(range(n))
        rng.shuffle(perm)
        out.extend(perm)
    return out[:length]


@torch.no_grad()
def clean_batch(model: CleanerModel, images: Sequence[SignatureImage], batch_size: int = 8
                ) -> List[SignatureImage]:
    model.G.eval()
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        res = model.G(_batch(chunk)).numpy()[:, 0]
        out.extend(img.with_pixels(r, ImageState.CLEANED) for img, r in zip(chunk, res))
    return out


def clean(model: CleanerModel, img: SignatureImage) -> SignatureImage:
    """Remove non-signature ink from one RAW crop."""
    return clean_batch(model, [img])[0]
