"""Binary signature / non-signature classifier for extraction candidates."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .checkpoints import load_checkpoint, save_checkpoint
from .core import CANVAS, ImageState, SignatureImage, normalize_to_canvas
from .errors import DataError, InvalidInput

log = logging.getLogger(__name__)

DEFAULT_ARCH = {"blocks": [16, 32, 64, 64], "dense": 128}


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"


@dataclass
class LabeledRegionSet:
    items: List[Tuple[SignatureImage, int]]
    splits: List[Split] = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = [Split.TRAIN] * len(self.items)
        if len(self.splits) != len(self.items):
            raise DataError("one split tag per item required")
        for _, label in self.items:
            if label not in (0, 1):
                raise DataError(f"label must be 0 or 1, got {label}")

    def subset(self, split: Split) -> List[Tuple[SignatureImage, int]]:
        return [it for it, s in zip(self.items, self.splits) if s is split]


class FilterNet(nn.Module):
    def __init__(self, blocks=(16, 32, 64, 64), dense=128):
        super().__init__()
        layers, prev = [], 1
        for ch in blocks:
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            prev = ch
        side = CANVAS // 2 ** len(blocks)
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(prev * side * side, dense), nn.ReLU(inplace=True), nn.Linear(dense, 1)
        )
        # near-zero logits at init keep the first-epoch BCE close to ln 2
        nn.init.normal_(self.head[-1].weight, std=1e-3)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, x):
        # ink as signal: white background maps to 0
        return self.head(self.features(1.0 - x)).squeeze(1)


def _as_batch(images: Sequence[SignatureImage]) -> torch.Tensor:
    arrs = []
    for img in images:
        px = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
        if px.shape != (CANVAS, CANVAS):
            raise InvalidInput(f"expected a {CANVAS}x{CANVAS} image, got {px.shape}")
        arrs.append(px)
    return torch.from_numpy(np.stack(arrs)[:, None])


class FilterModel:
    """Trained filter network plus its architecture descriptor."""

    kind = "filter"

    def __init__(self, arch: Optional[dict] = None, net: Optional[FilterNet] = None):
        self.arch = dict(arch or DEFAULT_ARCH)
        self.net = net or FilterNet(self.arch["blocks"], self.arch["dense"])
        self.net.eval()

    @torch.no_grad()
    def scores(self, images: Sequence[SignatureImage], batch_size: int = 16) -> np.ndarray:
        self.net.eval()
        out = []
        for i in range(0, len(images), batch_size):
            out.append(torch.sigmoid(self.net(_as_batch(images[i:i + batch_size]))).numpy())
        return np.concatenate(out).astype(np.float64) if out else np.zeros(0)

    def save(self, path, meta=None):
        return save_checkpoint(path, self.kind, self.arch, {"net": self.net.state_dict()}, meta)

    @classmethod
    def load(cls, path) -> "FilterModel":
        payload = load_checkpoint(path, cls.kind)
        model = cls(payload["arch"])
        model.net.load_state_dict(payload["state"]["net"])
        model.net.eval()
        return model


def predict_signature(model: FilterModel, img: SignatureImage) -> float:
    return float(model.scores([img])[0])


def filter_candidates(model: FilterModel, candidates: Sequence, threshold: float = 0.5) -> list:
    """Candidates whose score is strictly above ``threshold``, input order kept.

    Items may be :class:`CandidateRegion` (scored on ``.crop``) or bare images.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInput("threshold must lie in [0, 1]")
    candidates = list(candidates)
    if not candidates:
        return []
    scores = model.scores([getattr(c, "crop", c) for c in candidates])
    return [c for c, s in zip(candidates, scores) if s > threshold]


def augment(img: SignatureImage, rng_seed, max_rotation: float = 10.0, min_keep: float = 0.8
            ) -> SignatureImage:
    """Random crop keeping >= ``min_keep`` of each side, refit to the canvas, then rotate.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    px = np.asarray(img.pixels, dtype=np.float32)
    h, w = px.shape
    ch = int(np.ceil(h * rng.uniform(min_keep, 1.0)))
    cw = int(np.ceil(w * rng.uniform(min_keep, 1.0)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    cropped = normalize_to_canvas(px[top:top + ch, left:left + cw]).pixels
    angle = float(rng.uniform(-max_rotation, max_rotation))
    if angle:
        rotated = Image.fromarray(np.ascontiguousarray(cropped), mode="F").rotate(
            angle, resample=Image.Resampling.BILINEAR, fillcolor=1.0)
        cropped = np.asarray(rotated, dtype=np.float32)
    return img.with_pixels(cropped)


def _accuracy(model: FilterModel, items) -> float:
    if not items:
        return float("nan")
    scores = model.scores([im for im, _ in items])
    labels = np.array([y for _, y in items])
    return float(np.mean((scores > 0.5) == (labels == 1)))


def train_filter(data: LabeledRegionSet, epochs: int, rng_seed: int = 0, *, augmentation: bool = True,
                 lr: float = 1e-3, batch_size: int = 16, arch: Optional[dict] = None,
                 log_every: int = 0) -> Tuple[FilterModel, List[dict]]:
    """Fit the filter with binary cross-entropy; augmentation touches TRAIN only.

    Returns the model and one history row per epoch with the mean training
    loss, accuracy on the (augmented) training batches, and VAL accuracy
    when a VAL split exists.
    """
    train = data.subset(Split.TRAIN)
    val = data.subset(Split.VAL)
    if not train:
        raise DataError("empty TRAIN split")
    if len({y for _, y in train}) < 2:
        raise DataError("TRAIN split must contain both classes")
    torch.manual_seed(rng_seed)
    rng = np.random.default_rng(rng_seed)
    model = FilterModel(arch)
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, epochs))
    loss_fn = nn.BCEWithLogitsLoss(reduction="sum")
    labels = torch.tensor([float(y) for _, y in train])
    history = []
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(train))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            imgs = [augment(train[i][0], rng) if augmentation else train[i][0] for i in idx]
            x, y = _as_batch(imgs), labels[idx]
            opt.zero_grad()
            logits = net(x)
            loss = loss_fn(logits, y)
            loss.backward()
            opt.step()
            total += loss.item()
            correct += int(((logits.detach() > 0) == (y > 0.5)).sum())
        sched.step()
        row = {"epoch": epoch, "loss": total / len(train), "accuracy": correct / len(train)}
        if val:
            row["val_accuracy"] = _accuracy(model, val)
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("filter epoch %d %s", epoch, row)
    net.eval()
    return model, history


def load_labeled_dir(root) -> LabeledRegionSet:
    """Images under ``root/[train|val]/{signature,other}/``.

    Without ``train``/``val`` subdirectories everything lands in TRAIN.
    Images of any size are fitted to the canvas.
    """
    root = Path(root)
    splits = [(root / s.value, s) for s in Split if (root / s.value).is_dir()] or [(root, Split.TRAIN)]
    items, tags = [], []
    for base, split in splits:
        for name, label in (("signature", 1), ("other", 0)):
            for path in sorted((base / name).glob("*")):
                if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".tif", ".tiff"):
                    continue
                items.append((read_signature(path), label))
                tags.append(split)
    if not items:
        raise DataError(f"no labelled images under {root}")
    return LabeledRegionSet(items, tags)


def read_signature(path, state: ImageState = ImageState.RAW) -> SignatureImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return normalize_to_canvas(arr, state)


def write_signature(img: SignatureImage, path) -> Path:
    path = Path(path)
    Image.fromarray(np.round(img.pixels * 255).astype(np.uint8), mode="L").save(path)
    return path
