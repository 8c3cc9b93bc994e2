"""Siamese author-similarity network and its single-image 4096-d encoder."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .checkpoints import load_checkpoint, save_checkpoint
from .core import CANVAS, EMBEDDING_DIM, Embedding, PairExample, SignatureImage
from .errors import DataError, DegenerateEmbedding, InvalidInput, StartupError

log = logging.getLogger(__name__)

VGG16_CACHE_NAME = "vgg16-397923af.pth"
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class CompactEncoder(nn.Module):
    """Eight 3x3 conv layers, then a linear 4096-d embedding head (no activation)."""

    def __init__(self, channels=(16, 16, 32, 32, 64, 64, 128, 128), pooled=4):
        super().__init__()
        layers = [nn.Conv2d(1, channels[0], 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        prev = channels[0]
        for i, ch in enumerate(channels[1:]):
            layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(inplace=True)]
            if i % 2 == 0:
                layers.append(nn.MaxPool2d(2))
            prev = ch
        layers += [nn.AdaptiveAvgPool2d(pooled), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        # batch centring stops every image sharing one dominant direction at init
        self.norm = nn.BatchNorm1d(prev * pooled * pooled)
        self.head = nn.Linear(prev * pooled * pooled, EMBEDDING_DIM)
        # normalised features are small; a random bias would otherwise dominate every vector
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.norm(self.features(1.0 - x)))


class VGG16Encoder(nn.Module):
    """VGG16 truncated after its second fully-connected layer (fc7, pre-activation)."""

    def __init__(self):
        super().__init__()
        from torchvision.models import vgg16

        base = vgg16(weights=None)
        self.features = base.features
        self.avgpool = base.avgpool
        self.fc = base.classifier[:4]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def load_imagenet(self, path) -> None:
        state = torch.load(path, map_location="cpu", weights_only=True)
        own = {k: v for k, v in state.items() if k.startswith("features.")}
        own.update({k.replace("classifier.", "fc."): v for k, v in state.items()
                    if k.startswith(("classifier.0.", "classifier.3."))})
        self.load_state_dict({**self.state_dict(), **own})

    def forward(self, x):
        x = (x.expand(-1, 3, -1, -1) - self.mean) / self.std
        return self.fc(torch.flatten(self.avgpool(self.features(x)), 1))


def find_vgg16_weights() -> Optional[Path]:
    path = Path(torch.hub.get_dir()) / "checkpoints" / VGG16_CACHE_NAME
    return path if path.is_file() else None


def build_encoder_net(arch: dict) -> nn.Module:
    if arch["name"] == "compact":
        return CompactEncoder(tuple(arch.get("channels", (16, 16, 32, 32, 64, 64, 128, 128))))
    if arch["name"] == "vgg16":
        return VGG16Encoder()
    raise StartupError(f"unknown encoder architecture {arch['name']!r}")


class EncoderModel:
    kind = "encoder"

    def __init__(self, arch: Optional[dict] = None, net: Optional[nn.Module] = None, pretrained: bool = False):
        self.arch = dict(arch or {"name": "compact"})
        self.net = net or build_encoder_net(self.arch)
        self.pretrained = pretrained
        self.net.eval()

    @classmethod
    def create(cls, name: str = "compact", weights=None) -> "EncoderModel":
        """``name`` is compact, vgg16 or auto (vgg16 when ImageNet weights are cached)."""
        if name == "auto":
            weights = weights or find_vgg16_weights()
            name = "vgg16" if weights else "compact"
        model = cls({"name": name})
        if name == "vgg16":
            weights = weights or find_vgg16_weights()
            if not weights:
                raise StartupError("vgg16 encoder requested but no ImageNet weights found")
            model.net.load_imagenet(weights)
            model.pretrained = True
        return model

    @torch.no_grad()
    def embed_arrays(self, images: Sequence, batch_size: int = 16) -> np.ndarray:
        self.net.eval()
        out = [self.net(_batch(images[i:i + batch_size])).double().numpy()
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, EMBEDDING_DIM))

    def save(self, path, meta=None):
        meta = {"pretrained": self.pretrained, **(meta or {})}
        return save_checkpoint(path, self.kind, self.arch, {"net": self.net.state_dict()}, meta)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        payload = load_checkpoint(path, cls.kind)
        model = cls(payload["arch"], pretrained=bool(payload["meta"].get("pretrained", False)))
        model.net.load_state_dict(payload["state"]["net"])
        model.net.eval()
        return model


class SiameseNet(nn.Module):
    """Twin branches sharing one encoder, joined by a parameter-free cosine head."""

    def __init__(self, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder

    def forward(self, x1, x2):
        e1, e2 = self.encoder(x1), self.encoder(x2)
        return _prob_from_cos(nn.functional.cosine_similarity(e1, e2, dim=1, eps=1e-12)), e1, e2


def _prob_from_cos(cos):
    return (1.0 + cos) / 2.0


def _batch(images) -> torch.Tensor:
    arrs = []
    for img in images:
        px = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
        if px.shape != (CANVAS, CANVAS):
            raise InvalidInput(f"expected a {CANVAS}x{CANVAS} image, got {px.shape}")
        arrs.append(px)
    return torch.from_numpy(np.stack(arrs)[:, None])


def embed_batch(enc: EncoderModel, images: Sequence[SignatureImage]) -> List[Embedding]:
    vecs = enc.embed_arrays(list(images))
    return [Embedding(v, provenance=img) for v, img in zip(vecs, images)]


def embed(enc: EncoderModel, img: SignatureImage) -> Embedding:
    return embed_batch(enc, [img])[0]


def _vec(e) -> np.ndarray:
    v = np.asarray(getattr(e, "vector", e), dtype=np.float64).reshape(-1)
    if not np.any(v):
        raise DegenerateEmbedding("cosine undefined for a zero vector")
    return v


def cosine_similarity(e1, e2) -> float:
    a, b = _vec(e1), _vec(e2)
    return float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def match_probability(e1, e2) -> float:
    """(1 + cos) / 2: 1 for parallel, 0.5 for orthogonal, 0 for opposite vectors."""
    return (1.0 + cosine_similarity(e1, e2)) / 2.0


@dataclass
class PairDataset:
    train: List[PairExample]
    val: List[PairExample]
    train_authors: frozenset = field(default_factory=frozenset)
    val_authors: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.train_authors & self.val_authors:
            raise DataError("TRAIN and VAL authors overlap")


def _pairs_for(items: List[Tuple[SignatureImage, str]], ratio_neg: float, rng) -> List[PairExample]:
    pos = [(i, j) for i, j in itertools.combinations(range(len(items)), 2) if items[i][1] == items[j][1]]
    neg = [(i, j) for i, j in itertools.combinations(range(len(items)), 2) if items[i][1] != items[j][1]]
    n_neg = min(len(neg), int(round(ratio_neg * len(pos))))
    chosen = sorted(rng.choice(len(neg), size=n_neg, replace=False).tolist()) if n_neg else []
    pairs = [PairExample(items[i][0], items[j][0], 1) for i, j in pos]
    pairs += [PairExample(items[neg[k][0]][0], items[neg[k][1]][0], 0) for k in chosen]
    return pairs


def build_pairs(labeled: Sequence[Tuple[SignatureImage, str]], ratio_neg: float = 1.0, rng_seed: int = 0,
                val_fraction: float = 0.2) -> PairDataset:
    """All same-author pairs plus ``ratio_neg`` sampled cross-author pairs per positive.

    Authors (not images) are split TRAIN/VAL, so no author appears in both.
    """
    by_author: Dict[str, list] = {}
    for img, author in labeled:
        by_author.setdefault(str(author), []).append(img)
    if len(by_author) < 2:
        raise DataError("need at least two authors to form negative pairs")
    thin = sorted(a for a, imgs in by_author.items() if len(imgs) < 2)
    if thin:
        raise DataError(f"authors with fewer than two signatures: {thin}")
    if ratio_neg < 0:
        raise DataError("ratio_neg must be >= 0")
    rng = np.random.default_rng(rng_seed)
    authors = sorted(by_author)
    order = [authors[i] for i in rng.permutation(len(authors))]
    n_val = int(np.floor(val_fraction * len(authors) + 1e-9))
    val_a, train_a = sorted(order[:n_val]), sorted(order[n_val:])

    def items(names):
        return [(img, a) for a in names for img in by_author[a]]

    return PairDataset(_pairs_for(items(train_a), ratio_neg, rng), _pairs_for(items(val_a), ratio_neg, rng),
                       frozenset(train_a), frozenset(val_a))


def _pair_tensors(pairs: Sequence[PairExample]):
    """Unique images of ``pairs`` plus index arrays into them."""
    index: Dict[int, int] = {}
    images = []
    left, right = [], []
    for p in pairs:
        for img, side in ((p.first, left), (p.second, right)):
            key = id(img)
            if key not in index:
                index[key] = len(images)
                images.append(img)
            side.append(index[key])
    return _batch(images), torch.tensor(left), torch.tensor(right), torch.tensor([float(p.label) for p in pairs])


def pair_accuracy(enc: EncoderModel, pairs: Sequence[PairExample], threshold: float = 0.5) -> float:
    if not pairs:
        return float("nan")
    x, li, ri, y = _pair_tensors(pairs)
    with torch.no_grad():
        enc.net.eval()
        e = enc.net(x)
        p = _prob_from_cos(nn.functional.cosine_similarity(e[li], e[ri], dim=1, eps=1e-12))
    return float(((p > threshold) == (y > 0.5)).float().mean())


def pair_bce(enc: EncoderModel, pairs: Sequence[PairExample]) -> float:
    x, li, ri, y = _pair_tensors(pairs)
    with torch.no_grad():
        enc.net.eval()
        e = enc.net(x)
        p = _prob_from_cos(nn.functional.cosine_similarity(e[li], e[ri], dim=1, eps=1e-12))
        return float(nn.functional.binary_cross_entropy(p.clamp(1e-7, 1 - 1e-7), y))


def train_siamese(data: PairDataset, epochs: int, rng_seed: int = 0, *, lr: float = 1e-4,
                  batch_pairs: int = 32, arch: Optional[dict] = None,
                  encoder: Optional[EncoderModel] = None, log_every: int = 0
                  ) -> Tuple[EncoderModel, List[dict]]:
    """Train the twin network with BCE on (1 + cos) / 2 and return its encoder.

    Each minibatch runs every distinct image once through the shared
    encoder; both branches then read from that one forward pass.
    """
    if not data.train:
        raise DataError("empty TRAIN pair set")
    if len({p.label for p in data.train}) < 2:
        raise DataError("TRAIN pairs must include both labels")
    torch.manual_seed(rng_seed)
    rng = np.random.default_rng(rng_seed)
    enc = encoder or EncoderModel(arch)
    net = enc.net
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(data.train))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_pairs):
            chunk = [data.train[i] for i in order[start:start + batch_pairs]]
            x, li, ri, y = _pair_tensors(chunk)
            opt.zero_grad()
            e = net(x)
            p = _prob_from_cos(nn.functional.cosine_similarity(e[li], e[ri], dim=1, eps=1e-12))
            loss = nn.functional.binary_cross_entropy(p.clamp(1e-7, 1 - 1e-7), y, reduction="sum")
            loss.backward()
            opt.step()
            total += loss.item()
            correct += int(((p.detach() > 0.5) == (y > 0.5)).sum())
        row = {"epoch": epoch, "loss": total / len(data.train), "accuracy": correct / len(data.train)}
        if data.val:
            row["val_accuracy"] = pair_accuracy(enc, data.val)
        history.append(row)
        if log_every and epoch % log_every == 0:
            log.info("siamese epoch %d %s", epoch, row)
    _recalibrate_norm(net, data.train)
    net.eval()
    return enc, history


@torch.no_grad()
def _recalibrate_norm(net: nn.Module, pairs: Sequence[PairExample], batch_size: int = 32) -> None:
    """Replace batch-norm running statistics with exact averages over the TRAIN images.

    Tiny training sets take too few steps for the exponential running
    estimate to forget its initial unit variance.
    """
    norms = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    x = _pair_tensors(pairs)[0]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    net.train()
    # near-equal chunks: the cumulative average weights batches equally, and none may hold one image
    for chunk in torch.tensor_split(x, max(1, -(-len(x) // batch_size))):
        net(chunk)
    for m in norms:
        m.momentum = 0.1
    net.eval()
