"""Domain types and canvas normalization.

Intensity convention everywhere: 0.0 is black ink, 1.0 is white paper.
:class:`BinaryImage` is the one exception, where 1 marks foreground (ink).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple

import numpy as np
from PIL import Image

from .errors import DegenerateEmbedding, InvalidInput

CANVAS = 256
EMBEDDING_DIM = 4096

BBox = Tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max), inclusive


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PageImage:
    doc_id: str
    page_index: int
    pixels: np.ndarray
    dpi: int = 200

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.size == 0:
            raise InvalidInput("page pixels must be a non-empty 2-D grid")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInput("page intensities must lie in [0, 1]")
        if self.page_index < 0:
            raise InvalidInput("page_index must be >= 0")
        if self.dpi <= 0:
            raise InvalidInput("dpi must be positive")
        object.__setattr__(self, "pixels", _frozen(px.copy()))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class BinaryImage:
    pixels: np.ndarray  # bool, True = ink
    origin: Optional[PageImage] = None

    def __post_init__(self):
        px = np.asarray(self.pixels).astype(bool)
        if px.ndim != 2:
            raise InvalidInput("binary image must be 2-D")
        if self.origin is not None and px.shape != self.origin.shape:
            raise InvalidInput("binary image must match its origin page dimensions")
        object.__setattr__(self, "pixels", _frozen(px.copy()))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


class ImageState(enum.Enum):
    RAW = "raw"
    CLEANED = "cleaned"


@dataclass(frozen=True)
class Provenance:
    doc_id: str = ""
    page_index: int = 0
    bbox: BBox = (0, 0, 0, 0)

    def signature_id(self) -> str:
        x0, y0, x1, y1 = self.bbox
        return f"{self.doc_id}#p{self.page_index}#{x0},{y0},{x1},{y1}"

    @classmethod
    def from_signature_id(cls, sig_id: str) -> "Provenance":
        try:
            doc_id, page, box = sig_id.rsplit("#", 2)
            bbox = tuple(int(v) for v in box.split(","))
            if len(bbox) != 4 or not page.startswith("p"):
                raise ValueError(sig_id)
            return cls(doc_id, int(page[1:]), bbox)
        except ValueError:
            return cls(doc_id=sig_id)


@dataclass(frozen=True, eq=False)
class SignatureImage:
    pixels: np.ndarray
    state: ImageState = ImageState.RAW
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.shape != (CANVAS, CANVAS):
            raise InvalidInput(f"signature image must be {CANVAS}x{CANVAS}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInput("signature intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px.copy()))

    @property
    def signature_id(self) -> str:
        return self.provenance.signature_id()

    def with_pixels(self, pixels, state: Optional[ImageState] = None) -> "SignatureImage":
        return SignatureImage(np.clip(pixels, 0.0, 1.0), state or self.state, self.provenance)


@dataclass(frozen=True, eq=False)
class CandidateRegion:
    bbox: BBox
    crop: SignatureImage
    density: float
    source: Optional[PageImage] = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1 or min(self.bbox) < 0:
            raise InvalidInput(f"malformed bbox {self.bbox}")
        if self.source is not None and (x1 >= self.source.width or y1 >= self.source.height):
            raise InvalidInput(f"bbox {self.bbox} outside page {self.source.shape}")
        if not 0.0 <= self.density <= 1.0:
            raise InvalidInput("density must lie in [0, 1]")

    @property
    def aspect(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0 + 1) / (y1 - y0 + 1)


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray
    provenance: Optional[SignatureImage] = None
    signature_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.shape != (EMBEDDING_DIM,):
            raise InvalidInput(f"embedding must have {EMBEDDING_DIM} components, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise InvalidInput("embedding components must be finite")
        if not np.any(v):
            raise DegenerateEmbedding("all-zero embedding")
        object.__setattr__(self, "vector", _frozen(v.copy()))
        if not self.signature_id and self.provenance is not None:
            object.__setattr__(self, "signature_id", self.provenance.signature_id)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: Mapping[str, int]
    threshold_t: float = 0.5

    def __post_init__(self):
        labels = dict(self.labels)
        if labels:
            ids = sorted(set(labels.values()))
            if ids[0] < 0 or ids != list(range(len(ids))):
                raise InvalidInput("cluster ids must form a contiguous range from 0")
        if not 0.0 <= self.threshold_t <= 2.0:
            raise InvalidInput("threshold_t must lie in [0, 2]")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_groups(cls, labels: Mapping[str, object], threshold_t: float = 0.5):
        """Relabel arbitrary group keys to 0..k-1 by order of first appearance."""
        remap: dict = {}
        out = {}
        for key, group in labels.items():
            out[key] = remap.setdefault(group, len(remap))
        return cls(out, threshold_t)

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels.values()))

    def groups(self) -> list:
        out: dict = {}
        for key, c in self.labels.items():
            out.setdefault(c, []).append(key)
        return [out[c] for c in sorted(out)]


@dataclass(frozen=True, eq=False)
class PairExample:
    first: SignatureImage
    second: SignatureImage
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInput("pair label must be 0 or 1")


def _resample(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    img = Image.fromarray(np.ascontiguousarray(arr, dtype=np.float32), mode="F")
    shrinking = width <= arr.shape[1] and height <= arr.shape[0]
    method = Image.Resampling.BOX if shrinking else Image.Resampling.BILINEAR
    return np.asarray(img.resize((width, height), method), dtype=np.float32)


def normalize_to_canvas(crop, state: ImageState = ImageState.RAW,
                        provenance: Optional[Provenance] = None) -> SignatureImage:
    """Fit ``crop`` onto a white 256x256 canvas.

    The longer side is scaled to exactly 256 px with the aspect ratio kept,
    the result is centered and the margins are padded with 1.0.
    Downscaling averages pixel areas, upscaling interpolates bilinearly.
    """
    arr = np.asarray(crop, dtype=np.float32)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInput("crop must be a non-empty 2-D grid")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInput("crop intensities must lie in [0, 1]")
    h, w = arr.shape
    if (h, w) == (CANVAS, CANVAS):
        out = arr.copy()
    else:
        scale = CANVAS / max(h, w)
        nh = min(CANVAS, max(1, int(round(h * scale))))
        nw = min(CANVAS, max(1, int(round(w * scale))))
        scaled = arr if (nh, nw) == (h, w) else _resample(arr, nw, nh)
        out = np.ones((CANVAS, CANVAS), dtype=np.float32)
        top, left = (CANVAS - nh) // 2, (CANVAS - nw) // 2
        out[top:top + nh, left:left + nw] = scaled
    return SignatureImage(np.clip(out, 0.0, 1.0), state, provenance or Provenance())
