"""Signature candidate extraction by connected component analysis.

Stages, in pipeline order::

    binarize -> connected_components -> remove_edges -> merge_regions -> heuristic_filter
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _graph_components

from .config import PipelineConfig
from .core import BBox, BinaryImage, CandidateRegion, PageImage, Provenance, normalize_to_canvas

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class Region:
    ys: np.ndarray
    xs: np.ndarray

    def __post_init__(self):
        ys = np.asarray(self.ys, dtype=np.int64).reshape(-1)
        xs = np.asarray(self.xs, dtype=np.int64).reshape(-1)
        if ys.size == 0 or ys.shape != xs.shape:
            raise ValueError("a region needs at least one pixel")
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "xs", xs)

    @classmethod
    def from_pixels(cls, pixels) -> "Region":
        pts = sorted(set(pixels))
        return cls([p[1] for p in pts], [p[0] for p in pts])

    @property
    def pixel_set(self) -> frozenset:
        return frozenset(zip(self.xs.tolist(), self.ys.tolist()))

    @property
    def bbox(self) -> BBox:
        return (int(self.xs.min()), int(self.ys.min()), int(self.xs.max()), int(self.ys.max()))

    @property
    def area(self) -> int:
        return int(self.xs.size)

    @property
    def width(self) -> int:
        return int(self.xs.max() - self.xs.min() + 1)

    @property
    def height(self) -> int:
        return int(self.ys.max() - self.ys.min() + 1)

    @property
    def density(self) -> float:
        return self.area / (self.width * self.height)

    @property
    def aspect(self) -> float:
        return self.width / self.height


def otsu_threshold(values: np.ndarray, bins: int = 256) -> Optional[float]:
    """Intensity cut maximising between-class variance, or None for a flat image.

    Pixels with intensity ``<= threshold`` form the dark class.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    codes = np.clip(np.round(v * (bins - 1)), 0, bins - 1).astype(np.int64)
    hist = np.bincount(codes, minlength=bins).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    levels = np.arange(bins, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * levels)
    mu_total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * w0 - m0 * w0[-1]) ** 2 / (w0 * w1)
    between[(w0 == 0) | (w1 == 0)] = -1.0
    k = int(np.argmax(between))
    return (k + 0.5) / (bins - 1)


def binarize(page: PageImage, method: str = "otsu", block: int = 51) -> BinaryImage:
    """Mark ink pixels (dark side of the cut) as foreground.

    A page of constant intensity has no cut and comes back all background.
    ``adaptive`` mode compares each pixel with its local mean instead.
    """
    px = page.pixels
    if method == "adaptive":
        local = ndimage.uniform_filter(px.astype(np.float64), size=block, mode="nearest")
        fg = px < local - 0.05
        return BinaryImage(fg, page)
    t = otsu_threshold(px)
    if t is None:
        return BinaryImage(np.zeros(px.shape, dtype=bool), page)
    codes = np.clip(np.round(px.astype(np.float64) * 255), 0, 255)
    return BinaryImage(codes <= t * 255, page)


def connected_components(binary) -> List[Region]:
    """8-connected foreground regions sorted by (y_min, x_min)."""
    mask = binary.pixels if isinstance(binary, BinaryImage) else np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    cuts = np.flatnonzero(np.diff(lab)) + 1
    regions = [Region(y, x) for y, x in zip(np.split(ys, cuts), np.split(xs, cuts))]
    regions.sort(key=lambda r: (r.bbox[1], r.bbox[0]))
    return regions


def remove_edges(regions: Sequence[Region], page_dims: Tuple[int, int], margin: float = 0.01,
                 line_min_length: float = 0.30, line_min_aspect: float = 20.0) -> List[Region]:
    """Drop regions near the page border and long thin rules.

    ``page_dims`` is (height, width). A region is dropped when its bbox comes
    within ``margin`` x shorter page side of any border, or when its longer
    side spans at least ``line_min_length`` of the page width with an
    elongation of at least ``line_min_aspect``.
    """
    h, w = page_dims
    m = margin * min(h, w)
    kept = []
    for r in regions:
        x0, y0, x1, y1 = r.bbox
        if x0 <= m or y0 <= m or (w - 1 - x1) <= m or (h - 1 - y1) <= m:
            continue
        long_side, short_side = max(r.width, r.height), min(r.width, r.height)
        if long_side >= line_min_length * w and long_side / short_side >= line_min_aspect:
            continue
        kept.append(r)
    return kept


def bbox_gap(a: BBox, b: BBox) -> int:
    """Chebyshev gap between inclusive pixel boxes; 0 when they touch or overlap."""
    gx = max(0, b[0] - a[2] - 1, a[0] - b[2] - 1)
    gy = max(0, b[1] - a[3] - 1, a[1] - b[3] - 1)
    return max(gx, gy)


def merge_regions(regions: Sequence[Region], merge_dist: float, page_width: int) -> List[Region]:
    """Union regions connected through chains of bbox gaps <= merge_dist * page_width.

    A merged envelope can reach boxes none of its parts could, so linking
    repeats on the merged boxes until nothing changes.
    """
    if merge_dist <= 0:
        raise ValueError("merge_dist must be positive")
    regions = list(regions)
    while True:
        merged = _merge_once(regions, merge_dist * page_width)
        if len(merged) == len(regions):
            return merged
        regions = merged


def _merge_once(regions: List[Region], limit: float) -> List[Region]:
    if len(regions) <= 1:
        return regions
    boxes = np.array([r.bbox for r in regions], dtype=np.int64)
    rows, cols = [], []
    chunk = max(1, 4_000_000 // len(boxes))
    for start in range(0, len(boxes), chunk):
        a = boxes[start:start + chunk, None, :]
        gx = np.maximum(0, np.maximum(boxes[None, :, 0] - a[..., 2] - 1, a[..., 0] - boxes[None, :, 2] - 1))
        gy = np.maximum(0, np.maximum(boxes[None, :, 1] - a[..., 3] - 1, a[..., 1] - boxes[None, :, 3] - 1))
        i, j = np.nonzero(np.maximum(gx, gy) <= limit)
        rows.append(i + start)
        cols.append(j)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    graph = coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(len(boxes),) * 2)
    _, comp = _graph_components(graph, directed=False)
    merged = []
    for c in np.unique(comp):
        members = [regions[i] for i in np.flatnonzero(comp == c)]
        ys = np.concatenate([m.ys for m in members])
        xs = np.concatenate([m.xs for m in members])
        order = np.lexsort((xs, ys))
        merged.append(Region(ys[order], xs[order]))
    merged.sort(key=lambda r: (r.bbox[1], r.bbox[0], r.bbox[3], r.bbox[2]))
    return merged


def passes_heuristics(region: Region, page_dims: Tuple[int, int], cfg: PipelineConfig) -> bool:
    h, w = page_dims
    area_frac = region.width * region.height / float(h * w)
    return (cfg.density_min <= region.density <= cfg.density_max
            and cfg.aspect_min <= region.aspect <= cfg.aspect_max
            and cfg.area_min <= area_frac <= cfg.area_max)


def heuristic_filter(regions: Sequence[Region], cfg: PipelineConfig, page: PageImage
                     ) -> List[CandidateRegion]:
    """Keep signature-like regions and crop them from the grayscale page."""
    out = []
    for r in regions:
        if not passes_heuristics(r, page.shape, cfg):
            continue
        x0, y0, x1, y1 = r.bbox
        crop = page.pixels[y0:y1 + 1, x0:x1 + 1]
        sig = normalize_to_canvas(crop, provenance=Provenance(page.doc_id, page.page_index, r.bbox))
        out.append(CandidateRegion(r.bbox, sig, r.density, page))
    return out


def extract_candidates(page: PageImage, cfg: Optional[PipelineConfig] = None) -> List[CandidateRegion]:
    """Run the full extraction chain on one page."""
    cfg = cfg or PipelineConfig()
    binary = binarize(page, cfg.binarization, cfg.adaptive_block)
    regions = connected_components(binary)
    regions = remove_edges(regions, page.shape, cfg.edge_margin, cfg.line_min_length, cfg.line_min_aspect)
    regions = merge_regions(regions, cfg.merge_dist, page.width)
    return heuristic_filter(regions, cfg, page)

