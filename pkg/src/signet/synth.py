"""Synthetic signatures, stamps and documents for desk-scale training and tests.

A synthetic *author* is a seeded set of curve parameters; each call to
:func:`render_signature` draws one jittered instance of that author's scrawl.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .core import BBox, ImageState, SignatureImage, normalize_to_canvas

A4_INCHES = (8.27, 11.69)
WORDS = ("company", "limited", "director", "secretary", "annual", "return", "share", "capital",
         "registered", "office", "address", "statement", "date", "name", "the", "of", "and",
         "resolution", "members", "certificate", "incorporation", "form", "section", "act")


@lru_cache(maxsize=32)
def _font(size: int):
    return ImageFont.load_default(size=size)


@dataclass(frozen=True)
class AuthorStyle:
    n_strokes: int
    freqs: Tuple[Tuple[float, ...], ...]
    amps: Tuple[Tuple[float, ...], ...]
    phases: Tuple[Tuple[float, ...], ...]
    loops: Tuple[float, ...]
    slant: float
    width_scale: float
    underline: bool


def author_style(author: int) -> AuthorStyle:
    rng = np.random.default_rng(10_007 + 7919 * int(author))
    n = int(rng.integers(1, 3))
    freqs, amps, phases, loops = [], [], [], []
    for _ in range(n):
        freqs.append(tuple(rng.uniform(0.8, 5.5, size=3)))
        amps.append(tuple(rng.uniform(0.15, 0.55, size=3)))
        phases.append(tuple(rng.uniform(0, 2 * np.pi, size=3)))
        loops.append(float(rng.uniform(0.0, 0.12)))
    return AuthorStyle(n, tuple(freqs), tuple(amps), tuple(phases), tuple(loops),
                       float(rng.uniform(-0.35, 0.35)), float(rng.uniform(0.7, 1.0)),
                       bool(rng.random() < 0.5))


def _stroke_points(style: AuthorStyle, k: int, rng, jitter: float) -> np.ndarray:
    s = np.linspace(0.0, 1.0, 160)
    f = np.array(style.freqs[k]) * (1 + rng.normal(0, 0.03 * jitter, 3))
    a = np.array(style.amps[k]) * (1 + rng.normal(0, 0.08 * jitter, 3))
    p = np.array(style.phases[k]) + rng.normal(0, 0.12 * jitter, 3)
    y = sum(a[i] * np.sin(2 * np.pi * f[i] * s + p[i]) for i in range(3))
    x = s + style.loops[k] * np.sin(2 * np.pi * 2 * f[0] * s + p[0])
    x = x + style.slant * y
    start = k / style.n_strokes
    span = 1.0 / style.n_strokes
    return np.stack([start + x * span * 0.95, y], axis=1)


def render_signature(author: int, rng=None, size: Tuple[int, int] = (300, 110), jitter: float = 1.0,
                     stroke: int = 3, ink: float = 0.08) -> np.ndarray:
    """One handwritten-looking instance for ``author`` as a ``size=(w, h)`` gray array."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    style = author_style(author)
    w, h = size
    strokes = [_stroke_points(style, k, rng, jitter) for k in range(style.n_strokes)]
    if style.underline:
        s = np.linspace(0.05, 0.95, 40)
        strokes.append(np.stack([s, np.full_like(s, -0.85) + 0.05 * np.sin(6 * s)], axis=1))
    pts = np.concatenate(strokes)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    margin = stroke + 2
    sx = (w - 2 * margin) * style.width_scale / max(hi[0] - lo[0], 1e-6)
    sy = (h - 2 * margin) / max(hi[1] - lo[1], 1e-6)
    rot = rng.normal(0, 0.03 * jitter)
    c, s_ = np.cos(rot), np.sin(rot)
    img = Image.new("L", (w, h), 255)
    draw = ImageDraw.Draw(img)
    shade = int(round(255 * ink))
    for st in strokes:
        u = (st[:, 0] - lo[0]) * sx + margin
        v = (hi[1] - st[:, 1]) * sy + margin
        u, v = u - w / 2, v - h / 2
        u, v = c * u - s_ * v + w / 2, s_ * u + c * v + h / 2
        draw.line(list(zip(u.tolist(), v.tolist())), fill=shade, width=stroke, joint="curve")
    return np.asarray(img, dtype=np.float32) / 255.0


def signature_image(author: int, rng=None, **kw) -> SignatureImage:
    return normalize_to_canvas(render_signature(author, rng, **kw))


def _random_text(rng, n_words: int) -> str:
    return " ".join(str(rng.choice(WORDS)) for _ in range(n_words))


def render_stamp(rng, size: Tuple[int, int], opacity: float | None = None) -> np.ndarray:
    """A rectangular or elliptical rubber stamp with text, as a multiplicative gray layer."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    w, h = size
    layer = Image.new("L", (w, h), 255)
    draw = ImageDraw.Draw(layer)
    opacity = float(rng.uniform(0.45, 0.8)) if opacity is None else opacity
    shade = int(round(255 * (1 - opacity)))
    bw, bh = int(w * rng.uniform(0.45, 0.8)), int(h * rng.uniform(0.45, 0.85))
    x0, y0 = int(rng.integers(0, w - bw + 1)), int(rng.integers(0, h - bh + 1))
    box = (x0, y0, x0 + bw - 1, y0 + bh - 1)
    thick = int(rng.integers(3, 7))
    if rng.random() < 0.5:
        draw.rectangle(box, outline=shade, width=thick)
    else:
        draw.ellipse(box, outline=shade, width=thick)
    label = str(rng.choice(["RECEIVED", "COMPANIES HOUSE", "COPY", "FILED", "SEAL"]))
    date = f"{int(rng.integers(1, 29)):02d} {str(rng.choice(['JAN', 'MAR', 'JUN', 'SEP', 'NOV']))} {int(rng.integers(1995, 2021))}"
    size_pt = max(8, bh // 5)
    font = _font(size_pt)
    draw.text((x0 + bw // 2, y0 + bh // 2 - size_pt // 2), label, fill=shade, font=font, anchor="mm")
    draw.text((x0 + bw // 2, y0 + bh // 2 + size_pt // 2 + 2), date, fill=shade, font=font, anchor="mm")
    return np.asarray(layer, dtype=np.float32) / 255.0


def stamp_over(clean: np.ndarray, rng, opacity: float | None = None) -> np.ndarray:
    layer = render_stamp(rng, (clean.shape[1], clean.shape[0]), opacity)
    return np.clip(clean * layer, 0.0, 1.0)


def render_non_signature(rng, size: Tuple[int, int] = (300, 110)) -> np.ndarray:
    """Printed matter CCA tends to propose: text blocks, dates, dense seals, boxes."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    w, h = size
    img = Image.new("L", (w, h), 255)
    draw = ImageDraw.Draw(img)
    kind = int(rng.integers(0, 4))
    if kind == 0:
        fs = int(rng.integers(12, 18))
        y = 2
        while y < h - fs:
            draw.text((2, y), _random_text(rng, 6), fill=0, font=_font(fs))
            y += int(fs * 1.4)
    elif kind == 1:
        fs = int(rng.integers(20, 34))
        txt = f"{int(rng.integers(1, 29)):02d}/{int(rng.integers(1, 13)):02d}/{int(rng.integers(1990, 2021))}"
        draw.text((w // 2, h // 2), txt, fill=0, font=_font(fs), anchor="mm")
    elif kind == 2:
        draw.rectangle((4, 4, w - 5, h - 5), fill=int(rng.integers(0, 90)))
        draw.text((w // 2, h // 2), "SEAL", fill=255, font=_font(h // 3), anchor="mm")
    else:
        for _ in range(int(rng.integers(2, 5))):
            x0, y0 = int(rng.integers(0, w // 2)), int(rng.integers(0, h // 2))
            draw.rectangle((x0, y0, x0 + int(rng.integers(w // 4, w // 2)), y0 + int(rng.integers(h // 4, h // 2))),
                           outline=0, width=2)
        draw.text((8, h // 2), _random_text(rng, 3).upper(), fill=0, font=_font(16))
    return np.asarray(img, dtype=np.float32) / 255.0


def toy_filter_set(n: int = 10, seed: int = 0):
    """``n`` canvas images, half signatures (label 1) and half printed matter (label 0)."""
    from .filter_cnn import LabeledRegionSet

    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        if i % 2 == 0:
            items.append((signature_image(int(rng.integers(0, 50)), rng), 1))
        else:
            items.append((normalize_to_canvas(render_non_signature(rng)), 0))
    return LabeledRegionSet(items)


def toy_author_set(n_authors: int = 4, per_author: int = 4, seed: int = 0, first_author: int = 0
                   ) -> List[Tuple[SignatureImage, str]]:
    rng = np.random.default_rng(seed)
    out = []
    for a in range(first_author, first_author + n_authors):
        for _ in range(per_author):
            img = signature_image(a, rng)
            out.append((img.with_pixels(img.pixels, ImageState.CLEANED), f"author{a}"))
    return out


def toy_stamp_set(n: int = 16, seed: int = 0, n_paired: int | None = None):
    """Stamped raw crops and clean signatures totalling ``n`` images.

    Half are stamped raws (domain X), half clean signatures from other
    instances (domain Y); ``n_paired`` of the raws also carry their clean
    original as a paired target.
    """
    from .cleaner import CleanTrainingSet

    rng = np.random.default_rng(seed)
    half = n // 2
    n_paired = half // 2 if n_paired is None else n_paired
    raws, paired = [], []
    for i in range(half):
        clean = render_signature(int(rng.integers(0, 50)), rng)
        raw = stamp_over(clean, rng)
        raw_img = normalize_to_canvas(raw)
        raws.append(raw_img)
        if i < n_paired:
            paired.append((raw_img, normalize_to_canvas(clean, ImageState.CLEANED)))
    cleans = [normalize_to_canvas(render_signature(int(rng.integers(0, 50)), rng), ImageState.CLEANED)
              for _ in range(n - half)]
    return CleanTrainingSet(raws, cleans, paired)


@dataclass
class SyntheticDocument:
    pages: List[np.ndarray]
    signatures: List[Tuple[int, BBox, str]]  # (page_index, ink bbox, author id)
    dpi: int


def _text_line(draw, xy, text, size):
    draw.text(xy, text, fill=0, font=_font(size))


def render_document(authors: Sequence[int], rng=None, dpi: int = 100, stamp_prob: float = 0.0,
                    electronically_filed: bool = False) -> SyntheticDocument:
    """One A4 page: heading, paragraphs, form rules and one signature per author.

    Each signature sits well clear of printed text so the extractor's merge
    radius never joins it to other ink. The returned bboxes are tight around
    the signature ink.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    W, H = int(round(A4_INCHES[0] * dpi)), int(round(A4_INCHES[1] * dpi))
    page = Image.new("L", (W, H), 255)
    draw = ImageDraw.Draw(page)
    u = dpi / 100.0
    fs = max(8, int(round(14 * u)))
    x_left = int(0.08 * W)
    _text_line(draw, (x_left, int(0.06 * H)), "COMPANY " + _random_text(rng, 2).upper(), int(fs * 1.6))
    if electronically_filed:
        _text_line(draw, (x_left, int(0.10 * H)), "This form was electronically filed", fs)
    y = int(0.14 * H)
    for _ in range(int(rng.integers(3, 5))):
        for _ in range(int(rng.integers(2, 4))):
            _text_line(draw, (x_left, y), _random_text(rng, 9).capitalize(), fs)
            y += int(fs * 2.0)
        y += int(fs * 1.5)
    draw.line((x_left, y, W - x_left, y), fill=0, width=max(1, int(2 * u)))
    y += int(30 * u)
    sigs = []
    sig_w, sig_h = int(250 * u), int(90 * u)
    for author in authors:
        _text_line(draw, (x_left, y + sig_h // 2), "Signed:", fs)
        x0 = int(0.32 * W) + int(rng.integers(0, int(0.25 * W)))
        arr = render_signature(author, rng, size=(sig_w, sig_h), stroke=max(2, int(round(3 * u))))
        if stamp_prob and rng.random() < stamp_prob:
            arr = stamp_over(arr, rng)
        region = np.asarray(page.crop((x0, y, x0 + sig_w, y + sig_h)), dtype=np.float32) / 255.0
        merged = np.minimum(region, arr)
        page.paste(Image.fromarray(np.round(merged * 255).astype(np.uint8)), (x0, y))
        ys, xs = np.nonzero(arr < 0.5)
        sigs.append((0, (x0 + int(xs.min()), y + int(ys.min()), x0 + int(xs.max()), y + int(ys.max())),
                     f"author{author}"))
        y += sig_h + int(70 * u)
        _text_line(draw, (x_left, y - int(35 * u)), "Date " + f"{int(rng.integers(1, 29)):02d}/0{int(rng.integers(1, 9))}/2015", fs)
    return SyntheticDocument([np.asarray(page, dtype=np.float32) / 255.0], sigs, dpi)


def save_document(doc: SyntheticDocument, path) -> None:
    imgs = [Image.fromarray(np.round(p * 255).astype(np.uint8), mode="L") for p in doc.pages]
    if str(path).lower().endswith(".pdf"):
        # a gray-ramp palette image is stored losslessly; mode L would go through JPEG
        imgs = [_gray_palette(im) for im in imgs]
        kw = {"resolution": float(doc.dpi)}
    else:
        kw = {"dpi": (doc.dpi, doc.dpi)}
    imgs[0].save(path, save_all=len(imgs) > 1, append_images=imgs[1:], **kw)



def _gray_palette(im: Image.Image) -> Image.Image:
    pal = Image.frombytes("P", im.size, im.tobytes())
    pal.putpalette([v for g in range(256) for v in (g, g, g)])
    return pal


def document_candidate_set(n_docs: int = 12, seed: int = 0, cfg=None, authors_per_doc: int = 2,
                           stamp_prob: float = 0.0):
    """Extractor candidates from generated pages, labelled by IoU >= 0.5 with the true signatures.

    Authors are drawn at random from 0..49 so the filter sees varied styles.
    """
    from .evaluate import iou
    from .extract import extract_candidates
    from .filter_cnn import LabeledRegionSet
    from .core import PageImage

    rng = np.random.default_rng(seed)
    items = []
    for d in range(n_docs):
        authors = [int(a) for a in rng.choice(50, size=authors_per_doc, replace=False)]
        doc = render_document(authors, rng, stamp_prob=stamp_prob)
        page = PageImage(f"synthetic{d}", 0, doc.pages[0], doc.dpi)
        for c in extract_candidates(page, cfg):
            label = int(any(iou(c.bbox, box) >= 0.5 for _, box, _ in doc.signatures))
            items.append((c.crop, label))
    return LabeledRegionSet(items)
