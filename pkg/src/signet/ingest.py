"""Document sources, page rendering and the OCR keyword gate."""
from __future__ import annotations

import enum
import logging
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Protocol, Sequence

import numpy as np
from PIL import Image, ImageSequence, UnidentifiedImageError

from .config import DEFAULT_KEYWORDS
from .core import PageImage
from .errors import DecodeError, SourceError

log = logging.getLogger(__name__)

DEFAULT_DPI = 200


class DocFormat(enum.Enum):
    PDF = "pdf"
    TIFF = "tiff"
    PNG = "png"
    JPEG = "jpeg"


SUFFIXES = {
    ".pdf": DocFormat.PDF,
    ".tif": DocFormat.TIFF,
    ".tiff": DocFormat.TIFF,
    ".png": DocFormat.PNG,
    ".jpg": DocFormat.JPEG,
    ".jpeg": DocFormat.JPEG,
}


@dataclass(frozen=True)
class DocumentRef:
    doc_id: str
    uri: str
    format: DocFormat


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    matched_keyword: Optional[str]
    ocr_text: str


class DocumentSource(Protocol):
    def list_documents(self) -> List[DocumentRef]: ...

    def open(self, doc: DocumentRef) -> bytes: ...


class DirectorySource:
    """Documents stored as files beneath a root directory.

    ``doc_id`` is the POSIX path of the file relative to the root.
    """

    def __init__(self, root):
        self.root = Path(root)

    def list_documents(self) -> List[DocumentRef]:
        if not self.root.is_dir():
            raise SourceError(f"document source {self.root} is not a readable directory")
        refs = []
        try:
            paths = sorted(p for p in self.root.rglob("*") if p.is_file())
        except OSError as exc:
            raise SourceError(f"cannot read {self.root}: {exc}") from exc
        for path in paths:
            fmt = SUFFIXES.get(path.suffix.lower())
            rel = path.relative_to(self.root).as_posix()
            if fmt is None:
                log.info("skipping unsupported file %s", rel)
                continue
            refs.append(DocumentRef(rel, str(path), fmt))
        refs.sort(key=lambda r: r.doc_id)
        return refs

    def open(self, doc: DocumentRef) -> bytes:
        try:
            return Path(doc.uri).read_bytes()
        except OSError as exc:
            raise SourceError(f"cannot read {doc.doc_id}: {exc}") from exc


def list_documents(source_root) -> List[DocumentRef]:
    return DirectorySource(source_root).list_documents()


def _to_gray(img: Image.Image) -> np.ndarray:
    if img.mode in ("RGBA", "LA", "P"):
        img = img.convert("RGBA")
        bg = Image.new("RGBA", img.size, (255, 255, 255, 255))
        img = Image.alpha_composite(bg, img)
    if img.mode in ("1", "I;16", "I", "F"):
        arr = np.asarray(img, dtype=np.float32)
        top = {"1": 1.0, "I;16": 65535.0}.get(img.mode, max(float(arr.max()), 1.0))
        return np.clip(arr / top, 0.0, 1.0)
    return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def _rescale(img: Image.Image, dpi: int) -> Image.Image:
    native = img.info.get("dpi")
    if not native:
        return img
    factor = dpi / float(native[0])
    if abs(factor - 1.0) < 1e-3:
        return img
    size = (max(1, round(img.width * factor)), max(1, round(img.height * factor)))
    return img.resize(size, Image.Resampling.BILINEAR)


def _render_pdf(data: bytes, doc: DocumentRef, dpi: int) -> List[np.ndarray]:
    import pypdfium2 as pdfium

    try:
        pdf = pdfium.PdfDocument(data)
    except pdfium.PdfiumError as exc:
        raise DecodeError(doc.doc_id, f"unreadable PDF: {exc}") from exc
    pages = []
    try:
        for i in range(len(pdf)):
            bitmap = pdf[i].render(scale=dpi / 72.0, grayscale=True)
            pages.append(_to_gray(bitmap.to_pil()))
    except pdfium.PdfiumError as exc:
        raise DecodeError(doc.doc_id, f"cannot render PDF page: {exc}") from exc
    finally:
        pdf.close()
    return pages


def _render_raster(data: bytes, doc: DocumentRef, dpi: int) -> List[np.ndarray]:
    import io

    try:
        with Image.open(io.BytesIO(data)) as img:
            frames = [_to_gray(_rescale(f.copy(), dpi)) for f in ImageSequence.Iterator(img)]
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(doc.doc_id, f"undecodable image: {exc}") from exc
    return frames


def render_pages(doc: DocumentRef, dpi: int = DEFAULT_DPI, source: Optional[DocumentSource] = None
                 ) -> List[PageImage]:
    """Decode ``doc`` into grayscale pages at ``dpi``.

    PDFs are rasterised at ``dpi``. Raster images that declare a resolution
    are resampled to ``dpi``; those that don't are taken as already at it.
    """
    if source is not None:
        data = source.open(doc)
    else:
        try:
            data = Path(doc.uri).read_bytes()
        except OSError as exc:
            raise SourceError(f"cannot read {doc.doc_id}: {exc}") from exc
    if doc.format is DocFormat.PDF:
        arrays = _render_pdf(data, doc, dpi)
    else:
        arrays = _render_raster(data, doc, dpi)
    if not arrays:
        raise DecodeError(doc.doc_id, "document has no pages")
    return [PageImage(doc.doc_id, i, a, dpi) for i, a in enumerate(arrays)]


class OcrEngine(Protocol):
    def extract_text(self, page: PageImage) -> str: ...


class TesseractEngine:
    """Runs the ``tesseract`` command-line tool on a page."""

    def __init__(self, binary: str = "tesseract", lang: str = "eng", timeout: float = 120.0):
        self.binary = binary
        self.lang = lang
        self.timeout = timeout

    def available(self) -> bool:
        return shutil.which(self.binary) is not None

    def extract_text(self, page: PageImage) -> str:
        if not self.available():
            raise RuntimeError(f"OCR binary {self.binary!r} not found")
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "page.png"
            Image.fromarray((page.pixels * 255).round().astype(np.uint8)).save(path, dpi=(page.dpi, page.dpi))
            proc = subprocess.run(
                [self.binary, str(path), "stdout", "-l", self.lang, "--dpi", str(page.dpi)],
                capture_output=True, timeout=self.timeout, check=False,
            )
        if proc.returncode != 0:
            raise RuntimeError(proc.stderr.decode("utf-8", "replace").strip())
        return proc.stdout.decode("utf-8", "replace")


class NullEngine:
    """Reports no text for every page, so the gate accepts everything."""

    def extract_text(self, page: PageImage) -> str:
        return ""


def make_engine(name: str) -> OcrEngine:
    return TesseractEngine() if name == "tesseract" else NullEngine()


_SPACE = re.compile(r"\s+")


def _squash(text: str) -> str:
    return _SPACE.sub(" ", text.lower()).strip()


def match_keywords(text: str, keywords: Sequence[str]) -> Optional[str]:
    """First keyword (in list order) found in ``text``, ignoring case and line breaks."""
    haystack = _squash(text)
    for kw in keywords:
        if _squash(kw) and _squash(kw) in haystack:
            return kw
    return None


def ocr_gate(page: PageImage, keywords: Iterable[str] = DEFAULT_KEYWORDS,
             engine: Optional[OcrEngine] = None) -> GateDecision:
    """Reject pages whose text carries a phrase meaning "no handwritten signature".

    The gate fails open: if OCR raises, the page is accepted and the error logged.
    """
    keywords = list(keywords)
    engine = engine or TesseractEngine()
    try:
        text = engine.extract_text(page)
    except Exception as exc:  # noqa: BLE001 - any engine failure must not drop the page
        log.warning("OCR failed on %s page %d, accepting: %s", page.doc_id, page.page_index, exc)
        return GateDecision(True, None, "")
    hit = match_keywords(text, keywords)
    return GateDecision(hit is None, hit, text)
