"""End-to-end run: ingest -> gate -> extract -> filter -> clean -> embed -> cluster.

Work directory layout::

    <workdir>/
        ingest/  gate/  extract/  filter/  clean/  embed/  cluster/
            manifest.json      # input digest plus the stage's outputs
        index.sgnt             # quantized embeddings
        clusters.tsv           # signature_id <TAB> cluster_id
        telemetry.jsonl        # one event per stage item, wall-clock micros

Every stage reads its inputs back from the previous stage's files, so a
skipped stage (same input digest as last time) and a freshly run one feed
identical data downstream.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from . import cleaner as cleaner_mod
from . import extract as extract_mod
from .checkpoints import file_digest
from .cleaner import CleanerModel
from .cluster import cluster
from .config import PipelineConfig, dump_config
from .core import ImageState, PageImage, Provenance, SignatureImage
from .errors import ConfigError, DataError, SignetError, StartupError
from .filter_cnn import FilterModel, read_signature, write_signature
from .ingest import DirectorySource, make_engine, ocr_gate, render_pages
from .siamese import EncoderModel
from .store import load_index, record_size, records_from_embeddings, save_index

log = logging.getLogger(__name__)

STAGES = ("ingest", "gate", "extract", "filter", "clean", "embed", "cluster")
INDEX_NAME = "index.sgnt"
CLUSTERS_NAME = "clusters.tsv"
TELEMETRY_NAME = "telemetry.jsonl"
MANIFEST = "manifest.json"
CHUNK = 8


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def _safe(name: str) -> str:
    return hashlib.sha1(name.encode("utf-8")).hexdigest()[:16]


class Telemetry:
    def __init__(self):
        self.events: List[dict] = []

    def emit(self, stage: str, item: str, micros: int, **extra) -> None:
        self.events.append({"stage": stage, "item": item, "micros": int(micros), **extra})

    @contextmanager
    def timed(self, stage: str, item: str, **extra):
        start = time.perf_counter_ns()
        box: dict = dict(extra)
        yield box
        self.emit(stage, item, (time.perf_counter_ns() - start) // 1000, **box)

    def write(self, path: Path) -> None:
        path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events), encoding="utf-8")


@dataclass
class RunSummary:
    documents: int = 0
    pages: int = 0
    pages_rejected: int = 0
    candidates: int = 0
    signatures: int = 0
    clusters: int = 0
    failures: List[str] = field(default_factory=list)
    skipped_stages: List[str] = field(default_factory=list)
    workdir: str = ""
    telemetry: List[dict] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("telemetry")
        return d


@dataclass
class Models:
    filter: Optional[FilterModel] = None
    cleaner: Optional[CleanerModel] = None
    encoder: Optional[EncoderModel] = None
    digests: Dict[str, str] = field(default_factory=dict)


_LOADERS = {"filter": ("filter_checkpoint", FilterModel), "cleaner": ("cleaner_checkpoint", CleanerModel),
            "encoder": ("encoder_checkpoint", EncoderModel)}


def load_models(cfg: PipelineConfig, which: Sequence[str] = ("filter", "cleaner", "encoder")) -> Models:
    """Load the named stages' checkpoints; any absence is a startup failure."""
    paths = {k: getattr(cfg, _LOADERS[k][0]) for k in which}
    missing = [k for k, p in paths.items() if not p or not Path(p).is_file()]
    if missing:
        raise StartupError("missing model checkpoint(s): " + ", ".join(
            f"{k} ({paths[k] or 'not configured'})" for k in missing))
    models = Models()
    for k, p in paths.items():
        setattr(models, k, _LOADERS[k][1].load(p))
        models.digests[k] = file_digest(p)
    return models


class _Stage:
    """Manifest bookkeeping for one stage directory."""

    def __init__(self, root: Path, name: str, digest: str):
        self.dir = root / name
        self.name = name
        self.digest = digest

    def cached(self) -> Optional[dict]:
        path = self.dir / MANIFEST
        if not path.is_file():
            return None
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None
        if manifest.get("input_digest") != self.digest:
            return None
        for out in manifest.get("outputs", []):
            if "file" in out and not (self.dir / out["file"]).is_file():
                return None
        return manifest

    def reset(self) -> None:
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)

    def commit(self, outputs: list, **extra) -> dict:
        manifest = {"stage": self.name, "input_digest": self.digest, "outputs": outputs, **extra}
        tmp = self.dir / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
        tmp.replace(self.dir / MANIFEST)
        return manifest


def _manifest_digest(manifest: dict) -> str:
    return _digest(manifest["input_digest"], manifest["outputs"])


def _read_page(path: Path, meta: dict) -> PageImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return PageImage(meta["doc_id"], meta["page_index"], arr, meta["dpi"])


def _load_sig(stage_dir: Path, out: dict, state: ImageState):
    img = read_signature(stage_dir / out["file"], state)
    return SignatureImage(img.pixels, state, Provenance.from_signature_id(out["signature_id"]))


class Pipeline:
    def __init__(self, cfg: PipelineConfig, models: Optional[Models] = None, ocr_engine=None):
        self.cfg = cfg
        self.models = models
        self.engine = ocr_engine
        self.root = Path(cfg.workdir)
        self.tel = Telemetry()
        self.summary = RunSummary(workdir=str(self.root))

    # -- helpers ---------------------------------------------------------
    def _pool_map(self, fn, items):
        items = list(items)
        if self.cfg.workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(fn, items))

    def _skip(self, stage: _Stage, manifest: dict) -> dict:
        self.summary.skipped_stages.append(stage.name)
        self.tel.emit(stage.name, "*", 0, skipped=True)
        for out in manifest["outputs"]:
            if "kind" in out:
                self.tel.emit(stage.name, out.get("signature_id", out.get("file", "")), 0,
                              kind=out["kind"], bytes=out["bytes"], skipped=True)
        return manifest

    def _cfg_part(self, *names) -> dict:
        return {n: getattr(self.cfg, n) for n in names}

    # -- stages ----------------------------------------------------------
    def ingest(self) -> dict:
        if self.cfg.source is None:
            raise ConfigError("source", "no document source configured")
        source = DirectorySource(self.cfg.source)
        docs = source.list_documents()
        doc_digests = []
        for d in docs:
            doc_digests.append((d.doc_id, hashlib.sha256(source.open(d)).hexdigest()))
        stage = _Stage(self.root, "ingest", _digest("ingest", self.cfg.dpi, doc_digests))
        self.summary.documents = len(docs)
        cached = stage.cached()
        if cached:
            return self._skip(stage, cached)
        stage.reset()

        def work(doc):
            with self.tel.timed("ingest", doc.doc_id) as ev:
                try:
                    pages = render_pages(doc, self.cfg.dpi, source)
                except SignetError as exc:
                    log.warning("skipping document %s: %s", doc.doc_id, exc)
                    ev["error"] = str(exc)
                    return doc.doc_id, []
                outs = []
                for p in pages:
                    name = f"{_safe(doc.doc_id)}_p{p.page_index}.png"
                    Image.fromarray(np.round(p.pixels * 255).astype(np.uint8), mode="L").save(stage.dir / name)
                    outs.append({"doc_id": p.doc_id, "page_index": p.page_index, "dpi": p.dpi, "file": name})
                ev["pages"] = len(outs)
                return doc.doc_id, outs

        outputs, failures = [], []
        for doc_id, outs in self._pool_map(work, docs):
            if not outs:
                failures.append(doc_id)
            outputs.extend(outs)
        return stage.commit(outputs, failures=failures)

    def gate(self, ingested: dict) -> dict:
        keywords = list(self.cfg.ocr_keywords)
        stage = _Stage(self.root, "gate", _digest("gate", _manifest_digest(ingested), keywords, self.cfg.ocr_engine))
        cached = stage.cached()
        if cached:
            return self._skip(stage, cached)
        stage.reset()
        engine = self.engine or make_engine(self.cfg.ocr_engine)
        src = self.root / "ingest"

        def work(meta):
            item = f"{meta['doc_id']}#p{meta['page_index']}"
            with self.tel.timed("gate", item) as ev:
                try:
                    page = _read_page(src / meta["file"], meta)
                except (OSError, SignetError) as exc:
                    log.warning("skipping page %s: %s", item, exc)
                    ev["error"] = str(exc)
                    return None
                decision = ocr_gate(page, keywords, engine)
                ev["accepted"] = decision.accepted
                return {"doc_id": meta["doc_id"], "page_index": meta["page_index"],
                        "accepted": decision.accepted, "matched_keyword": decision.matched_keyword}

        return stage.commit([o for o in self._pool_map(work, ingested["outputs"]) if o is not None])

    def extract(self, ingested: dict, gated: dict) -> dict:
        part = self._cfg_part("binarization", "adaptive_block", "edge_margin", "line_min_length",
                              "line_min_aspect", "merge_dist", "density_min", "density_max",
                              "aspect_min", "aspect_max", "area_min", "area_max")
        stage = _Stage(self.root, "extract", _digest("extract", _manifest_digest(ingested),
                                                     _manifest_digest(gated), part))
        cached = stage.cached()
        if cached:
            return self._skip(stage, cached)
        stage.reset()
        accepted = {(g["doc_id"], g["page_index"]) for g in gated["outputs"] if g["accepted"]}
        pages = [m for m in ingested["outputs"] if (m["doc_id"], m["page_index"]) in accepted]
        src = self.root / "ingest"

        def work(meta):
            item = f"{meta['doc_id']}#p{meta['page_index']}"
            with self.tel.timed("extract", item) as ev:
                try:
                    page = _read_page(src / meta["file"], meta)
                    cands = extract_mod.extract_candidates(page, self.cfg)
                except Exception as exc:  # noqa: BLE001 - one bad page must not abort the run
                    log.warning("extraction failed on %s: %s", item, exc)
                    ev["error"] = str(exc)
                    return []
                outs = []
                for c in cands:
                    sid = c.crop.signature_id
                    name = f"{_safe(sid)}.png"
                    write_signature(c.crop, stage.dir / name)
                    outs.append({"signature_id": sid, "file": name, "bbox": list(c.bbox), "density": c.density})
                ev["candidates"] = len(outs)
                return outs

        outputs = [o for outs in self._pool_map(work, pages) for o in outs]
        return stage.commit(outputs)

    def _image_stage(self, name: str, upstream: dict, upstream_dir: str, state_in: ImageState,
                     model_key: str, params: dict, fn) -> dict:
        stage = _Stage(self.root, name, _digest(name, _manifest_digest(upstream),
                                                self.models.digests[model_key], params))
        cached = stage.cached()
        if cached:
            return self._skip(stage, cached)
        stage.reset()
        src = self.root / upstream_dir
        items = upstream["outputs"]
        chunks = [items[i:i + CHUNK] for i in range(0, len(items), CHUNK)]

        def work(chunk):
            start = time.perf_counter_ns()
            imgs = [_load_sig(src, o, state_in) for o in chunk]
            outs = fn(stage, chunk, imgs)
            per = (time.perf_counter_ns() - start) // 1000 // max(1, len(chunk))
            return outs, per

        outputs = []
        for chunk, (outs, per) in zip(chunks, self._pool_map(work, chunks)):
            for o in chunk:
                self.tel.emit(name, o["signature_id"], per)
            for o in outs:
                if "kind" in o:
                    self.tel.emit(name, o["signature_id"], 0, kind=o["kind"], bytes=o["bytes"])
            outputs.extend(outs)
        return stage.commit(outputs)

    def filter(self, extracted: dict) -> dict:
        threshold = self.cfg.cnn_threshold

        def fn(stage, chunk, imgs):
            scores = self.models.filter.scores(imgs)
            outs = []
            for o, img, s in zip(chunk, imgs, scores):
                if s > threshold:
                    write_signature(img, stage.dir / o["file"])
                    outs.append({**o, "score": float(s)})
            return outs

        return self._image_stage("filter", extracted, "extract", ImageState.RAW, "filter",
                                 {"cnn_threshold": threshold}, fn)

    def clean(self, filtered: dict) -> dict:
        def fn(stage, chunk, imgs):
            cleaned = cleaner_mod.clean_batch(self.models.cleaner, imgs)
            outs = []
            for o, img in zip(chunk, cleaned):
                path = write_signature(img, stage.dir / o["file"])
                outs.append({"signature_id": o["signature_id"], "file": o["file"],
                             "kind": "signature_image", "bytes": path.stat().st_size})
            return outs

        return self._image_stage("clean", filtered, "filter", ImageState.RAW, "cleaner", {}, fn)

    def embed(self, cleaned: dict) -> dict:
        stage = _Stage(self.root, "embed", _digest("embed", _manifest_digest(cleaned),
                                                   self.models.digests["encoder"], self.cfg.compress_index))
        cached = stage.cached()
        if cached and (self.root / INDEX_NAME).is_file():
            return self._skip(stage, cached)
        stage.reset()
        src = self.root / "clean"
        items = cleaned["outputs"]
        chunks = [items[i:i + CHUNK] for i in range(0, len(items), CHUNK)]

        def work(chunk):
            start = time.perf_counter_ns()
            imgs = [_load_sig(src, o, ImageState.CLEANED) for o in chunk]
            vecs = self.models.encoder.embed_arrays(imgs)
            return vecs, (time.perf_counter_ns() - start) // 1000 // max(1, len(chunk))

        records, outputs = [], []
        for chunk, (vecs, per) in zip(chunks, self._pool_map(work, chunks)):
            ids = [o["signature_id"] for o in chunk]
            recs = records_from_embeddings(list(vecs), ids)
            records.extend(recs)
            for sid in ids:
                size = record_size(sid)
                self.tel.emit("embed", sid, per)
                self.tel.emit("embed", sid, 0, kind="embedding_record", bytes=size)
                outputs.append({"signature_id": sid, "kind": "embedding_record", "bytes": size})
        save_index(records, stage.dir / INDEX_NAME, compress=self.cfg.compress_index)
        shutil.copyfile(stage.dir / INDEX_NAME, self.root / INDEX_NAME)
        return stage.commit(outputs, index=INDEX_NAME)

    def cluster(self, embedded: dict) -> dict:
        t = self.cfg.threshold_t
        stage = _Stage(self.root, "cluster", _digest("cluster", _manifest_digest(embedded), t))
        cached = stage.cached()
        out_path = self.root / CLUSTERS_NAME
        if cached and out_path.is_file():
            self.summary.clusters = cached.get("clusters", 0)
            return self._skip(stage, cached)
        stage.reset()
        records = load_index(self.root / "embed" / INDEX_NAME)
        start = time.perf_counter_ns()
        if records:
            assignment, _ = cluster([r.dequantize() for r in records], t, [r.signature_id for r in records])
            labels = assignment.labels
            n_clusters = assignment.n_clusters
        else:
            labels, n_clusters = {}, 0
        self.tel.emit("cluster", "*", (time.perf_counter_ns() - start) // 1000, n=len(records))
        write_clusters(out_path, [(r.signature_id, labels[r.signature_id]) for r in records])
        self.summary.clusters = n_clusters
        return stage.commit([{"signature_id": r.signature_id, "cluster_id": labels[r.signature_id]}
                             for r in records], clusters=n_clusters)

    # -- driver ----------------------------------------------------------
    def manifest(self, stage: str) -> dict:
        """Committed manifest of an earlier stage, for running stages one at a time."""
        path = self.root / stage / MANIFEST
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"no completed {stage} stage under {self.root} ({exc})") from exc

    def finish(self) -> RunSummary:
        self.root.mkdir(parents=True, exist_ok=True)
        self.tel.write(self.root / TELEMETRY_NAME)
        self.summary.telemetry = list(self.tel.events)
        return self.summary

    def run(self) -> RunSummary:
        if self.models is None:
            self.models = load_models(self.cfg)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.yaml").write_text(dump_config(self.cfg), encoding="utf-8")
        ingested = self.ingest()
        self.summary.failures = list(ingested.get("failures", []))
        self.summary.pages = len(ingested["outputs"])
        gated = self.gate(ingested)
        self.summary.pages_rejected = sum(1 for g in gated["outputs"] if not g["accepted"])
        extracted = self.extract(ingested, gated)
        self.summary.candidates = len(extracted["outputs"])
        filtered = self.filter(extracted)
        cleaned = self.clean(filtered)
        embedded = self.embed(cleaned)
        self.summary.signatures = len(embedded["outputs"])
        self.cluster(embedded)
        return self.finish()


def write_clusters(path, rows: Sequence) -> None:
    Path(path).write_text("".join(f"{sid}\t{cid}\n" for sid, cid in rows), encoding="utf-8")


def read_tsv(path) -> Dict[str, str]:
    """Two-column tab-separated file into a dict; blank and '#' lines ignored."""
    out: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigError(str(path), f"expected two tab-separated columns: {line!r}")
        out[parts[0]] = parts[1]
    return out


def run_pipeline(config: PipelineConfig, models: Optional[Models] = None, ocr_engine=None) -> RunSummary:
    """Run every stage over ``config.source``; summary carries the telemetry events."""
    return Pipeline(config, models, ocr_engine).run()
