"""``signet`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 model or startup error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import synth
from .config import PipelineConfig, load_config
from .errors import DataError, SignetError
from .pipeline import INDEX_NAME, Pipeline, load_models, read_tsv, run_pipeline, write_clusters

log = logging.getLogger("signet")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff")


class UsageError(SignetError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _images(directory: Path) -> List[Path]:
    return sorted(p for p in directory.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {k: getattr(args, k) for k in ("workdir", "seed", "workers") if getattr(args, k, None) is not None}
    return cfg.replace(**changes) if changes else cfg


def _with_workdir(cfg: PipelineConfig, path) -> PipelineConfig:
    return cfg.replace(workdir=str(path)) if path else cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- pipeline stages -------------------------------------------------------

def cmd_ingest(args, cfg):
    cfg = _with_workdir(cfg.replace(source=args.source), args.out)
    p = Pipeline(cfg)
    ingested = p.ingest()
    gated = p.gate(ingested)
    p.summary.pages = len(ingested["outputs"])
    p.summary.pages_rejected = sum(1 for g in gated["outputs"] if not g["accepted"])
    p.summary.failures = list(ingested.get("failures", []))
    _print_json(p.finish().as_dict())


def cmd_extract(args, cfg):
    cfg = _with_workdir(cfg, args.inp)
    p = Pipeline(cfg)
    out = p.extract(p.manifest("ingest"), p.manifest("gate"))
    p.summary.candidates = len(out["outputs"])
    _print_json(p.finish().as_dict())


def cmd_filter(args, cfg):
    cfg = _with_workdir(cfg, args.inp)
    if args.threshold is not None:
        cfg = cfg.replace(cnn_threshold=args.threshold)
    if args.checkpoint:
        cfg = cfg.replace(filter_checkpoint=args.checkpoint)
    p = Pipeline(cfg, load_models(cfg, ("filter",)))
    out = p.filter(p.manifest("extract"))
    print(f"{len(out['outputs'])} candidate(s) retained")
    p.finish()


def cmd_clean(args, cfg):
    cfg = _with_workdir(cfg, args.inp)
    if args.checkpoint:
        cfg = cfg.replace(cleaner_checkpoint=args.checkpoint)
    p = Pipeline(cfg, load_models(cfg, ("cleaner",)))
    out = p.clean(p.manifest("filter"))
    print(f"{len(out['outputs'])} signature(s) cleaned")
    p.finish()


def cmd_embed(args, cfg):
    cfg = _with_workdir(cfg, args.inp)
    if args.checkpoint:
        cfg = cfg.replace(encoder_checkpoint=args.checkpoint)
    p = Pipeline(cfg, load_models(cfg, ("encoder",)))
    out = p.embed(p.manifest("clean"))
    if args.out:
        shutil.copyfile(Path(cfg.workdir) / INDEX_NAME, args.out)
    print(f"{len(out['outputs'])} embedding(s) indexed")
    p.finish()


def cmd_cluster(args, cfg):
    from .cluster import cluster
    from .store import load_index

    t = cfg.threshold_t if args.t is None else args.t
    cfg.replace(threshold_t=t)  # range check
    records = load_index(args.index)
    rows = []
    if records:
        assignment, _ = cluster([r.dequantize() for r in records], t, [r.signature_id for r in records])
        rows = [(r.signature_id, assignment.labels[r.signature_id]) for r in records]
    write_clusters(args.out, rows)
    print(f"{len(rows)} signature(s) in {len({c for _, c in rows})} cluster(s) -> {args.out}")


def cmd_run(args, cfg):
    if args.source:
        cfg = cfg.replace(source=args.source)
    _print_json(run_pipeline(cfg).as_dict())


def cmd_search(args, cfg):
    from .filter_cnn import read_signature
    from .core import ImageState
    from .siamese import EncoderModel
    from .store import search

    enc = EncoderModel.load(args.checkpoint or cfg.encoder_checkpoint or "")
    query = read_signature(args.query, ImageState.CLEANED)
    t = cfg.threshold_t if args.t is None else args.t
    for hit in search(query, args.index, enc, t):
        print(f"{hit.rank}\t{hit.signature_id}\t{hit.distance:.6f}")


# -- evaluation -------------------------------------------------------------

def cmd_evaluate(args, cfg):
    from .evaluate import clustering_report, format_clustering_report

    rep = clustering_report(read_tsv(args.pred), read_tsv(args.truth))
    if args.json:
        _print_json(rep)
    else:
        print(format_clustering_report(rep))


def cmd_report(args, cfg):
    from .evaluate import format_report, read_telemetry, scalability_report

    with open(args.telemetry, encoding="utf-8") as fh:
        rep = scalability_report(read_telemetry(fh))
    if args.json:
        _print_json(rep)
    else:
        print(format_report(rep))


def cmd_roc(args, cfg):
    from .evaluate import roc_curve

    scores, labels = [], []
    for line in Path(args.scores).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            s, y = line.split("\t")[:2]
            scores.append(float(s))
            labels.append(int(y))
    roc = roc_curve(scores, labels)
    lines = ["# fpr\ttpr\tthreshold"] + [f"{f:.6f}\t{t:.6f}\t{th}" for f, t, th in
                                         zip(roc.fpr, roc.tpr, roc.thresholds)]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"AUC {roc.area_under_curve:.6f} ({len(roc.fpr)} points -> {args.out})")


# -- training ---------------------------------------------------------------

def cmd_train_filter(args, cfg):
    from .filter_cnn import load_labeled_dir, train_filter

    data = load_labeled_dir(args.data)
    model, history = train_filter(data, args.epochs, args.seed if args.seed is not None else cfg.seed,
                                  augmentation=not args.no_augment, log_every=args.log_every)
    model.save(args.out, {"epochs": args.epochs, "history": history})
    _print_json(history[-1] if history else {})


def _clean_set(root: Path):
    from .cleaner import CleanTrainingSet
    from .core import ImageState
    from .filter_cnn import read_signature

    raw = [read_signature(p) for p in _images(root / "raw")]
    clean = [read_signature(p, ImageState.CLEANED) for p in _images(root / "clean")]
    paired = []
    if (root / "paired" / "raw").is_dir():
        for p in _images(root / "paired" / "raw"):
            target = root / "paired" / "clean" / p.name
            if not target.is_file():
                raise DataError(f"paired raw {p.name} has no cleaned counterpart")
            paired.append((read_signature(p), read_signature(target, ImageState.CLEANED)))
    return CleanTrainingSet(raw, clean, paired)


def cmd_train_cleaner(args, cfg):
    from .cleaner import train_cleaner

    arch = json.loads(args.arch) if args.arch else None
    model, history = train_cleaner(_clean_set(Path(args.data)), args.epochs, cfg.lambda_cyc, cfg.lambda_pair,
                                   args.seed if args.seed is not None else cfg.seed, arch=arch,
                                   log_every=args.log_every)
    model.save(args.out, {"epochs": args.epochs, "history": history})
    _print_json(history[-1] if history else {})


def _author_set(root: Path):
    from .core import ImageState
    from .filter_cnn import read_signature

    labeled = []
    for author_dir in sorted(d for d in root.iterdir() if d.is_dir()):
        labeled += [(read_signature(p, ImageState.CLEANED), author_dir.name) for p in _images(author_dir)]
    if not labeled:
        raise DataError(f"no author subdirectories with images under {root}")
    return labeled


def cmd_train_siamese(args, cfg):
    from .cluster import select_threshold
    from .siamese import EncoderModel, build_pairs, train_siamese

    seed = args.seed if args.seed is not None else cfg.seed
    data = build_pairs(_author_set(Path(args.data)), cfg.neg_ratio, seed)
    enc = EncoderModel.create(args.encoder)
    enc, history = train_siamese(data, args.epochs, seed, encoder=enc, log_every=args.log_every)
    pairs = data.val or data.train
    images = {}
    for p in pairs:
        for img in (p.first, p.second):
            images.setdefault(id(img), (len(images), img))
    vecs = enc.embed_arrays([img for _, img in images.values()])
    t = select_threshold(list(vecs), [(images[id(p.first)][0], images[id(p.second)][0], p.label) for p in pairs])
    enc.save(args.out, {"epochs": args.epochs, "history": history, "suggested_t": t})
    _print_json({**(history[-1] if history else {}), "suggested_t": t})


def cmd_synth(args, cfg):
    """Write a small synthetic corpus: documents plus training sets for every model."""
    from .filter_cnn import write_signature

    out = Path(args.out)
    rng = np.random.default_rng(args.seed if args.seed is not None else cfg.seed)
    authors = [int(a) for a in args.authors.split(",")]
    (out / "documents").mkdir(parents=True, exist_ok=True)
    for d in range(args.docs):
        synth.save_document(synth.render_document(authors, rng, stamp_prob=args.stamp_prob),
                            out / "documents" / f"doc{d:03d}.pdf")
    fset = synth.document_candidate_set(12, seed=int(rng.integers(1 << 31)), cfg=cfg)
    for i, (img, y) in enumerate(fset.items):
        d = out / "filter" / ("signature" if y else "other")
        d.mkdir(parents=True, exist_ok=True)
        write_signature(img, d / f"{i:04d}.png")
    cset = synth.toy_stamp_set(16, seed=int(rng.integers(1 << 31)))
    for name, imgs in (("raw", cset.unpaired_X), ("clean", cset.unpaired_Y)):
        (out / "cleaner" / name).mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            write_signature(img, out / "cleaner" / name / f"{i:04d}.png")
    for sub in ("raw", "clean"):
        (out / "cleaner" / "paired" / sub).mkdir(parents=True, exist_ok=True)
    for i, (raw, clean) in enumerate(cset.paired):
        write_signature(raw, out / "cleaner" / "paired" / "raw" / f"{i:04d}.png")
        write_signature(clean, out / "cleaner" / "paired" / "clean" / f"{i:04d}.png")
    for img, author in synth.toy_author_set(len(authors) + 2, 4, seed=int(rng.integers(1 << 31)),
                                            first_author=min(authors)):
        d = out / "authors" / author
        d.mkdir(parents=True, exist_ok=True)
        write_signature(img, d / f"{len(list(d.iterdir())):04d}.png")
    print(f"synthetic corpus written to {out}")


# -- parser -----------------------------------------------------------------

def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps their absence from
    # overwriting a value given before the subcommand name
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file", **kw)
    common.add_argument("--workdir", help="work directory (overrides the config)", **kw)
    common.add_argument("--seed", type=int, help="random seed (overrides the config)", **kw)
    common.add_argument("--workers", type=int, help="worker threads (overrides the config)", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = _Parser(prog="signet", description="Signature extraction and clustering pipeline.",
                     parents=[_common(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(fn=fn)
        return p

    p = add("ingest", cmd_ingest, "render documents to pages and apply the OCR gate")
    p.add_argument("--source", required=True)
    p.add_argument("--out", help="work directory")
    p = add("extract", cmd_extract, "extract candidate regions from ingested pages")
    p.add_argument("--in", dest="inp", help="work directory")
    p.add_argument("--out", help="ignored; candidates are written inside the work directory")
    p = add("filter", cmd_filter, "score candidates with the filter CNN")
    p.add_argument("--in", dest="inp")
    p.add_argument("--threshold", type=float)
    p.add_argument("--checkpoint")
    p = add("clean", cmd_clean, "remove stamps and printed matter from retained candidates")
    p.add_argument("--in", dest="inp")
    p.add_argument("--checkpoint")
    p = add("embed", cmd_embed, "embed cleaned signatures into an index file")
    p.add_argument("--in", dest="inp")
    p.add_argument("--out", help="copy of the index file")
    p.add_argument("--checkpoint")
    p = add("cluster", cmd_cluster, "cluster an index under threshold t")
    p.add_argument("--index", required=True)
    p.add_argument("--t", type=float)
    p.add_argument("--out", default="clusters.tsv")
    p = add("run", cmd_run, "run every stage")
    p.add_argument("--source")
    p = add("search", cmd_search, "find indexed signatures near a query image")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--t", type=float)
    p.add_argument("--checkpoint")
    p = add("evaluate", cmd_evaluate, "compare a clustering with ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--json", action="store_true")
    p = add("report", cmd_report, "time and space summary of a run")
    p.add_argument("--telemetry", required=True)
    p.add_argument("--json", action="store_true")
    p = add("roc", cmd_roc, "ROC points and AUC from score<TAB>label lines")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", default="roc.tsv")
    p = add("train-filter", cmd_train_filter, "train the candidate filter")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out", default="filter.ckpt")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log-every", type=int, default=10)
    p = add("train-cleaner", cmd_train_cleaner, "train the stamp-removing cleaner")
    p.add_argument("--data", required=True, help="directory with raw/, clean/ and optional paired/{raw,clean}/")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out", default="cleaner.ckpt")
    p.add_argument("--arch", help='JSON architecture overrides, e.g. {"ngf": 8, "ndf": 8}')
    p.add_argument("--log-every", type=int, default=10)
    p = add("train-siamese", cmd_train_siamese, "train the signature encoder")
    p.add_argument("--data", required=True, help="directory with one subdirectory per author")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--out", default="encoder.ckpt")
    p.add_argument("--encoder", default="auto", choices=("auto", "compact", "vgg16"))
    p.add_argument("--log-every", type=int, default=10)
    p = add("synth", cmd_synth, "write a synthetic demo corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--docs", type=int, default=3)
    p.add_argument("--authors", default="0,1")
    p.add_argument("--stamp-prob", type=float, default=0.0)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        args.fn(args, cfg)
    except SignetError as exc:
        print(f"signet: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"signet: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
