"""Shared fixtures: seeded toy models trained once per session."""
from __future__ import annotations

import time

import numpy as np
import pytest

from signet import synth
from signet.cleaner import clean_batch, train_cleaner
from signet.cluster import select_threshold
from signet.config import PipelineConfig
from signet.filter_cnn import train_filter
from signet.siamese import build_pairs, embed_batch, train_siamese

TOY_CLEANER_ARCH = {"ngf": 8, "ndf": 8, "n_res": 6}


class Trained:
    def __init__(self, model, history, data, seconds):
        self.model = model
        self.history = history
        self.data = data
        self.seconds = seconds


def _timed(fn, *args, **kw):
    start = time.perf_counter()
    model, history = fn(*args, **kw)
    return model, history, time.perf_counter() - start


@pytest.fixture(scope="session")
def toy_filter():
    data = synth.toy_filter_set(10, seed=0)
    model, hist, secs = _timed(train_filter, data, 200, rng_seed=0)
    return Trained(model, hist, data, secs)


@pytest.fixture(scope="session")
def toy_cleaner():
    data = synth.toy_stamp_set(16, seed=0)
    model, hist, secs = _timed(train_cleaner, data, 50, rng_seed=0, arch=TOY_CLEANER_ARCH)
    return Trained(model, hist, data, secs)


@pytest.fixture(scope="session")
def toy_siamese():
    labeled = synth.toy_author_set(4, 4, seed=0)
    pairs = build_pairs(labeled, 1.0, rng_seed=0, val_fraction=0.0)
    model, hist, secs = _timed(train_siamese, pairs, 100, rng_seed=0)
    return Trained(model, hist, pairs, secs)


E2E_CFG = PipelineConfig(dpi=100, ocr_engine="none")


@pytest.fixture(scope="session")
def e2e_checkpoints(tmp_path_factory, toy_cleaner):
    """Checkpoints for the end-to-end fixture plus the calibrated t."""
    root = tmp_path_factory.mktemp("models")
    fs = synth.document_candidate_set(12, seed=100, cfg=E2E_CFG)
    filt, _ = train_filter(fs, 20, rng_seed=0, augmentation=False)

    labeled = synth.toy_author_set(4, 4, seed=1)
    cleaned = clean_batch(toy_cleaner.model, [img for img, _ in labeled])
    pairs = build_pairs(list(zip(cleaned, [a for _, a in labeled])), 1.0, rng_seed=0, val_fraction=0.0)
    enc, _ = train_siamese(pairs, 30, rng_seed=0)

    embs = embed_batch(enc, cleaned)
    index = {id(img): i for i, img in enumerate(cleaned)}
    labeled_pairs = [(index[id(p.first)], index[id(p.second)], p.label) for p in pairs.train]
    t = select_threshold(embs, labeled_pairs)

    paths = {"filter": root / "filter.pt", "cleaner": root / "cleaner.pt", "encoder": root / "encoder.pt"}
    filt.save(paths["filter"])
    toy_cleaner.model.save(paths["cleaner"])
    enc.save(paths["encoder"])
    return {"paths": paths, "t": t, "encoder": enc}


@pytest.fixture(scope="session")
def e2e_corpus(tmp_path_factory):
    """Three single-page PDFs, each signed once by author 0 and once by author 1."""
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(7)
    truth = []
    for d in range(3):
        doc = synth.render_document([0, 1], rng=rng)
        name = f"doc{d}.pdf"
        synth.save_document(doc, root / name)
        truth.extend((name, page, box, author) for page, box, author in doc.signatures)
    return root, truth


def e2e_config(checkpoints, source, workdir) -> PipelineConfig:
    p = checkpoints["paths"]
    return E2E_CFG.replace(source=str(source), workdir=str(workdir), threshold_t=checkpoints["t"],
                           filter_checkpoint=str(p["filter"]), cleaner_checkpoint=str(p["cleaner"]),
                           encoder_checkpoint=str(p["encoder"]))


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
