"""Clustering, verification, extraction and scalability metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .core import BBox, ClusterAssignment
from .errors import InvalidInput

log = logging.getLogger(__name__)

# Reference figures reported for the original pipeline, kept for side-by-side reports.
REFERENCE = {
    "extraction_precision_with_ocr": 0.947,
    "extraction_precision_without_ocr": 0.935,
    "clustering_seconds_per_signature": 0.1,
    "clustering_reference_n": 537,
    "human_seconds_per_signature": (3.5, 4.7),
    "image_kb": 26.8,
    "embedding_kb": 3.0,
    "space_reduction": 0.89,
    "table2": {
        "Human Majority Voting": 91.66,
        "Human Individual Voting": 89.25,
        "Fully automated pipeline": 78.19,
        "Engin, Kantarci et al": 76.38,
    },
    "filter_val_accuracy": 0.935,
    "siamese_val_accuracy": 0.814,
}


@dataclass(frozen=True)
class PairConfusion:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN


def _labels(assignment) -> Dict[str, object]:
    if isinstance(assignment, ClusterAssignment):
        return dict(assignment.labels)
    return dict(assignment)


def _aligned(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    p, t = _labels(pred), _labels(truth)
    if set(p) != set(t):
        raise InvalidInput("partitions cover different element sets")
    keys = sorted(p)
    _, pi = np.unique([str(p[k]) for k in keys], return_inverse=True)
    _, ti = np.unique([str(t[k]) for k in keys], return_inverse=True)
    return pi.reshape(-1), ti.reshape(-1)


def _contingency(pi: np.ndarray, ti: np.ndarray) -> np.ndarray:
    table = np.zeros((pi.max() + 1 if pi.size else 0, ti.max() + 1 if ti.size else 0), dtype=np.int64)
    np.add.at(table, (pi, ti), 1)
    return table


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def pair_confusion(pred, truth) -> PairConfusion:
    """Count element pairs by whether each partition puts them together."""
    pi, ti = _aligned(pred, truth)
    n = pi.size
    table = _contingency(pi, ti)
    tp = int(_comb2(table).sum())
    together_pred = int(_comb2(table.sum(axis=1)).sum())
    together_truth = int(_comb2(table.sum(axis=0)).sum())
    fp = together_pred - tp
    fn = together_truth - tp
    tn = n * (n - 1) // 2 - tp - fp - fn
    return PairConfusion(tp, tn, fp, fn)


def rand_index(pred, truth) -> float:
    """(TP + TN) / (TP + TN + FP + FN) over all element pairs."""
    c = pair_confusion(pred, truth)
    if c.total == 0:
        raise InvalidInput("Rand index needs at least two elements")
    return (c.TP + c.TN) / c.total


def adjusted_rand_index(pred, truth) -> float:
    """Hubert-Arabie chance-corrected Rand index from the contingency table.

    When the denominator vanishes (both partitions all singletons, or both a
    single cluster) the result is 1.0 for identical partitions, else 0.0.
    """
    pi, ti = _aligned(pred, truth)
    n = pi.size
    if n < 2:
        raise InvalidInput("adjusted Rand index needs at least two elements")
    table = _contingency(pi, ti)
    index = float(_comb2(table).sum())
    a = float(_comb2(table.sum(axis=1)).sum())
    b = float(_comb2(table.sum(axis=0)).sum())
    total = float(n * (n - 1) // 2)
    expected = a * b / total
    maximum = (a + b) / 2.0
    if maximum == expected:
        same = table.shape[0] == table.shape[1] and np.count_nonzero(table) == table.shape[0]
        return 1.0 if same else 0.0
    return (index - expected) / (maximum - expected)


def pairwise_accuracy(pred, truth) -> float:
    """Fraction of element pairs on which the partitions agree (the Rand index)."""
    return rand_index(pred, truth)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    area_under_curve: float

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC from a sweep over the distinct scores (descending), trapezoidal AUC.

    Tied scores move both rates at once, so the AUC counts a tie as half a win.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InvalidInput("scores and labels differ in length")
    if not np.all(np.isin(y, (0, 1))):
        raise InvalidInput("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInput("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tps = np.cumsum(y == 1)[last_of_group]
    fps = np.cumsum(y == 0)[last_of_group]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of inclusive pixel boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / float(area_a + area_b - inter)


def _key_box(r):
    """Accept (key, bbox) tuples, objects with .bbox, or bare boxes."""
    if hasattr(r, "bbox"):
        src = getattr(r, "source", None)
        return ((src.doc_id, src.page_index) if src is not None else None), tuple(r.bbox)
    if len(r) == 2 and len(r[1]) == 4:
        return r[0], tuple(r[1])
    return None, tuple(r)


def extraction_precision(predicted_regions, truth_regions, iou_threshold: float = 0.5) -> float:
    """Share of predicted boxes overlapping some truth box on the same page at IoU >= threshold."""
    preds = [_key_box(r) for r in predicted_regions]
    truths = [_key_box(r) for r in truth_regions]
    if not preds:
        log.warning("no predicted regions; precision reported as 0.0")
        return 0.0
    hits = sum(
        1 for key, box in preds
        if any(tk == key and iou(box, tb) >= iou_threshold for tk, tb in truths)
    )
    return hits / len(preds)


def read_telemetry(lines: Iterable[str]) -> List[dict]:
    events = []
    for line in lines:
        line = line.strip()
        if line:
            events.append(json.loads(line))
    return events


def scalability_report(run_telemetry: Iterable[Mapping]) -> dict:
    """Per-signature clustering time and image-versus-embedding storage.

    Consumes telemetry events with ``stage`` and ``micros`` plus optional
    ``bytes`` and ``kind``. ``kind="signature_image"`` events size the image
    artifacts, ``kind="embedding_record"`` the stored embeddings, and the
    ``cluster`` stage event carries ``n`` (signatures clustered).
    """
    events = list(run_telemetry)
    stage_micros: Dict[str, int] = {}
    for ev in events:
        stage_micros[ev["stage"]] = stage_micros.get(ev["stage"], 0) + int(ev.get("micros", 0))
    image_bytes = [ev["bytes"] for ev in events if ev.get("kind") == "signature_image"]
    emb_bytes = [ev["bytes"] for ev in events if ev.get("kind") == "embedding_record"]
    cluster_events = [ev for ev in events if ev["stage"] == "cluster"]
    n_clustered = sum(int(ev.get("n", 0)) for ev in cluster_events)
    report: dict = {"stages": {k: v / 1e6 for k, v in sorted(stage_micros.items())}, "time": {}, "space": {},
                    "reference": REFERENCE}
    if n_clustered:
        secs = sum(int(ev.get("micros", 0)) for ev in cluster_events) / 1e6
        report["time"] = {
            "signatures": n_clustered,
            "clustering_seconds": secs,
            "seconds_per_signature": secs / n_clustered,
            "reference_seconds_per_signature": REFERENCE["clustering_seconds_per_signature"],
        }
    if emb_bytes:
        mean_emb = float(np.mean(emb_bytes))
        space = {
            "embeddings": len(emb_bytes),
            "mean_embedding_bytes": mean_emb,
            "reduction_vs_reference_image": 1.0 - mean_emb / (REFERENCE["image_kb"] * 1000.0),
        }
        if image_bytes:
            mean_img = float(np.mean(image_bytes))
            space["images"] = len(image_bytes)
            space["mean_image_bytes"] = mean_img
            space["reduction"] = 1.0 - mean_emb / mean_img
        report["space"] = space
    return report


def format_report(report: dict) -> str:
    lines = ["stage timings (s)"]
    for stage, secs in report["stages"].items():
        lines.append(f"  {stage:<10} {secs:10.3f}")
    t = report["time"]
    if t:
        lines.append(f"clustering: {t['signatures']} signatures, {t['seconds_per_signature']:.4f} s/signature "
                     f"(reference {t['reference_seconds_per_signature']} s)")
    s = report["space"]
    if s:
        lines.append(f"embedding record: {s['mean_embedding_bytes'] / 1000:.2f} KB mean over {s['embeddings']}")
        if "mean_image_bytes" in s:
            lines.append(f"signature image: {s['mean_image_bytes'] / 1000:.2f} KB mean, reduction {100 * s['reduction']:.1f}%")
        lines.append(f"reduction vs {REFERENCE['image_kb']} KB reference image: "
                     f"{100 * s['reduction_vs_reference_image']:.1f}% (reference {100 * REFERENCE['space_reduction']:.0f}%)")
    return "\n".join(lines)


def clustering_report(pred, truth) -> dict:
    """ARI and pairwise accuracy side by side with the published comparison table."""
    ari = adjusted_rand_index(pred, truth)
    ri = rand_index(pred, truth)
    c = pair_confusion(pred, truth)
    return {
        "adjusted_rand_index": ari,
        "rand_index": ri,
        "ari_x100": 100 * ari,
        "pairwise_accuracy_x100": 100 * ri,
        "confusion": {"TP": c.TP, "TN": c.TN, "FP": c.FP, "FN": c.FN},
        "reference_table": REFERENCE["table2"],
    }


def format_clustering_report(rep: dict) -> str:
    rows = [("This run (ARI x100)", rep["ari_x100"]), ("This run (pairwise accuracy x100)", rep["pairwise_accuracy_x100"])]
    rows += list(rep["reference_table"].items())
    width = max(len(r[0]) for r in rows)
    out = [f"{'Method':<{width}}  Score"]
    out += [f"{name:<{width}}  {score:6.2f}" for name, score in rows]
    c = rep["confusion"]
    out.append(f"pairs: TP={c['TP']} TN={c['TN']} FP={c['FP']} FN={c['FN']}")
    return "\n".join(out)

