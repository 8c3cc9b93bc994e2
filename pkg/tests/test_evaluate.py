import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ari_reference, outrank_probability, pair_counts
from signet.core import ClusterAssignment
from signet.errors import InvalidInput
from signet.evaluate import (
    REFERENCE, adjusted_rand_index, clustering_report, extraction_precision, format_clustering_report,
    format_report, pair_confusion, rand_index, roc_curve, scalability_report,
)


def test_confusion_identical():
    p = {"a": 0, "b": 0, "c": 1}
    c = pair_confusion(p, p)
    assert (c.TP, c.TN, c.FP, c.FN) == (1, 2, 0, 0)
    assert (c.TP, c.TN, c.FP, c.FN) == pair_counts(p, p)


def test_confusion_all_singletons():
    s = {k: i for i, k in enumerate("abcde")}
    c = pair_confusion(s, s)
    assert (c.TP, c.FP, c.FN, c.TN) == (0, 0, 0, 10)


def test_confusion_crossed():
    pred, truth = {"a": 0, "b": 0, "c": 1}, {"a": 0, "b": 1, "c": 1}
    c = pair_confusion(pred, truth)
    assert (c.TP, c.TN, c.FP, c.FN) == (0, 1, 1, 1) == pair_counts(pred, truth)
    assert rand_index(pred, truth) == pytest.approx(1 / 3)


def test_mismatched_sets_rejected():
    with pytest.raises(InvalidInput):
        pair_confusion({"a": 0}, {"b": 0})


def test_rand_index_examples():
    p = ClusterAssignment({"a": 0, "b": 1, "c": 0})
    assert rand_index(p, p) == 1.0
    together = {k: 0 for k in "abcd"}
    apart = {k: i for i, k in enumerate("abcd")}
    assert rand_index(together, apart) == 0.0
    with pytest.raises(InvalidInput):
        rand_index({"a": 0}, {"a": 0})


def test_ari_identical_and_degenerate():
    p = {"a": 0, "b": 0, "c": 1, "d": 2}
    assert adjusted_rand_index(p, p) == 1.0
    singles = {k: i for i, k in enumerate("abc")}
    assert adjusted_rand_index(singles, singles) == 1.0
    one = {k: 0 for k in "abc"}
    assert adjusted_rand_index(one, one) == 1.0
    assert adjusted_rand_index(one, singles) == 0.0


def test_ari_chance_level():
    rng = np.random.default_rng(0)
    keys = [str(i) for i in range(100)]
    values = []
    for _ in range(100):
        a = dict(zip(keys, rng.integers(0, 5, 100).tolist()))
        b = dict(zip(keys, rng.integers(0, 5, 100).tolist()))
        values.append(adjusted_rand_index(a, b))
    assert abs(np.mean(values)) <= 0.05


partition = st.lists(st.integers(0, 3), min_size=2, max_size=9)


@settings(max_examples=150)
@given(partition, st.data())
def test_metrics_match_oracles_symmetric_and_relabel_invariant(p_labels, data):
    n = len(p_labels)
    t_labels = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    perm = data.draw(st.permutations(range(4)))
    keys = [f"k{i}" for i in range(n)]
    p = dict(zip(keys, p_labels))
    t = dict(zip(keys, t_labels))
    relabelled = {k: perm[v] for k, v in p.items()}
    tp, tn, fp, fn = pair_counts(p, t)
    assert rand_index(p, t) == (tp + tn) / (tp + tn + fp + fn)
    assert rand_index(p, t) == rand_index(t, p) == rand_index(relabelled, t)
    ari = adjusted_rand_index(p, t)
    assert ari == pytest.approx(ari_reference(p, t), abs=1e-12)
    assert ari == pytest.approx(adjusted_rand_index(t, p), abs=1e-12)
    assert ari == pytest.approx(adjusted_rand_index(relabelled, t), abs=1e-12)
    assert ari <= 1.0 + 1e-12
    same = {frozenset(k for k in keys if p[k] == v) for v in p.values()} == \
        {frozenset(k for k in keys if t[k] == v) for v in t.values()}
    assert (ari == pytest.approx(1.0)) == same


def test_roc_examples():
    assert roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).area_under_curve == 1.0
    assert roc_curve([0.5] * 6, [0, 1, 0, 1, 1, 0]).area_under_curve == 0.5
    scores, lab = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert roc_curve(scores, lab).area_under_curve == pytest.approx(outrank_probability(scores, lab), abs=1e-12)
    assert outrank_probability(scores, lab) == 0.75


def test_roc_rejects_single_class_and_bad_input():
    with pytest.raises(InvalidInput):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(InvalidInput):
        roc_curve([0.1, 0.2], [1])
    with pytest.raises(InvalidInput):
        roc_curve([0.1, 0.2], [0, 2])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 6).map(lambda v: v / 6), st.integers(0, 1)), min_size=2, max_size=30)
       .filter(lambda xs: len({y for _, y in xs}) == 2))
def test_roc_shape_and_auc(items):
    scores, lab = zip(*items)
    roc = roc_curve(scores, lab)
    assert roc.points[0] == (0.0, 0.0) and roc.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert roc.area_under_curve == pytest.approx(outrank_probability(scores, lab), abs=1e-9)


def test_extraction_precision_examples(caplog):
    truth = [(0, 0, 9, 9), (20, 20, 29, 29)]
    assert extraction_precision(truth, truth) == 1.0
    assert extraction_precision([(0, 0, 9, 9), (100, 100, 110, 110)], truth) == 0.5
    with caplog.at_level(logging.WARNING):
        assert extraction_precision([], truth) == 0.0
    assert "no predicted regions" in caplog.text


def test_extraction_precision_respects_pages():
    truth = [(("d", 0), (0, 0, 9, 9))]
    assert extraction_precision([(("d", 1), (0, 0, 9, 9))], truth) == 0.0


def test_scalability_empty_run():
    rep = scalability_report([])
    assert rep["time"] == {} and rep["space"] == {}
    assert "stage timings" in format_report(rep)


def test_scalability_figures():
    events = [{"stage": "clean", "item": str(i), "micros": 10, "kind": "signature_image", "bytes": 20000}
              for i in range(4)]
    events += [{"stage": "embed", "item": str(i), "micros": 5, "kind": "embedding_record", "bytes": 4140}
               for i in range(4)]
    events.append({"stage": "cluster", "item": "all", "micros": 200_000, "n": 4})
    rep = scalability_report(events)
    assert rep["time"]["seconds_per_signature"] == pytest.approx(0.05)
    assert rep["space"]["mean_embedding_bytes"] == 4140
    assert rep["space"]["reduction"] == pytest.approx(1 - 4140 / 20000)
    assert rep["space"]["reduction_vs_reference_image"] == pytest.approx(1 - 4140 / 26800)
    text = format_report(rep)
    assert "s/signature" in text and "4.14 KB" in text


def test_clustering_report_prints_both_metrics():
    p, t = {"a": 0, "b": 0, "c": 1}, {"a": 0, "b": 1, "c": 1}
    rep = clustering_report(p, t)
    assert rep["pairwise_accuracy_x100"] == pytest.approx(100 / 3)
    text = format_clustering_report(rep)
    assert "ARI" in text and "78.19" in text
    assert REFERENCE["table2"]["Fully automated pipeline"] == 78.19
