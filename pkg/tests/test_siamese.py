import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from signet import synth
from signet.core import PairExample
from signet.errors import DataError, DegenerateEmbedding, InvalidInput
from signet.siamese import (
    EncoderModel, SiameseNet, build_pairs, embed, match_probability, pair_accuracy, train_siamese,
)
from signet.siamese import _batch


def test_two_by_two_pairs_match_enumeration():
    labeled = synth.toy_author_set(2, 2, seed=0)
    ds = build_pairs(labeled, 1.0, rng_seed=0, val_fraction=0.0)
    same = [(a, b) for a, b in itertools.combinations(labeled, 2) if a[1] == b[1]]
    cross = [(a, b) for a, b in itertools.combinations(labeled, 2) if a[1] != b[1]]
    pos = [p for p in ds.train if p.label == 1]
    neg = [p for p in ds.train if p.label == 0]
    assert len(pos) == len(same) == 2
    assert len(neg) == 2
    by_id = {id(img): author for img, author in labeled}
    assert all(by_id[id(p.first)] == by_id[id(p.second)] for p in pos)
    assert all(by_id[id(p.first)] != by_id[id(p.second)] for p in neg)
    assert {(id(p.first), id(p.second)) for p in neg} <= {(id(a[0]), id(b[0])) for a, b in cross}


def test_val_authors_disjoint():
    labeled = synth.toy_author_set(10, 2, seed=0)
    ds = build_pairs(labeled, 1.0, rng_seed=4)
    assert len(ds.val_authors) == 2 and not ds.val_authors & ds.train_authors
    by_id = {id(img): author for img, author in labeled}
    train_seen = {by_id[id(im)] for p in ds.train for im in (p.first, p.second)}
    val_seen = {by_id[id(im)] for p in ds.val for im in (p.first, p.second)}
    assert train_seen <= ds.train_authors and val_seen <= ds.val_authors


def test_ratio_zero_positives_only():
    ds = build_pairs(synth.toy_author_set(3, 3, seed=0), 0.0, val_fraction=0.0)
    assert ds.train and all(p.label == 1 for p in ds.train)


def test_single_author_rejected():
    with pytest.raises(DataError):
        build_pairs(synth.toy_author_set(1, 3, seed=0))


def test_embedding_contract(toy_siamese):
    imgs = [img for img, _ in synth.toy_author_set(2, 1, seed=9)]
    a1, a2 = embed(toy_siamese.model, imgs[0]), embed(toy_siamese.model, imgs[0])
    b = embed(toy_siamese.model, imgs[1])
    assert a1.vector.shape == (4096,)
    assert np.array_equal(a1.vector, a2.vector)
    assert np.any(a1.vector != b.vector)
    assert np.all(np.isfinite(a1.vector))


def test_embed_wrong_shape():
    with pytest.raises(InvalidInput):
        embed(EncoderModel(), np.ones((100, 100)))


def test_match_probability_examples():
    v = np.arange(1, 4097, dtype=float)
    w = np.zeros(4096)
    w[0], w[1] = v[1], -v[0]
    assert match_probability(v, v) == pytest.approx(1.0)
    assert match_probability(v[:2], w[:2]) == pytest.approx(0.5)
    assert match_probability(v, -v) == pytest.approx(0.0)
    with pytest.raises(DegenerateEmbedding):
        match_probability(v, np.zeros(4096))


vec = arrays(np.float64, 16, elements=st.floats(-10, 10)).filter(lambda a: np.linalg.norm(a) > 1e-3)


@given(vec, vec, st.floats(1e-3, 1e3))
def test_match_probability_symmetric_and_scale_invariant(a, b, alpha):
    p = match_probability(a, b)
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(match_probability(b, a), abs=1e-12)
    assert p == pytest.approx(match_probability(alpha * a, b), abs=1e-9)


def test_untrained_bce_near_ln2():
    # unrelated authors in matched and unmatched pairs: an untrained head has no signal
    imgs = [img for img, _ in synth.toy_author_set(32, 1, seed=0)]
    x = _batch(imgs)
    y = torch.tensor([float(i % 2) for i in range(16)])
    for seed in range(5):
        torch.manual_seed(seed)
        net = EncoderModel().net
        net.train()
        with torch.no_grad():
            e = net(x)
        cos = torch.nn.functional.cosine_similarity(e[0::2], e[1::2], dim=1)
        bce = torch.nn.functional.binary_cross_entropy((1 + cos) / 2, y).item()
        assert abs(bce - math.log(2)) <= 0.2 * math.log(2)


def test_single_label_rejected():
    labeled = synth.toy_author_set(2, 2, seed=0)
    ds = build_pairs(labeled, 0.0, val_fraction=0.0)
    with pytest.raises(DataError):
        train_siamese(ds, 1)


def test_toy_siamese_overfits(toy_siamese):
    assert pair_accuracy(toy_siamese.model, toy_siamese.data.train) >= 0.9


def test_twin_branches_share_weights(toy_siamese):
    a, b = [img for img, _ in synth.toy_author_set(2, 1, seed=5)]
    net = SiameseNet(toy_siamese.model.net).eval()
    xa, xb = _batch([a]), _batch([b])
    with torch.no_grad():
        _, left, _ = net(xa, xb)
        _, _, right = net(xb, xa)
    assert torch.equal(left, right)
    assert np.allclose(left.double().numpy()[0], embed(toy_siamese.model, a).vector)


def test_pair_labels_binary():
    img = synth.toy_author_set(1, 1)[0][0]
    with pytest.raises(InvalidInput):
        PairExample(img, img, -1)


def test_encoder_checkpoint_round_trip(tmp_path, toy_siamese):
    toy_siamese.model.save(tmp_path / "e.pt")
    back = EncoderModel.load(tmp_path / "e.pt")
    img = synth.toy_author_set(1, 1, seed=2)[0][0]
    assert np.array_equal(embed(back, img).vector, embed(toy_siamese.model, img).vector)
