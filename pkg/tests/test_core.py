import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from signet.config import PipelineConfig, dump_config, validate_config
from signet.core import (
    CANVAS, ClusterAssignment, Embedding, ImageState, PageImage, PairExample, Provenance,
    SignatureImage, normalize_to_canvas,
)
from signet.errors import ConfigError, DegenerateEmbedding, InvalidInput


def test_white_canvas_is_unchanged():
    out = normalize_to_canvas(np.ones((256, 256)))
    assert out.pixels.shape == (CANVAS, CANVAS)
    assert np.array_equal(out.pixels, np.ones((256, 256), dtype=np.float32))


def test_half_height_crop_sits_in_centered_band():
    crop = np.ones((128, 256))
    crop[5, 17] = 0.0
    out = normalize_to_canvas(crop).pixels
    # longer side is already 256, so the crop is pasted unscaled 64 rows down
    assert np.all(out[:64] == 1.0) and np.all(out[192:] == 1.0)
    dark = np.argwhere(out < 1.0)
    assert dark.tolist() == [[64 + 5, 17]]


def test_large_crop_pixel_lands_top_left():
    crop = np.ones((512, 512))
    crop[0, 0] = 0.0
    out = normalize_to_canvas(crop).pixels
    # box filter averages each 2x2 block
    assert out[0, 0] == pytest.approx(0.75)
    assert np.all(np.delete(out.ravel(), 0) == 1.0)


def test_empty_crop_rejected():
    with pytest.raises(InvalidInput):
        normalize_to_canvas(np.zeros((0, 5)))


def test_out_of_range_crop_rejected():
    with pytest.raises(InvalidInput):
        normalize_to_canvas(np.full((4, 4), 1.5))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 300), st.integers(1, 300)),
              elements=st.floats(0, 1, width=32)))
def test_normalize_range_and_idempotence(crop):
    once = normalize_to_canvas(crop).pixels
    assert once.shape == (CANVAS, CANVAS)
    assert once.min() >= 0.0 and once.max() <= 1.0
    twice = normalize_to_canvas(once).pixels
    assert np.max(np.abs(twice - once)) <= 1.0 / 255


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.integers(1, 400))
def test_normalize_keeps_aspect(h, w):
    out = normalize_to_canvas(np.zeros((h, w))).pixels
    rows = np.flatnonzero((out < 1).any(axis=1))
    cols = np.flatnonzero((out < 1).any(axis=0))
    nh, nw = rows.size, cols.size
    assert max(nh, nw) == CANVAS
    assert abs(nh / nw - h / w) <= (h / w) * (1.0 / min(nh, nw)) + 1e-9
    # centred: the two margins differ by at most one pixel
    assert abs(rows[0] - (CANVAS - 1 - rows[-1])) <= 1
    assert abs(cols[0] - (CANVAS - 1 - cols[-1])) <= 1


def test_page_image_invariants():
    with pytest.raises(InvalidInput):
        PageImage("d", 0, np.full((3, 3), -0.1))
    with pytest.raises(InvalidInput):
        PageImage("d", 0, np.zeros((0, 0)))
    page = PageImage("d", 2, np.zeros((3, 4)), dpi=150)
    assert page.shape == (3, 4) and page.dpi == 150


def test_signature_image_shape_contract():
    with pytest.raises(InvalidInput):
        SignatureImage(np.ones((128, 128)))
    img = SignatureImage(np.ones((256, 256)), ImageState.CLEANED)
    assert img.state is ImageState.CLEANED


def test_embedding_contract():
    with pytest.raises(InvalidInput):
        Embedding(np.ones(10))
    with pytest.raises(DegenerateEmbedding):
        Embedding(np.zeros(4096))
    bad = np.ones(4096)
    bad[3] = np.nan
    with pytest.raises(InvalidInput):
        Embedding(bad)


def test_cluster_assignment_ids_contiguous():
    with pytest.raises(InvalidInput):
        ClusterAssignment({"a": 0, "b": 2})
    ca = ClusterAssignment.from_groups({"a": "x", "b": "y", "c": "x"})
    assert ca.labels == {"a": 0, "b": 1, "c": 0}
    assert ca.n_clusters == 2 and ca.groups() == [["a", "c"], ["b"]]


def test_pair_label_binary():
    img = SignatureImage(np.ones((256, 256)))
    with pytest.raises(InvalidInput):
        PairExample(img, img, 2)


@given(st.text(min_size=0, max_size=20), st.integers(0, 500),
       st.tuples(*[st.integers(0, 5000)] * 4))
def test_provenance_round_trip(doc, page, box):
    p = Provenance(doc, page, box)
    assert Provenance.from_signature_id(p.signature_id()) == p


# configuration

def test_empty_config_gives_defaults():
    assert validate_config("") == PipelineConfig()


def test_cnn_threshold_out_of_range():
    with pytest.raises(ConfigError) as err:
        validate_config("cnn_threshold: 1.5")
    assert err.value.field == "cnn_threshold"


def test_t_alias():
    assert validate_config("t: 0.2").threshold_t == 0.2


def test_sectioned_keys_and_unknown_key():
    cfg = validate_config("schema_version: 1\nfilter:\n  cnn_threshold: 0.7\n")
    assert cfg.cnn_threshold == 0.7
    with pytest.raises(ConfigError):
        validate_config("bogus: 3")


def test_inverted_bounds_rejected():
    with pytest.raises(ConfigError) as err:
        validate_config("density_min: 0.5\ndensity_max: 0.1")
    assert err.value.field == "density_min"


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 2), st.integers(1, 16),
       st.lists(st.text(alphabet="abcdefg ", min_size=1).filter(str.strip), min_size=1, max_size=3))
def test_config_round_trip(cnn, t, workers, kws):
    cfg = PipelineConfig(cnn_threshold=cnn, threshold_t=t, workers=workers, ocr_keywords=tuple(kws))
    assert validate_config(dump_config(cfg)) == cfg
