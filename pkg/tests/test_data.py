import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitstream.data import (
    CSV_HEADER,
    ZScore,
    generate_classification,
    generate_regression,
    load_image_dataset,
    load_tabular_csv,
    read_image,
    read_pgm,
    resize_image,
    write_classification_dir,
    write_pgm,
    write_regression_csv,
)
from splitstream.errors import ConfigurationError, DataError

from oracles import bilinear_corner_aligned


def _png(path, pixels):
    from PIL import Image

    Image.fromarray(np.asarray(pixels, np.uint8), mode="L").save(path)


def test_pgm_round_trip(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "a.pgm", px)
    np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), px / 255.0)


def test_pgm_with_comment_and_16_bit(tmp_path):
    body = np.array([[0, 1000], [65535, 5]], ">u2").tobytes()
    (tmp_path / "b.pgm").write_bytes(b"P5\n# note\n2 2\n65535\n" + body)
    np.testing.assert_allclose(read_pgm(tmp_path / "b.pgm"), [[0, 1000 / 65535], [1, 5 / 65535]])


def test_unreadable_image_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DataError, match="broken.png"):
        read_image(bad)
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(DataError, match="short.pgm"):
        read_image(tmp_path / "short.pgm")


def test_image_folder(tmp_path):
    for name, n in (("pos", 3), ("neg", 2)):
        (tmp_path / name).mkdir()
        for i in range(n):
            _png(tmp_path / name / f"{i}.png", np.full((8, 8), 50 * i))
    samples = load_image_dataset(tmp_path, (8, 8))
    assert len(samples) == 5
    # directories are read in lexicographic order: neg before pos
    assert [s.label for s in samples] == [0, 0, 1, 1, 1]
    assert [s.sample_id for s in samples] == list(range(5))
    assert samples[3].features.shape == (8, 8, 1)
    assert samples[3].features[0, 0, 0] == pytest.approx(50 / 255)


def test_image_folder_resizes_and_rejects_empty_class(tmp_path):
    (tmp_path / "pos").mkdir()
    write_pgm(tmp_path / "pos" / "x.pgm", np.zeros((10, 6)))
    assert load_image_dataset(tmp_path, (4, 4))[0].features.shape == (4, 4, 1)
    (tmp_path / "neg").mkdir()
    with pytest.raises(ConfigurationError):
        load_image_dataset(tmp_path, (4, 4))


def test_image_folder_unknown_class(tmp_path):
    (tmp_path / "maybe").mkdir()
    write_pgm(tmp_path / "maybe" / "x.pgm", np.zeros((4, 4)))
    with pytest.raises(ConfigurationError):
        load_image_dataset(tmp_path, (4, 4))
    assert load_image_dataset(tmp_path, (4, 4), {"maybe": 1})[0].label == 1


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((5, 7, 1)).astype(np.float32)
    np.testing.assert_array_equal(resize_image(img, 5, 7), img)
    const = np.full((3, 3, 1), 0.25)
    for h, w in ((1, 1), (6, 9), (2, 5)):
        assert np.all(resize_image(const, h, w) == 0.25)


def test_resize_ramp_upsample_stays_linear():
    ramp = np.tile(np.arange(4, dtype=np.float64), (4, 1))
    out = resize_image(ramp, 8, 8)[0]
    np.testing.assert_allclose(out, np.arange(8) * 3 / 7, atol=1e-6)


def test_checkerboard_downsample_is_half():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.float64)
    np.testing.assert_allclose(resize_image(board, 2, 2, align_corners=False), 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_resize_matches_oracle_and_stays_in_range(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w))
    out = resize_image(img, oh, ow)
    np.testing.assert_allclose(out, bilinear_corner_aligned(img.tolist(), oh, ow), atol=1e-12)
    assert out.min() >= img.min() and out.max() <= img.max()


def _csv(tmp_path, rows, header=",".join(CSV_HEADER)):
    path = tmp_path / "c.csv"
    path.write_text("\n".join([header] + rows) + "\n")
    return path


def test_csv_parses_reference_rows(tmp_path):
    path = _csv(tmp_path, ["62,Male,175.0,68.20,178,50,83,101.4", "73,Female,144.8,50.45,144,30,100,94"])
    a, b = load_tabular_csv(path)
    np.testing.assert_array_equal(a.features, [62, 1, 175.0, 68.20, 178, 50, 83])
    assert a.label == 101.4
    assert b.features[1] == 0 and b.features[0] == 73


def test_csv_reordered_header(tmp_path):
    header = "Sex,Age,Height,Weight,TC,HDL-C,TG,LDL-C"
    (s,) = load_tabular_csv(_csv(tmp_path, ["Male,62,175.0,68.20,178,50,83,90"], header))
    np.testing.assert_array_equal(s.features[:2], [62, 1])


@pytest.mark.parametrize(
    "row,match",
    [("62,Male,175.0", ":3:"), ("62,Other,175.0,68.2,178,50,83,90", ":3:"), ("62,Male,x,68.2,178,50,83,90", ":3:")],
)
def test_csv_malformed_row_has_line_number(tmp_path, row, match):
    path = _csv(tmp_path, ["62,Male,175.0,68.20,178,50,83,90", row])
    with pytest.raises(DataError, match=match):
        load_tabular_csv(path)


def test_csv_missing_column(tmp_path):
    with pytest.raises(ConfigurationError):
        load_tabular_csv(_csv(tmp_path, [], "Age,Sex,Height,Weight,TC,HDL-C,LDL-C"))


def test_zscore_constant_column_is_zero():
    from splitstream.data import Sample

    samples = [Sample(i, np.array([5.0, float(i)]), 0.0) for i in range(4)]
    z = ZScore.fit(samples)
    out = np.stack([s.features for s in z.apply(samples)])
    assert np.all(out[:, 0] == 0)
    assert abs(out[:, 1].mean()) < 1e-7 and abs(out[:, 1].std() - 1) < 1e-6


def test_synthetic_sets_are_deterministic():
    a, b = generate_classification(40, 3), generate_classification(40, 3)
    assert all(x.features.tobytes() == y.features.tobytes() and x.label == y.label for x, y in zip(a, b))
    assert sum(s.label for s in a) == 20
    assert a[0].features.shape == (16, 16, 1)
    r = generate_regression(500)
    x = np.stack([s.features for s in r])
    assert set(np.unique(x[:, 1])) == {0.0, 1.0}
    assert 20 <= x[:, 0].min() and x[:, 0].max() <= 86
    assert min(s.label for s in r) >= 10


def test_writers_round_trip_through_loaders(tmp_path):
    root = write_classification_dir(tmp_path / "img", 12, 1)
    samples = load_image_dataset(root, (16, 16))
    assert len(samples) == 12 and sum(s.label for s in samples) == 6
    path = write_regression_csv(tmp_path / "tab", 30, 1)
    rows = load_tabular_csv(path)
    ref = generate_regression(30, 1)
    np.testing.assert_allclose([s.features for s in rows], [s.features for s in ref], atol=1e-9)
