import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segdec.dataset import (CURB, LANES, ROAD, IngestionError, SceneParams, LabelError, class_shares, generate_scene, load_pair,
                            make_split, read_manifest, write_pgm, write_ppm, write_samples)
from segdec.tensor import GeometryError


def test_generator_is_deterministic():
    a, b = generate_scene(11), generate_scene(11)
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert generate_scene(12).mask.tobytes() != a.mask.tobytes()


def test_seed_zero_sample():
    s = generate_scene(0, 48, 160)
    assert s.image.shape == (1, 3, 48, 160) and s.mask.shape == (48, 160)
    assert set(np.unique(s.mask)) <= {0, 1, 2, 3}
    assert class_shares(s.mask)[LANES] <= 0.05
    assert 0.0 <= s.image.data.min() and s.image.data.max() <= 1.0


def test_envelope_holds_for_1000_seeds():
    for seed in range(1000):
        m = generate_scene(seed).mask
        s = class_shares(m)
        assert 0.30 <= s[ROAD] <= 0.70, seed
        assert s[LANES] <= 0.05 and s[CURB] <= 0.05, seed
        assert len(np.unique(m)) >= 2, seed


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), h=st.sampled_from([32, 48, 64, 96]), w=st.sampled_from([96, 160, 320]))
def test_envelope_other_resolutions(seed, h, w):
    s = class_shares(generate_scene(seed, h, w).mask)
    assert 0.30 <= s[ROAD] <= 0.70 and s[LANES] <= 0.05 and s[CURB] <= 0.05


def test_thin_structures_have_bounded_width():
    for seed in range(50):
        m = generate_scene(seed).mask
        for row in m:
            runs = np.diff(np.flatnonzero(np.diff(np.r_[0, row == CURB, 0])))[::2]
            assert runs.size == 0 or runs.max() <= 2
        # a lane stripe never exceeds 3 px within a row (adjacent stripes are kept apart)
        for row in m:
            runs = np.diff(np.flatnonzero(np.diff(np.r_[0, row == LANES, 0])))[::2]
            assert runs.size == 0 or runs.max() <= 3


def test_constant_width_variant():
    sp = SceneParams(taper=False, lane_px=(3, 3), curb_px=(2, 2), lanes=(2, 2), lane_jitter=0.0)
    m = generate_scene(3, params=sp).mask
    near = m[-1]
    lane_runs = np.diff(np.flatnonzero(np.diff(np.r_[0, near == LANES, 0])))[::2]
    assert list(lane_runs) == [3, 3]
    assert make_split(2, 1, 1, seed=3, params=sp).train[0].mask.tobytes() == generate_scene(3_000_009, params=sp).mask.tobytes()


@pytest.mark.parametrize("bad", [dict(curb_px=(1, 3)), dict(lane_px=(0, 2)), dict(lanes=(2, 4))])
def test_scene_params_limits(bad):
    with pytest.raises(ValueError):
        SceneParams(**bad)


def test_indivisible_size():
    with pytest.raises(GeometryError):
        generate_scene(0, 50, 160)


def test_split_is_disjoint_and_reproducible():
    split = make_split(5, 3, 2, seed=7)
    ids = split.ids["train"] + split.ids["val"] + split.ids["test"]
    assert len(set(ids)) == 10
    again = make_split(5, 3, 2, seed=7)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(split.val, again.val))
    big = make_split(3016, 981, 1002, lazy=True)
    assert [len(v) for v in big.ids.values()] == [3016, 981, 1002]
    with pytest.raises(ValueError):
        make_split(0, 1, 1)


def test_split_of_300_50_50():
    split = make_split(300, 50, 50, seed=7, lazy=True)
    assert len(set(sum(split.ids.values(), []))) == 400


# --- netpbm ------------------------------------------------------------------------

def test_tiny_pair_is_all_void(tmp_path):
    (tmp_path / "i.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(range(12)))
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    s = load_pair(tmp_path / "i.ppm", tmp_path / "m.pgm")
    assert s.image.shape == (1, 3, 2, 2)
    assert s.image.data[0, 1, 0, 0] == pytest.approx(1 / 255)
    assert not s.mask.any()


def test_header_comments(tmp_path):
    (tmp_path / "i.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 0]))
    (tmp_path / "m.pgm").write_bytes(b"P5 1 1 255\n" + bytes([3]))
    s = load_pair(tmp_path / "i.ppm", tmp_path / "m.pgm")
    assert s.image.data[0, :, 0, 0].tolist() == [1.0, 0.0, 0.0] and s.mask[0, 0] == 3


def test_label_error_lists_value_and_position(tmp_path):
    (tmp_path / "i.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes([0, 0, 0, 7]))
    with pytest.raises(LabelError, match=r"label 7 .*row 1, col 1"):
        load_pair(tmp_path / "i.ppm", tmp_path / "m.pgm")


def test_dimension_mismatch(tmp_path):
    (tmp_path / "i.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    (tmp_path / "m.pgm").write_bytes(b"P5\n3 2\n255\n" + bytes(6))
    with pytest.raises(IngestionError):
        load_pair(tmp_path / "i.ppm", tmp_path / "m.pgm")


@pytest.mark.parametrize("raw", [b"P3\n1 1\n255\n000", b"P6\n2 2\n255\n" + bytes(5), b"P6\nx 1\n255\n"])
def test_malformed_images(tmp_path, raw):
    (tmp_path / "i.ppm").write_bytes(raw)
    (tmp_path / "m.pgm").write_bytes(b"P5\n1 1\n255\n" + bytes(1))
    with pytest.raises(IngestionError):
        load_pair(tmp_path / "i.ppm", tmp_path / "m.pgm")


def test_write_and_reload_matches_generator(tmp_path):
    samples = [generate_scene(s) for s in range(3)]
    manifest = write_samples(samples, tmp_path)
    loaded = read_manifest(manifest)
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.mask, b.mask)
        # 8-bit quantization
        assert np.abs(a.image.data - b.image.data).max() <= 0.5 / 255 + 1e-12


def test_ppm_pgm_writers_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 4, 5)) / 255
    mask = np.random.default_rng(1).integers(0, 4, (4, 5)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    write_pgm(tmp_path / "a.pgm", mask)
    s = load_pair(tmp_path / "a.ppm", tmp_path / "a.pgm")
    np.testing.assert_allclose(s.image.data[0], img, atol=1e-12)
    assert np.array_equal(s.mask, mask)
