import numpy as np
import pytest

from tractfeat import FormatError, ValidationError
from tractfeat.field import (
    NPK1_MAGIC,
    OdfField,
    PhantomSpec,
    interpolate_direction,
    load_field,
    make_phantom,
    save_field,
)
from tractfeat.volume import GridSpec, Volume, voxel_to_world


def straight_field(dims=(10, 10, 10), voxel=1.0, qa=1.0, axis=(1, 0, 0)):
    return make_phantom(PhantomSpec("straight", dims=dims, voxel_size=(voxel,) * 3,
                                    qa_value=qa, axis=axis))


def test_straight_phantom_all_peaks_along_axis():
    f = straight_field()
    assert f.max_peaks == 1
    assert np.all(f.peak_count == 1)
    assert np.allclose(f.peak_dirs[..., 0, :], [1, 0, 0])
    assert np.allclose(f.peak_qa[..., 0], 1.0)
    assert np.all(f.brain_mask.data == 1)


def test_arc_tangent_matches_circle_geometry():
    spec = PhantomSpec("arc", dims=(50, 50, 5), voxel_size=(1, 1, 1), radius=20.0,
                       center=(24.0, 24.0, 2.0), plane="xy", halfwidth_mm=1.0)
    f = make_phantom(spec)
    # voxel whose centre sits at centre + (radius, 0, 0)
    d = f.peak_dirs[44, 24, 2, 0]
    assert f.peak_count[44, 24, 2] == 1
    assert min(np.linalg.norm(d - [0, 1, 0]), np.linalg.norm(d + [0, 1, 0])) < 1e-6
    # annulus: a voxel far off the radius carries no peak
    assert f.peak_count[24, 24, 2] == 0


def test_crossing_overlap_has_two_peaks():
    spec = PhantomSpec("crossing", dims=(16, 16, 16), voxel_size=(1, 1, 1),
                       halfwidth_mm=2.0)
    f = make_phantom(spec)
    c = np.asarray(f.peak_count)
    assert f.max_peaks == 2
    assert c[7, 7, 7] == 2          # overlap of both bundles
    assert c[0, 7, 7] == 1          # only the x bundle
    assert c[7, 0, 7] == 1          # only the y bundle
    assert c[0, 0, 0] == 0
    assert np.array_equal(f.brain_mask.data != 0, c > 0)


def test_crossing_parallel_axes_rejected():
    with pytest.raises(ValidationError):
        PhantomSpec("crossing", axes=((1, 0, 0), (-1, 0, 0)))


def test_arc_radius_must_exceed_voxel():
    with pytest.raises(ValidationError):
        PhantomSpec("arc", voxel_size=(1, 1, 1), radius=0.5)


def test_peaks_sorted_by_descending_qa():
    grid = GridSpec.from_spacing((1, 1, 1), (1, 1, 1))
    dirs = np.zeros((1, 1, 1, 2, 3))
    dirs[0, 0, 0, 0] = [1, 0, 0]
    dirs[0, 0, 0, 1] = [0, 1, 0]
    qa = np.array([0.2, 0.9]).reshape(1, 1, 1, 2)
    mask = Volume(grid, np.ones((1, 1, 1)), kind="mask")
    f = OdfField(grid, dirs, qa, np.full((1, 1, 1), 2, np.uint8), mask)
    assert np.allclose(f.peak_qa[0, 0, 0], [0.9, 0.2])
    assert np.allclose(f.peak_dirs[0, 0, 0, 0], [0, 1, 0])


def test_roundtrip_straight_phantom(tmp_path):
    f = straight_field(dims=(4, 4, 4), qa=0.7)
    path = tmp_path / "f.npk"
    save_field(f, path)
    g = load_field(path)
    assert g.grid.dims == f.grid.dims
    assert np.allclose(g.grid.affine, f.grid.affine)
    assert np.array_equal(g.peak_count, f.peak_count)
    assert np.allclose(g.peak_dirs, f.peak_dirs, atol=1e-6)
    assert np.allclose(g.peak_qa, f.peak_qa, atol=1e-6)
    assert np.array_equal(g.brain_mask.data, f.brain_mask.data)


def test_roundtrip_mixed_peak_counts(tmp_path):
    spec = PhantomSpec("crossing", dims=(12, 12, 12), voxel_size=(1, 1, 1),
                       halfwidth_mm=2.0, qa_value=0.4)
    f = make_phantom(spec)
    path = tmp_path / "x.npk"
    save_field(f, path)
    g = load_field(path)
    assert np.array_equal(g.peak_count, f.peak_count)
    assert np.allclose(g.peak_dirs, f.peak_dirs, atol=1e-6)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "bad.npk"
    path.write_bytes(b"JUNK" + b"\x00" * 200)
    with pytest.raises(FormatError):
        load_field(path)


def test_load_bad_version(tmp_path):
    f = straight_field(dims=(2, 2, 2))
    path = tmp_path / "v.npk"
    save_field(f, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = np.array([9], "<u4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_field(path)


def test_load_zero_direction_is_validation_error(tmp_path):
    f = straight_field(dims=(2, 2, 2))
    path = tmp_path / "z.npk"
    save_field(f, path)
    raw = bytearray(path.read_bytes())
    # first voxel record: count byte at 164, then dir[3] float32
    raw[165:177] = np.zeros(3, "<f4").tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        load_field(path)


def test_interpolate_uniform_field_returns_axis():
    f = straight_field(qa=0.8)
    got = interpolate_direction(f, (4.3, 5.1, 4.9), (1, 0, 0), 0.15958, 90.0)
    assert got is not None
    d, q = got
    assert np.allclose(d, [1, 0, 0], atol=1e-12)
    assert abs(q - 0.8) < 1e-12


def test_interpolate_antipodal_alignment():
    f = straight_field(qa=0.8)
    d, q = interpolate_direction(f, (4.3, 5.1, 4.9), (-1, 0, 0), 0.15958, 90.0)
    assert np.allclose(d, [-1, 0, 0], atol=1e-12)


def test_interpolate_qa_threshold_terminates():
    f = straight_field(qa=0.1)
    assert interpolate_direction(f, (5, 5, 5), (1, 0, 0), 0.15958, 90.0) is None


def test_interpolate_outside_grid_terminates():
    f = straight_field()
    assert interpolate_direction(f, (500, 500, 500), (1, 0, 0), 0.1, 90.0) is None


def test_interpolate_exact_center_returns_best_peak():
    grid = GridSpec.from_spacing((3, 3, 3), (1, 1, 1))
    rng = np.random.default_rng(3)
    dirs = rng.normal(size=(3, 3, 3, 2, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    qa = rng.uniform(0.5, 1.0, size=(3, 3, 3, 2))
    mask = Volume(grid, np.ones((3, 3, 3)), kind="mask")
    f = OdfField(grid, dirs, qa, np.full((3, 3, 3), 2, np.uint8), mask)
    prev = np.array([0.0, 0.0, 1.0])
    got = interpolate_direction(f, voxel_to_world(grid, (1, 1, 1)), prev, 0.0, 90.0)
    assert got is not None
    d, q = got
    cand = f.peak_dirs[1, 1, 1]
    dots = cand @ prev
    best = int(np.argmax(np.abs(dots)))
    expect = cand[best] * np.sign(dots[best])
    assert np.allclose(d, expect, atol=1e-12)
    assert abs(q - f.peak_qa[1, 1, 1, best]) < 1e-12


def test_interpolate_unit_norm_and_angle_property():
    spec = PhantomSpec("crossing", dims=(14, 14, 14), voxel_size=(1, 1, 1),
                       halfwidth_mm=3.0)
    f = make_phantom(spec)
    rng = np.random.default_rng(11)
    ang = 60.0
    cos_thr = np.cos(np.radians(ang))
    hits = 0
    for _ in range(300):
        p = rng.uniform(2, 11, size=3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        got = interpolate_direction(f, p, d, 0.15958, ang)
        if got is None:
            continue
        hits += 1
        out, q = got
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6
        assert out @ d >= cos_thr - 1e-9
        assert q >= 0.15958
    assert hits > 50


def test_constant_field_is_fixed_point():
    f = straight_field(dims=(8, 8, 8), axis=(0, 0, 1))
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = rng.uniform(1, 6, size=3)
        d, q = interpolate_direction(f, p, (0, 0, 1), 0.15958, 90.0)
        assert np.allclose(d, [0, 0, 1], atol=1e-12)
