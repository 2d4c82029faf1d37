import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamfield.geometry import CameraRig, make_forward_facing_rig, project_point
from streamfield.projcolor import (
    EMPTY_MEAN,
    EMPTY_VARIANCE,
    bilinear_sample,
    projected_color_stats,
    projected_color_stats_batch,
)
from streamfield.scene import FrameObservation


def explicit_bilinear(img, u, v):
    """Four-weight formula with edge clamping, written out per corner."""
    h, w = img.shape[:2]
    x, y = u - 0.5, v - 0.5
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    ax, ay = x - x0, y - y0
    out = np.zeros(img.shape[2])
    for dx, wx in ((0, 1 - ax), (1, ax)):
        for dy, wy in ((0, 1 - ay), (1, ay)):
            xi = min(max(x0 + dx, 0), w - 1)
            yi = min(max(y0 + dy, 0), h - 1)
            out += wx * wy * img[yi, xi]
    return out


def test_bilinear_lattice_and_midpoint(rng):
    img = rng.random((6, 7, 3))
    np.testing.assert_allclose(bilinear_sample(img, [3.5, 2.5]), img[2, 3])
    np.testing.assert_allclose(bilinear_sample(img, [4.0, 3.0]), img[2:4, 3:5].reshape(-1, 3).mean(0))


def test_bilinear_vs_explicit(rng):
    img = rng.random((9, 11, 3))
    uv = np.c_[rng.uniform(0, 11, 500), rng.uniform(0, 9, 500)]
    got = bilinear_sample(img, uv)
    want = np.array([explicit_bilinear(img, u, v) for u, v in uv])
    np.testing.assert_allclose(got, want, atol=1e-7)


def test_bilinear_out_of_bounds(rng):
    img = rng.random((4, 4, 3))
    for uv in ([-0.01, 1], [4.0, 1], [1, 4.0]):
        with pytest.raises(ValueError):
            bilinear_sample(img, uv)


@pytest.fixture(scope="module")
def rig():
    return make_forward_facing_rig(3, 4, 40.0, width=16, height=16)


def frame_of(rig, fn):
    return FrameObservation(0, {c.id: fn(i, c) for i, c in enumerate(rig.train_cameras)})


def test_constant_colour(rig):
    frame = frame_of(rig, lambda i, c: np.full((16, 16, 3), [0.2, 0.5, 0.7]))
    s = projected_color_stats([0.5, 0.5, 0.5], frame, rig)
    np.testing.assert_allclose(s.mean, [0.2, 0.5, 0.7], atol=1e-15)
    np.testing.assert_allclose(s.variance, 0, atol=1e-15)
    assert s.valid_count == 12


def test_two_camera_population_variance():
    full = make_forward_facing_rig(1, 2, 30.0, width=16, height=16)
    frame = frame_of(full, lambda i, c: np.full((16, 16, 3), float(i)))
    s = projected_color_stats([0.5, 0.5, 0.5], frame, full)
    np.testing.assert_allclose(s.mean, [0.5] * 3)
    np.testing.assert_allclose(s.variance, [0.25] * 3)


def test_no_valid_camera_sentinel(rig):
    frame = frame_of(rig, lambda i, c: np.ones((16, 16, 3)))
    s = projected_color_stats([0.5, 0.5, -5.0], frame, rig)  # behind every camera
    assert s.valid_count == 0
    np.testing.assert_array_equal(s.mean, EMPTY_MEAN)
    np.testing.assert_array_equal(s.variance, EMPTY_VARIANCE)


def test_missing_image(rig):
    frame = FrameObservation(0, {rig.train_cameras[0].id: np.zeros((16, 16, 3))})
    with pytest.raises(KeyError):
        projected_color_stats([0.5, 0.5, 0.5], frame, rig)


def enumerate_stats(x, images, rig):
    """Brute force: loop over cameras, keep valid projections, population moments."""
    samples = []
    for cam in rig.train_cameras:
        p = project_point(cam, x)
        if p["valid"]:
            samples.append(explicit_bilinear(images[cam.id], *p["uv"]))
    if not samples:
        return np.zeros(3), np.ones(3), 0
    s = np.array(samples)
    return s.mean(0), ((s - s.mean(0)) ** 2).mean(0), len(s)


def test_partial_frusta_vs_enumeration(rig, rng):
    images = {c.id: rng.random((16, 16, 3)) for c in rig.train_cameras}
    pts = rng.uniform(-0.6, 1.6, (300, 3))
    batch = projected_color_stats_batch(pts, images, rig)
    counts = set()
    for i, x in enumerate(pts):
        mean, var, n = enumerate_stats(x, images, rig)
        counts.add(n)
        assert batch.valid_count[i] == n
        np.testing.assert_allclose(batch.mean[i], mean, atol=1e-12)
        np.testing.assert_allclose(batch.variance[i], var, atol=1e-12)
    assert 0 in counts and 12 in counts and len(counts) > 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_stats_properties(seed):
    rng = np.random.default_rng(seed)
    full = make_forward_facing_rig(2, 3, 40.0, width=12, height=12)
    images = {c.id: rng.random((12, 12, 3)) for c in full.train_cameras}
    pts = rng.uniform(0, 1, (20, 3))
    a = projected_color_stats_batch(pts, images, full)
    perm = rng.permutation(len(full.train_cameras))
    shuffled = CameraRig([full.train_cameras[i] for i in perm], full.test_cameras)
    b = projected_color_stats_batch(pts, images, shuffled)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.variance, b.variance, atol=1e-12)
    assert np.all(a.variance >= 0)
    has = a.valid_count > 0
    assert np.all((a.mean[has] >= 0) & (a.mean[has] <= 1))
    assert np.all(a.valid_count <= len(full.train_cameras))


def test_static_frames_give_identical_stats(rig, rng):
    images = {c.id: rng.random((16, 16, 3)) for c in rig.train_cameras}
    pts = rng.uniform(0, 1, (50, 3))
    a = projected_color_stats_batch(pts, FrameObservation(0, images).images, rig)
    b = projected_color_stats_batch(pts, FrameObservation(7, dict(images)).images, rig)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.variance, b.variance)
