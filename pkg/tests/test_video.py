import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from meshalign.camera import Camera
from meshalign.scenes import filter_fixture, orbit_cameras, sphere_capture, sphere_mask
from meshalign.video import (LOW_VIEWPOINT_VARIANCE, N_VIEW_BINS, TOO_CLOSE, TOO_FAR, DegenerateGeometryError,
                             FilterConfig, Frame, VideoCaptureSet, average_visibility, bin_representatives,
                             center_focus_fraction, center_in_focus, filter_video, load_capture_set,
                             triangulate_center, view_bin, viewpoint_coverage, write_capture_set)

seeds = st.integers(0, 2 ** 32 - 1)


def _captures(cams):
    return VideoCaptureSet(tuple(Frame(c, np.zeros((c.height, c.width), bool)) for c in cams))


def test_filter_defaults_are_the_published_constants():
    cfg = FilterConfig()
    assert (cfg.min_visibility, cfg.focus_rect_fraction, cfg.min_focus_fraction, cfg.min_coverage) == \
        (0.10, 0.60, 0.80, 0.15)
    assert N_VIEW_BINS == 38


def test_average_visibility_weights_frames_equally():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], [0, 1, 0], 50, 4, 4)
    full = np.ones((4, 4), bool)
    quarter = np.zeros((4, 4), bool)
    quarter[:2, :2] = True
    assert average_visibility(VideoCaptureSet((Frame(cam, full), Frame(cam, quarter)))) == 0.625


def test_frame_mask_shape_is_checked():
    cam = Camera.look_at([0, 0, -3.0], [0, 0, 0], [0, 1, 0], 50, 4, 4)
    with pytest.raises(ValueError):
        Frame(cam, np.zeros((3, 4), bool))
    with pytest.raises(ValueError):
        VideoCaptureSet((Frame(cam, np.zeros((4, 4))),))


@given(seeds)
def test_triangulation_recovers_a_point_all_cameras_look_at(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=3)
    eyes = target + rng.normal(size=(6, 3)) * 4
    cams = [Camera.look_at(e, target, [0.3, 0.2, 1.0], 50, 8, 8) for e in eyes]
    for form in ("projected", "literal"):
        try:
            c = triangulate_center(_captures(cams), form)
        except DegenerateGeometryError:
            continue
        if form == "projected":
            assert np.allclose(c, target, atol=1e-8)


@given(seeds)
def test_triangulation_minimizes_summed_ray_distances(seed):
    rng = np.random.default_rng(seed)
    eyes = rng.normal(size=(5, 3)) * 5
    targets = rng.normal(size=(5, 3))
    cams = [Camera.look_at(e, t, [0.1, 0.3, 1.0], 50, 8, 8) for e, t in zip(eyes, targets)]

    def cost(x):  # squared distance from x to each optical-axis line
        total = 0.0
        for cam in cams:
            d = x - cam.center
            along = d @ cam.optical_axis
            total += d @ d - along * along
        return total

    c = triangulate_center(_captures(cams))
    best = minimize(cost, np.zeros(3), method="BFGS", options={"gtol": 1e-12}).x
    assert cost(c) <= cost(best) + 1e-9


def test_parallel_axes_are_degenerate():
    cams = [Camera.look_at([x, 0, -5.0], [x, 0, 0], [0, 1, 0], 50, 8, 8) for x in (0.0, 1.0, 2.0)]
    with pytest.raises(DegenerateGeometryError):
        triangulate_center(_captures(cams))


def test_center_in_focus_rectangle_edges():
    cam = Camera.look_at([0, 0, -10.0], [0, 0, 0], [0, 1, 0], 100, 100, 100)
    # principal point (49.5, 49.5); rectangle is |u - 50| <= 30
    assert center_in_focus(cam, [0, 0, 0])
    inside = (79.9 - 49.5) / 100 * 10
    outside = (80.1 - 49.5) / 100 * 10
    assert center_in_focus(cam, [inside, 0, 0]) and not center_in_focus(cam, [outside, 0, 0])
    assert not center_in_focus(cam, [0, 0, -20.0])  # behind


def test_view_bins_match_an_explicit_partition():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(2000, 3))
    got = view_bin(d)
    for vec, b in zip(d, got):
        lat = math.degrees(math.asin(vec[2] / np.linalg.norm(vec)))
        az = math.degrees(math.atan2(vec[1], vec[0])) % 360
        if lat < -60:
            want = 0
        elif lat >= 60:
            want = 37
        else:
            want = 1 + int((lat + 60) // 30) * 9 + int(az // 40)
        assert b == want
    assert sorted(view_bin(bin_representatives()).tolist()) == list(range(38))


def test_viewpoint_coverage_of_a_ring_is_one_band():
    cams = orbit_cameras(36, 3.0, elevation_deg=20.0)
    assert viewpoint_coverage(_captures(cams), np.zeros(3)) == pytest.approx(9 / 38)


@pytest.mark.parametrize("kind,reason", [("too_far", TOO_FAR), ("too_close", TOO_CLOSE),
                                         ("low_variance", LOW_VIEWPOINT_VARIANCE)])
def test_each_fixture_fails_for_exactly_its_reason(kind, reason):
    rep = filter_video(filter_fixture(kind))
    assert rep.reject_reasons == [reason]


def test_good_fixture_passes():
    rep = filter_video(filter_fixture("good"))
    assert rep.accepted and rep.reject_reasons == []
    assert np.allclose(rep.center_3d, 0, atol=1e-9)


def test_checks_can_be_switched_off():
    rep = filter_video(filter_fixture("too_far"), FilterConfig(check_visibility=False))
    assert rep.accepted


def test_degenerate_center_is_reported_as_low_variance():
    cams = [Camera.look_at([x, 0, -5.0], [x, 0, 0], [0, 1, 0], 50, 8, 8) for x in (0.0, 1.0)]
    v = VideoCaptureSet(tuple(Frame(c, np.ones((8, 8), bool)) for c in cams))
    rep = filter_video(v)
    assert rep.reject_reasons == [LOW_VIEWPOINT_VARIANCE] and rep.center_3d is None


def test_sphere_mask_matches_projected_radius():
    cam = Camera.look_at([0, 0, -4.0], [0, 0, 0], [0, 1, 0], 100, 101, 101)
    m = sphere_mask(cam, np.zeros(3), 1.0)
    # silhouette radius in pixels: f * r / sqrt(d^2 - r^2)
    r_pix = 100 / math.sqrt(15)
    assert abs(m.sum() - math.pi * r_pix ** 2) < 2 * math.pi * r_pix  # within one boundary ring


def test_capture_set_round_trip(tmp_path):
    cap = sphere_capture(4, width=16, height=16, focal=10, video_id="ball")
    grids = [np.ones((4, 4, 2)) / np.sqrt(2)] * 4
    path = write_capture_set(tmp_path / "ball", cap, grids)
    back = load_capture_set(path)
    assert back.video_id == "ball" and len(back) == 4
    for a, b in zip(back.frames, cap.frames):
        assert np.array_equal(a.mask, b.mask)
        assert np.allclose(a.camera.projection_matrix(), b.camera.projection_matrix())
    assert (tmp_path / "ball" / "features" / "0003.nmfg").exists()


def test_focus_fraction_of_orbit_looking_at_center_is_one():
    cap = sphere_capture(8, width=32, height=32, focal=20)
    assert center_focus_fraction(cap, np.zeros(3)) == 1.0
