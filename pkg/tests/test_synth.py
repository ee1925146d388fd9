"""Scene rendering, the contrast-threshold event model, and grasp synthesis."""

import math

import numpy as np
import pytest

from evtforce.events import slice_window, validate_stream
from evtforce.frames import FrameSpec, frames_from_stream
from evtforce.synth import (
    ForceProfile,
    GripperScene,
    default_fingers,
    events_from_intensity_pair,
    force_to_deflection,
    load_profile,
    make_grasp_profile,
    render_intensity,
    save_profile,
    synthesize_recording,
)

SMALL = GripperScene(width=80, height=60)


class TestSceneAndProfile:
    def test_default_finger_geometry(self):
        top, bottom = default_fingers(320, 240)
        assert top == ((40.0, 60.0), (280.0, 60.0))
        assert bottom == ((40.0, 180.0), (280.0, 180.0))

    def test_scene_defaults(self):
        scene = GripperScene()
        assert (scene.width, scene.height) == (320, 240)
        assert scene.fingers == default_fingers(320, 240)
        assert (scene.delta_max_px, scene.f_max_n, scene.contrast) == (12.0, 1.6, 0.05)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"width": 0},
            {"contrast": 0.0},
            {"contrast": -0.1},
            {"delta_max_px": -1.0},
            {"f_max_n": 0.0},
            {"thickness_px": 0.0},
            {"background": 0.0},
            {"fingers": (((0.0, 0.0),),)},
            {"fingers": (((0.0, 0.0), (320.0, 10.0)),)},
        ],
    )
    def test_scene_validation(self, kwargs):
        with pytest.raises(ValueError):
            GripperScene(**kwargs)

    def test_profile_period(self):
        assert ForceProfile((0.0, 1.0), rate_hz=10.0).period_us == 100_000
        assert ForceProfile((0.0,), rate_hz=40.0).period_us == 25_000

    @pytest.mark.parametrize("samples", [(-0.1,), (math.nan,), (math.inf,)])
    def test_profile_rejects_bad_samples(self, samples):
        with pytest.raises(ValueError):
            ForceProfile(samples, rate_hz=10.0)

    def test_profile_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            ForceProfile((0.0,), rate_hz=0.0)


class TestDeflection:
    def test_linear_endpoints_and_midpoint(self):
        scene = GripperScene()
        assert force_to_deflection(0.0, scene) == 0.0
        assert force_to_deflection(scene.f_max_n, scene) == scene.delta_max_px
        assert force_to_deflection(0.8, scene) == 6.0

    @pytest.mark.parametrize("force", [-0.01, 1.61])
    def test_out_of_range(self, force):
        with pytest.raises(ValueError):
            force_to_deflection(force, GripperScene())


class TestRender:
    def test_deterministic(self):
        a = render_intensity(SMALL, 0.7)
        b = render_intensity(SMALL, 0.7)
        assert np.array_equal(a, b)

    def test_intensities_bounded_and_background_dominates(self):
        img = render_intensity(SMALL, 0.0)
        assert img.shape == (60, 80)
        assert img.min() == SMALL.background
        assert img.max() == SMALL.foreground
        assert img[0, 0] == SMALL.background
        # Pixel on the top finger centerline is fully covered.
        assert img[15, 40] == SMALL.foreground

    def test_tip_moves_by_exactly_delta_max_at_full_force(self):
        scene = GripperScene()
        rest = render_intensity(scene, 0.0)
        full = render_intensity(scene, scene.f_max_n)
        tip_x = 280
        top_half = slice(0, scene.height // 2)

        def lowest_lit_row(img):
            rows = np.nonzero(img[top_half, tip_x] > scene.background)[0]
            return rows.max()

        moved = lowest_lit_row(full) - lowest_lit_row(rest)
        assert moved == scene.delta_max_px

    def test_base_stays_put(self):
        scene = GripperScene()
        rest = render_intensity(scene, 0.0)
        full = render_intensity(scene, scene.f_max_n)
        # The finger base (arc position 0) does not deflect: the base pixel
        # stays fully covered and everything left of it stays background.
        assert rest[60, 40] == full[60, 40] == scene.foreground
        assert np.array_equal(rest[:, :37], full[:, :37])


class TestEventModel:
    # One pixel jumps from intensity 1 to `factor`; with log(prev) == 0 the
    # measured log step is log(factor), so contrasts derived from that value
    # make the quantization count exact in float arithmetic.
    def single_pixel_pair(self, factor=7.0):
        prev = np.ones((4, 6))
        nxt = prev.copy()
        nxt[2, 3] = factor
        return prev, nxt, abs(float(np.log(factor)))

    def test_exact_threshold_fires_once(self):
        prev, nxt, step = self.single_pixel_pair()
        s = events_from_intensity_pair(prev, nxt, 0, 1000, contrast=step)
        assert len(s) == 1
        assert (s.x[0], s.y[0], s.p[0]) == (3, 2, 1)
        assert s.t_us[0] == 1000

    def test_fractional_thresholds_floor(self):
        prev, nxt, step = self.single_pixel_pair()
        s = events_from_intensity_pair(prev, nxt, 0, 1000, contrast=step / 2.5)
        assert len(s) == 2
        assert list(s.t_us) == [500, 1000]

    def test_negative_change_gives_negative_polarity(self):
        prev, nxt, step = self.single_pixel_pair(factor=1.0 / 7.0)
        s = events_from_intensity_pair(prev, nxt, 0, 1000, contrast=step / 1.5)
        assert len(s) == 1 and s.p[0] == -1

    def test_below_threshold_is_silent(self):
        prev, nxt, step = self.single_pixel_pair()
        s = events_from_intensity_pair(prev, nxt, 0, 1000, contrast=step * 1.0001)
        assert len(s) == 0

    def test_identical_images_are_silent(self):
        img = np.full((4, 6), 123.0)
        assert len(events_from_intensity_pair(img, img, 0, 1000, 0.1)) == 0

    def test_timestamps_evenly_spaced_over_half_open_interval(self):
        prev, nxt, step = self.single_pixel_pair()
        s = events_from_intensity_pair(prev, nxt, 2000, 3000, contrast=step / 4)
        assert list(s.t_us) == [2250, 2500, 2750, 3000]

    def test_stream_valid_and_in_window(self, rng):
        for _ in range(10):
            prev = rng.uniform(50.0, 200.0, size=(20, 30))
            nxt = rng.uniform(50.0, 200.0, size=(20, 30))
            s = events_from_intensity_pair(prev, nxt, 100, 600, 0.2)
            assert validate_stream(s).ok
            if len(s):
                assert s.t_us.min() > 100
                assert s.t_us.max() <= 600

    def test_doubling_contrast_never_adds_events(self, rng):
        for _ in range(10):
            prev = rng.uniform(50.0, 200.0, size=(16, 16))
            nxt = rng.uniform(50.0, 200.0, size=(16, 16))
            lo = events_from_intensity_pair(prev, nxt, 0, 100, 0.05)
            hi = events_from_intensity_pair(prev, nxt, 0, 100, 0.10)
            assert len(hi) <= len(lo)

    def test_input_validation(self):
        img = np.full((4, 4), 10.0)
        with pytest.raises(ValueError):
            events_from_intensity_pair(img, np.full((4, 5), 10.0), 0, 1, 0.1)
        with pytest.raises(ValueError):
            events_from_intensity_pair(img, img * 0.0, 0, 1, 0.1)
        with pytest.raises(ValueError):
            events_from_intensity_pair(img, img, 5, 5, 0.1)
        with pytest.raises(ValueError):
            events_from_intensity_pair(img, img, 0, 1, 0.0)


class TestGraspProfile:
    def test_monotone_and_pinned(self):
        p = make_grasp_profile(41, 1.6, seed=3)
        assert len(p.samples) == 41
        assert p.samples[0] == 0.0
        assert p.samples[-1] == 1.6
        assert all(b >= a for a, b in zip(p.samples, p.samples[1:]))

    def test_seeded(self):
        assert make_grasp_profile(10, 1.6, seed=4) == make_grasp_profile(10, 1.6, seed=4)
        assert make_grasp_profile(10, 1.6, seed=4) != make_grasp_profile(10, 1.6, seed=5)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            make_grasp_profile(1, 1.6)


class TestSynthesize:
    def test_constant_zero_profile_is_silent(self):
        profile = ForceProfile((0.0, 0.0, 0.0), rate_hz=10.0)
        stream, _ = synthesize_recording(SMALL, profile)
        assert len(stream) == 0
        assert (stream.width, stream.height) == (80, 60)

    def test_deterministic(self):
        profile = make_grasp_profile(4, SMALL.f_max_n, seed=2)
        a, _ = synthesize_recording(SMALL, profile, substeps_per_sample=2)
        b, _ = synthesize_recording(SMALL, profile, substeps_per_sample=2)
        assert a == b

    def test_windows_into_one_frame_per_sample_interval(self):
        profile = make_grasp_profile(5, SMALL.f_max_n, seed=1)
        stream, _ = synthesize_recording(SMALL, profile)
        spec = FrameSpec(window_us=profile.period_us, mode="count",
                         out_size=None, normalize=False)
        frames = frames_from_stream(stream, spec)
        assert len(frames) == len(profile.samples) - 1
        assert all(f.data.sum() > 0 for f in frames)

    def test_polarity_matches_rendered_intensity_change(self):
        profile = make_grasp_profile(4, SMALL.f_max_n, seed=6)
        stream, _ = synthesize_recording(SMALL, profile, substeps_per_sample=1)
        period = profile.period_us
        for k in range(len(profile.samples) - 1):
            prev = render_intensity(SMALL, profile.samples[k])
            nxt = render_intensity(SMALL, profile.samples[k + 1])
            delta = np.log(nxt) - np.log(prev)
            win = slice_window(stream, k * period + 1, (k + 1) * period + 1)
            assert len(win) > 0
            signs = np.sign(delta[win.y, win.x])
            assert np.array_equal(signs, win.p)

    def test_returns_profile_as_labels(self):
        profile = make_grasp_profile(4, SMALL.f_max_n, seed=7)
        _, track = synthesize_recording(SMALL, profile)
        assert track == profile

    def test_noise_is_seeded_and_additive(self):
        profile = ForceProfile((0.0, 0.0), rate_hz=10.0)
        clean, _ = synthesize_recording(SMALL, profile)
        noisy1, _ = synthesize_recording(SMALL, profile, noise_rate_hz=5000.0, seed=9)
        noisy2, _ = synthesize_recording(SMALL, profile, noise_rate_hz=5000.0, seed=9)
        other, _ = synthesize_recording(SMALL, profile, noise_rate_hz=5000.0, seed=10)
        assert noisy1 == noisy2
        assert noisy1 != other
        assert len(noisy1) > len(clean)
        assert validate_stream(noisy1).ok
        assert noisy1.t_us.max() < 100_000

    def test_argument_validation(self):
        profile = ForceProfile((0.0, 1.0), rate_hz=10.0)
        with pytest.raises(ValueError):
            synthesize_recording(SMALL, profile, substeps_per_sample=0)
        with pytest.raises(ValueError):
            synthesize_recording(SMALL, profile, noise_rate_hz=-1.0)


class TestProfileFiles:
    def test_round_trip(self, tmp_path):
        p = make_grasp_profile(6, 1.6, seed=12)
        path = tmp_path / "track.json"
        save_profile(p, path)
        assert load_profile(path) == p

    def test_malformed_track(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"rate_hz": 10.0}\n')
        with pytest.raises(ValueError):
            load_profile(path)
