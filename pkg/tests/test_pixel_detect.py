import numpy as np
import pytest

from ver import dynamics, pixel_detect as pd
from ver.errors import DetectionFailedError, InvalidArgumentError


def _render(system="Linear", n=50, resolution=(200, 200), radius=6.0):
    sc = dynamics.default_scenario(system)
    spec = dynamics.builtin_system(system)
    traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, n)
    seq = dynamics.render_pixel_video(traj, resolution=resolution,
                                      object_radius=radius,
                                      world_bounds=sc.world_bounds)
    return traj, seq


class TestOverlay:
    def test_gridline_counts(self):
        frame = np.zeros((500, 500))
        out = pd.overlay_measurement(frame, pd.AxesSpec(n_ticks=10,
                                                        with_labels=False))
        on = out > 0
        # borders plus one full line per tick in each direction
        full_cols = np.nonzero(on.all(axis=0))[0]
        full_rows = np.nonzero(on.all(axis=1))[0]
        assert len([c for c in full_cols if c not in (0, 499)]) == 10
        assert len([r for r in full_rows if r not in (0, 499)]) == 10

    def test_original_untouched(self):
        frame = np.zeros((100, 100))
        pd.overlay_measurement(frame, pd.AxesSpec(n_ticks=4))
        assert not frame.any()

    def test_double_overlay_allowed(self):
        frame = np.zeros((100, 100))
        once = pd.overlay_measurement(frame, pd.AxesSpec(n_ticks=4))
        pd.overlay_measurement(once, pd.AxesSpec(n_ticks=4))

    def test_tick_spacing_too_small(self):
        frame = np.zeros((30, 30))
        with pytest.raises(InvalidArgumentError):
            pd.overlay_measurement(frame, pd.AxesSpec(n_ticks=20))

    def test_overlay_crop_commutes_with_transform(self):
        # oracle: gridline columns must land where the crop transform says
        frame = np.zeros((200, 200))
        spec = pd.AxesSpec(n_ticks=4, with_labels=False)
        overlaid = pd.overlay_measurement(frame, spec)
        crop, tf = pd.crop_quadrant(overlaid, 1)
        full_xs = [round((i + 1) * 200 / 5) for i in range(4)]
        expected = [tf.to_crop((x, 0))[0] for x in full_xs if x >= 100]
        cols = np.nonzero((crop > 0).all(axis=0))[0]
        for x in expected:
            assert np.min(np.abs(cols - x)) <= 1.0


class TestCropQuadrant:
    def test_point_round_trip(self):
        frame = np.zeros((500, 500))
        crop, tf = pd.crop_quadrant(frame, 1)
        assert pd.quadrant_of_point(frame.shape, (400, 100)) == 1
        local = tf.to_crop((400.0, 100.0))
        assert 0 <= local[0] < crop.shape[1] and 0 <= local[1] < crop.shape[0]
        back = tf.to_full(local)
        assert back == (400.0, 100.0)

    def test_quadrant_five_rejected(self):
        with pytest.raises(InvalidArgumentError):
            pd.crop_quadrant(np.zeros((10, 10)), 5)

    def test_transform_inverse_identity(self, rng):
        _, tf = pd.crop_quadrant(np.zeros((100, 100)), 3)
        for _ in range(20):
            p = tuple(rng.uniform(0, 100, size=2))
            q = tf.to_full(tf.to_crop(p))
            assert abs(q[0] - p[0]) < 1e-12 and abs(q[1] - p[1]) < 1e-12

    def test_upscale_factor(self):
        crop, _ = pd.crop_quadrant(np.zeros((100, 100)), 2)
        assert crop.shape == (100, 100)

    def test_quadrant_layout(self):
        f = np.zeros((100, 100))
        f[10, 90] = 1.0  # top right
        crop, _ = pd.crop_quadrant(f, 1)
        assert crop.max() == 1.0
        crop, _ = pd.crop_quadrant(f, 3)
        assert crop.max() == 0.0


class TestReplayMarker:
    def test_marker_changes_target_pixels(self):
        frame = np.zeros((500, 500))
        out, clipped = pd.replay_marker(frame, (250, 250))
        assert out[250, 250] != 0
        assert not clipped

    def test_pixels_outside_radius_preserved(self, rng):
        frame = rng.standard_normal((100, 100))
        out, _ = pd.replay_marker(frame, (50, 50), radius=4.0)
        ys, xs = np.indices(frame.shape)
        far = np.sqrt((xs - 50) ** 2 + (ys - 50) ** 2) > 6.0
        assert np.array_equal(out[far], frame[far])

    def test_marker_centroid_redetected(self):
        frame = np.zeros((500, 500))
        out, _ = pd.replay_marker(frame, (250, 250))
        c = pd.weighted_centroid(out, background=0.0)
        assert abs(c[0] - 250) <= 1.0 and abs(c[1] - 250) <= 1.0

    def test_out_of_frame_clips_with_flag(self):
        frame = np.zeros((100, 100))
        out, clipped = pd.replay_marker(frame, (150, 50))
        assert clipped
        assert out[:, -1].max() > 0


class FailingLocator(pd.OracleLocator):
    """Oracle that misses on the given frame indices."""

    def __init__(self, fail_frames, **kwargs):
        super().__init__(**kwargs)
        self.fail_frames = set(fail_frames)

    def locate(self, frame, context=None):
        if context and context.get("frame_index") in self.fail_frames:
            return None
        return super().locate(frame, context)


class TestDetectSequence:
    def test_noiseless_oracle_matches_truth(self):
        traj, seq = _render("Linear", n=40)
        locator = pd.OracleLocator(sigma_px=0.0)
        detected, transcript = pd.detect_sequence(seq, locator)
        px_size = (seq.meta["world_bounds"][1] - seq.meta["world_bounds"][0]) / 199
        err = np.abs(detected.states - traj.states).max()
        assert err < 0.5 * px_size
        assert len(transcript) == 40

    def test_noise_std_close_to_sigma(self):
        traj, seq = _render("Linear", n=200)
        locator = pd.OracleLocator(sigma_px=2.0, seed=11)
        detected, _ = pd.detect_sequence(seq, locator)
        scale = 199 / (seq.meta["world_bounds"][1] - seq.meta["world_bounds"][0])
        err_px = (detected.states - traj.states) * scale
        std = err_px.std()
        assert 2.0 * 0.85 <= std <= 2.0 * 1.15

    def test_all_tools_off_is_bare_locate(self):
        traj, seq = _render("Circular", n=20)
        locator = pd.OracleLocator(sigma_px=0.0)
        detected, transcript = pd.detect_sequence(
            seq, locator, tools=pd.ToolConfig(False, False, False))
        assert all(len(r["tool_calls"]) == 1 for r in transcript)
        assert all(r["tool_calls"][0]["tool"] == "locate" for r in transcript)
        for i in (0, 10, 19):
            direct = pd.weighted_centroid(seq.frames[i, 0], background=0.0)
            world = dynamics.pixel_to_world(seq.meta, direct)
            assert np.allclose(detected.states[i], world, atol=1e-12)

    def test_missing_frames_recorded(self):
        _, seq = _render("Linear", n=30)
        locator = FailingLocator(fail_frames=[3, 7], sigma_px=0.0)
        detected, transcript = pd.detect_sequence(seq, locator)
        assert len(detected.states) == 28
        assert transcript[3]["missing"] and transcript[7]["missing"]

    def test_too_many_missing_fails(self):
        _, seq = _render("Linear", n=20)
        locator = FailingLocator(fail_frames=range(10), sigma_px=0.0)
        with pytest.raises(DetectionFailedError):
            pd.detect_sequence(seq, locator)

    def test_history_grows(self):
        _, seq = _render("Linear", n=10)

        seen = []

        class Spy(pd.OracleLocator):
            def locate(self, frame, context=None):
                seen.append(len(context["history_px"]))
                return super().locate(frame, context)

        pd.detect_sequence(seq, Spy(sigma_px=0.0),
                           tools=pd.ToolConfig(False, False, False))
        assert seen == list(range(10))


def _sg_oracle(signal, window, order):
    """Windowed least-squares polynomial fit evaluated at window centers."""
    n = len(signal)
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        lo = min(max(i - half, 0), n - window)
        idx = np.arange(lo, lo + window)
        coeffs = np.polyfit(idx - i, signal[idx], order)
        out[i] = np.polyval(coeffs, 0.0)
    return out


class TestSgFilter:
    def test_constant_unchanged(self):
        sig = np.full(50, 3.7)
        out = pd.sg_filter(sig, pd.FilterParams(11, 3))
        assert np.allclose(out, 3.7, atol=1e-12)

    def test_polynomial_fixed_point(self):
        t = np.linspace(0, 1, 60)
        sig = 2.0 - t + 0.5 * t ** 2
        out = pd.sg_filter(sig, pd.FilterParams(7, 2))
        assert np.abs(out - sig).max() < 1e-10

    def test_noisy_sine_rmse_improves(self, rng):
        t = np.linspace(0, 2 * np.pi, 200)
        clean = np.sin(t)
        noisy = clean + 0.1 * rng.standard_normal(200)
        out = pd.sg_filter(noisy, pd.FilterParams(11, 3))
        assert np.sqrt(np.mean((out - clean) ** 2)) \
            < np.sqrt(np.mean((noisy - clean) ** 2))
        # oracle: per-window least-squares fit agrees at interior points
        oracle = _sg_oracle(noisy, 11, 3)
        assert np.abs(out[5:-5] - oracle[5:-5]).max() < 1e-9

    def test_invalid_params(self):
        sig = np.zeros(30)
        with pytest.raises(InvalidArgumentError):
            pd.sg_filter(sig, pd.FilterParams(10, 3))
        with pytest.raises(InvalidArgumentError):
            pd.sg_filter(sig, pd.FilterParams(7, 7))
        with pytest.raises(InvalidArgumentError):
            pd.sg_filter(np.zeros(5), pd.FilterParams(11, 3))

    def test_linearity(self, rng):
        x = rng.standard_normal(80)
        y = rng.standard_normal(80)
        params = pd.FilterParams(11, 3)
        lhs = pd.sg_filter(2.0 * x + 3.0 * y, params)
        rhs = 2.0 * pd.sg_filter(x, params) + 3.0 * pd.sg_filter(y, params)
        assert np.abs(lhs - rhs).max() < 1e-10

    def test_columnwise_on_trajectories(self, rng):
        states = rng.standard_normal((60, 2))
        out = pd.sg_filter(states, pd.FilterParams(11, 3))
        assert out.shape == (60, 2)
        assert np.allclose(out[:, 0], pd.sg_filter(states[:, 0],
                                                   pd.FilterParams(11, 3)))


class TestSmoothWithFeedback:
    def _noisy_traj(self, system="Linear", n=120, sigma=0.02, seed=5):
        sc = dynamics.default_scenario(system)
        spec = dynamics.builtin_system(system)
        traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, n)
        rng = np.random.default_rng(seed)
        noisy = traj.states + sigma * rng.standard_normal(traj.states.shape)
        return dynamics.Trajectory(times=traj.times, states=noisy)

    def test_always_accept_single_pass(self):
        traj = self._noisy_traj()
        out, params, transcript = pd.smooth_with_feedback(
            traj, advisor=pd.AlwaysAcceptAdvisor())
        assert params == pd.FilterParams(11, 3)
        assert len(transcript) == 1
        assert np.allclose(out.states,
                           pd.sg_filter(traj.states, pd.FilterParams(11, 3)))

    def test_scripted_advisor_composition(self):
        traj = self._noisy_traj()
        advisor = pd.ScriptedSmoothingAdvisor([pd.FilterParams(21, 2)])
        out, params, _ = pd.smooth_with_feedback(traj, advisor=advisor)
        assert params == pd.FilterParams(21, 2)
        assert np.allclose(out.states,
                           pd.sg_filter(traj.states, pd.FilterParams(21, 2)))

    def test_default_advisor_terminates_on_builtins(self):
        for name in dynamics.ODE_SYSTEMS:
            traj = self._noisy_traj(name)
            _, _, transcript = pd.smooth_with_feedback(traj)
            assert len(transcript) <= 5
            assert transcript[-1]["decision"] == "accept"

    def test_invalid_params_fall_back_with_warning(self):
        traj = self._noisy_traj()
        advisor = pd.ScriptedSmoothingAdvisor(
            [pd.FilterParams(10, 3), pd.FilterParams(8, 2)])
        with pytest.warns(UserWarning, match="invalid filter params"):
            out, params, transcript = pd.smooth_with_feedback(traj, advisor=advisor)
        assert params == pd.FilterParams(11, 3)
        assert transcript[-1]["decision"] == "invalid-params-fallback"

    def test_smoothing_reduces_noise(self):
        sc = dynamics.default_scenario("Linear")
        spec = dynamics.builtin_system("Linear")
        clean = dynamics.integrate_ode(spec, sc.z0, sc.dt, 150)
        rng = np.random.default_rng(0)
        noisy = dynamics.Trajectory(
            times=clean.times,
            states=clean.states + 0.03 * rng.standard_normal(clean.states.shape))
        smoothed, _, _ = pd.smooth_with_feedback(noisy)
        err_before = np.sqrt(np.mean((noisy.states - clean.states) ** 2))
        err_after = np.sqrt(np.mean((smoothed.states - clean.states) ** 2))
        assert err_after < err_before
