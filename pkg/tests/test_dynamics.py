import numpy as np
import pytest
from scipy.linalg import expm
from scipy.ndimage import gaussian_filter

from ver import dynamics
from ver.errors import (
    DivergedError,
    InvalidArgumentError,
    NotFoundError,
    OutOfFrameError,
    UnstableError,
)


class TestBuiltinSystems:
    def test_lo_parameters(self):
        spec = dynamics.builtin_system("LO")
        assert spec.kind == "pde"
        assert spec.params["d1"] == 0.1
        assert spec.params["d2"] == 0.1
        assert spec.params["beta"] == 1.0

    def test_bruss_parameters(self):
        spec = dynamics.builtin_system("Bruss")
        assert spec.params["d1"] == 1.0
        assert spec.params["d2"] == 0.1
        assert spec.params["a"] == 1.0
        assert spec.params["b"] == 3.0

    def test_unknown_name(self):
        with pytest.raises(NotFoundError):
            dynamics.builtin_system("foo")

    def test_ode_systems_are_planar(self):
        for name in dynamics.ODE_SYSTEMS:
            spec = dynamics.builtin_system(name)
            assert spec.kind == "ode"
            assert spec.dim == 2


class TestIntegrateOde:
    def test_circular_matches_closed_form(self):
        # oracle: exact solution (cos t, sin t) from z0 = (1, 0)
        spec = dynamics.builtin_system("Circular")
        traj = dynamics.integrate_ode(spec, (1.0, 0.0), 0.01, 629)
        exact = np.column_stack([np.cos(traj.times), np.sin(traj.times)])
        assert np.max(np.abs(traj.states - exact)) < 1e-3
        # one period is 2*pi; the nearest sample sits within one step of it
        assert np.linalg.norm(traj.states[-1] - (1.0, 0.0)) < 2 * 0.01

    def test_zero_rhs_constant(self):
        spec = dynamics.make_system("still", "ode", 2, lambda z: np.zeros(2))
        traj = dynamics.integrate_ode(spec, (3.0, 4.0), 0.1, 50)
        assert np.all(traj.states == np.array([3.0, 4.0]))

    def test_linear_matches_matrix_exponential(self):
        a = np.array([[-0.1, 2.0], [-2.0, -0.1]])
        spec = dynamics.builtin_system("Linear")
        traj = dynamics.integrate_ode(spec, (2.0, 0.0), 0.01, 101)
        expected = expm(a * 1.0) @ np.array([2.0, 0.0])
        assert np.allclose(traj.states[100], expected, atol=1e-4)

    def test_divergence_guard(self):
        spec = dynamics.make_system("blow", "ode", 1, lambda z: z * z)
        with pytest.raises(DivergedError) as err:
            dynamics.integrate_ode(spec, (10.0,), 0.1, 200)
        assert err.value.step_index is not None

    def test_rk4_conserves_circular_radius(self):
        spec = dynamics.builtin_system("Circular")
        traj = dynamics.integrate_ode(spec, (1.0, 0.0), 0.01, 1001)
        radii = np.linalg.norm(traj.states, axis=1)
        assert np.max(np.abs(radii - 1.0)) < 1e-6

    def test_purity(self):
        spec = dynamics.builtin_system("VDP")
        t1 = dynamics.integrate_ode(spec, (1.0, 0.0), 0.05, 100)
        t2 = dynamics.integrate_ode(spec, (1.0, 0.0), 0.05, 100)
        assert np.array_equal(t1.states, t2.states)

    def test_bad_arguments(self):
        spec = dynamics.builtin_system("Linear")
        with pytest.raises(InvalidArgumentError):
            dynamics.integrate_ode(spec, (1.0, 0.0), -0.1, 10)
        with pytest.raises(InvalidArgumentError):
            dynamics.integrate_ode(spec, (1.0, 0.0), 0.1, 1)
        with pytest.raises(InvalidArgumentError):
            dynamics.integrate_ode(dynamics.builtin_system("LO"), (1, 0), 0.1, 10)


def _lo_oracle(u, v, d1, d2, beta, dt, dx, n_steps):
    """Independent FTCS stencil for the lambda-omega system."""
    inv_dx2 = 1.0 / (dx * dx)
    for _ in range(n_steps):
        lap_u = (np.roll(u, 1, 0) + np.roll(u, -1, 0) + np.roll(u, 1, 1)
                 + np.roll(u, -1, 1) - 4.0 * u) * inv_dx2
        lap_v = (np.roll(v, 1, 0) + np.roll(v, -1, 0) + np.roll(v, 1, 1)
                 + np.roll(v, -1, 1) - 4.0 * v) * inv_dx2
        a2 = u * u + v * v
        u, v = (u + dt * ((1 - a2) * u + beta * a2 * v + d1 * lap_u),
                v + dt * (-beta * a2 * u + (1 - a2) * v + d2 * lap_v))
    return u, v


class TestSimulatePde:
    def test_lo_zero_field_equilibrium(self):
        spec = dynamics.builtin_system("LO")
        init = np.zeros((2, 32, 32))
        seq = dynamics.simulate_pde(spec, 32, init, 0.05, 200)
        assert np.max(np.abs(seq.frames)) == 0.0

    def test_bruss_homogeneous_steady_state(self):
        spec = dynamics.builtin_system("Bruss")
        init = np.stack([np.full((32, 32), 1.0), np.full((32, 32), 3.0)])
        seq = dynamics.simulate_pde(spec, 32, init, 0.05, 200)
        assert np.max(np.abs(seq.frames[-1] - init)) < 1e-10

    def test_cfl_violation_raises_before_stepping(self):
        spec = dynamics.builtin_system("Bruss")
        init = np.stack([np.ones((32, 32)), np.ones((32, 32))])
        dt_max = dynamics.pde_dt_max(spec, 32)
        with pytest.raises(UnstableError):
            dynamics.simulate_pde(spec, 32, init, 2 * dt_max, 10)

    def test_zero_diffusivity_zero_reaction_bitwise_constant(self, rng):
        spec = dynamics.make_system(
            "inert", "pde", 2, lambda u, v: (0.0 * u, 0.0 * v),
            params={"d1": 0.0, "d2": 0.0, "width": 16.0})
        init = rng.standard_normal((2, 16, 16))
        seq = dynamics.simulate_pde(spec, 16, init, 0.1, 20)
        for i in range(20):
            assert np.array_equal(seq.frames[i], init)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nan_during_stepping_raises_diverged(self):
        spec = dynamics.make_system(
            "explode", "pde", 1, lambda u: (1e6 * (u * u + 1.0),),
            params={"d1": 0.0, "width": 16.0})
        init = np.ones((1, 16, 16))
        with pytest.raises(DivergedError):
            dynamics.simulate_pde(spec, 16, init, 10.0, 50)

    def test_lo_attracts_unit_amplitude_and_matches_oracle(self, rng):
        spec = dynamics.builtin_system("LO")
        smooth = gaussian_filter(rng.standard_normal((2, 50, 50)), sigma=3.0,
                                 axes=(1, 2))
        init = 0.5 + smooth / np.abs(smooth).max()
        seq = dynamics.simulate_pde(spec, 50, init, 0.05, 501)
        dx = spec.params["width"] / 50
        u_ref, v_ref = _lo_oracle(init[0].copy(), init[1].copy(),
                                  0.1, 0.1, 1.0, 0.05, dx, 500)
        np.testing.assert_allclose(seq.frames[-1, 0], u_ref, atol=1e-9)
        np.testing.assert_allclose(seq.frames[-1, 1], v_ref, atol=1e-9)
        amplitude = np.mean(seq.frames[-1, 0] ** 2 + seq.frames[-1, 1] ** 2)
        assert abs(amplitude - 1.0) < 0.1

    def test_water_runs_stably(self):
        spec = dynamics.builtin_system("Water")
        init = dynamics.make_initial_field("Water", 32)
        seq = dynamics.simulate_pde(spec, 32, init, 0.01, 100)
        assert np.all(np.isfinite(seq.frames))
        assert seq.frames.shape == (100, 3, 32, 32)

    def test_purity(self):
        spec = dynamics.builtin_system("LO")
        init = dynamics.make_initial_field("LO", 32)
        s1 = dynamics.simulate_pde(spec, 32, init, 0.05, 50)
        s2 = dynamics.simulate_pde(spec, 32, init, 0.05, 50)
        assert np.array_equal(s1.frames, s2.frames)


class TestRender:
    def test_disc_at_world_origin_centers_in_frame(self):
        traj = dynamics.Trajectory(times=[0.0, 1.0],
                                   states=[[0.0, 0.0], [0.0, 0.0]])
        seq = dynamics.render_pixel_video(traj, resolution=(500, 500),
                                          world_bounds=(-3, 3, -3, 3))
        from ver.pixel_detect import weighted_centroid
        cx, cy = weighted_centroid(seq.frames[0, 0], background=0.0)
        assert abs(cx - 250.0) <= 0.5
        assert abs(cy - 250.0) <= 0.5

    def test_linear_scenario_renders_200_frames(self):
        sc = dynamics.default_scenario("Linear")
        spec = dynamics.builtin_system("Linear")
        traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, sc.n_frames)
        seq = dynamics.render_pixel_video(traj, resolution=sc.resolution,
                                          world_bounds=sc.world_bounds)
        assert seq.frames.shape == (200, 1, 500, 500)

    def test_centroid_reprojects_to_state(self):
        from ver.pixel_detect import weighted_centroid
        sc = dynamics.default_scenario("Circular")
        spec = dynamics.builtin_system("Circular")
        traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, 20)
        seq = dynamics.render_pixel_video(traj, resolution=(200, 200),
                                          world_bounds=sc.world_bounds)
        px_tol = 0.5 * (sc.world_bounds[1] - sc.world_bounds[0]) / 199
        for i in range(0, 20, 5):
            c = weighted_centroid(seq.frames[i, 0], background=0.0)
            world = dynamics.pixel_to_world(seq.meta, c)
            assert np.linalg.norm(world - traj.states[i]) < px_tol

    def test_out_of_frame_error_lists_indices(self):
        traj = dynamics.Trajectory(times=[0.0, 1.0],
                                   states=[[0.0, 0.0], [10.0, 0.0]])
        with pytest.raises(OutOfFrameError) as err:
            dynamics.render_pixel_video(traj, world_bounds=(-3, 3, -3, 3))
        assert err.value.indices == (1,)

    def test_all_ode_scenarios_stay_in_bounds(self):
        for name in dynamics.ODE_SYSTEMS:
            sc = dynamics.default_scenario(name)
            spec = dynamics.builtin_system(name)
            traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, sc.n_frames)
            dynamics.render_pixel_video(traj, resolution=(100, 100),
                                        world_bounds=sc.world_bounds)

    def test_world_pixel_round_trip(self, rng):
        meta = {"world_bounds": (-2.0, 3.0, -1.0, 4.0), "resolution": (480, 640)}
        pts = rng.uniform(-1.0, 3.0, size=(50, 2))
        back = dynamics.pixel_to_world(meta, dynamics.world_to_pixel(meta, pts))
        assert np.max(np.abs(back - pts)) < 1e-9


class TestObservationNoise:
    def test_sigma_zero_is_bitwise_equal(self, rng):
        frames = rng.standard_normal((4, 1, 32, 32))
        seq = dynamics.FrameSequence(times=np.arange(4.0), frames=frames)
        out = dynamics.add_observation_noise(seq, 0.0)
        assert np.array_equal(out.frames, frames)

    def test_noise_std_matches_request(self, rng):
        frames = rng.standard_normal((5, 1, 500, 500))
        seq = dynamics.FrameSequence(times=np.arange(5.0), frames=frames)
        out = dynamics.add_observation_noise(seq, 0.1, seed=7)
        added = out.frames - frames
        assert added.size >= 1e6
        assert 0.095 <= added.std() / frames.std() <= 0.105

    def test_negative_sigma_rejected(self, rng):
        frames = rng.standard_normal((3, 1, 8, 8))
        seq = dynamics.FrameSequence(times=np.arange(3.0), frames=frames)
        with pytest.raises(InvalidArgumentError):
            dynamics.add_observation_noise(seq, -0.1)

    def test_deterministic_under_seed(self, rng):
        frames = rng.standard_normal((3, 1, 16, 16))
        seq = dynamics.FrameSequence(times=np.arange(3.0), frames=frames)
        a = dynamics.add_observation_noise(seq, 0.2, seed=3)
        b = dynamics.add_observation_noise(seq, 0.2, seed=3)
        assert np.array_equal(a.frames, b.frames)

    def test_paper_sweep_values_accepted(self, rng):
        frames = rng.standard_normal((2, 1, 16, 16))
        seq = dynamics.FrameSequence(times=np.arange(2.0), frames=frames)
        for sigma in (0.0, 0.1, 0.2, 0.3):
            dynamics.add_observation_noise(seq, sigma, seed=1)


class TestFileFormats:
    def test_frame_tensor_round_trip(self, tmp_path, rng):
        frames = rng.standard_normal((6, 2, 20, 24)).astype(np.float32)
        seq = dynamics.FrameSequence(times=np.arange(6.0) * 0.5, frames=frames)
        path = tmp_path / "clip.vert"
        dynamics.write_frames(path, seq)
        back = dynamics.read_frames(path, dt=0.5)
        assert np.array_equal(back.frames, frames)
        assert np.allclose(back.times, seq.times)
        with open(path, "rb") as fh:
            assert fh.read(4) == b"VERT"

    def test_frame_tensor_bad_magic(self, tmp_path):
        path = tmp_path / "junk.vert"
        path.write_bytes(b"nope" + b"\x00" * 16)
        with pytest.raises(InvalidArgumentError):
            dynamics.read_frames(path)

    def test_trajectory_csv_round_trip(self, tmp_path, rng):
        traj = dynamics.Trajectory(times=np.arange(10) * 0.1,
                                   states=rng.standard_normal((10, 3)))
        path = tmp_path / "traj.csv"
        dynamics.write_trajectory(path, traj)
        with open(path) as fh:
            assert fh.readline().strip() == "t,z1,z2,z3"
        back = dynamics.read_trajectory(str(path))
        assert np.array_equal(back.states, traj.states)
        assert np.array_equal(back.times, traj.times)
