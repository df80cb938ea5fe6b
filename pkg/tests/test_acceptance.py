"""Acceptance suite: one test per release criterion.

Every test prints a single ``[criterion N] PASS`` line (pytest -s shows
them; they also appear on failure) and enforces its runtime budget. The
deterministic stack (oracle locator, seeded mutation search, elbow-rule
dimension advisor, transcript replay) drives every run.
"""

import json
import time

import numpy as np
import pytest

from ver import dynamics, latent, pipeline, pixel_detect, reason_loop
from ver import sindy, termlib
from ver.errors import ReplayMismatchError
from ver.llm_client import ChatClient, Transcript
from ver.pipeline import RunConfig


class _Budget:
    """Times a criterion body and enforces its wall-clock budget."""

    def __init__(self, number, seconds, description):
        self.number = number
        self.seconds = seconds
        self.description = description

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None and elapsed <= self.seconds \
            else "FAIL"
        print(f"[criterion {self.number}] {status} "
              f"({elapsed:.1f}s of {self.seconds:.0f}s budget) "
              f"- {self.description}")
        if exc_type is None:
            assert elapsed <= self.seconds, (
                f"criterion {self.number} exceeded its runtime budget: "
                f"{elapsed:.1f}s > {self.seconds}s")


def test_criterion_1_linear_term_recovery(tmp_path):
    with _Budget(1, 120, "Linear term recovery over seeds 0..9"):
        config = RunConfig(system="Linear", seeds=tuple(range(10)),
                           noise=(0.0,), locator="oracle:1.0", max_iters=15,
                           out_dir=str(tmp_path))
        report, _ = pipeline.run_pipeline(config, emit=False)
        assert not report["failures"]
        found = sum(bool(s["eval"]["terms_found"]) for s in report["seeds"])
        assert found >= 9, f"all terms found in only {found}/10 seeds"
        fp_mean = report["aggregate"]["false_positives"]["mean"]
        assert fp_mean <= 1.0, f"mean false positives {fp_mean}"
        r2_1000 = report["aggregate"]["r2_at_1000"]["mean"]
        assert r2_1000 >= 0.90, f"mean R2@1000 {r2_1000}"


def test_criterion_2_circular_recovery(tmp_path):
    with _Budget(2, 60, "Circular recovery: zero false positives"):
        config = RunConfig(system="Circular", seeds=tuple(range(10)),
                           noise=(0.0,), locator="oracle:1.0", max_iters=15,
                           out_dir=str(tmp_path))
        report, _ = pipeline.run_pipeline(config, emit=False)
        assert not report["failures"]
        zero_fp = sum(s["eval"]["false_positives"] == 0
                      for s in report["seeds"])
        assert zero_fp >= 9, f"zero false positives in only {zero_fp}/10"
        r2_100 = report["aggregate"]["r2_at_100"]["mean"]
        assert r2_100 >= 0.99, f"mean R2@100 {r2_100}"


def test_criterion_3_stlsq_matches_least_squares():
    with _Budget(3, 10, "STLSQ vs normal-equations least squares"):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n, k = 200, int(rng.integers(2, 9))
            design = rng.standard_normal((n, k))
            derivs = rng.standard_normal((n, 2))
            coeffs = sindy.fit_coefficients(design, derivs, eta=0.0,
                                            threshold=0.0)
            ols = np.linalg.solve(design.T @ design, design.T @ derivs)
            assert np.max(np.abs(coeffs.values - ols)) < 1e-8

        spec = dynamics.builtin_system("Linear")
        traj = dynamics.integrate_ode(spec, (2.0, 0.0), 0.05, 200)
        lib = termlib.make_library(["z1", "z2", "z1^2", "z2^2"], 2)
        design = termlib.evaluate_library(lib, traj.states)
        derivs = np.array([spec.rhs(z) for z in traj.states])
        coeffs = sindy.fit_coefficients(design, derivs)
        truth = np.array([[-0.1, -2.0], [2.0, -0.1],
                          [0.0, 0.0], [0.0, 0.0]])
        active = truth != 0
        assert np.all(coeffs.values[~active] == 0.0), "quadratic terms active"
        rel = np.abs(coeffs.values[active] - truth[active]) \
            / np.abs(truth[active])
        assert rel.max() < 0.01, f"coefficient error {rel.max():.4%}"


def test_criterion_4_savitzky_golay_fixed_points():
    with _Budget(4, 5, "Savitzky-Golay polynomial fixed points"):
        rng = np.random.default_rng(4)
        t = np.linspace(-1.0, 1.0, 60)
        for window, order in ((7, 2), (11, 3), (21, 4)):
            params = pixel_detect.FilterParams(window, order)
            for _ in range(100):
                degree = int(rng.integers(0, order + 1))
                coeffs = rng.uniform(-2, 2, size=degree + 1)
                signal = np.polyval(coeffs, t)
                out = pixel_detect.sg_filter(signal, params)
                assert np.abs(out - signal).max() < 1e-9
        # linearity
        params = pixel_detect.FilterParams(11, 3)
        x, y = rng.standard_normal((2, 80))
        lhs = pixel_detect.sg_filter(1.7 * x - 0.4 * y, params)
        rhs = 1.7 * pixel_detect.sg_filter(x, params) \
            - 0.4 * pixel_detect.sg_filter(y, params)
        assert np.abs(lhs - rhs).max() < 1e-10


def test_criterion_5_joint_loss_gradient_check():
    with _Budget(5, 30, "joint-loss analytic gradients vs central FD"):
        rng = np.random.default_rng(5)
        ae = latent.Autoencoder(16, 2, hidden=(8, 6), seed=5)
        lib = termlib.make_library(["z1", "z2", "z1*z2", "sin(z1)"], 2)
        x = rng.standard_normal((12, 16))
        v = rng.standard_normal((12, 16))
        xi = rng.standard_normal((lib.k, 2))
        h = 1e-5
        names = list(ae.parameters()) + ["xi"]
        for parts in (("recon",), ("sindy",), ("l1",)):
            _, _, grads, g_xi = latent.ae_sindy_loss_and_grads(
                ae, xi, x, v, lib, 0.01, parts=parts)
            checked = 0
            for _ in range(10):  # 10 random parameter coordinates
                name = names[rng.integers(len(names))]
                tensor = xi if name == "xi" else ae.parameters()[name]
                idx = int(rng.integers(tensor.size))

                def loss_at(delta):
                    ae2, xi2 = ae.copy(), xi.copy()
                    if name == "xi":
                        xi2.flat[idx] += delta
                    else:
                        p = ae2.parameters()
                        p[name].flat[idx] += delta
                        ae2.set_parameters(p)
                    total, _, _, _ = latent.ae_sindy_loss_and_grads(
                        ae2, xi2, x, v, lib, 0.01, parts=parts)
                    return total

                numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
                analytic = (g_xi if name == "xi" else grads[name]).flat[idx]
                if max(abs(numeric), abs(analytic)) > 1e-9:
                    rel = abs(numeric - analytic) \
                        / max(abs(numeric), abs(analytic))
                    assert rel < 1e-3, f"{parts} {name}[{idx}]: {rel:.2e}"
                    checked += 1
            assert checked > 0


def _oscillator_through_random_decoder(seed=0, dt=0.05):
    """2-D linear oscillator at several radii, lifted to 64 dims by a
    fixed random smooth map; derivatives by central differences per
    trajectory."""
    rng = np.random.default_rng(seed)
    spec = dynamics.make_system("osc", "ode", 2,
                                lambda z: np.array([-z[1], z[0]]))
    zs, vs = [], []
    for r in np.linspace(0.4, 1.2, 8):
        traj = dynamics.integrate_ode(spec, (r, 0.0), dt, 100)
        zs.append(traj.states)
        vs.append(np.gradient(traj.states, dt, axis=0, edge_order=2))
    z, v = np.vstack(zs), np.vstack(vs)
    w1 = rng.standard_normal((2, 32))
    b1 = rng.standard_normal(32) * 0.3
    w2 = rng.standard_normal((32, 64)) / np.sqrt(32)
    hidden = np.tanh(z @ w1 + b1)
    x = hidden @ w2
    xdot = ((1.0 - hidden ** 2) * (v @ w1)) @ w2
    return x, xdot


def test_criterion_6_latent_dimension_and_oscillation():
    with _Budget(6, 300, "latent dimension search + near-pure oscillation"):
        x, xdot = _oscillator_through_random_decoder(seed=0)
        hyper = latent.TrainHyper(epochs=300, batch_size=64, lr=2e-3, seed=1)
        d, base_ae, trials = latent.dimension_search(
            x, d_range=(1, 4), max_trials=4, hyper=hyper, hidden=(64, 32))
        assert d == 2, f"chose d={d}; trials " + str(
            [(t.d, round(t.normalized_error, 4)) for t in trials])

        lib = termlib.make_library(["z1", "z2"], 2)
        joint = latent.TrainHyper(epochs=300, batch_size=64, lr=1e-3, seed=1)
        _, coeffs, _ = latent.train_ae_sindy(x, xdot, 2, lib, eta=0.01,
                                             hyper=joint, hidden=(64, 32),
                                             init=base_ae)
        eq = sindy.Equation(library=lib, coeffs=coeffs)
        eigs = sindy.linear_eigenvalues(eq)
        for e in eigs:
            assert abs(e.real) < 0.1 * abs(e.imag), f"eigenvalue {e}"


def test_criterion_7_noise_robustness_trend(tmp_path):
    with _Budget(7, 600, "noise sweep on downscaled LO is non-increasing"):
        config = RunConfig(system="LO", seeds=(0, 1, 2),
                           noise=(0.0, 0.1, 0.2, 0.3),
                           out_dir=str(tmp_path), n_frames=300, sim_grid=64,
                           obs_resolution=(32, 32), burn_in=400,
                           pde_dt=0.025, d_range=(2, 2), max_trials=1,
                           ae_epochs=250, joint_epochs=100, max_iters=3,
                           r_stop=2)
        report, _ = pipeline.run_pipeline(config, emit=False)
        assert not report["failures"]
        means = [row["aggregate"]["r2_fit"]["mean"]
                 for row in report["sweep"]]
        sigmas = [row["noise_sigma"] for row in report["sweep"]]
        assert sigmas == [0.0, 0.1, 0.2, 0.3]
        for a, b in zip(means, means[1:]):
            assert b <= a + 1e-9, f"r2 means not non-increasing: {means}"


def test_criterion_8_pde_equilibria():
    with _Budget(8, 5, "reaction-diffusion equilibria stay put"):
        lo = dynamics.builtin_system("LO")
        seq = dynamics.simulate_pde(lo, 32, np.zeros((2, 32, 32)), 0.05, 1001)
        assert np.max(np.abs(seq.frames)) <= 1e-10

        bruss = dynamics.builtin_system("Bruss")
        init = np.stack([np.full((32, 32), 1.0), np.full((32, 32), 3.0)])
        seq = dynamics.simulate_pde(bruss, 32, init, 0.05, 1001)
        assert np.max(np.abs(seq.frames - init[None])) <= 1e-10


def _scripted_backend(messages):
    template = messages[0].template_id
    if template == "smoothness_judgment":
        return "<decision>accept</decision>"
    if template == "library_proposal":
        return "<library>z1, z2, z1^2, z2^2</library>"
    if template == "final_selection":
        return "<decision>iteration 1</decision>"
    raise AssertionError(f"unexpected template {template}")


def test_criterion_9_replay_determinism(tmp_path):
    with _Budget(9, 10, "advisor transcript record/replay determinism"):
        config = RunConfig(system="Linear", seeds=(0,), noise=(0.0,),
                           locator="oracle:0.5", out_dir=str(tmp_path),
                           resolution=(120, 120), n_frames=60, max_iters=3,
                           horizons=(50,))
        recorder = ChatClient(mode="record", backend=_scripted_backend)
        pipeline.run_pipeline(config, emit=False, client=recorder)
        path = tmp_path / "advisor.jsonl"
        recorder.transcript.save(path)

        reports = []
        for _ in range(2):
            client = ChatClient(mode="replay",
                                transcript=Transcript.load(path))
            report, _ = pipeline.run_pipeline(config, emit=False,
                                              client=client)
            report = json.loads(json.dumps(report))
            report.pop("runtime_s")
            reports.append(json.dumps(report, sort_keys=True))
        assert reports[0] == reports[1]

        tampered = Transcript.load(path)
        tampered.entries[0]["digest"] = "0" * 64
        client = ChatClient(mode="replay", transcript=tampered)
        with pytest.raises(ReplayMismatchError):
            pipeline.run_pipeline(config, emit=False, client=client)


def test_criterion_10_early_stopping_and_selection():
    with _Budget(10, 1, "repetition stop and selection tie-breaks"):
        spec = dynamics.builtin_system("Linear")
        traj = dynamics.integrate_ode(spec, (2.0, 0.0), 0.05, 100)

        class Repeater(reason_loop.Proposer):
            def propose(self, recent, dim, caps):
                return termlib.make_library(["z1", "z2"], dim), None

        _, pool, transcript = reason_loop.run_discovery(
            traj, "pixel", Repeater(),
            reason_loop.DiscoveryConfig(max_iters=15, r_stop=3))
        assert len(pool) == 3  # stopped at exactly the r_stop-th repetition
        assert transcript[-1]["stop_decision"] == "repetition"
        assert transcript[-1]["t"] == 4

        def record(iteration, texts, fit, length):
            lib = termlib.make_library(texts, 2)
            return reason_loop.ExperienceRecord(
                iteration=iteration, library=lib,
                signature=termlib.library_signature(lib),
                coeffs=sindy.CoefficientMatrix(values=np.ones((lib.k, 2))),
                r2=fit + 0.02 * length, length=length, fitness=fit,
                eta=0.01, gamma=0.02)

        pool = [record(1, ["z1", "z2"], 0.9, 2),
                record(2, ["z1", "z2", "z1^2", "z2^2", "z1*z2"], 0.95, 5),
                record(3, ["z1", "z2", "z1^2"], 0.95, 3)]
        assert reason_loop.select_best(pool).iteration == 3
        pool.append(record(4, ["z2", "z1"], 0.95, 3))
        assert reason_loop.select_best(pool).iteration == 3  # earlier wins
