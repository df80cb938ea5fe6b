"""End-to-end orchestration: simulate, detect, discover, evaluate, report.

A RunConfig fully determines a run; per-seed results and their aggregates
land in a versioned JSON report next to trajectory CSVs, equation files,
transcripts, and plots.
"""

import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import dynamics, latent as latent_mod, pixel_detect, reason_loop
from . import sindy, termlib
from .dynamics import Trajectory
from .errors import (ConfigError, DivergedError, InvalidArgumentError,
                     ReplayMismatchError)
from .llm_client import ChatClient, Transcript, extract_one, render_prompt

REPORT_SCHEMA_VERSION = 1

EVAL_HORIZONS = (100, 1000)


@dataclass
class RunConfig:
    """Everything a pipeline run depends on; serialized into the report."""

    system: str = "Linear"
    mode: str = "auto"  # pixel | latent | auto (from the system kind)
    seeds: tuple = (0,)
    noise: tuple = (0.0,)
    out_dir: str = "runs/out"

    # observation
    locator: str = "oracle:1.0"  # oracle:<sigma_px> | advisor
    resolution: tuple = None
    n_frames: int = None
    sim_grid: int = None  # PDE solver grid (defaults to the scenario)
    obs_resolution: tuple = (32, 32)  # latent observations after downscale
    burn_in: int = 200  # PDE frames discarded before observation starts
    pde_dt: float = None  # frame interval override for PDE systems

    # advisors
    advisor: str = "auto"  # auto | live | replay:<path>
    transcript_out: str = None  # record live advisor traffic here

    # discovery
    max_iters: int = 15
    m: int = 5
    r_stop: int = 3
    eta: float = sindy.DEFAULT_ETA
    gamma: float = sindy.DEFAULT_GAMMA
    threshold: float = sindy.DEFAULT_THRESHOLD
    adaptive_eta: bool = False
    k_max: int = termlib.DEFAULT_K_MAX
    initial_library: str = None  # poly2 | linear (default per mode)

    # latent training
    d_range: tuple = (1, 6)
    max_trials: int = 6
    ae_epochs: int = 250
    ae_batch: int = 64
    ae_lr: float = 1e-3
    ae_hidden: tuple = (64, 32)
    joint_epochs: int = 150

    # evaluation
    horizons: tuple = EVAL_HORIZONS

    def resolved_mode(self):
        if self.mode != "auto":
            return self.mode
        return "pixel" if dynamics.builtin_system(self.system).kind == "ode" \
            else "latent"

    def validate(self):
        dynamics.builtin_system(self.system)  # raises NotFoundError
        if self.resolved_mode() not in ("pixel", "latent"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if any(s < 0 for s in self.noise):
            raise ConfigError("noise strengths must be non-negative")
        if not (self.locator == "advisor"
                or self.locator.startswith("oracle:")):
            raise ConfigError(f"unknown locator {self.locator!r}")
        if not (self.advisor in ("auto", "live")
                or self.advisor.startswith("replay:")):
            raise ConfigError(f"unknown advisor {self.advisor!r}")
        if self.advisor == "auto" and self.locator == "advisor":
            raise ConfigError("locator 'advisor' needs advisor live/replay")
        return self


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {"seeds": int, "noise": float, "resolution": int,
                 "obs_resolution": int, "d_range": int, "ae_hidden": int,
                 "horizons": int}
_INT_FIELDS = {"n_frames", "sim_grid", "burn_in", "max_iters", "m", "r_stop",
               "k_max", "max_trials", "ae_epochs", "ae_batch", "joint_epochs"}
_FLOAT_FIELDS = {"eta", "gamma", "threshold", "ae_lr", "pde_dt"}
_BOOL_FIELDS = {"adaptive_eta"}


def parse_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment. Tuples are
    comma-separated; seed ranges accept ``a..b``."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in RunConfig.__dataclass_fields__:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def parse_seed_list(raw):
    raw = raw.strip()
    if ".." in raw:
        lo, hi = raw.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(s) for s in raw.split(",") if s.strip())


def _parse_value(key, raw):
    if key == "seeds":
        return parse_seed_list(raw)
    if key in _TUPLE_FIELDS:
        cast = _TUPLE_FIELDS[key]
        return tuple(cast(v) for v in raw.split(",") if v.strip())
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    if key in _BOOL_FIELDS:
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


# ---------------------------------------------------------------------------
# evaluation against ground truth
# ---------------------------------------------------------------------------

def evaluate_equation(equation, truth_spec, z0, dt, horizons=EVAL_HORIZONS):
    """Term recovery and extrapolation metrics against a known system.

    terms_found requires every ground-truth (term, dimension) pair active
    in the discovered equation; false positives are extra active pairs.
    Dimensions whose truth is outside the term grammar are skipped and
    flagged. R^2@n compares n integrated steps of the discovered equation
    against the ground-truth integration from the same initial state.
    """
    active = equation.coeffs.active_mask()
    texts = equation.library.texts()
    entry = {"terms_found": None, "false_positives": None,
             "r2_fit": equation.metrics.get("r2"),
             "length": equation.coeffs.n_active(),
             "r2_at": {}, "diverged": {}, "truth_gaps": []}

    if truth_spec.truth_terms is not None:
        found, false_pos = True, 0
        for j, truth in enumerate(truth_spec.truth_terms):
            active_terms = {texts[i] for i in np.nonzero(active[:, j])[0]}
            if truth is None:
                entry["truth_gaps"].append(j)
                continue
            truth_texts = {t for t, _ in truth}
            if not truth_texts <= active_terms:
                found = False
            false_pos += len(active_terms - truth_texts)
        entry["terms_found"] = found
        entry["false_positives"] = false_pos

    for n in horizons:
        truth_traj = dynamics.integrate_ode(truth_spec, z0, dt, n)
        try:
            pred = sindy.predict_trajectory(equation, z0, dt, n)
            entry["r2_at"][str(n)] = sindy.r_squared(pred.states,
                                                     truth_traj.states)
            entry["diverged"][str(n)] = False
        except DivergedError:
            entry["r2_at"][str(n)] = None  # -inf sentinel in aggregates
            entry["diverged"][str(n)] = True
    return entry


# ---------------------------------------------------------------------------
# advisor wiring
# ---------------------------------------------------------------------------

def _build_client(config):
    if config.advisor == "auto":
        return None
    if config.advisor == "live":
        mode = "record" if config.transcript_out else "live"
        return ChatClient(mode=mode)
    path = config.advisor.split(":", 1)[1]
    return ChatClient(mode="replay", transcript=Transcript.load(path))


def _build_locator(config, meta, seed):
    if config.locator == "advisor":
        client = _build_client(config)
        return pixel_detect.AdvisorLocator(client, meta)
    sigma_px = float(config.locator.split(":", 1)[1])
    return pixel_detect.OracleLocator(sigma_px=sigma_px, seed=seed)


def classify_system_kind(fseq, client):
    """Ask a chat advisor whether a recording is pixel- or latent-type."""
    idx = [0, fseq.n_frames // 2]
    reply = client.chat(render_prompt("type_classification", {
        "sample_frame_a": fseq.frames[idx[0], 0],
        "sample_frame_b": fseq.frames[idx[1], 0],
        "n_frames": fseq.n_frames}))
    decision = extract_one(reply, "decision")
    if decision not in ("pixel", "latent"):
        raise InvalidArgumentError(f"unusable classification: {reply[:80]!r}")
    return decision


# ---------------------------------------------------------------------------
# per-seed runs
# ---------------------------------------------------------------------------

def _seed_streams(seed):
    """Derive independent stream seeds for the run's random components."""
    children = np.random.SeedSequence(seed).spawn(4)
    return {name: int(ss.generate_state(1)[0]) for name, ss in
            zip(("noise", "locator", "proposer", "train"), children)}


def run_pixel_seed(config, seed, sigma, client=None):
    sc = dynamics.default_scenario(config.system)
    spec = dynamics.builtin_system(config.system)
    n_frames = config.n_frames or sc.n_frames
    resolution = config.resolution or sc.resolution
    streams = _seed_streams(seed)

    truth = dynamics.integrate_ode(spec, sc.z0, sc.dt, n_frames)
    video = dynamics.render_pixel_video(
        truth, resolution=resolution, object_radius=sc.object_radius,
        world_bounds=sc.world_bounds)
    if sigma > 0:
        video = dynamics.add_observation_noise(video, sigma,
                                               seed=streams["noise"])

    locator = _build_locator(config, video.meta, streams["locator"])
    detected, detect_transcript = pixel_detect.detect_sequence(video, locator)

    smoother = pixel_detect.LlmSmoothingAdvisor(client) if client \
        else pixel_detect.DeterministicSmoothingAdvisor()
    smoothed, params, smooth_transcript = pixel_detect.smooth_with_feedback(
        detected, advisor=smoother)

    proposer = (reason_loop.AdvisorProposer(client, config.adaptive_eta)
                if client else
                reason_loop.MutationProposer(
                    dim=2, seed=streams["proposer"],
                    initial=config.initial_library or "poly2",
                    adaptive_eta=config.adaptive_eta))
    disc_config = reason_loop.DiscoveryConfig(
        max_iters=config.max_iters, m=config.m, r_stop=config.r_stop,
        eta=config.eta, gamma=config.gamma, threshold=config.threshold,
        adaptive_eta=config.adaptive_eta, k_max=config.k_max,
        seed=streams["proposer"])
    selector = reason_loop.AdvisorSelector(client) if client else None
    equation, pool, disc_transcript = reason_loop.run_discovery(
        smoothed, "pixel", proposer, disc_config, selector=selector)

    evaluation = evaluate_equation(equation, spec, truth.states[0], sc.dt,
                                   horizons=config.horizons)
    artifacts = {
        "truth": truth, "detected": detected, "smoothed": smoothed,
        "equation": equation, "pool": pool,
        "filter_params": (params.window, params.order),
        "transcripts": {"detect": detect_transcript,
                        "smooth": smooth_transcript,
                        "discovery": disc_transcript}}
    return evaluation, equation, artifacts


def run_latent_seed(config, seed, sigma, client=None):
    sc = dynamics.default_scenario(config.system)
    spec = dynamics.builtin_system(config.system)
    n_frames = config.n_frames or 300
    grid = config.sim_grid or min(sc.grid_size, 64)
    dt = config.pde_dt or sc.dt
    streams = _seed_streams(seed)

    rng = np.random.default_rng(streams["noise"])
    init = dynamics.make_initial_field(config.system, grid, rng=rng)
    seq = dynamics.simulate_pde(spec, grid, init, dt,
                                n_frames + config.burn_in)
    if config.burn_in:
        seq = dynamics.FrameSequence(times=seq.times[config.burn_in:],
                                     frames=seq.frames[config.burn_in:],
                                     meta=seq.meta)
    if config.obs_resolution and tuple(config.obs_resolution) \
            != seq.frames.shape[2:]:
        seq = latent_mod.downscale_frames(seq, config.obs_resolution)
    if sigma > 0:  # noise corrupts the observations actually consumed
        seq = dynamics.add_observation_noise(seq, sigma,
                                             seed=streams["noise"] + 1)

    hyper = latent_mod.TrainHyper(epochs=config.ae_epochs,
                                  batch_size=config.ae_batch,
                                  lr=config.ae_lr, seed=streams["train"])
    advisor = latent_mod.LlmDimensionAdvisor(client) if client else None
    d, base_ae, trials = latent_mod.dimension_search(
        seq, advisor=advisor, d_range=config.d_range,
        max_trials=config.max_trials, hyper=hyper, hidden=config.ae_hidden)

    x = latent_mod.flatten_frames(seq)
    v = np.gradient(x, dt, axis=0, edge_order=2)
    problem = reason_loop.LatentProblem(
        frames=x, frame_derivs=v, d=d, dt=dt, init_ae=base_ae,
        hyper=latent_mod.TrainHyper(epochs=config.joint_epochs,
                                    batch_size=config.ae_batch,
                                    lr=config.ae_lr, seed=streams["train"]),
        hidden=config.ae_hidden)

    proposer = (reason_loop.AdvisorProposer(client, config.adaptive_eta)
                if client else
                reason_loop.MutationProposer(
                    dim=d, seed=streams["proposer"],
                    initial=config.initial_library or "linear",
                    adaptive_eta=config.adaptive_eta))
    disc_config = reason_loop.DiscoveryConfig(
        max_iters=config.max_iters, m=config.m, r_stop=config.r_stop,
        eta=config.eta, gamma=config.gamma, threshold=config.threshold,
        adaptive_eta=config.adaptive_eta, k_max=config.k_max,
        seed=streams["proposer"])
    selector = reason_loop.AdvisorSelector(client) if client else None
    equation, pool, disc_transcript = reason_loop.run_discovery(
        problem, "latent", proposer, disc_config, selector=selector)

    ae = getattr(equation, "autoencoder", base_ae)
    latents = Trajectory(times=seq.times, states=ae.encode(x))
    evaluation = {"terms_found": None, "false_positives": None,
                  "r2_fit": equation.metrics.get("r2"),
                  "length": equation.coeffs.n_active(),
                  "r2_at": {}, "diverged": {},
                  "chosen_dimension": d,
                  "dimension_trials": [
                      {"d": t.d, "normalized_error": t.normalized_error,
                       "ratios": t.ratios.tolist()} for t in trials]}
    artifacts = {"equation": equation, "pool": pool, "latents": latents,
                 "autoencoder": ae, "trials": trials,
                 "transcripts": {"discovery": disc_transcript}}
    return evaluation, equation, artifacts


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------

def _aggregate(entries):
    """Mean and sample std of the numeric metrics over per-seed entries."""
    agg = {"n_seeds": len(entries)}

    def stats(values):
        values = [(-np.inf if v is None else v) for v in values]
        arr = np.array(values, dtype=float)
        return {"mean": float(arr.mean()),
                "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}

    fp = [e["false_positives"] for e in entries
          if e["false_positives"] is not None]
    if fp:
        agg["false_positives"] = stats(fp)
    tf = [e["terms_found"] for e in entries if e["terms_found"] is not None]
    if tf:
        agg["terms_found_rate"] = float(np.mean(tf))
    r2 = [e["r2_fit"] for e in entries if e["r2_fit"] is not None]
    if r2:
        agg["r2_fit"] = stats(r2)
    horizons = sorted({n for e in entries for n in e.get("r2_at", {})},
                      key=int)
    for n in horizons:
        agg[f"r2_at_{n}"] = stats([e["r2_at"].get(n) for e in entries])
    return agg


def run_pipeline(config, emit=True, client=None):
    """Run every (seed, noise) combination and assemble the report.

    ``client`` overrides the advisor wiring from the config (used to
    inject record-mode or scripted chat clients).
    """
    config.validate()
    mode = config.resolved_mode()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    if client is None:
        client = _build_client(config)
    seed_reports = []
    all_artifacts = []
    failures = []
    for sigma in config.noise:
        for seed in config.seeds:
            label = f"seed{seed}_sigma{sigma:g}"
            try:
                runner = run_pixel_seed if mode == "pixel" else run_latent_seed
                evaluation, equation, artifacts = runner(config, seed, sigma,
                                                         client=client)
            except ReplayMismatchError:
                raise  # transcript integrity failures must not be silenced
            except Exception as exc:  # stage failure -> partial report
                failures.append({"seed": seed, "noise_sigma": sigma,
                                 "stage_error": f"{type(exc).__name__}: {exc}"})
                continue
            seed_reports.append({
                "seed": seed, "noise_sigma": sigma,
                "equation": sindy.equation_to_dict(equation),
                "eval": evaluation})
            artifacts["label"] = label
            all_artifacts.append(artifacts)
            if emit:
                _write_seed_artifacts(out_dir, label, artifacts)

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": _config_dict(config),
        "mode": mode,
        "seeds": seed_reports,
        "failures": failures,
        "aggregate": _aggregate([s["eval"] for s in seed_reports])
        if seed_reports else {},
        "runtime_s": time.perf_counter() - started,
    }
    if len(config.noise) > 1:
        report["sweep"] = [
            {"noise_sigma": sigma,
             "aggregate": _aggregate([s["eval"] for s in seed_reports
                                      if s["noise_sigma"] == sigma])}
            for sigma in config.noise]
    if emit:
        write_report(out_dir / "report.json", report)
        if client is not None and config.transcript_out:
            client.transcript.save(config.transcript_out)
        try:
            emit_plots(report, all_artifacts, out_dir)
        except Exception as exc:  # plots are best-effort
            warnings.warn(f"plot generation failed: {exc}")
    return report, all_artifacts


def _config_dict(config):
    out = {}
    for key, value in asdict(config).items():
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path):
    with open(path) as fh:
        return json.load(fh)


def _write_seed_artifacts(out_dir, label, artifacts):
    from .reason_loop import write_discovery_transcript
    sindy.write_equation(out_dir / f"equation_{label}.json",
                         artifacts["equation"])
    if "truth" in artifacts:
        dynamics.write_trajectory(out_dir / f"truth_{label}.csv",
                                  artifacts["truth"])
        dynamics.write_trajectory(out_dir / f"detected_{label}.csv",
                                  artifacts["detected"])
        dynamics.write_trajectory(out_dir / f"smoothed_{label}.csv",
                                  artifacts["smoothed"])
    if "latents" in artifacts:
        dynamics.write_trajectory(out_dir / f"latents_{label}.csv",
                                  artifacts["latents"])
    transcripts = artifacts.get("transcripts", {})
    if "discovery" in transcripts:
        write_discovery_transcript(
            out_dir / f"discovery_{label}.jsonl", transcripts["discovery"])
    if "detect" in transcripts:
        with open(out_dir / f"detect_{label}.jsonl", "w") as fh:
            for entry in transcripts["detect"]:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def summarize_report(report):
    """Human-readable digest; every number also exists in the JSON."""
    lines = [f"system {report['config']['system']} mode {report['mode']} "
             f"({len(report['seeds'])} runs, "
             f"{len(report['failures'])} failures)"]
    agg = report.get("aggregate", {})
    for key in sorted(agg):
        value = agg[key]
        if isinstance(value, dict):
            lines.append(f"  {key}: {value['mean']:.4g} +/- {value['std']:.4g}")
        else:
            lines.append(f"  {key}: {value}")
    for row in report.get("sweep", []):
        r2 = row["aggregate"].get("r2_fit", {})
        lines.append(f"  sigma={row['noise_sigma']:g}: "
                     f"r2_fit {r2.get('mean', float('nan')):.4g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

def emit_plots(report, artifacts, out_dir):
    """Best-effort PNG plots: trajectory overlay, phase portrait or time
    series of the latents, and fitness-vs-iteration."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    for art in artifacts:
        label = art["label"]
        if "truth" in art:
            truth = art["truth"]
            try:
                pred = sindy.predict_trajectory(
                    art["equation"], truth.states[0], truth.dt,
                    len(truth.states))
            except DivergedError:
                pred = None
            fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
            ax.plot(truth.states[:, 0], truth.states[:, 1], label="truth")
            if pred is not None:
                ax.plot(pred.states[:, 0], pred.states[:, 1], "--",
                        label="discovered")
            ax.legend(fontsize=7)
            ax.set_xlabel("z1")
            ax.set_ylabel("z2")
            fig.savefig(out_dir / f"overlay_{label}.png")
            plt.close(fig)
        if "latents" in art:
            z = art["latents"].states
            fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
            if z.shape[1] >= 2:
                ax.plot(z[:, 0], z[:, 1], lw=0.8)
                ax.set_xlabel("z1")
                ax.set_ylabel("z2")
            else:
                ax.plot(art["latents"].times, z[:, 0], lw=0.8)
                ax.set_xlabel("t")
                ax.set_ylabel("z1")
            fig.savefig(out_dir / f"latent_{label}.png")
            plt.close(fig)
        pool = art.get("pool", [])
        if pool:
            fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
            ax.plot([r.iteration for r in pool], [r.fitness for r in pool],
                    marker="o", ms=3)
            ax.set_xlabel("iteration")
            ax.set_ylabel("fitness")
            fig.savefig(out_dir / f"fitness_{label}.png")
            plt.close(fig)
