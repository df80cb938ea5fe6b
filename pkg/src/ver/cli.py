"""Command-line entry points.

Subcommands: simulate, detect, discover, evaluate, pipeline, sweep.
Run ``ver <subcommand> --help`` for flags; ``--config`` points at a flat
key = value file mirroring RunConfig (explicit flags win).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dynamics, pipeline, pixel_detect, reason_loop, sindy
from .errors import VerError
from .pipeline import RunConfig, parse_config_file, parse_seed_list


def _add_common(parser):
    parser.add_argument("--out", default="runs/out", help="output directory")
    parser.add_argument("--config", help="flat key=value config file")


def _build_config(args, **overrides):
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def _cmd_simulate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = dynamics.builtin_system(args.system)
    sc = dynamics.default_scenario(args.system)
    n = args.frames or sc.n_frames
    if spec.kind == "ode":
        traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, n)
        video = dynamics.render_pixel_video(
            traj, resolution=sc.resolution, object_radius=sc.object_radius,
            world_bounds=sc.world_bounds)
        dynamics.write_trajectory(out / f"{args.system}_truth.csv", traj)
    else:
        grid = args.grid or sc.grid_size
        rng = np.random.default_rng(args.seed) if args.perturb else None
        init = dynamics.make_initial_field(args.system, grid, rng=rng)
        video = dynamics.simulate_pde(spec, grid, init, sc.dt, n)
    if args.noise > 0:
        video = dynamics.add_observation_noise(video, args.noise,
                                               seed=args.seed)
    stem = out / f"{args.system}"
    dynamics.write_frames(f"{stem}.vert", video)
    with open(f"{stem}.meta.json", "w") as fh:
        json.dump({**video.meta, "dt": float(video.times[1] - video.times[0]),
                   "n_frames": video.n_frames}, fh, indent=2, sort_keys=True,
                  default=str)
    print(f"wrote {stem}.vert ({video.frames.shape}) and {stem}.meta.json")
    return 0


def _cmd_detect(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(args.meta) as fh:
        meta = json.load(fh)
    meta["world_bounds"] = tuple(meta["world_bounds"])
    meta["resolution"] = tuple(meta["resolution"])
    video = dynamics.read_frames(args.video, dt=meta.get("dt", 1.0), meta=meta)
    sigma_px = float(args.locator.split(":", 1)[1]) \
        if args.locator.startswith("oracle:") else 0.0
    locator = pixel_detect.OracleLocator(sigma_px=sigma_px, seed=args.seed)
    detected, transcript = pixel_detect.detect_sequence(video, locator)
    smoothed, params, smooth_transcript = \
        pixel_detect.smooth_with_feedback(detected)
    dynamics.write_trajectory(out / "detected.csv", detected)
    dynamics.write_trajectory(out / "smoothed.csv", smoothed)
    with open(out / "detect.jsonl", "w") as fh:
        for entry in transcript:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(f"detected {len(detected.states)} points; smoothing window "
          f"{params.window}, order {params.order}")
    return 0


def _cmd_discover(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = dynamics.read_trajectory(args.traj)
    proposer = reason_loop.MutationProposer(dim=traj.dim, seed=args.seed)
    config = reason_loop.DiscoveryConfig(max_iters=args.budget,
                                         seed=args.seed)
    equation, pool, transcript = reason_loop.run_discovery(
        traj, "pixel", proposer, config)
    sindy.write_equation(out / "equation.json", equation)
    reason_loop.write_discovery_transcript(out / "discovery.jsonl", transcript)
    print(equation.pretty())
    print(f"r2 {equation.metrics['r2']:.4f}  length "
          f"{equation.metrics['length']}  fitness "
          f"{equation.metrics['fitness']:.4f}")
    return 0


def _cmd_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    equation = sindy.read_equation(args.equation)
    spec = dynamics.builtin_system(args.system)
    sc = dynamics.default_scenario(args.system)
    traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, 2)
    entry = pipeline.evaluate_equation(equation, spec, traj.states[0], sc.dt)
    with open(out / "eval.json", "w") as fh:
        json.dump(entry, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(entry, indent=2, sort_keys=True))
    return 0


def _run_config_command(args, require_multi_noise=False):
    noise = tuple(float(v) for v in args.noise.split(",")) \
        if args.noise else None
    if require_multi_noise and (noise is None or len(noise) < 2):
        raise VerError("sweep needs --noise with several values, "
                       "e.g. 0,0.1,0.2,0.3")
    config = _build_config(
        args,
        system=args.system, mode=args.mode,
        seeds=parse_seed_list(args.seeds) if args.seeds else None,
        noise=noise, locator=args.locator, advisor=args.advisor,
        out_dir=args.out, max_iters=args.budget)
    report, _ = pipeline.run_pipeline(config)
    print(pipeline.summarize_report(report))
    print(f"report: {Path(config.out_dir) / 'report.json'}")
    return 0 if not report["failures"] else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ver",
        description="Discover physical coordinates and governing equations "
                    "from video-like observations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate ground truth + video")
    p.add_argument("--system", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--perturb", action="store_true",
                   help="randomize the PDE initial field with --seed")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("detect", help="extract coordinates from a video")
    p.add_argument("--video", required=True)
    p.add_argument("--meta", required=True)
    p.add_argument("--locator", default="oracle:0.0")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("discover", help="equation discovery on a trajectory")
    p.add_argument("--traj", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=15)
    _add_common(p)
    p.set_defaults(func=_cmd_discover)

    p = sub.add_parser("evaluate", help="score an equation against a system")
    p.add_argument("--equation", required=True)
    p.add_argument("--system", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    for name, multi in (("pipeline", False), ("sweep", True)):
        p = sub.add_parser(name, help="full run incl. report"
                           + (" over a noise sweep" if multi else ""))
        p.add_argument("--system")
        p.add_argument("--mode", choices=("pixel", "latent", "auto"))
        p.add_argument("--seeds", help="e.g. 0..9 or 0,3,5")
        p.add_argument("--noise", help="comma list, e.g. 0,0.1,0.2,0.3")
        p.add_argument("--locator")
        p.add_argument("--advisor")
        p.add_argument("--budget", type=int)
        _add_common(p)
        p.set_defaults(func=lambda a, m=multi:
                       _run_config_command(a, require_multi_noise=m))

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
