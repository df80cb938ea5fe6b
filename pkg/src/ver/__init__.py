"""Discovery of low-dimensional physical coordinates and sparse symbolic
governing equations from high-dimensional, video-like observations.

Quick start::

    from ver import dynamics, pixel_detect, reason_loop

    spec = dynamics.builtin_system("Circular")
    sc = dynamics.default_scenario("Circular")
    traj = dynamics.integrate_ode(spec, sc.z0, sc.dt, sc.n_frames)
    video = dynamics.render_pixel_video(traj, world_bounds=sc.world_bounds)
    detected, _ = pixel_detect.detect_sequence(
        video, pixel_detect.OracleLocator(sigma_px=1.0))
    smoothed, _, _ = pixel_detect.smooth_with_feedback(detected)
    equation, pool, _ = reason_loop.run_discovery(
        smoothed, "pixel", reason_loop.MutationProposer(dim=2, seed=0))
    print(equation.pretty())
"""

from . import (cli, dynamics, latent, llm_client, pipeline, pixel_detect,
               reason_loop, sindy, termlib)
from ._kernels import BACKEND as KERNEL_BACKEND
from ._kernels import NUMBA_ENABLED

__version__ = "0.1.0"

__all__ = ["cli", "dynamics", "latent", "llm_client", "pipeline",
           "pixel_detect", "reason_loop", "sindy", "termlib",
           "KERNEL_BACKEND", "NUMBA_ENABLED", "__version__"]
