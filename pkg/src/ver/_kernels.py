"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

The jitted path is used by default when numba imports cleanly; set
``VER_DISABLE_NUMBA=1`` to force the numpy path. Both implementations use
the same stencils and operand order, so results agree to floating-point
roundoff. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

_DISABLED = os.environ.get("VER_DISABLE_NUMBA", "0") not in ("0", "", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by VER_DISABLE_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    njit = None
    NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _lap(f, inv_dx2):
    # periodic 5-point stencil; operand order matches the jitted loop
    return (
        np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1)
        - 4.0 * f
    ) * inv_dx2


def lo_step_numpy(u, v, d1, d2, beta, dt, inv_dx2):
    """One explicit Euler step of the lambda-omega reaction-diffusion system."""
    a2 = u * u + v * v
    du = (1.0 - a2) * u + beta * a2 * v + d1 * _lap(u, inv_dx2)
    dv = -beta * a2 * u + (1.0 - a2) * v + d2 * _lap(v, inv_dx2)
    return u + dt * du, v + dt * dv


def bruss_step_numpy(u, v, d1, d2, a, b, dt, inv_dx2):
    """One explicit Euler step of the Brusselator reaction-diffusion system."""
    uu = u * u
    du = a - (1.0 + b) * u + v * uu + d1 * _lap(u, inv_dx2)
    dv = b * u - v * uu + d2 * _lap(v, inv_dx2)
    return u + dt * du, v + dt * dv


def water_step_numpy(h, hu, hv, g, dt, inv_dx):
    """One Lax-Friedrichs step of the single-layer shallow-water system.

    Flat bathymetry; periodic boundaries. The averaging supplies the
    numerical dissipation that keeps central differencing stable.
    """
    def avg4(f):
        return 0.25 * (np.roll(f, 1, 0) + np.roll(f, -1, 0)
                       + np.roll(f, 1, 1) + np.roll(f, -1, 1))

    def ddx(f):
        return (np.roll(f, -1, 1) - np.roll(f, 1, 1)) * (0.5 * inv_dx)

    def ddy(f):
        return (np.roll(f, -1, 0) - np.roll(f, 1, 0)) * (0.5 * inv_dx)

    pressure = 0.5 * g * h * h
    fx = hu * hu / h + pressure
    fy = hv * hv / h + pressure
    h_new = avg4(h) - dt * (ddx(hu) + ddy(hv))
    hu_new = avg4(hu) - dt * ddx(fx)
    hv_new = avg4(hv) - dt * ddy(fy)
    return h_new, hu_new, hv_new


def fill_disc_numpy(frame, cx, cy, radius, fg):
    """Alpha-blend an anti-aliased disc centered at pixel (cx, cy) into frame.

    Coverage ramps linearly over one pixel at the rim, which keeps the
    above-background centroid on the true center.
    """
    height, width = frame.shape
    x0 = max(int(np.floor(cx - radius - 2.0)), 0)
    x1 = min(int(np.ceil(cx + radius + 2.0)) + 1, width)
    y0 = max(int(np.floor(cy - radius - 2.0)), 0)
    y1 = min(int(np.ceil(cy + radius + 2.0)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    cov = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    patch = frame[y0:y1, x0:x1]
    patch += ((fg - patch) * cov).astype(frame.dtype, copy=False)


# ---------------------------------------------------------------------------
# numba implementations (same arithmetic, fused loops)
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True)
    def lo_step_numba(u, v, d1, d2, beta, dt, inv_dx2):
        ny, nx = u.shape
        un = np.empty_like(u)
        vn = np.empty_like(v)
        for i in range(ny):
            im = (i - 1) % ny
            ip = (i + 1) % ny
            for j in range(nx):
                jm = (j - 1) % nx
                jp = (j + 1) % nx
                lap_u = (u[im, j] + u[ip, j] + u[i, jm] + u[i, jp] - 4.0 * u[i, j]) * inv_dx2
                lap_v = (v[im, j] + v[ip, j] + v[i, jm] + v[i, jp] - 4.0 * v[i, j]) * inv_dx2
                a2 = u[i, j] * u[i, j] + v[i, j] * v[i, j]
                du = (1.0 - a2) * u[i, j] + beta * a2 * v[i, j] + d1 * lap_u
                dv = -beta * a2 * u[i, j] + (1.0 - a2) * v[i, j] + d2 * lap_v
                un[i, j] = u[i, j] + dt * du
                vn[i, j] = v[i, j] + dt * dv
        return un, vn

    @njit(cache=True)
    def bruss_step_numba(u, v, d1, d2, a, b, dt, inv_dx2):
        ny, nx = u.shape
        un = np.empty_like(u)
        vn = np.empty_like(v)
        for i in range(ny):
            im = (i - 1) % ny
            ip = (i + 1) % ny
            for j in range(nx):
                jm = (j - 1) % nx
                jp = (j + 1) % nx
                lap_u = (u[im, j] + u[ip, j] + u[i, jm] + u[i, jp] - 4.0 * u[i, j]) * inv_dx2
                lap_v = (v[im, j] + v[ip, j] + v[i, jm] + v[i, jp] - 4.0 * v[i, j]) * inv_dx2
                uu = u[i, j] * u[i, j]
                du = a - (1.0 + b) * u[i, j] + v[i, j] * uu + d1 * lap_u
                dv = b * u[i, j] - v[i, j] * uu + d2 * lap_v
                un[i, j] = u[i, j] + dt * du
                vn[i, j] = v[i, j] + dt * dv
        return un, vn

    @njit(cache=True)
    def water_step_numba(h, hu, hv, g, dt, inv_dx):
        ny, nx = h.shape
        fx = np.empty_like(h)
        fy = np.empty_like(h)
        for i in range(ny):
            for j in range(nx):
                pressure = 0.5 * g * h[i, j] * h[i, j]
                fx[i, j] = hu[i, j] * hu[i, j] / h[i, j] + pressure
                fy[i, j] = hv[i, j] * hv[i, j] / h[i, j] + pressure
        hn = np.empty_like(h)
        hun = np.empty_like(hu)
        hvn = np.empty_like(hv)
        half = 0.5 * inv_dx
        for i in range(ny):
            im = (i - 1) % ny
            ip = (i + 1) % ny
            for j in range(nx):
                jm = (j - 1) % nx
                jp = (j + 1) % nx
                hn[i, j] = 0.25 * (h[im, j] + h[ip, j] + h[i, jm] + h[i, jp]) - dt * (
                    (hu[i, jp] - hu[i, jm]) * half + (hv[ip, j] - hv[im, j]) * half
                )
                hun[i, j] = 0.25 * (hu[im, j] + hu[ip, j] + hu[i, jm] + hu[i, jp]) - dt * (
                    (fx[i, jp] - fx[i, jm]) * half
                )
                hvn[i, j] = 0.25 * (hv[im, j] + hv[ip, j] + hv[i, jm] + hv[i, jp]) - dt * (
                    (fy[ip, j] - fy[im, j]) * half
                )
        return hn, hun, hvn

    @njit(cache=True)
    def _fill_disc_loop(frame, cx, cy, radius, fg, x0, x1, y0, y1):
        for y in range(y0, y1):
            dy = y - cy
            for x in range(x0, x1):
                dx = x - cx
                cov = radius + 0.5 - np.sqrt(dx * dx + dy * dy)
                if cov <= 0.0:
                    continue
                if cov > 1.0:
                    cov = 1.0
                frame[y, x] += (fg - frame[y, x]) * cov

    def fill_disc_numba(frame, cx, cy, radius, fg):
        height, width = frame.shape
        x0 = max(int(np.floor(cx - radius - 2.0)), 0)
        x1 = min(int(np.ceil(cx + radius + 2.0)) + 1, width)
        y0 = max(int(np.floor(cy - radius - 2.0)), 0)
        y1 = min(int(np.ceil(cy + radius + 2.0)) + 1, height)
        if x0 >= x1 or y0 >= y1:
            return
        _fill_disc_loop(frame, float(cx), float(cy), float(radius), float(fg),
                        x0, x1, y0, y1)

else:
    lo_step_numba = None
    bruss_step_numba = None
    water_step_numba = None
    fill_disc_numba = None


# active dispatch
if NUMBA_ENABLED:
    lo_step = lo_step_numba
    bruss_step = bruss_step_numba
    water_step = water_step_numba
    fill_disc = fill_disc_numba
    BACKEND = "numba"
else:
    lo_step = lo_step_numpy
    bruss_step = bruss_step_numpy
    water_step = water_step_numpy
    fill_disc = fill_disc_numpy
    BACKEND = "numpy"


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    if not NUMBA_ENABLED:
        return
    f = np.ones((4, 4))
    lo_step(f, f, 0.1, 0.1, 1.0, 0.01, 1.0)
    bruss_step(f, f, 1.0, 0.1, 1.0, 3.0, 0.01, 1.0)
    water_step(f, 0.0 * f, 0.0 * f, 1.0, 0.01, 1.0)
    fill_disc(np.zeros((8, 8)), 4.0, 4.0, 2.0, 1.0)
