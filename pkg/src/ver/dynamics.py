"""Ground-truth simulators and video-like observation generators.

Covers six planar ODE systems observed as a moving object in a rendered
video (pixel coordinates) and three reaction/flow PDE systems observed as
multichannel field sequences (latent coordinates), plus observation-noise
injection and the on-disk formats for both.
"""

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    DivergedError,
    InvalidArgumentError,
    NotFoundError,
    OutOfFrameError,
    UnstableError,
)

ODE_SYSTEMS = ("Linear", "Cubic", "Circular", "VDP", "Glider", "Exp")
PDE_SYSTEMS = ("LO", "Bruss", "Water")

#: overflow guard for explicit integrators
NORM_GUARD = 1e6


@dataclass(frozen=True)
class SystemSpec:
    """A simulatable dynamical system.

    ``rhs`` is the state derivative for ODEs (maps a length-``dim`` vector
    to its derivative) and the per-channel reaction term for generic
    reaction-diffusion PDEs (maps a tuple of channel grids to a tuple of
    derivative grids, diffusion excluded). Builtin PDE systems dispatch to
    fused kernels instead of calling ``rhs``.

    ``truth_terms`` holds the canonical term/coefficient pairs per state
    dimension when the governing equation is expressible in the term
    grammar; an entry of ``None`` marks a dimension outside the grammar.
    """

    name: str
    kind: str  # "ode" | "pde"
    dim: int
    params: dict
    rhs: object = None
    truth_terms: tuple = None


@dataclass
class Trajectory:
    """Uniformly sampled state sequence; row i of ``states`` is z_i."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if len(self.times) != len(self.states):
            raise InvalidArgumentError("times and states length mismatch")
        if len(self.times) < 2:
            raise InvalidArgumentError("trajectory needs at least 2 samples")
        if not np.all(np.isfinite(self.states)):
            raise InvalidArgumentError("trajectory contains non-finite states")

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def dim(self):
        return self.states.shape[1]


@dataclass
class FrameSequence:
    """Time-ordered stack of 2-D fields, shape (n, channels, H, W)."""

    times: np.ndarray
    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4:
            raise InvalidArgumentError("frames must have shape (n, c, h, w)")
        if len(self.times) != len(self.frames):
            raise InvalidArgumentError("times and frames length mismatch")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidArgumentError("frames contain non-finite pixels")

    @property
    def n_frames(self):
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# builtin systems
# ---------------------------------------------------------------------------

def _linear_rhs(z):
    return np.array([-0.1 * z[0] + 2.0 * z[1], -2.0 * z[0] - 0.1 * z[1]])


def _cubic_rhs(z):
    return np.array([
        -0.1 * z[0] ** 3 + 2.0 * z[1] ** 3,
        -2.0 * z[0] ** 3 - 0.1 * z[1] ** 3,
    ])


def _circular_rhs(z):
    return np.array([-z[1], z[0]])


def _vdp_rhs(z, mu=2.0):
    return np.array([z[1], mu * (1.0 - z[0] ** 2) * z[1] - z[0]])


def _glider_rhs(z, drag=0.05, v_floor=0.1):
    v = max(z[0], v_floor)  # speed floor guards the 1/v term
    return np.array([
        -np.sin(z[1]) - drag * z[0] ** 2,
        z[0] - np.cos(z[1]) / v,
    ])


def _exp_rhs(z):
    return np.array([-0.5 * z[0], -0.5 * z[1]])


_BUILTINS = {
    "Linear": dict(
        kind="ode", dim=2, params={"a11": -0.1, "a12": 2.0, "a21": -2.0, "a22": -0.1},
        rhs=_linear_rhs,
        truth_terms=((("z1", -0.1), ("z2", 2.0)), (("z1", -2.0), ("z2", -0.1))),
    ),
    "Cubic": dict(
        kind="ode", dim=2, params={"a11": -0.1, "a12": 2.0, "a21": -2.0, "a22": -0.1},
        rhs=_cubic_rhs,
        truth_terms=((("z1^3", -0.1), ("z2^3", 2.0)), (("z1^3", -2.0), ("z2^3", -0.1))),
    ),
    "Circular": dict(
        kind="ode", dim=2, params={"omega": 1.0},
        rhs=_circular_rhs,
        truth_terms=((("z2", -1.0),), (("z1", 1.0),)),
    ),
    "VDP": dict(
        kind="ode", dim=2, params={"mu": 2.0},
        rhs=_vdp_rhs,
        truth_terms=(
            (("z2", 1.0),),
            (("z1", -1.0), ("z2", 2.0), ("z1^2*z2", -2.0)),
        ),
    ),
    "Glider": dict(
        kind="ode", dim=2, params={"drag": 0.05, "v_floor": 0.1},
        rhs=_glider_rhs,
        # second dimension contains cos(z2)/z1, outside the term grammar
        truth_terms=((("sin(z2)", -1.0), ("z1^2", -0.05)), None),
    ),
    "Exp": dict(
        kind="ode", dim=2, params={"rate": -0.5},
        rhs=_exp_rhs,
        truth_terms=((("z1", -0.5),), (("z2", -0.5),)),
    ),
    "LO": dict(
        kind="pde", dim=2, params={"d1": 0.1, "d2": 0.1, "beta": 1.0, "width": 20.0},
        rhs=None, truth_terms=None,
    ),
    "Bruss": dict(
        kind="pde", dim=2,
        params={"d1": 1.0, "d2": 0.1, "a": 1.0, "b": 3.0, "width": 64.0},
        rhs=None, truth_terms=None,
    ),
    "Water": dict(
        kind="pde", dim=3, params={"g": 1.0, "width": 5.0},
        rhs=None, truth_terms=None,
    ),
}


def builtin_system(name):
    """Return the canonical SystemSpec for one of the nine builtin systems."""
    try:
        cfg = _BUILTINS[name]
    except KeyError:
        raise NotFoundError(f"unknown system {name!r}; choose from "
                            f"{ODE_SYSTEMS + PDE_SYSTEMS}") from None
    return SystemSpec(name=name, **cfg)


def make_system(name, kind, dim, rhs, params=None):
    """Build a custom SystemSpec (mainly for tests and experiments)."""
    return SystemSpec(name=name, kind=kind, dim=dim, params=params or {}, rhs=rhs)


# ---------------------------------------------------------------------------
# ODE integration
# ---------------------------------------------------------------------------

def rk4_path(rhs, z0, dt, n, guard=NORM_GUARD):
    """Integrate dz/dt = rhs(z) with fixed-step classical RK4.

    Raises DivergedError (with the offending step index) if the state norm
    exceeds ``guard``.
    """
    z0 = np.asarray(z0, dtype=float)
    states = np.empty((n, z0.size))
    states[0] = z0
    z = z0.copy()
    for i in range(1, n):
        k1 = rhs(z)
        k2 = rhs(z + 0.5 * dt * k1)
        k3 = rhs(z + 0.5 * dt * k2)
        k4 = rhs(z + dt * k3)
        z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > guard:
            raise DivergedError(f"state norm exceeded {guard:g} at step {i}",
                                step_index=i)
        states[i] = z
    return states


def integrate_ode(spec, z0, dt, n):
    """Simulate an ODE SystemSpec from z0 for n uniformly spaced samples."""
    if spec.kind != "ode":
        raise InvalidArgumentError(f"{spec.name} is not an ODE system")
    if dt <= 0:
        raise InvalidArgumentError("dt must be positive")
    if n < 2:
        raise InvalidArgumentError("need n >= 2 samples")
    states = rk4_path(spec.rhs, z0, dt, n)
    return Trajectory(times=np.arange(n) * dt, states=states)


# ---------------------------------------------------------------------------
# PDE simulation
# ---------------------------------------------------------------------------

def pde_dt_max(spec, grid_size):
    """Largest stable explicit step for the given spec and grid."""
    dx = spec.params["width"] / grid_size
    if spec.name == "Water":
        # advective bound with h near 1 and modest velocities
        c = abs(spec.params["g"]) ** 0.5 * 1.5 + 1.0
        return 0.5 * dx / c
    diff = max(spec.params.get("d1", 0.0), spec.params.get("d2", 0.0))
    if diff <= 0.0:
        return np.inf
    return dx * dx / (4.0 * diff)


def simulate_pde(spec, grid_size, initial_field, dt, n):
    """Explicit time stepping of a PDE SystemSpec on a periodic 2-D grid.

    Reaction-diffusion systems use forward Euler with a 5-point-stencil
    Laplacian; the shallow-water system uses Lax-Friedrichs. Frames are
    recorded at every solver step.
    """
    if spec.kind != "pde":
        raise InvalidArgumentError(f"{spec.name} is not a PDE system")
    if grid_size < 16:
        raise InvalidArgumentError("grid_size must be >= 16")
    fields = [np.array(f, dtype=float) for f in np.asarray(initial_field, dtype=float)]
    if len(fields) != spec.dim:
        raise InvalidArgumentError(
            f"initial_field must have {spec.dim} channels, got {len(fields)}")
    dt_max = pde_dt_max(spec, grid_size)
    if dt > dt_max:
        raise UnstableError(
            f"dt={dt:g} violates the stability bound {dt_max:g} "
            f"for {spec.name} on a {grid_size} grid")

    dx = spec.params["width"] / grid_size
    inv_dx2 = 1.0 / (dx * dx)
    frames = np.empty((n, spec.dim, grid_size, grid_size))
    for c, f in enumerate(fields):
        frames[0, c] = f

    p = spec.params
    for i in range(1, n):
        if spec.name == "LO":
            fields = list(_kernels.lo_step(fields[0], fields[1],
                                           p["d1"], p["d2"], p["beta"], dt, inv_dx2))
        elif spec.name == "Bruss":
            fields = list(_kernels.bruss_step(fields[0], fields[1],
                                              p["d1"], p["d2"], p["a"], p["b"],
                                              dt, inv_dx2))
        elif spec.name == "Water":
            fields = list(_kernels.water_step(fields[0], fields[1], fields[2],
                                              p["g"], dt, 1.0 / dx))
        else:
            reaction = spec.rhs(*fields) if spec.rhs is not None else [0.0] * spec.dim
            new = []
            for c, f in enumerate(fields):
                diff = p.get(f"d{c + 1}", 0.0)
                delta = reaction[c]
                if diff != 0.0:
                    delta = delta + diff * _kernels._lap(f, inv_dx2)
                new.append(f + dt * delta)
            fields = new
        for c, f in enumerate(fields):
            if not np.all(np.isfinite(f)):
                raise DivergedError(f"non-finite field in channel {c} at step {i}",
                                    step_index=i)
            frames[i, c] = f

    meta = {"system": spec.name, "grid_size": grid_size, "width": p["width"],
            "dt": dt, "channel_names": _channel_names(spec)}
    return FrameSequence(times=np.arange(n) * dt, frames=frames, meta=meta)


def _channel_names(spec):
    if spec.name == "Water":
        return ["h", "hu", "hv"]
    if spec.dim == 2:
        return ["u", "v"]
    return [f"c{i}" for i in range(spec.dim)]


# ---------------------------------------------------------------------------
# rendering and world <-> pixel mapping
# ---------------------------------------------------------------------------

def world_to_pixel(meta, points):
    """Map world coordinates to pixel coordinates (x right, y up in world)."""
    xmin, xmax, ymin, ymax = meta["world_bounds"]
    height, width = meta["resolution"]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    px = (pts[:, 0] - xmin) / (xmax - xmin) * (width - 1)
    py = (ymax - pts[:, 1]) / (ymax - ymin) * (height - 1)
    out = np.column_stack([px, py])
    return out[0] if np.ndim(points) == 1 else out


def pixel_to_world(meta, points):
    """Inverse of :func:`world_to_pixel`."""
    xmin, xmax, ymin, ymax = meta["world_bounds"]
    height, width = meta["resolution"]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x = pts[:, 0] / (width - 1) * (xmax - xmin) + xmin
    y = ymax - pts[:, 1] / (height - 1) * (ymax - ymin)
    out = np.column_stack([x, y])
    return out[0] if np.ndim(points) == 1 else out


def render_pixel_video(traj, resolution=(500, 500), object_radius=8.0,
                       world_bounds=(-3.0, 3.0, -3.0, 3.0),
                       background=0.0, foreground=1.0):
    """Render a planar trajectory as a video of an anti-aliased moving disc.

    The above-background centroid of every frame lands on the affine image
    of the state to within half a pixel.
    """
    if traj.dim != 2:
        raise InvalidArgumentError("rendering requires a 2-D trajectory")
    xmin, xmax, ymin, ymax = world_bounds
    bad = np.nonzero(
        (traj.states[:, 0] < xmin) | (traj.states[:, 0] > xmax)
        | (traj.states[:, 1] < ymin) | (traj.states[:, 1] > ymax))[0]
    if bad.size:
        raise OutOfFrameError(
            f"{bad.size} states outside world bounds {world_bounds}",
            indices=bad.tolist())

    height, width = resolution
    meta = {"world_bounds": tuple(world_bounds), "resolution": (height, width),
            "background": background, "foreground": foreground,
            "object_radius": object_radius, "dt": traj.dt,
            "channel_names": ["intensity"]}
    frames = np.full((len(traj.states), 1, height, width), background,
                     dtype=np.float32)
    centers = world_to_pixel(meta, traj.states)
    for i, (cx, cy) in enumerate(centers):
        _kernels.fill_disc(frames[i, 0], float(cx), float(cy),
                           float(object_radius), float(foreground))
    return FrameSequence(times=traj.times.copy(), frames=frames, meta=meta)


def add_observation_noise(fseq, sigma, seed=0):
    """Add zero-mean Gaussian noise scaled by the sequence pixel std.

    sigma = 0 returns a bitwise-equal copy. Deterministic under ``seed``.
    """
    if sigma < 0:
        raise InvalidArgumentError("sigma must be non-negative")
    frames = np.array(fseq.frames, copy=True)
    meta = dict(fseq.meta)
    meta["noise_sigma"] = sigma
    if sigma > 0:
        rng = np.random.default_rng(seed)
        scale = sigma * float(np.std(fseq.frames))
        frames = frames + rng.normal(0.0, scale, size=frames.shape).astype(frames.dtype)
    return FrameSequence(times=fseq.times.copy(), frames=frames, meta=meta)


# ---------------------------------------------------------------------------
# default scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """Per-system simulation defaults used by the pipeline and tests."""

    name: str
    z0: tuple = None
    dt: float = 0.05
    n_frames: int = 200
    world_bounds: tuple = None
    resolution: tuple = (500, 500)
    object_radius: float = 8.0
    grid_size: int = None


_SCENARIOS = {
    "Linear": Scenario("Linear", z0=(2.0, 0.0), dt=0.05, n_frames=200,
                       world_bounds=(-3.0, 3.0, -3.0, 3.0)),
    "Cubic": Scenario("Cubic", z0=(2.0, 0.0), dt=0.01, n_frames=200,
                      world_bounds=(-3.0, 3.0, -3.0, 3.0)),
    "Circular": Scenario("Circular", z0=(1.0, 0.0), dt=2.0 * np.pi / 200.0,
                         n_frames=200, world_bounds=(-1.5, 1.5, -1.5, 1.5)),
    "VDP": Scenario("VDP", z0=(1.0, 0.0), dt=0.05, n_frames=200,
                    world_bounds=(-4.0, 4.0, -4.0, 4.0)),
    "Glider": Scenario("Glider", z0=(1.2, 0.2), dt=0.05, n_frames=200,
                       world_bounds=(0.0, 2.5, -1.2, 1.2)),
    "Exp": Scenario("Exp", z0=(2.0, 1.0), dt=0.05, n_frames=200,
                    world_bounds=(-2.5, 2.5, -2.5, 2.5)),
    "LO": Scenario("LO", dt=0.05, n_frames=1000, grid_size=100),
    "Bruss": Scenario("Bruss", dt=0.05, n_frames=1000, grid_size=64),
    "Water": Scenario("Water", dt=0.005, n_frames=1000, grid_size=128),
}


def default_scenario(name):
    try:
        return _SCENARIOS[name]
    except KeyError:
        raise NotFoundError(f"no default scenario for {name!r}") from None


def make_initial_field(name, grid_size, rng=None):
    """Canonical initial field for a builtin PDE system.

    LO gets a single-armed spiral seed, Bruss a smooth perturbation of the
    homogeneous state, Water a radial height bump at rest. A generator can
    be passed to perturb the deterministic default.
    """
    spec = builtin_system(name)
    width = spec.params["width"]
    half = width / 2.0
    ax = np.linspace(-half, half, grid_size, endpoint=False)
    x, y = np.meshgrid(ax, ax)
    if name == "LO":
        r = np.sqrt(x * x + y * y)
        theta = np.arctan2(y, x)
        u = np.tanh(r) * np.cos(theta - r)
        v = np.tanh(r) * np.sin(theta - r)
        fields = np.stack([u, v])
    elif name == "Bruss":
        a, b = spec.params["a"], spec.params["b"]
        k = 2.0 * np.pi / width
        u = a + 0.3 * np.sin(k * x) * np.sin(k * y)
        v = b / a + 0.2 * np.cos(k * x)
        fields = np.stack([u, v])
    elif name == "Water":
        r2 = x * x + y * y
        h = 1.0 + 0.4 * np.exp(-r2 / 0.16)
        fields = np.stack([h, np.zeros_like(h), np.zeros_like(h)])
    else:
        raise NotFoundError(f"{name!r} is not a builtin PDE system")
    if rng is not None:
        fields = fields + 0.02 * rng.standard_normal(fields.shape)
    return fields


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_MAGIC = b"VERT"
_VERSION = 1


def write_frames(path, fseq):
    """Write frames in the frame-tensor format (f32, row-major t,c,y,x).

    A ``<path>.meta.json`` sidecar is not written here; callers that need
    to round-trip metadata serialize ``fseq.meta`` themselves.
    """
    data = np.ascontiguousarray(fseq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HH", _VERSION, data.ndim))
        for d in data.shape:
            fh.write(struct.pack("<I", d))
        fh.write(data.tobytes())


def read_frames(path, dt=1.0, meta=None):
    """Read a frame-tensor file; times reconstructed from ``dt``."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<HH", fh.read(4))
        if version != _VERSION:
            raise InvalidArgumentError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        payload = fh.read()
    frames = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return FrameSequence(times=np.arange(dims[0]) * dt,
                         frames=np.array(frames), meta=dict(meta or {}))


def write_trajectory(path, traj):
    """Write a trajectory as CSV with header t,z1,...,zd."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"z{i + 1}" for i in range(traj.dim)])
        for t, row in zip(traj.times, traj.states):
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_trajectory(path_or_text):
    """Read a trajectory CSV (path or literal text)."""
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        fh = io.StringIO(path_or_text)
        rows = list(csv.reader(fh))
    else:
        with open(path_or_text, newline="") as fh:
            rows = list(csv.reader(fh))
    header = rows[0]
    if header[0] != "t":
        raise InvalidArgumentError("trajectory CSV must start with a 't' column")
    body = np.array([[float(v) for v in row] for row in rows[1:]])
    return Trajectory(times=body[:, 0], states=body[:, 1:])
