"""Physical-coordinate extraction from rendered videos.

A pluggable Locator maps frames to pixel points; the detection loop wraps
it with three visual tools (measurement overlay, quadrant amplifier,
replay marker) and a feedback-driven Savitzky-Golay smoother. The
OracleLocator reads the rendered centroid directly (plus a seeded pixel
noise knob) so the whole pipeline runs without a vision model.
"""

import re
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy.signal import savgol_filter

from . import _kernels
from .dynamics import Trajectory, pixel_to_world
from .errors import DetectionFailedError, InvalidArgumentError


@dataclass(frozen=True)
class FilterParams:
    """Savitzky-Golay window length (odd) and polynomial order."""

    window: int
    order: int

    def validate(self, n=None):
        if self.window < 3 or self.window % 2 == 0:
            raise InvalidArgumentError(
                f"window must be odd and >= 3, got {self.window}")
        if not (0 <= self.order < self.window):
            raise InvalidArgumentError(
                f"order must satisfy 0 <= order < window, got {self.order}")
        if n is not None and self.window > n:
            raise InvalidArgumentError(
                f"window {self.window} exceeds signal length {n}")


@dataclass(frozen=True)
class AxesSpec:
    """Configuration of the measurement overlay."""

    n_ticks: int = 10
    label_scale: float = 1.0
    with_labels: bool = True
    world_bounds: tuple = None
    intensity: float = None


@dataclass(frozen=True)
class ToolConfig:
    """Which visual tools the detection loop applies (ablation switches)."""

    measure: bool = True
    amplifier: bool = True
    replayer: bool = True


@dataclass(frozen=True)
class CropTransform:
    """Affine map between crop pixel coordinates and full-frame pixels."""

    scale: float
    offset_x: float
    offset_y: float

    def to_full(self, point):
        return (point[0] / self.scale + self.offset_x,
                point[1] / self.scale + self.offset_y)

    def to_crop(self, point):
        return ((point[0] - self.offset_x) * self.scale,
                (point[1] - self.offset_y) * self.scale)


IDENTITY_TRANSFORM = CropTransform(scale=1.0, offset_x=0.0, offset_y=0.0)


# ---------------------------------------------------------------------------
# drawing helpers
# ---------------------------------------------------------------------------

def _overlay_intensity(frame, requested):
    if requested is not None:
        return float(requested)
    lo, hi = float(frame.min()), float(frame.max())
    return hi + 0.25 * (hi - lo + 1.0)


def _burn_mask(frame, mask, intensity):
    out = np.array(frame, dtype=float, copy=True)
    out[mask] = intensity
    return out


def overlay_measurement(frame, axes_spec=None):
    """Burn a graduated coordinate system with gridlines into a frame copy."""
    spec = axes_spec or AxesSpec()
    height, width = frame.shape
    spacing_x = width / (spec.n_ticks + 1)
    spacing_y = height / (spec.n_ticks + 1)
    if spacing_x < 2 or spacing_y < 2:
        raise InvalidArgumentError(
            f"tick spacing below 2 px ({spacing_x:.1f}, {spacing_y:.1f})")

    img = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(img)
    try:
        font = ImageFont.load_default(size=max(8, int(10 * spec.label_scale)))
    except TypeError:  # older Pillow: fixed-size bitmap font
        font = ImageFont.load_default()

    xs = [int(round((i + 1) * spacing_x)) for i in range(spec.n_ticks)]
    ys = [int(round((i + 1) * spacing_y)) for i in range(spec.n_ticks)]
    for x in xs:
        draw.line([(x, 0), (x, height - 1)], fill=255, width=1)
        draw.line([(x, height - 6), (x, height - 1)], fill=255, width=3)
    for y in ys:
        draw.line([(0, y), (width - 1, y)], fill=255, width=1)
        draw.line([(0, y), (5, y)], fill=255, width=3)
    draw.rectangle([0, 0, width - 1, height - 1], outline=255, width=1)

    if spec.with_labels:
        for i, x in enumerate(xs):
            label = _tick_label(spec, i, axis=0, frame_size=(height, width))
            draw.text((min(x + 2, width - 20), height - 16), label,
                      fill=255, font=font)
        for i, y in enumerate(ys):
            label = _tick_label(spec, i, axis=1, frame_size=(height, width))
            draw.text((7, max(0, y - 12)), label, fill=255, font=font)

    mask = np.array(img) > 0
    return _burn_mask(frame, mask, _overlay_intensity(frame, spec.intensity))


def _tick_label(spec, i, axis, frame_size):
    height, width = frame_size
    frac = (i + 1) / (spec.n_ticks + 1)
    if spec.world_bounds is not None:
        xmin, xmax, ymin, ymax = spec.world_bounds
        if axis == 0:
            value = xmin + frac * (xmax - xmin)
        else:
            value = ymax - frac * (ymax - ymin)
        return f"{value:.3g}"
    return str(int(round(frac * (width if axis == 0 else height))))


def crop_quadrant(frame, quadrant):
    """Extract one quadrant, upscaled 2x, plus the transform back to
    full-frame pixel coordinates.

    Quadrants follow the usual orientation of the rendered world (y up):
    1 = top right, 2 = top left, 3 = bottom left, 4 = bottom right.
    """
    if quadrant not in (1, 2, 3, 4):
        raise InvalidArgumentError(f"quadrant must be 1..4, got {quadrant}")
    height, width = frame.shape
    hy, hx = height // 2, width // 2
    y0 = 0 if quadrant in (1, 2) else hy
    x0 = hx if quadrant in (1, 4) else 0
    sub = frame[y0:y0 + hy, x0:x0 + hx]
    up = np.repeat(np.repeat(sub, 2, axis=0), 2, axis=1)
    return up, CropTransform(scale=2.0, offset_x=float(x0), offset_y=float(y0))


def quadrant_of_point(frame_shape, point):
    """Quadrant (1..4) of a full-frame pixel point."""
    height, width = frame_shape
    top = point[1] < height / 2
    right = point[0] >= width / 2
    if top:
        return 1 if right else 2
    return 4 if right else 3


def replay_marker(frame, point, radius=4.0, intensity=None):
    """Blend a high-contrast disc marker at ``point`` into a frame copy.

    Out-of-frame points are clipped to the border; the returned flag
    reports whether clipping happened.
    """
    height, width = frame.shape
    x, y = float(point[0]), float(point[1])
    clipped = not (0 <= x <= width - 1 and 0 <= y <= height - 1)
    x = min(max(x, 0.0), width - 1.0)
    y = min(max(y, 0.0), height - 1.0)
    out = np.array(frame, dtype=float, copy=True)
    _kernels.fill_disc(out, x, y, radius, _overlay_intensity(frame, intensity))
    return out, clipped


def export_png(frame, path):
    """Save a 2-D float frame as an 8-bit grayscale PNG."""
    lo, hi = float(frame.min()), float(frame.max())
    scale = 255.0 / (hi - lo) if hi > lo else 1.0
    img = Image.fromarray(((frame - lo) * scale).astype(np.uint8), mode="L")
    img.save(path)


# ---------------------------------------------------------------------------
# locators
# ---------------------------------------------------------------------------

class Locator:
    """Maps a frame (plus context) to a full-frame pixel point estimate.

    ``context`` carries the un-annotated frame/crop, the active crop
    transform, detection history, and sequence metadata.
    """

    def locate(self, frame, context):
        raise NotImplementedError

    def confirm(self, frame_crop, context):
        """Whether the cropped view contains the target object."""
        raise NotImplementedError

    def quadrant(self, frame, context):
        """Quadrant guess used by the regional amplifier."""
        point = self.locate(frame, context)
        if point is None:
            return None
        return quadrant_of_point(frame.shape, point)


def weighted_centroid(frame, background=None, floor_frac=0.1):
    """Intensity-weighted centroid of above-background pixels, or None."""
    if background is None:
        background = float(np.median(frame))
    w = np.abs(np.asarray(frame, dtype=float) - background)
    cutoff = floor_frac * float(w.max())
    w[w < cutoff] = 0.0
    total = w.sum()
    if total <= 0:
        return None
    col_mass = w.sum(axis=0)
    row_mass = w.sum(axis=1)
    cx = col_mass @ np.arange(frame.shape[1]) / total
    cy = row_mass @ np.arange(frame.shape[0]) / total
    return (float(cx), float(cy))


class AdvisorLocator(Locator):
    """Drives a chat advisor through the visual tool chain.

    The advisor reads coordinates off the measurement overlay in world
    units; conversion back to full-frame pixels uses the sequence meta.
    Unparseable replies surface as missing detections.
    """

    def __init__(self, client, meta, history_window=5):
        self.client = client
        self.meta = meta
        self.history_window = history_window

    def _history_text(self, context):
        from .dynamics import pixel_to_world
        pts = (context or {}).get("history_px", [])[-self.history_window:]
        if not pts:
            return "(none)"
        world = [pixel_to_world(self.meta, p) for p in pts]
        return "; ".join(f"({p[0]:.4g}, {p[1]:.4g})" for p in world)

    def _ask(self, template_id, bindings):
        from .llm_client import render_prompt
        self.last_reply = self.client.chat(render_prompt(template_id,
                                                         bindings))
        return self.last_reply

    def locate(self, frame, context=None):
        from .dynamics import world_to_pixel
        from .llm_client import extract_delimited
        context = context or {}
        xmin, xmax, ymin, ymax = self.meta["world_bounds"]
        initial = context.get("initial_point")
        if initial is not None:
            from .dynamics import pixel_to_world
            w = pixel_to_world(self.meta, initial)
            reply = self._ask("replayer_comparison", {
                "frame": frame, "frame_index": context.get("frame_index", 0),
                "x": f"{w[0]:.4g}", "y": f"{w[1]:.4g}"})
        else:
            reply = self._ask("coordinate_reading", {
                "frame": frame, "frame_index": context.get("frame_index", 0),
                "xmin": xmin, "xmax": xmax, "ymin": ymin, "ymax": ymax,
                "history": self._history_text(context)})
        try:
            coords = extract_delimited(reply, "<coord>", "</coord>")
            x, y = (float(v) for v in coords[-1].split(","))
        except Exception:
            return None
        return tuple(world_to_pixel(self.meta, (x, y)))

    def confirm(self, frame_crop, context=None):
        context = context or {}
        from .llm_client import extract_one
        reply = self._ask("crop_confirmation", {
            "crop": frame_crop, "quadrant": context.get("quadrant", 0),
            "frame_index": context.get("frame_index", 0)})
        decision = extract_one(reply, "decision")
        return decision is not None and decision.strip().lower() == "yes"

    def quadrant(self, frame, context=None):
        from .llm_client import extract_one
        context = context or {}
        reply = self._ask("quadrant_detection", {
            "frame": frame, "frame_index": context.get("frame_index", 0),
            "history": self._history_text(context)})
        decision = extract_one(reply, "decision")
        try:
            q = int(decision.strip())
        except (AttributeError, ValueError):
            return None
        return q if q in (1, 2, 3, 4) else None


class OracleLocator(Locator):
    """Reads the rendered centroid from the raw pixels, plus optional
    seeded Gaussian pixel noise (std ``sigma_px``, full-frame units).

    Exists to make the detection pipeline testable without a vision
    model; it ignores burned-in annotations by reading the raw view from
    the context.
    """

    def __init__(self, sigma_px=0.0, seed=0):
        if sigma_px < 0:
            raise InvalidArgumentError("sigma_px must be non-negative")
        self.sigma_px = float(sigma_px)
        self._rng = np.random.default_rng(seed)

    def _raw_view(self, frame, context):
        raw = context.get("raw_view") if context else None
        return raw if raw is not None else frame

    def locate(self, frame, context=None):
        context = context or {}
        raw = self._raw_view(frame, context)
        meta = context.get("meta", {})
        centroid = weighted_centroid(raw, background=meta.get("background"))
        if centroid is None:
            return None
        transform = context.get("transform", IDENTITY_TRANSFORM)
        x, y = transform.to_full(centroid)
        if self.sigma_px > 0:
            x += self.sigma_px * self._rng.standard_normal()
            y += self.sigma_px * self._rng.standard_normal()
        return (x, y)

    def confirm(self, frame_crop, context=None):
        context = context or {}
        raw = self._raw_view(frame_crop, context)
        meta = context.get("meta", {})
        bg = meta.get("background", float(np.median(raw)))
        fg = meta.get("foreground")
        span = abs(fg - bg) if fg is not None else float(np.abs(raw - bg).max())
        return bool(np.abs(raw - bg).max() > 0.5 * span)

    def quadrant(self, frame, context=None):
        context = context or {}
        raw = self._raw_view(frame, context)
        meta = context.get("meta", {})
        centroid = weighted_centroid(raw, background=meta.get("background"))
        if centroid is None:
            return None
        transform = context.get("transform", IDENTITY_TRANSFORM)
        return quadrant_of_point(
            context.get("full_shape", frame.shape), transform.to_full(centroid))


# ---------------------------------------------------------------------------
# detection loop
# ---------------------------------------------------------------------------

def detect_sequence(fseq, locator, tools=None, axes_spec=None,
                    max_missing_frac=0.2):
    """Serially extract the object's world-coordinate sequence from a video.

    Per frame: measurement overlay, optional quadrant crop with a
    confirmation check (full-frame fallback when confirmation fails), a
    locate call, then one replay-marker correction pass. Detection
    history is passed to the locator as context. Returns the trajectory in
    world units together with a per-frame transcript.
    """
    if fseq.frames.shape[1] != 1:
        raise InvalidArgumentError("pixel detection expects single-channel video")
    tools = tools or ToolConfig()
    meta = fseq.meta
    if axes_spec is None:
        axes_spec = AxesSpec(world_bounds=meta.get("world_bounds"))

    history = []
    transcript = []
    times = []
    points_world = []
    n_missing = 0

    for i in range(fseq.n_frames):
        raw = fseq.frames[i, 0].astype(float)
        record = {"frame": i, "tool_calls": [], "missing": False}
        annotated = raw
        if tools.measure:
            annotated = overlay_measurement(raw, axes_spec)
            record["tool_calls"].append({"tool": "measure"})

        view, raw_view = annotated, raw
        transform = IDENTITY_TRANSFORM
        context = {"raw_view": raw, "transform": transform, "meta": meta,
                   "history_px": list(history), "frame_index": i,
                   "full_shape": raw.shape}
        if tools.amplifier:
            quadrant = locator.quadrant(annotated, context)
            if quadrant is not None:
                crop_annot, tf = crop_quadrant(annotated, quadrant)
                crop_raw, _ = crop_quadrant(raw, quadrant)
                confirm_ctx = dict(context, raw_view=crop_raw, transform=tf,
                                   quadrant=quadrant)
                confirmed = locator.confirm(crop_annot, confirm_ctx)
                record["tool_calls"].append(
                    {"tool": "amplifier", "quadrant": quadrant,
                     "confirmed": bool(confirmed)})
                if confirmed:
                    view, raw_view, transform = crop_annot, crop_raw, tf
                else:
                    record["tool_calls"].append({"tool": "amplifier_fallback"})

        context = dict(context, raw_view=raw_view, transform=transform)
        point = locator.locate(view, context)
        record["tool_calls"].append(
            {"tool": "locate",
             "point_px": None if point is None else list(point),
             "raw_reply": getattr(locator, "last_reply", None)})

        if point is not None and tools.replayer:
            marked, clipped = replay_marker(annotated, point)
            replay_ctx = dict(context, raw_view=raw, transform=IDENTITY_TRANSFORM,
                              initial_point=point, marker_clipped=clipped)
            corrected = locator.locate(marked, replay_ctx)
            record["tool_calls"].append(
                {"tool": "replayer", "clipped": bool(clipped),
                 "point_px": None if corrected is None else list(corrected),
                 "raw_reply": getattr(locator, "last_reply", None)})
            if corrected is not None:
                point = corrected

        if point is None:
            n_missing += 1
            record["missing"] = True
        else:
            history.append(point)
            world = pixel_to_world(meta, point)
            record["point_px"] = list(point)
            record["point_world"] = [float(world[0]), float(world[1])]
            times.append(fseq.times[i])
            points_world.append(world)
        transcript.append(record)

    if n_missing > max_missing_frac * fseq.n_frames:
        raise DetectionFailedError(
            f"{n_missing}/{fseq.n_frames} frames without detection")
    traj = Trajectory(times=np.array(times), states=np.array(points_world))
    return traj, transcript


# ---------------------------------------------------------------------------
# Savitzky-Golay smoothing with advisor feedback
# ---------------------------------------------------------------------------

def sg_filter(signal, params):
    """Savitzky-Golay smoothing applied column-wise.

    Per-window least-squares polynomial fits evaluated at the window
    center; the terminal windows' polynomials extrapolate the edges so the
    output length matches the input.
    """
    signal = np.asarray(signal, dtype=float)
    n = signal.shape[0]
    params.validate(n=n)
    return savgol_filter(signal, params.window, params.order, axis=0,
                         mode="interp")


class AlwaysAcceptAdvisor:
    """Accepts the first smoothing result unconditionally."""

    def judge(self, candidate, history):
        return "accept"


class ScriptedSmoothingAdvisor:
    """Replays a fixed decision sequence (FilterParams or "accept")."""

    def __init__(self, decisions):
        self._decisions = list(decisions)

    def judge(self, candidate, history):
        if not self._decisions:
            return "accept"
        return self._decisions.pop(0)


def trajectory_plot_array(raw, smoothed, size=(240, 320)):
    """Grayscale plot of raw vs smoothed trajectories as a 2-D array."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(raw.shape[1], 1, figsize=(4, 3), dpi=80,
                             squeeze=False)
    for j, ax in enumerate(axes[:, 0]):
        ax.plot(raw[:, j], lw=0.8, label="raw")
        ax.plot(smoothed[:, j], lw=0.8, label="smoothed")
        ax.set_ylabel(f"z{j + 1}")
    axes[0, 0].legend(fontsize=6)
    fig.canvas.draw()
    rgba = np.asarray(fig.canvas.buffer_rgba())
    plt.close(fig)
    gray = rgba[..., :3].astype(float).mean(axis=2)
    return gray


class LlmSmoothingAdvisor:
    """Delegates the accept/retune decision to a chat advisor."""

    def __init__(self, client):
        self.client = client

    def judge(self, candidate, history):
        from .llm_client import extract_one, render_prompt
        plot = trajectory_plot_array(candidate["raw"], candidate["smoothed"])
        history_text = "; ".join(
            f"(h={h['params'][0]}, p={h['params'][1]}, rmse={h['rmse']:.4g})"
            for h in history) or "(none)"
        reply = self.client.chat(render_prompt("smoothness_judgment", {
            "plot": plot, "window": candidate["params"].window,
            "order": candidate["params"].order,
            "rmse": f"{candidate['rmse']:.4g}", "history": history_text}))
        decision = extract_one(reply, "decision")
        if decision is None:
            return "accept"
        decision = decision.strip().lower()
        if decision == "accept":
            return "accept"
        m = re.fullmatch(r"h\s*=\s*(\d+)\s*,\s*p\s*=\s*(\d+)", decision)
        if not m:
            return "accept"
        return FilterParams(int(m.group(1)), int(m.group(2)))


class DeterministicSmoothingAdvisor:
    """Noise-aware window selection without a vision model.

    Accepts a candidate when the smoothed-vs-raw RMSE changes by less than
    ``tol`` (relative) between iterations, or when it already sits in a
    band around the robust noise estimate (smoothing removes about the
    noise and no more). Otherwise walks the window ladder toward the band:
    up when the data looks under-smoothed, down when the window distorts
    the signal.
    """

    UP = (15, 21, 31)
    DOWN = (9, 7, 5)

    def __init__(self, tol=0.01, band=(0.75, 1.5)):
        self.tol = tol
        self.band = band

    @staticmethod
    def _noise_scale(states):
        # second differences of white noise have std sigma * sqrt(6)
        d2 = np.diff(states, n=2, axis=0)
        mad = np.median(np.abs(d2 - np.median(d2, axis=0)), axis=0)
        sigma = 1.4826 * mad / np.sqrt(6.0)
        return max(float(np.sqrt(np.mean(sigma ** 2))), 1e-12)

    def judge(self, candidate, history):
        rmse = candidate["rmse"]
        if history:
            prev = history[-1]["rmse"]
            if abs(rmse - prev) / max(prev, 1e-12) < self.tol:
                return "accept"
        sigma = self._noise_scale(candidate["raw"])
        if self.band[0] * sigma <= rmse <= self.band[1] * sigma:
            return "accept"
        ladder = self.UP if rmse < self.band[0] * sigma else self.DOWN
        current = candidate["params"].window
        for window in ladder:
            tried = {h["params"][0] for h in history} | {current}
            if window not in tried:
                return FilterParams(window, candidate["params"].order)
        return "accept"


def smooth_with_feedback(traj, advisor=None, max_iters=5,
                         initial=FilterParams(11, 3)):
    """Iterate sg_filter with advisor-chosen parameters until accepted.

    The advisor sees each candidate smoothing (params plus RMSE against
    the raw trajectory) and either accepts or proposes new parameters.
    Invalid proposals are retried once, then the current parameters stick.
    Returns (smoothed trajectory, accepted params, decision transcript).
    """
    if max_iters < 1:
        raise InvalidArgumentError("max_iters must be >= 1")
    advisor = advisor or DeterministicSmoothingAdvisor()
    n = len(traj.states)
    params = _clamp_params(initial, n)
    transcript = []
    smoothed = None

    for iteration in range(max_iters):
        states = sg_filter(traj.states, params)
        rmse = float(np.sqrt(np.mean((states - traj.states) ** 2)))
        candidate = {"iteration": iteration, "params": params, "rmse": rmse,
                     "raw": traj.states, "smoothed": states}
        decision = advisor.judge(candidate, transcript)
        transcript.append({"iteration": iteration,
                           "params": (params.window, params.order),
                           "rmse": rmse,
                           "decision": "accept" if decision == "accept"
                           else (decision.window, decision.order)})
        smoothed = states
        if decision == "accept":
            break
        new_params = _validate_or_retry(decision, advisor, candidate,
                                        transcript, n, params)
        if new_params is None:  # fall back to current params and stop
            break
        params = new_params
    out = Trajectory(times=traj.times.copy(), states=smoothed)
    return out, params, transcript


def _clamp_params(params, n):
    window = min(params.window, n if n % 2 == 1 else n - 1)
    window = max(window, 3)
    order = min(params.order, window - 1)
    return FilterParams(window, order)


def _params_valid(params, n):
    try:
        params.validate(n=n)
        return True
    except InvalidArgumentError:
        return False


def _validate_or_retry(decision, advisor, candidate, transcript, n, current):
    if _params_valid(decision, n):
        return decision
    retry = advisor.judge(candidate, transcript)
    if retry != "accept" and _params_valid(retry, n):
        return retry
    warnings.warn("advisor returned invalid filter params twice; "
                  "keeping current parameters")
    transcript.append({"iteration": candidate["iteration"],
                       "params": (current.window, current.order),
                       "rmse": candidate["rmse"],
                       "decision": "invalid-params-fallback"})
    return None
