"""Synthetic gripper scenes with a known force -> deflection -> event chain.

The scene holds two mirrored elastic fingers drawn as polylines.  Applied
force deflects each finger toward the jaw centerline: the displacement of
a polyline point grows linearly with its arc position, from zero at the
base to ``delta_max_px * F / f_max_n`` at the tip.  Rendering uses a one
pixel anti-aliased edge so sub-pixel motion still changes intensities.

Events follow the standard contrast-threshold model: between two renders,
each pixel emits ``floor(|ln I1 - ln I0| / C)`` events with the sign of
the log-intensity change, timestamped evenly over the half-open interval
``(t0, t1]``.  Everything here is deterministic; optional noise events are
driven by an explicit seed and are off by default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream, concat_streams, validate_stream

Polyline = tuple[tuple[float, float], ...]


def default_fingers(width: int, height: int) -> tuple[Polyline, Polyline]:
    """Two horizontal fingers, base at the left, mirrored about mid-height."""
    x0, x1 = round(width * 0.125), round(width * 0.875)
    y_top, y_bot = round(height * 0.25), round(height * 0.75)
    return (
        ((float(x0), float(y_top)), (float(x1), float(y_top))),
        ((float(x0), float(y_bot)), (float(x1), float(y_bot))),
    )


@dataclass(frozen=True)
class GripperScene:
    """Static scene geometry and the event-camera contrast threshold."""

    width: int = 320
    height: int = 240
    fingers: tuple[Polyline, ...] | None = None
    delta_max_px: float = 12.0
    f_max_n: float = 1.6
    background: float = 50.0
    foreground: float = 200.0
    contrast: float = 0.05
    thickness_px: float = 5.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("width and height must be positive")
        if self.fingers is None:
            object.__setattr__(self, "fingers", default_fingers(self.width, self.height))
        fingers = tuple(tuple((float(x), float(y)) for x, y in f) for f in self.fingers)
        object.__setattr__(self, "fingers", fingers)
        if self.delta_max_px < 0:
            raise ValueError("delta_max_px must be non-negative")
        if self.f_max_n <= 0:
            raise ValueError("f_max_n must be positive")
        if self.background <= 0 or self.foreground <= 0:
            raise ValueError("background and foreground intensities must be positive")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")
        if self.thickness_px <= 0:
            raise ValueError("thickness_px must be positive")
        for finger in fingers:
            if len(finger) < 2:
                raise ValueError("fingers need at least two control points")
            for x, y in finger:
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise ValueError("fingers must lie inside the sensor at zero force")


@dataclass(frozen=True)
class ForceProfile:
    """Force samples in newtons at a fixed rate, sample k at t = k / rate."""

    samples: tuple[float, ...]
    rate_hz: float

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(float(s) for s in self.samples))
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if not all(math.isfinite(s) and s >= 0 for s in self.samples):
            raise ValueError("samples must be finite and non-negative")

    @property
    def period_us(self) -> int:
        return round(1e6 / self.rate_hz)


def force_to_deflection(force_n: float, scene: GripperScene) -> float:
    """Tip deflection in pixels for a force inside [0, f_max_n]."""
    if not (0 <= force_n <= scene.f_max_n):
        raise ValueError(f"force {force_n} outside [0, {scene.f_max_n}]")
    # Divide first so full force maps to exactly delta_max_px.
    return scene.delta_max_px * (force_n / scene.f_max_n)


def _deflected_points(finger: Polyline, deflection: float, center_y: float) -> np.ndarray:
    pts = np.asarray(finger, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    frac = arc / arc[-1] if arc[-1] > 0 else arc
    direction = 1.0 if pts[:, 1].mean() < center_y else -1.0
    out = pts.copy()
    out[:, 1] += direction * deflection * frac
    return out


def render_intensity(scene: GripperScene, force_n: float) -> np.ndarray:
    """Render the scene at a force as a float64 (height, width) image.

    Pixels are sampled at integer centers; coverage falls off linearly
    over one pixel around each finger's outline, so the image is smooth
    in the sub-pixel deflection.
    """
    deflection = force_to_deflection(force_n, scene)
    dist = np.full((scene.height, scene.width), np.inf)
    margin = scene.thickness_px / 2 + 1.5
    for finger in scene.fingers:
        pts = _deflected_points(finger, deflection, scene.height / 2.0)
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            x_lo = max(int(np.floor(min(ax, bx) - margin)), 0)
            x_hi = min(int(np.ceil(max(ax, bx) + margin)) + 1, scene.width)
            y_lo = max(int(np.floor(min(ay, by) - margin)), 0)
            y_hi = min(int(np.ceil(max(ay, by) + margin)) + 1, scene.height)
            if x_lo >= x_hi or y_lo >= y_hi:
                continue
            ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
            abx, aby = bx - ax, by - ay
            length2 = abx * abx + aby * aby
            if length2 == 0:
                d = np.hypot(xs - ax, ys - ay)
            else:
                tpar = ((xs - ax) * abx + (ys - ay) * aby) / length2
                tpar = np.clip(tpar, 0.0, 1.0)
                d = np.hypot(xs - (ax + tpar * abx), ys - (ay + tpar * aby))
            np.minimum(dist[y_lo:y_hi, x_lo:x_hi], d, out=dist[y_lo:y_hi, x_lo:x_hi])
    coverage = np.clip(scene.thickness_px / 2 + 0.5 - dist, 0.0, 1.0)
    return scene.background + (scene.foreground - scene.background) * coverage


def events_from_intensity_pair(
    prev_img: np.ndarray,
    next_img: np.ndarray,
    t_prev_us: int,
    t_next_us: int,
    contrast: float,
) -> EventStream:
    """Contrast-threshold events between two positive intensity images.

    Each pixel emits floor(|ln next - ln prev| / contrast) events whose
    polarity is the sign of the change; the k events of a pixel are
    spaced evenly over (t_prev, t_next].  The stream is sorted by
    timestamp, then y, x, polarity, so output order is reproducible.
    """
    prev_img = np.asarray(prev_img, dtype=np.float64)
    next_img = np.asarray(next_img, dtype=np.float64)
    if prev_img.shape != next_img.shape or prev_img.ndim != 2:
        raise ValueError("images must be two equal-shape 2-D arrays")
    if (prev_img <= 0).any() or (next_img <= 0).any():
        raise ValueError("intensities must be positive for the log-change model")
    if t_prev_us >= t_next_us:
        raise ValueError("t_prev_us must precede t_next_us")
    if contrast <= 0:
        raise ValueError("contrast must be positive")

    height, width = prev_img.shape
    delta = np.log(next_img) - np.log(prev_img)
    counts = np.floor(np.abs(delta) / contrast).astype(np.int64)
    ys, xs = np.nonzero(counts)
    if len(ys) == 0:
        return EventStream(width, height)
    per_pixel = counts[ys, xs]
    pol = np.where(delta[ys, xs] > 0, 1, -1).astype(np.int8)

    rep_y = np.repeat(ys, per_pixel)
    rep_x = np.repeat(xs, per_pixel)
    rep_p = np.repeat(pol, per_pixel)
    rep_n = np.repeat(per_pixel, per_pixel)
    starts = np.cumsum(per_pixel) - per_pixel
    ordinal = np.arange(per_pixel.sum()) - np.repeat(starts, per_pixel)
    span = t_next_us - t_prev_us
    t = t_prev_us + np.ceil(span * (ordinal + 1) / rep_n).astype(np.int64)

    order = np.lexsort((rep_p, rep_x, rep_y, t))
    return EventStream(width, height, t[order], rep_x[order], rep_y[order], rep_p[order])


def make_grasp_profile(
    n_samples: int, f_max_n: float, rate_hz: float = 10.0, seed: int = 0
) -> ForceProfile:
    """Seeded monotone grasp: force climbs from 0 to f_max_n in random steps."""
    if n_samples < 2:
        raise ValueError("a grasp profile needs at least two samples")
    rng = np.random.default_rng(seed)
    steps = rng.uniform(0.5, 1.5, n_samples - 1)
    ramp = np.concatenate([[0.0], np.cumsum(steps)])
    # Normalize before scaling so the top sample is exactly f_max_n.
    samples = f_max_n * (ramp / ramp[-1])
    return ForceProfile(tuple(samples), rate_hz)


def synthesize_recording(
    scene: GripperScene,
    profile: ForceProfile,
    substeps_per_sample: int = 4,
    noise_rate_hz: float = 0.0,
    seed: int = 0,
) -> tuple[EventStream, ForceProfile]:
    """Simulate one grasp: render the deflecting fingers and emit events.

    Force is interpolated linearly between profile samples and the scene
    is rendered at ``substeps_per_sample`` points per sample interval;
    consecutive renders feed the contrast-threshold model.  Optional
    uniform background noise (``noise_rate_hz`` events per second over
    the whole array, seeded) is merged in, off by default.
    """
    if substeps_per_sample < 1:
        raise ValueError("substeps_per_sample must be at least 1")
    if noise_rate_hz < 0:
        raise ValueError("noise_rate_hz must be non-negative")
    period_us = profile.period_us
    samples = profile.samples
    parts = []
    prev_img = render_intensity(scene, samples[0])
    t_prev = 0
    for k in range(len(samples) - 1):
        lo, hi = sorted((samples[k], samples[k + 1]))
        for j in range(1, substeps_per_sample + 1):
            if j == substeps_per_sample:
                force = samples[k + 1]
            else:
                # Clamp away interpolation dust; endpoints are already range-checked.
                frac = j / substeps_per_sample
                force = min(max(samples[k] + (samples[k + 1] - samples[k]) * frac, lo), hi)
            t_next = k * period_us + round(j * period_us / substeps_per_sample)
            img = render_intensity(scene, force)
            parts.append(
                events_from_intensity_pair(prev_img, img, t_prev, t_next, scene.contrast)
            )
            prev_img, t_prev = img, t_next

    if parts:
        stream = concat_streams(parts)
    else:
        stream = EventStream(scene.width, scene.height)

    duration_us = (len(samples) - 1) * period_us
    if noise_rate_hz > 0 and duration_us > 0:
        rng = np.random.default_rng(seed)
        n_noise = rng.poisson(noise_rate_hz * duration_us / 1e6)
        if n_noise > 0:
            nt = rng.integers(0, duration_us, n_noise)
            nx = rng.integers(0, scene.width, n_noise)
            ny = rng.integers(0, scene.height, n_noise)
            npol = rng.choice(np.array([-1, 1], dtype=np.int8), n_noise)
            t = np.concatenate([stream.t_us, nt])
            x = np.concatenate([stream.x, nx.astype(np.int32)])
            y = np.concatenate([stream.y, ny.astype(np.int32)])
            p = np.concatenate([stream.p, npol])
            order = np.lexsort((p, x, y, t))
            stream = EventStream(scene.width, scene.height, t[order], x[order], y[order], p[order])

    report = validate_stream(stream)
    if not report.ok:
        raise AssertionError(f"synthesis produced an invalid stream: {report.violations[0]}")
    return stream, profile


def save_profile(profile: ForceProfile, path) -> None:
    """Write a force track as JSON {rate_hz, samples}."""
    payload = {"rate_hz": profile.rate_hz, "samples": list(profile.samples)}
    Path(path).write_text(json.dumps(payload) + "\n")


def load_profile(path) -> ForceProfile:
    payload = json.loads(Path(path).read_text())
    try:
        return ForceProfile(tuple(payload["samples"]), float(payload["rate_hz"]))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not a force track (need rate_hz and samples)") from exc
