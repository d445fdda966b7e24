"""Velocity-driven anisotropic 2D Gaussians rasterized into multi-view heatmaps.

Each joint becomes an elliptical Gaussian whose long axis follows the joint's
instantaneous velocity: scales grow as ``s_base * (1 + alpha * tanh(|v|))``
along the motion direction and stay at ``s_base`` across it. Frames are
splatted onto an H x W grid of pixel centers in normalized [-1, 1]
coordinates, with per-joint evaluation culled to the axis-aligned bounding
box of the truncation ellipse. The pixel-value map is differentiable in the
log of the base scale; `render_sequence_with_grad` returns that derivative.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ConfigError, DataError, DimensionError
from .skeleton import KinematicSequence

log = logging.getLogger(__name__)

VIEWS_3D = ((0, 1), (1, 2), (2, 0))   # XY, YZ, ZX
VIEWS_2D = ((0, 1),)

_ZERO_DIRECTION_EPS = 1e-9            # below this speed the angle defaults to 0


@dataclass(frozen=True)
class RenderConfig:
    """Rasterization parameters; `log_scale` is the learnable knob."""

    height: int = 32
    width: int = 32
    alpha: float = 2.0
    log_scale: float = -2.0
    truncation_sigmas: float = 3.0
    aggregation: str = "max"          # "max" or "clamped_sum"
    views: tuple[tuple[int, int], ...] | None = None   # None -> by channel count
    isotropic: bool = False           # ablation: ignore velocities entirely

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ConfigError(f"resolution must be at least 2x2, got {self.height}x{self.width}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.truncation_sigmas <= 0:
            raise ConfigError(f"truncation_sigmas must be > 0, got {self.truncation_sigmas}")
        if self.aggregation not in ("max", "clamped_sum"):
            raise ConfigError(f"aggregation must be 'max' or 'clamped_sum', got {self.aggregation!r}")

    def views_for(self, num_channels: int) -> tuple[tuple[int, int], ...]:
        views = self.views
        if views is None:
            views = VIEWS_3D if num_channels == 3 else VIEWS_2D
        for axes in views:
            if len(axes) != 2 or axes[0] == axes[1]:
                raise ConfigError(f"a view must name two distinct axes, got {axes}")
            if max(axes) >= num_channels or min(axes) < 0:
                raise DimensionError(f"view axes {axes} out of range for C={num_channels}")
        return tuple(tuple(v) for v in views)

    @property
    def base_scale(self) -> float:
        return math.exp(self.log_scale)


@dataclass
class GaussianPrimitive2D:
    """One splat: mean, 2x2 covariance, orientation, and principal scales."""

    sigma: np.ndarray            # (2, 2) symmetric positive definite
    theta: float
    scale_x: float               # along-motion scale, >= scale_y
    scale_y: float
    mu: np.ndarray | None = None  # (2,) normalized coordinates; set at render time


@dataclass
class PrimitiveGrid:
    """Per-view T x V field of Gaussian primitives, stored as arrays."""

    view: tuple[int, int]
    mu: np.ndarray       # (T, V, 2)
    sigma: np.ndarray    # (T, V, 2, 2)
    theta: np.ndarray    # (T, V)
    scale_x: np.ndarray  # (T, V)
    scale_y: np.ndarray  # (T, V)

    def primitive(self, t: int, v: int) -> GaussianPrimitive2D:
        return GaussianPrimitive2D(
            mu=self.mu[t, v].copy(),
            sigma=self.sigma[t, v].copy(),
            theta=float(self.theta[t, v]),
            scale_x=float(self.scale_x[t, v]),
            scale_y=float(self.scale_y[t, v]),
        )


@dataclass
class HeatmapStack:
    """Rendered heatmaps (views, T, H, W) plus where they came from."""

    values: np.ndarray
    views: tuple[tuple[int, int], ...]
    config: RenderConfig
    source: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or np.min(self.values) < 0:
            raise DataError("heatmap values must be finite and non-negative")


def pixel_centers(n: int) -> np.ndarray:
    """Normalized coordinates of n pixel centers spanning [-1, 1]."""
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def project_to_view(positions, velocities, view):
    """Select two coordinate axes from (T, V, C) positions and velocities."""
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    if positions.shape != velocities.shape:
        raise DimensionError(
            f"positions {positions.shape} and velocities {velocities.shape} must share a shape"
        )
    a, b = view
    c = positions.shape[-1]
    if a == b:
        raise ConfigError(f"a view must name two distinct axes, got {view}")
    if not (0 <= a < c and 0 <= b < c):
        raise DimensionError(f"view axes {view} out of range for C={c}")
    idx = [a, b]
    return positions[..., idx], velocities[..., idx]


def _covariance_arrays(velocities_2d: np.ndarray, config: RenderConfig):
    """Vectorized covariance construction for (..., 2) velocities.

    Returns (theta, scale_x, scale_y, sigma) with sigma shaped (..., 2, 2).
    """
    v = np.asarray(velocities_2d, dtype=np.float64)
    if v.shape[-1] != 2:
        raise DimensionError(f"velocities must end in a 2-axis, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DataError("velocities contain non-finite values")
    if config.isotropic:
        v = np.zeros_like(v)
    s_base = config.base_scale
    speed = np.hypot(v[..., 0], v[..., 1])
    scale_x = s_base * (1.0 + config.alpha * np.tanh(speed))
    scale_y = np.full_like(scale_x, s_base)
    theta = np.where(speed >= _ZERO_DIRECTION_EPS, np.arctan2(v[..., 1], v[..., 0]), 0.0)
    cos, sin = np.cos(theta), np.sin(theta)
    sx2, sy2 = scale_x ** 2, scale_y ** 2
    sxx = sx2 * cos ** 2 + sy2 * sin ** 2
    syy = sx2 * sin ** 2 + sy2 * cos ** 2
    sxy = (sx2 - sy2) * sin * cos
    sigma = np.empty(v.shape[:-1] + (2, 2), dtype=np.float64)
    sigma[..., 0, 0] = sxx
    sigma[..., 0, 1] = sxy
    sigma[..., 1, 0] = sxy
    sigma[..., 1, 1] = syy
    return theta, scale_x, scale_y, sigma


def build_covariance(velocity_2d, config: RenderConfig) -> GaussianPrimitive2D:
    """Anisotropic covariance for one 2D velocity (mean left unset)."""
    theta, sx, sy, sigma = _covariance_arrays(np.asarray(velocity_2d, dtype=np.float64), config)
    return GaussianPrimitive2D(
        sigma=sigma, theta=float(theta), scale_x=float(sx), scale_y=float(sy)
    )


def evaluate_gaussian(prim: GaussianPrimitive2D, point) -> float:
    """Unnormalized Gaussian response exp(-0.5 * d^T Sigma^{-1} d) at a point."""
    if prim.mu is None:
        raise ConfigError("primitive has no mean set")
    d = np.asarray(point, dtype=np.float64) - prim.mu
    s = prim.sigma
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    q = (s[1, 1] * d[0] * d[0] - 2.0 * s[0, 1] * d[0] * d[1] + s[0, 0] * d[1] * d[1]) / det
    return float(np.exp(-0.5 * q))


@njit(cache=True)
def _splat_batch(out, dacc, mu, inv_a, inv_b, inv_c, ext_x, ext_y, xs, ys,
                 use_max, want_grad):  # pragma: no cover - exercised via wrappers
    """Rasterize T frames of V primitives into out (T, H, W).

    `inv_*` are the components of each 2x2 inverse covariance, `ext_*` the
    half-extents of the truncation bounding box in normalized units. With
    max aggregation `out` holds the final heatmap; with sum aggregation it
    holds the unclamped sum and `dacc` the per-pixel d(sum)/d(log_scale).
    """
    frames, joints = mu.shape[0], mu.shape[1]
    height, width = out.shape[1], out.shape[2]
    for t in range(frames):
        for v in range(joints):
            mx = mu[t, v, 0]
            my = mu[t, v, 1]
            # pixel-index bounding box, padded by one pixel: mirror-symmetric
            # for symmetric splats, and stable under tiny scale perturbations
            # (the marginal pixel sits beyond the truncation ellipse)
            ex = ext_x[t, v]
            ey = ext_y[t, v]
            c0 = int(math.ceil((mx - ex + 1.0) * width * 0.5 - 0.5)) - 1
            c1 = int(math.floor((mx + ex + 1.0) * width * 0.5 - 0.5)) + 1
            r0 = int(math.ceil((my - ey + 1.0) * height * 0.5 - 0.5)) - 1
            r1 = int(math.floor((my + ey + 1.0) * height * 0.5 - 0.5)) + 1
            c0 = max(c0, 0)
            c1 = min(c1, width - 1)
            r0 = max(r0, 0)
            r1 = min(r1, height - 1)
            if c0 > c1 or r0 > r1:
                continue
            ia = inv_a[t, v]
            ib = inv_b[t, v]
            ic = inv_c[t, v]
            for r in range(r0, r1 + 1):
                dy = ys[r] - my
                qy = ic * dy * dy
                by = 2.0 * ib * dy
                for c in range(c0, c1 + 1):
                    dx = xs[c] - mx
                    q = ia * dx * dx + by * dx + qy
                    g = math.exp(-0.5 * q)
                    if use_max:
                        if g > out[t, r, c]:
                            out[t, r, c] = g
                    else:
                        out[t, r, c] += g
                        if want_grad:
                            dacc[t, r, c] += g * q


def _inverse_coeffs(sigma: np.ndarray):
    """Closed-form 2x2 inverse components (a, b, c) for (..., 2, 2) matrices."""
    sxx, sxy, syy = sigma[..., 0, 0], sigma[..., 0, 1], sigma[..., 1, 1]
    det = sxx * syy - sxy * sxy
    return syy / det, -sxy / det, sxx / det


def _clamp_means(mu: np.ndarray) -> np.ndarray:
    outside = np.abs(mu) > 1.0
    if np.any(outside):
        log.warning("%d joint means outside [-1, 1] clamped before splatting",
                    int(np.count_nonzero(outside.any(axis=-1))))
        return np.clip(mu, -1.0, 1.0)
    return mu


_BOX_QUANT = 0.26   # log-scale cell size for truncation-box quantization


def _splat_frames(mu, sigma, config: RenderConfig, want_grad: bool):
    """Shared rasterization path. mu (T, V, 2), sigma (T, V, 2, 2)."""
    frames = mu.shape[0]
    h, w = config.height, config.width
    mu = _clamp_means(np.ascontiguousarray(mu, dtype=np.float64))
    inv_a, inv_b, inv_c = _inverse_coeffs(sigma)
    k = config.truncation_sigmas
    # round the base-scale factor up to a quantization cell so box indices
    # are piecewise constant in log_scale: finite-difference probes of the
    # learnable scale then never flip a pixel in or out of a box
    box_scale = math.exp(_BOX_QUANT * math.ceil(config.log_scale / _BOX_QUANT)
                         - config.log_scale)
    ext_x = (k * box_scale) * np.sqrt(sigma[..., 0, 0])
    ext_y = (k * box_scale) * np.sqrt(sigma[..., 1, 1])
    xs, ys = pixel_centers(w), pixel_centers(h)
    out = np.zeros((frames, h, w), dtype=np.float64)
    use_max = config.aggregation == "max"
    need_dacc = want_grad and not use_max
    dacc = np.zeros((frames, h, w), dtype=np.float64) if need_dacc else np.zeros((1, 1, 1))
    _splat_batch(out, dacc, mu,
                 np.ascontiguousarray(inv_a), np.ascontiguousarray(inv_b),
                 np.ascontiguousarray(inv_c), np.ascontiguousarray(ext_x),
                 np.ascontiguousarray(ext_y), xs, ys, use_max, need_dacc)
    if use_max:
        values = out
        if want_grad:
            # H = max_i G_i, and dG/d(log_scale) = -2 G ln G for each splat,
            # so the winner's derivative is recoverable from H alone
            safe = np.where(values > 0.0, values, 1.0)
            grad = -2.0 * values * np.log(safe)
            return values, grad
        return values, None
    values = np.minimum(out, 1.0)
    if want_grad:
        grad = np.where(out < 1.0, dacc, 0.0)
        return values, grad
    return values, None


def render_frame(primitives, config: RenderConfig, want_grad: bool = False):
    """Rasterize one frame from a list of primitives (means must be set)."""
    joints = len(primitives)
    mu = np.empty((1, joints, 2))
    sigma = np.empty((1, joints, 2, 2))
    for i, prim in enumerate(primitives):
        if prim.mu is None:
            raise ConfigError("primitive has no mean set")
        mu[0, i] = prim.mu
        sigma[0, i] = prim.sigma
    values, grad = _splat_frames(mu, sigma, config, want_grad)
    if want_grad:
        return values[0], grad[0]
    return values[0]


def _render(kin: KinematicSequence, config: RenderConfig, want_grad: bool, source: str):
    views = config.views_for(kin.num_channels)
    frames = kin.num_frames
    values = np.empty((len(views), frames, config.height, config.width))
    grads = np.empty_like(values) if want_grad else None
    grids = []
    for vi, view in enumerate(views):
        pos2d, vel2d = project_to_view(kin.positions, kin.velocities, view)
        theta, sx, sy, sigma = _covariance_arrays(vel2d, config)
        grids.append(PrimitiveGrid(view=view, mu=pos2d, sigma=sigma, theta=theta,
                                   scale_x=sx, scale_y=sy))
        vals, grad = _splat_frames(pos2d, sigma, config, want_grad)
        values[vi] = vals
        if want_grad:
            grads[vi] = grad
    stack = HeatmapStack(values=values, views=views, config=config, source=source)
    return stack, grids, grads


def render_sequence(kin: KinematicSequence, config: RenderConfig, source: str = ""):
    """Render every (view, frame) heatmap; also return the primitive grids."""
    stack, grids, _ = _render(kin, config, want_grad=False, source=source)
    return stack, grids


def render_sequence_with_grad(kin: KinematicSequence, config: RenderConfig, source: str = ""):
    """Like `render_sequence` but also returns d(values)/d(log_scale)."""
    stack, grids, grads = _render(kin, config, want_grad=True, source=source)
    return stack, grids, grads


def write_pgm(path, frame: np.ndarray) -> None:
    """Plain-text portable graymap, values in [0, 1] scaled to 0..255."""
    h, w = frame.shape
    levels = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.int64)
    lines = [f"P2", f"{w} {h}", "255"]
    lines.extend(" ".join(str(x) for x in row) for row in levels)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def export_heatmaps(stack: HeatmapStack, out_dir) -> None:
    """Write per-(view, frame) graymaps, lossless CSVs, and a sidecar file."""
    import json
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_views, frames = stack.values.shape[:2]
    for vi in range(n_views):
        for t in range(frames):
            stem = f"view{vi}_frame{t:04d}"
            write_pgm(out / f"{stem}.pgm", stack.values[vi, t])
            np.savetxt(out / f"{stem}.csv", stack.values[vi, t],
                       delimiter=",", fmt="%.17g")
    cfg = stack.config
    sidecar = {
        "T": frames,
        "views": [list(v) for v in stack.views],
        "H": cfg.height,
        "W": cfg.width,
        "config": {
            "alpha": cfg.alpha,
            "log_scale": cfg.log_scale,
            "truncation_sigmas": cfg.truncation_sigmas,
            "aggregation": cfg.aggregation,
            "isotropic": cfg.isotropic,
        },
        "source": stack.source,
    }
    with open(out / "heatmaps.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
