"""Statistical affinity between joint Gaussians and the prior adjacency matrix.

The distance between two 2D Gaussians combines a Mahalanobis term under the
averaged covariance with a log-determinant shape term; affinities exp(-D)
are averaged over frames and views to form a per-sequence V x V prior.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MatrixError

_SYM_TOL = 1e-9


@dataclass
class PriorAdjacency:
    """Symmetric V x V affinity matrix with unit diagonal."""

    matrix: np.ndarray
    source: str = ""


def _check_psd(sigma: np.ndarray, name: str) -> None:
    s = np.asarray(sigma, dtype=np.float64)
    if s.shape != (2, 2):
        raise MatrixError(f"{name} must be 2x2, got shape {s.shape}")
    if abs(s[0, 1] - s[1, 0]) > _SYM_TOL * max(1.0, abs(s[0, 1])):
        raise MatrixError(f"{name} is not symmetric")
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    if s[0, 0] <= 0.0 or s[1, 1] <= 0.0 or det <= 0.0:
        raise MatrixError(f"{name} is not positive definite (det={det})")


def bhattacharyya_distance(mu_i, sigma_i, mu_j, sigma_j) -> float:
    """Distance between two 2D Gaussians; zero iff the distributions match."""
    mu_i = np.asarray(mu_i, dtype=np.float64)
    mu_j = np.asarray(mu_j, dtype=np.float64)
    sigma_i = np.asarray(sigma_i, dtype=np.float64)
    sigma_j = np.asarray(sigma_j, dtype=np.float64)
    _check_psd(sigma_i, "sigma_i")
    _check_psd(sigma_j, "sigma_j")
    avg = 0.5 * (sigma_i + sigma_j)
    det_avg = avg[0, 0] * avg[1, 1] - avg[0, 1] * avg[1, 0]
    det_i = sigma_i[0, 0] * sigma_i[1, 1] - sigma_i[0, 1] * sigma_i[1, 0]
    det_j = sigma_j[0, 0] * sigma_j[1, 1] - sigma_j[0, 1] * sigma_j[1, 0]
    d = mu_i - mu_j
    maha = (avg[1, 1] * d[0] * d[0] - 2.0 * avg[0, 1] * d[0] * d[1]
            + avg[0, 0] * d[1] * d[1]) / det_avg
    value = 0.125 * maha + 0.5 * np.log(det_avg / np.sqrt(det_i * det_j))
    # analytically >= 0; clip the ulp-level negatives from the determinant ratio
    return float(max(value, 0.0))


def _pairwise_distance(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """All-pairs distance for one frame: mu (V, 2), sigma (V, 2, 2) -> (V, V)."""
    det = sigma[:, 0, 0] * sigma[:, 1, 1] - sigma[:, 0, 1] * sigma[:, 1, 0]
    axx = 0.5 * (sigma[:, None, 0, 0] + sigma[None, :, 0, 0])
    axy = 0.5 * (sigma[:, None, 0, 1] + sigma[None, :, 0, 1])
    ayy = 0.5 * (sigma[:, None, 1, 1] + sigma[None, :, 1, 1])
    det_avg = axx * ayy - axy * axy
    d = mu[:, None, :] - mu[None, :, :]
    maha = (ayy * d[..., 0] ** 2 - 2.0 * axy * d[..., 0] * d[..., 1]
            + axx * d[..., 1] ** 2) / det_avg
    dist = 0.125 * maha + 0.5 * np.log(det_avg / np.sqrt(det[:, None] * det[None, :]))
    return np.maximum(dist, 0.0)


def build_prior_adjacency(primitive_grids, source: str = "") -> PriorAdjacency:
    """Mean over frames and views of exp(-distance); unit diagonal by construction."""
    grids = list(primitive_grids)
    if not grids:
        raise ConfigError("at least one primitive grid (view) is required")
    frames, joints = grids[0].mu.shape[0], grids[0].mu.shape[1]
    if frames < 1:
        raise ConfigError("at least one frame is required")
    acc = np.zeros((joints, joints), dtype=np.float64)
    for grid in grids:
        if grid.mu.shape[:2] != (frames, joints):
            raise ConfigError("all primitive grids must share T and V")
        for t in range(frames):
            acc += np.exp(-_pairwise_distance(grid.mu[t], grid.sigma[t]))
    acc /= frames * len(grids)
    np.fill_diagonal(acc, 1.0)
    return PriorAdjacency(matrix=acc, source=source)


def export_adjacency(prior: PriorAdjacency, csv_path, meta: dict | None = None) -> None:
    """Full-precision CSV plus a JSON sidecar describing its provenance."""
    import json
    from pathlib import Path

    path = Path(csv_path)
    np.savetxt(path, prior.matrix, delimiter=",", fmt="%.17g")
    sidecar = {"V": int(prior.matrix.shape[0]), "source": prior.source}
    if meta:
        sidecar.update(meta)
    with open(path.with_suffix(path.suffix + ".meta.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
