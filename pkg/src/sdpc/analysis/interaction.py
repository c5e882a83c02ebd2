"""Interaction maps: adjusted activity, circular averaging and region statistics.

Map cells are indexed ``[row, col]`` with ``x = col - R`` and ``y = R - row``
(y up), so the centre cell is ``(0, 0)``.  Orientations are in radians.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import AnalysisError
from .gabor import OrientationAtlas

logger = logging.getLogger(__name__)

CENTER, END, SIDE, OTHER = "center", "end", "side", "other"
REGIONS = (CENTER, END, SIDE, OTHER)


def circular_diff_deg(a, b):
    """Distance between orientations (degrees, mod 180) in ``[0, 90]``."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 180.0)
    return np.minimum(d, 180.0 - d)


def map_coordinates(R: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:2 * R + 1, 0:2 * R + 1]
    return (cols - R).astype(float), (R - rows).astype(float)


# --------------------------------------------------------------------------
# Adjusted activity
# --------------------------------------------------------------------------


@dataclass
class AdjustedActivity:
    """``a[k, row, col]`` for the orientations ``theta[k]`` whose marginal is positive."""

    a: np.ndarray
    theta: np.ndarray
    features: np.ndarray
    skipped: list[int] = field(default_factory=list)


def marginal_activity(gamma1: np.ndarray, center: tuple[int, int], R: int) -> np.ndarray:
    """Per-channel mean over all positions outside the ``(2R+1)^2`` window at ``center``."""
    g = np.asarray(gamma1, dtype=np.float64)
    r, c = center
    outside = np.ones(g.shape[1:], dtype=bool)
    outside[max(r - R, 0):r + R + 1, max(c - R, 0):c + R + 1] = False
    if not outside.any():
        raise AnalysisError("neighborhood covers the whole map; no marginal available")
    return g[:, outside].mean(axis=1)


def adjusted_activity(gamma1, atlas: OrientationAtlas, center: tuple[int, int], R: int = 4) -> AdjustedActivity:
    """``(local - marginal) / marginal`` on the window around ``center`` for retained features.

    Orientations with zero marginal are skipped; if all are, ``AnalysisError``.
    """
    g = np.asarray(gamma1, dtype=np.float64)
    r, c = center
    H, W = g.shape[1:]
    if not (R <= r < H - R and R <= c < W - R):
        raise AnalysisError(f"center {center} is closer than {R} to the border")
    feats = atlas.indices
    marg = marginal_activity(g[feats], center, R)
    ok = marg > 0
    if not ok.any():
        raise AnalysisError("zero marginal activity for every retained orientation")
    used = feats[ok]
    local = g[used, r - R:r + R + 1, c - R:c + R + 1]
    a = (local - marg[ok, None, None]) / marg[ok, None, None]
    return AdjustedActivity(a, atlas.theta[used], used, [int(f) for f in feats[~ok]])


# --------------------------------------------------------------------------
# Circular averaging
# --------------------------------------------------------------------------


@dataclass
class InteractionMap:
    """Complex mean activity ``z = mean_k a_k e^{j theta_k}`` on a ``(2R+1)^2`` grid."""

    z: np.ndarray
    theta_c: float = 0.0
    k_fb: float = 0.0
    count: int = 1

    @property
    def R(self) -> int:
        return (self.z.shape[0] - 1) // 2

    @property
    def theta_bar(self) -> np.ndarray:
        return np.arctan2(self.z.imag, self.z.real)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.z)


def interaction_map(act, theta=None, theta_c: float = 0.0, k_fb: float = 0.0) -> InteractionMap:
    """Circular weighted average over orientations.

    ``act`` is an :class:`AdjustedActivity` or an array ``[n, S, S]`` with
    orientations ``theta``.  ``theta_bar = atan2(sum a sin, sum a cos)`` and
    ``|a_bar| = (1/n) sqrt((sum a cos)^2 + (sum a sin)^2)``.
    """
    if isinstance(act, AdjustedActivity):
        a, theta = act.a, act.theta
    else:
        a = np.asarray(act, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    n = len(theta)
    cos_sum = np.tensordot(np.cos(theta), a, axes=1)
    sin_sum = np.tensordot(np.sin(theta), a, axes=1)
    return InteractionMap((cos_sum + 1j * sin_sum) / n, theta_c, k_fb)


def average_maps(maps: Sequence[InteractionMap]) -> InteractionMap:
    """Count-weighted average of the complex components."""
    if not maps:
        raise AnalysisError("no maps to average")
    total = sum(m.count for m in maps)
    z = sum(m.z * m.count for m in maps) / total
    return InteractionMap(z, maps[0].theta_c, maps[0].k_fb, total)


def nearest_feature(atlas: OrientationAtlas, theta_c: float, tol_deg: float = 7.5) -> int | None:
    """Retained feature closest to ``theta_c`` (mod 180), or None beyond ``tol_deg``."""
    idx = atlas.indices
    if len(idx) == 0:
        return None
    d = circular_diff_deg(np.rad2deg(atlas.theta[idx]), np.rad2deg(theta_c))
    k = int(np.argmin(d))
    return int(idx[k]) if d[k] <= tol_deg + 1e-9 else None


def select_centers(gamma1, feature: int, R: int = 4, top_k: int = 10) -> list[tuple[int, int]]:
    """Top-``k`` strictly positive positions of ``feature`` at least ``R`` from the border.

    Ties are broken in row-major order.
    """
    g = np.asarray(gamma1)[feature]
    H, W = g.shape
    inner = g[R:H - R, R:W - R]
    if inner.size == 0:
        return []
    flat = inner.ravel()
    order = np.argsort(-flat, kind="stable")
    order = order[flat[order] > 0][:top_k]
    w = inner.shape[1]
    return [(int(i // w) + R, int(i % w) + R) for i in order]


@dataclass
class AggregateReport:
    n_images: int = 0
    n_maps: int = 0
    skipped_images: int = 0


def aggregate_maps(
    gammas: Iterable[np.ndarray],
    atlas: OrientationAtlas,
    theta_c: float,
    k_fb: float = 0.0,
    R: int = 4,
    top_k: int = 10,
    tol_deg: float = 7.5,
    centers: Sequence[Sequence[tuple[int, int]]] | None = None,
) -> tuple[InteractionMap, AggregateReport]:
    """Average maps over the ``top_k`` strongest centres of every image.

    ``gammas`` yields layer-1 activity ``[F, H, W]`` per image.  ``centers``
    overrides centre selection (per image), e.g. to reuse the centres chosen at
    another feedback strength.
    """
    report = AggregateReport()
    feature = nearest_feature(atlas, theta_c, tol_deg)
    if feature is None and centers is None:
        raise AnalysisError(f"no retained feature within {tol_deg} deg of {np.rad2deg(theta_c):.1f} deg")
    maps = []
    for n, g in enumerate(gammas):
        report.n_images += 1
        cs = centers[n] if centers is not None else select_centers(g, feature, R, top_k)
        got = 0
        for c in cs:
            try:
                maps.append(interaction_map(adjusted_activity(g, atlas, c, R)))
                got += 1
            except AnalysisError as exc:
                logger.debug("image %d centre %s skipped: %s", n, c, exc)
        if got == 0:
            report.skipped_images += 1
        report.n_maps += got
    if not maps:
        raise AnalysisError("no valid centres in any image")
    out = average_maps(maps)
    out.theta_c, out.k_fb = theta_c, k_fb
    return out, report


def shuffle_positions(gamma1: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute spatial positions jointly across channels (destroys spatial structure)."""
    g = np.asarray(gamma1)
    F, H, W = g.shape
    perm = rng.permutation(H * W)
    return g.reshape(F, -1)[:, perm].reshape(F, H, W)


# --------------------------------------------------------------------------
# Regions and deviations
# --------------------------------------------------------------------------


def region_mask(theta_c: float, R: int = 4, sector_deg: float = 30.0) -> np.ndarray:
    """Label each cell center / end / side / other by its position angle (mod 180)."""
    if R < 1:
        raise ValueError("R must be >= 1")
    x, y = map_coordinates(R)
    angle = np.rad2deg(np.arctan2(y, x))
    tc = np.rad2deg(theta_c)
    labels = np.full(x.shape, OTHER, dtype=object)
    labels[circular_diff_deg(angle, tc + 90.0) <= sector_deg + 1e-9] = SIDE
    labels[circular_diff_deg(angle, tc) <= sector_deg + 1e-9] = END
    labels[R, R] = CENTER
    return labels


def colinear_reference(theta_c: float, R: int) -> np.ndarray:
    return np.full((2 * R + 1, 2 * R + 1), float(theta_c))


def cocircular_reference(theta_c: float, R: int, eps: float = 1e-9) -> np.ndarray:
    """Tangent orientation (radians, mod pi) of the circle through the centre
    with tangent ``theta_c`` there and through each cell.

    Cells on the preferred axis (infinite radius) use ``theta_c``.
    """
    x, y = map_coordinates(R)
    s, c = np.sin(theta_c), np.cos(theta_c)
    d = s * x - c * y
    ref = np.full(x.shape, float(theta_c))
    ok = np.abs(d) > eps
    r2 = x[ok] ** 2 + y[ok] ** 2
    x_co = s * r2 / (2 * d[ok])
    y_co = -c * r2 / (2 * d[ok])
    ref[ok] = np.arctan2(y[ok] - y_co, x[ok] - x_co) + np.pi / 2
    return np.mod(ref, np.pi)


def deviation_grid(m: InteractionMap, reference: np.ndarray) -> np.ndarray:
    """Per-cell deviation in degrees ([0, 90]); NaN where the map magnitude is zero."""
    dev = circular_diff_deg(np.rad2deg(m.theta_bar), np.rad2deg(reference))
    return np.where(m.magnitude > 0, dev, np.nan)


def region_medians(grid: np.ndarray, mask: np.ndarray) -> dict[str, float]:
    out = {}
    for region in REGIONS:
        vals = grid[mask == region]
        vals = vals[np.isfinite(vals)]
        out[region] = float(np.median(vals)) if vals.size else float("nan")
    return out


def colinearity_deviation(m: InteractionMap, theta_c: float | None = None, mask=None) -> dict[str, float]:
    theta_c = m.theta_c if theta_c is None else theta_c
    mask = region_mask(theta_c, m.R) if mask is None else mask
    return region_medians(deviation_grid(m, colinear_reference(theta_c, m.R)), mask)


def cocircularity_deviation(m: InteractionMap, theta_c: float | None = None, mask=None) -> dict[str, float]:
    theta_c = m.theta_c if theta_c is None else theta_c
    mask = region_mask(theta_c, m.R) if mask is None else mask
    return region_medians(deviation_grid(m, cocircular_reference(theta_c, m.R)), mask)


@dataclass
class Ratio:
    value: float
    capped: bool = False


def precision_ratio(marginal_dev: float, map_dev: float, cap: float = 1e3) -> Ratio:
    """``marginal / in-map`` deviation; > 1 means more aligned than the baseline."""
    if not np.isfinite(marginal_dev) or not np.isfinite(map_dev):
        return Ratio(float("nan"))
    if map_dev <= 0:
        return Ratio(cap, capped=True)
    r = marginal_dev / map_dev
    return Ratio(min(r, cap), capped=r > cap)


def precision_ratios(
    m: InteractionMap, marginal: InteractionMap, theta_c: float | None = None, mask=None
) -> dict[str, tuple[Ratio, Ratio]]:
    """Per region ``(r_colin, r_cocir)`` against the same region of the marginal map."""
    theta_c = m.theta_c if theta_c is None else theta_c
    mask = region_mask(theta_c, m.R) if mask is None else mask
    col, cir = colinearity_deviation(m, theta_c, mask), cocircularity_deviation(m, theta_c, mask)
    mcol, mcir = colinearity_deviation(marginal, theta_c, mask), cocircularity_deviation(marginal, theta_c, mask)
    return {r: (precision_ratio(mcol[r], col[r]), precision_ratio(mcir[r], cir[r])) for r in REGIONS}


def activity_ratio(map_kfb: InteractionMap, map_k0: InteractionMap) -> tuple[np.ndarray, np.ndarray]:
    """``|a_bar(k_fb)| / |a_bar(0)|`` per cell, NaN where the denominator is zero.

    Returns the ratio grid and the boolean mask of flagged (zero-denominator) cells.
    """
    num, den = map_kfb.magnitude, map_k0.magnitude
    flagged = den == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(flagged, np.nan, num / np.where(flagged, 1.0, den))
    return ratio, flagged


def axis_profile(grid: np.ndarray, theta_c: float) -> np.ndarray:
    """Mean of ``grid`` along the preferred axis at distances ``0..R`` (both directions)."""
    R = (grid.shape[0] - 1) // 2
    out = np.empty(R + 1)
    for d in range(R + 1):
        dx, dy = int(round(d * np.cos(theta_c))), int(round(d * np.sin(theta_c)))
        vals = [grid[R - dy, R + dx], grid[R + dy, R - dx]]
        out[d] = np.nanmean(vals) if np.isfinite(vals).any() else np.nan
    return out


def write_map_csv(path, m: InteractionMap, mask=None) -> None:
    mask = region_mask(m.theta_c, m.R) if mask is None else mask
    x, y = map_coordinates(m.R)
    tb, mag = np.rad2deg(m.theta_bar), m.magnitude
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "theta_bar_deg", "magnitude", "region"])
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                w.writerow([int(x[i, j]), int(y[i, j]), f"{tb[i, j]:.6g}", f"{mag[i, j]:.6g}", mask[i, j]])
