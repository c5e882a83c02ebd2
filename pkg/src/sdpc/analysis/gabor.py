"""Gabor fitting of receptive fields and the resulting orientation atlas.

Coordinates: ``x`` grows to the right, ``y`` grows upward, origin at the
kernel centre.  ``theta`` is the orientation of the stripes (the edge
direction) in ``[0, pi)``; the carrier oscillates along the orthogonal axis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from ..errors import AnalysisError

THETA_GRID = np.deg2rad(np.arange(0.0, 180.0, 7.5))


@dataclass
class GaborFit:
    theta: float
    frequency: float
    phase: float
    sigma: tuple[float, float]
    r2: float
    amplitude: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    degenerate: bool = False
    low_frequency: bool = False

    @property
    def theta_deg(self) -> float:
        return float(np.rad2deg(self.theta))


def _grid(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return xs - (w - 1) / 2, (h - 1) / 2 - ys


def gabor_kernel(shape, theta, frequency, phase=0.0, sigma=(2.0, 2.0), center=(0.0, 0.0), amplitude=1.0):
    """Gabor patch; ``sigma = (across stripes, along stripes)``."""
    x, y = _grid(shape)
    x = x - center[0]
    y = y - center[1]
    u = -x * np.sin(theta) + y * np.cos(theta)  # across the stripes
    v = x * np.cos(theta) + y * np.sin(theta)  # along the stripes
    env = np.exp(-(u ** 2) / (2 * sigma[0] ** 2) - v ** 2 / (2 * sigma[1] ** 2))
    return amplitude * env * np.cos(2 * np.pi * frequency * u + phase)


def _model(p, shape):
    amp, theta, freq, phase, x0, y0, su, sv = p
    return gabor_kernel(shape, theta, freq, phase, (su, sv), (x0, y0), amp)


def _to_gray(atom) -> np.ndarray:
    a = np.asarray(atom, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    if a.ndim != 2:
        raise ValueError(f"atom must be 2-D or [C, H, W], got shape {a.shape}")
    return a


def fit_gabor(atom) -> GaborFit:
    """Least-squares Gabor fit of one kernel (channel-averaged, zero-meaned).

    A coarse search over orientation and frequency (phase solved linearly)
    seeds a bounded local refinement of all parameters.
    """
    raw = _to_gray(atom)
    shape = raw.shape
    target = raw - raw.mean()
    ss_tot = float((target ** 2).sum())
    energy = float((raw ** 2).sum())
    if ss_tot <= 1e-12 * max(energy, 1e-300) or ss_tot < 1e-24:
        return GaborFit(np.nan, 0.0, 0.0, (0.0, 0.0), 0.0, degenerate=True, low_frequency=True)

    k = max(shape)
    sigma0 = k / 4
    x, y = _grid(shape)
    env0 = np.exp(-(x ** 2 + y ** 2) / (2 * sigma0 ** 2))
    best = (np.inf, 0.0, 0.0, 0.0, 0.0)
    for theta in THETA_GRID:
        u = -x * np.sin(theta) + y * np.cos(theta)
        for freq in np.linspace(0.5 / k, 0.5, 24):
            basis = np.stack([(env0 * np.cos(2 * np.pi * freq * u)).ravel(),
                              (env0 * np.sin(2 * np.pi * freq * u)).ravel()], axis=1)
            coef, *_ = np.linalg.lstsq(basis, target.ravel(), rcond=None)
            res = float(((basis @ coef - target.ravel()) ** 2).sum())
            if res < best[0]:
                best = (res, theta, freq, coef[0], coef[1])
    _, theta, freq, c, s = best
    amp, phase = np.hypot(c, s), np.arctan2(-s, c)
    p0 = [amp, theta, freq, phase, 0.0, 0.0, sigma0, sigma0]
    half = k / 2
    lower = [-np.inf, -np.inf, 0.0, -np.inf, -half, -half, 0.5, 0.5]
    upper = [np.inf, np.inf, 0.5, np.inf, half, half, 2.0 * k, 2.0 * k]
    p0 = np.clip(p0, np.array(lower) + 1e-9, np.array(upper) - 1e-9)
    sol = least_squares(lambda p: (_model(p, shape) - target).ravel(), p0, bounds=(lower, upper))
    amp, theta, freq, phase, x0, y0, su, sv = sol.x
    if amp < 0:
        amp, phase = -amp, phase + np.pi
    r2 = 1.0 - float((sol.fun ** 2).sum()) / ss_tot
    dc_share = raw.mean() ** 2 * raw.size / energy
    theta = float(np.mod(theta, np.pi))
    if theta >= np.pi - 1e-9:
        theta = 0.0
    return GaborFit(
        theta=theta,
        frequency=float(freq),
        phase=float(np.mod(phase + np.pi, 2 * np.pi) - np.pi),
        sigma=(float(su), float(sv)),
        r2=float(np.clip(r2, 0.0, 1.0)),
        amplitude=float(amp),
        center=(float(x0), float(y0)),
        low_frequency=bool(freq < 1.0 / k or dc_share > 0.5),
    )


@dataclass
class OrientationAtlas:
    """Per-feature orientations; only ``retained`` features enter interaction maps."""

    theta: np.ndarray
    retained: np.ndarray
    fits: list[GaborFit] = field(default_factory=list)
    r2_threshold: float = 0.5

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.retained)

    @property
    def orientations(self) -> np.ndarray:
        return self.theta[self.retained]

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())


def build_atlas(fits: Sequence[GaborFit], r2_threshold: float = 0.5, min_features: int = 4) -> OrientationAtlas:
    """Keep features fit with ``r2 >= r2_threshold``; fewer than ``min_features`` is an error."""
    theta = np.array([f.theta for f in fits], dtype=float)
    retained = np.array([(not f.degenerate) and f.r2 >= r2_threshold for f in fits], dtype=bool)
    if retained.sum() < min_features:
        raise AnalysisError(
            f"only {int(retained.sum())} of {len(fits)} features have r2 >= {r2_threshold}; "
            f"need at least {min_features}"
        )
    return OrientationAtlas(theta, retained, list(fits), r2_threshold)


def atlas_from_orientations(theta_deg: Sequence[float]) -> OrientationAtlas:
    """Atlas with every feature retained at the given orientations (degrees)."""
    theta = np.deg2rad(np.asarray(theta_deg, dtype=float))
    return OrientationAtlas(theta, np.ones(len(theta), dtype=bool))


def fit_atoms(atoms) -> list[GaborFit]:
    """Fit every atom of a ``[F, C, kH, kW]`` array."""
    return [fit_gabor(a) for a in np.asarray(atoms)]


def write_atlas_csv(path, atlas: OrientationAtlas) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "theta_deg", "freq", "r2", "retained"])
        for i, f in enumerate(atlas.fits):
            w.writerow([i, f"{f.theta_deg:.6g}", f"{f.frequency:.6g}", f"{f.r2:.6g}", int(atlas.retained[i])])
