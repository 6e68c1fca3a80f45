"""Affine view simulation: tilt/longitude sampling, warping and back-projection."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmallError
from .imgcore import AffineMap, affine_warp, blur_axis, fit_affine, rotation
from .sift import Keypoint, PyramidParams, detect_sift

log = logging.getLogger(__name__)

ANTIALIAS_C = 0.8
# keypoints closer than this many sigmas to the blank surround of a view are
# dropped: the frame edge itself produces corners that match across images
SUPPORT_SIGMAS = 4.5


@dataclass(frozen=True)
class ViewSpec:
    t: float
    phi_deg: float
    map: AffineMap
    antialias_sigma: float

    @property
    def is_identity(self) -> bool:
        return self.t == 1 and self.phi_deg == 0


@dataclass(frozen=True)
class AsiftParams:
    max_tilt_exponent: int = 5
    phi_step_base: float = 72.0
    sift: PyramidParams = field(default_factory=PyramidParams)

    def __post_init__(self):
        if self.max_tilt_exponent < 0 or self.phi_step_base <= 0:
            raise ValueError("invalid view grid parameters")


def make_view(t: float, phi_deg: float) -> ViewSpec:
    lin = np.diag([1.0, 1.0 / t]) @ rotation(math.radians(phi_deg))
    sigma = ANTIALIAS_C * math.sqrt(t * t - 1) if t > 1 else 0.0
    return ViewSpec(t, phi_deg, AffineMap.from_matrix(lin), sigma)


def generate_views(p: AsiftParams = AsiftParams()) -> list[ViewSpec]:
    """Views ordered by tilt exponent, then longitude."""
    views = []
    for k in range(p.max_tilt_exponent + 1):
        t = 2.0 ** (k / 2)
        if k == 0:
            views.append(make_view(1.0, 0.0))
            continue
        step = p.phi_step_base / t
        j = 0
        while j * step < 180.0 - 1e-9:
            views.append(make_view(t, j * step))
            j += 1
    return views


def simulate_view(img: np.ndarray, v: ViewSpec, min_dim: int = 1) -> tuple[np.ndarray, AffineMap]:
    """Render one simulated view of ``img``.

    Returns the view and the forward map from input to view coordinates.
    Raises :class:`ImageTooSmallError` when the view is smaller than ``min_dim``.
    """
    img = np.asarray(img, dtype=np.float64)
    if v.is_identity:
        return img.copy(), AffineMap()
    h, w = img.shape
    total = AffineMap()
    out = img
    if v.phi_deg != 0:
        rot, w, h = fit_affine(AffineMap.from_matrix(rotation(math.radians(v.phi_deg))), w, h)
        out = affine_warp(out, rot, shape=(h, w))
        total = rot
    if v.t > 1:
        out = blur_axis(out, v.antialias_sigma, axis=0)
        tilt, w, h = fit_affine(AffineMap(1.0, 0.0, 0.0, 1.0 / v.t), w, h)
        out = affine_warp(out, tilt, shape=(h, w))
        total = total.then(tilt)
    if min(out.shape) < min_dim:
        raise ImageTooSmallError(f"simulated view t={v.t:.3f} phi={v.phi_deg:.1f} is {w}x{h}")
    return out, total


def support_distance(in_shape: tuple[int, int], fwd: AffineMap,
                     out_shape: tuple[int, int]) -> np.ndarray:
    """Distance from each view pixel to the nearest pixel lying outside the input footprint."""
    h, w = in_shape
    inv = fwd.inverse()
    yy, xx = np.mgrid[0:out_shape[0], 0:out_shape[1]].astype(np.float64)
    sx, sy = inv.apply(xx, yy)
    inside = (sx >= -0.5) & (sx <= w - 0.5) & (sy >= -0.5) & (sy <= h - 0.5)
    return ndimage.distance_transform_edt(np.pad(inside, 1))[1:-1, 1:-1]


def _thread_count() -> int:
    try:
        n = int(os.environ.get("ASIFT_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _detect_view(img, vi, v, p, height, width):
    try:
        sim, fwd = simulate_view(img, v, p.sift.min_octave_dim)
    except ImageTooSmallError as exc:
        if vi == 0:
            raise
        log.warning("skipping view %d: %s", vi, exc)
        return []
    feats = detect_sift(sim, p.sift)
    if fwd.is_identity():
        for kp, _ in feats:
            kp.view = vi
        return feats
    inv = fwd.inverse()
    support = support_distance((height, width), fwd, sim.shape)
    vh, vw = sim.shape
    out = []
    for kp, desc in feats:
        r = min(max(int(round(kp.y)), 0), vh - 1)
        c = min(max(int(round(kp.x)), 0), vw - 1)
        if support[r, c] < SUPPORT_SIGMAS * kp.sigma:
            continue
        x, y = inv.apply(kp.x, kp.y)
        x, y = float(x), float(y)
        if 0 <= x < width and 0 <= y < height:
            kp.x, kp.y, kp.view = x, y, vi
            out.append((kp, desc))
    return out


def detect_asift(img: np.ndarray, p: AsiftParams = AsiftParams(),
                 views: list[ViewSpec] | None = None) -> list[tuple[Keypoint, np.ndarray]]:
    """SIFT features of every simulated view, mapped back into ``img`` coordinates.

    Each keypoint's ``view`` is its index into ``views`` (by default
    ``generate_views(p)``). Output is ordered by view index, then SIFT order.
    """
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape) < p.sift.min_octave_dim:
        raise ImageTooSmallError(f"image {img.shape[::-1]} too small for detection")
    views = generate_views(p) if views is None else views
    h, w = img.shape
    jobs = [(img, vi, v, p, h, w) for vi, v in enumerate(views)]
    workers = min(_thread_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda a: _detect_view(*a), jobs))
    else:
        results = [_detect_view(*a) for a in jobs]
    return [f for r in results for f in r]
