"""Scale-invariant keypoints: Gaussian/DoG pyramids, extrema, refinement,
orientation assignment and 128-element descriptors.

Per-keypoint work is vectorized over all keypoints of an octave, so the
public single-keypoint functions are thin wrappers around batch helpers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ImageTooSmallError
from .imgcore import downsample2, gaussian_blur

TWO_PI = 2.0 * math.pi

ORI_BINS = 36
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0
ORI_PEAK_RATIO = 0.8

DESC_WIDTH = 4          # spatial bins per side
DESC_ORI_BINS = 8
DESC_SAMPLES = 16       # grid samples per side
DESC_BIN_SIGMAS = 3.0   # width of one spatial bin, in keypoint sigmas
DESC_WINDOW_SIGMA = 8.0  # Gaussian weight, in grid units
DESC_CLAMP = 0.2

MAX_REFINE_ITERS = 5


@dataclass(frozen=True)
class PyramidParams:
    scales_per_octave: int = 3
    sigma0: float = 1.6
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    min_octave_dim: int = 16
    # Doubling the input before the first octave is a common variant; not supported yet.
    upsample: bool = False

    def __post_init__(self):
        if self.scales_per_octave < 2:
            raise ValueError("scales_per_octave must be >= 2")
        if min(self.sigma0, self.assumed_blur, self.contrast_threshold,
               self.edge_ratio, self.min_octave_dim) <= 0:
            raise ValueError("pyramid parameters must be positive")
        if self.sigma0 <= self.assumed_blur:
            raise ValueError("sigma0 must exceed assumed_blur")
        if self.upsample:
            raise NotImplementedError("input upsampling is not implemented")

    @property
    def k(self) -> float:
        return 2.0 ** (1.0 / self.scales_per_octave)

    def level_sigmas(self) -> np.ndarray:
        """Octave-relative sigma of each Gaussian level."""
        return self.sigma0 * self.k ** np.arange(self.scales_per_octave + 3)


@dataclass(frozen=True)
class GaussianPyramid:
    octaves: list          # each an (S + 3, h, w) array
    sigmas: np.ndarray     # octave-relative sigma per level
    params: PyramidParams


@dataclass(frozen=True)
class DoGPyramid:
    octaves: list          # each an (S + 2, h, w) array
    params: PyramidParams


@dataclass
class Keypoint:
    """A refined keypoint; ``x``/``y`` are in the input image frame."""

    x: float
    y: float
    octave: int
    scale_index: float
    sigma: float
    response: float
    orientation: float | None = None
    view: int | None = None

    def octave_xy(self) -> tuple[float, float]:
        f = 2.0 ** self.octave
        return self.x / f, self.y / f


class Site(NamedTuple):
    octave: int
    scale: int
    y: int
    x: int


class RejectReason(str, enum.Enum):
    OFF_IMAGE = "off-image drift"
    MAX_ITERATIONS = "max-iterations"
    LOW_CONTRAST = "low-contrast"
    EDGE_RESPONSE = "edge-response"


class KeypointRejected(Exception):
    def __init__(self, reason: RejectReason):
        super().__init__(reason.value)
        self.reason = reason


# --------------------------------------------------------------------------
# pyramids

def build_scale_space(img: np.ndarray, p: PyramidParams = PyramidParams()) -> GaussianPyramid:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < p.min_octave_dim:
        raise ImageTooSmallError(
            f"image {img.shape[::-1]} is smaller than min_octave_dim={p.min_octave_dim}")
    S = p.scales_per_octave
    sigmas = p.level_sigmas()
    increments = np.sqrt(sigmas[1:] ** 2 - sigmas[:-1] ** 2)

    base = gaussian_blur(img, math.sqrt(p.sigma0 ** 2 - p.assumed_blur ** 2))
    octaves = []
    while True:
        levels = [base]
        for inc in increments:
            levels.append(gaussian_blur(levels[-1], inc))
        octaves.append(np.stack(levels))
        if min(base.shape) // 2 < p.min_octave_dim:
            break
        # level S has sigma 2 * sigma0, i.e. sigma0 after halving
        base = downsample2(levels[S])
    return GaussianPyramid(octaves, sigmas, p)


def build_dog(g: GaussianPyramid) -> DoGPyramid:
    return DoGPyramid([oc[1:] - oc[:-1] for oc in g.octaves], g.params)


def _octave_extrema(D: np.ndarray):
    n, h, w = D.shape
    c = D[1:-1, 1:-1, 1:-1]
    is_max = np.ones(c.shape, dtype=bool)
    is_min = np.ones(c.shape, dtype=bool)
    for ds in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if ds == dy == dx == 0:
                    continue
                nb = D[1 + ds:n - 1 + ds, 1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
                is_max &= c > nb
                is_min &= c < nb
    s, y, x = np.nonzero(is_max | is_min)
    return s + 1, y + 1, x + 1


def detect_extrema(d: DoGPyramid) -> list[Site]:
    """Interior sites strictly above or strictly below all 26 neighbours."""
    sites = []
    for o, D in enumerate(d.octaves):
        s, y, x = _octave_extrema(D)
        sites.extend(Site(o, int(a), int(b), int(c)) for a, b, c in zip(s, y, x))
    return sites


# --------------------------------------------------------------------------
# refinement

def _derivatives(D, s, y, x):
    v = D[s, y, x]
    dx = (D[s, y, x + 1] - D[s, y, x - 1]) / 2
    dy = (D[s, y + 1, x] - D[s, y - 1, x]) / 2
    ds = (D[s + 1, y, x] - D[s - 1, y, x]) / 2
    dxx = D[s, y, x + 1] + D[s, y, x - 1] - 2 * v
    dyy = D[s, y + 1, x] + D[s, y - 1, x] - 2 * v
    dss = D[s + 1, y, x] + D[s - 1, y, x] - 2 * v
    dxy = (D[s, y + 1, x + 1] - D[s, y + 1, x - 1] - D[s, y - 1, x + 1] + D[s, y - 1, x - 1]) / 4
    dxs = (D[s + 1, y, x + 1] - D[s + 1, y, x - 1] - D[s - 1, y, x + 1] + D[s - 1, y, x - 1]) / 4
    dys = (D[s + 1, y + 1, x] - D[s + 1, y - 1, x] - D[s - 1, y + 1, x] + D[s - 1, y - 1, x]) / 4
    g = np.stack([dx, dy, ds], axis=-1)
    H = np.stack([np.stack([dxx, dxy, dxs], -1),
                  np.stack([dxy, dyy, dys], -1),
                  np.stack([dxs, dys, dss], -1)], axis=-2)
    return v, g, H


_OK = 0
_PENDING = -1
_REASON_CODES = {1: RejectReason.OFF_IMAGE, 2: RejectReason.MAX_ITERATIONS,
                 3: RejectReason.LOW_CONTRAST, 4: RejectReason.EDGE_RESPONSE}


def _refine_octave(D: np.ndarray, s, y, x, p: PyramidParams):
    """Quadratic refinement of many sites of one DoG octave.

    Returns ``(status, s, y, x, offset, value)``; status 0 means accepted,
    otherwise a key of ``_REASON_CODES``.
    """
    n_levels, h, w = D.shape
    s = np.array(s, dtype=np.intp)
    y = np.array(y, dtype=np.intp)
    x = np.array(x, dtype=np.intp)
    n = len(s)
    status = np.full(n, _PENDING)
    offset = np.zeros((n, 3))
    value = np.zeros(n)
    grad = np.zeros((n, 3))
    hess = np.zeros((n, 3, 3))

    for _ in range(MAX_REFINE_ITERS):
        idx = np.flatnonzero(status == _PENDING)
        if idx.size == 0:
            break
        v, g, H = _derivatives(D, s[idx], y[idx], x[idx])
        det = np.linalg.det(H)
        solvable = np.isfinite(det) & (det != 0)
        # singular systems cannot converge
        status[idx[~solvable]] = 2
        idx, v, g, H = idx[solvable], v[solvable], g[solvable], H[solvable]
        off = -np.linalg.solve(H, g[..., None])[..., 0]
        done = np.all(np.abs(off) <= 0.5, axis=1)
        di = idx[done]
        status[di] = _OK
        offset[di] = off[done]
        value[di] = v[done]
        grad[di] = g[done]
        hess[di] = H[done]

        mi = idx[~done]
        step = np.rint(off[~done]).astype(np.intp)
        x[mi] += step[:, 0]
        y[mi] += step[:, 1]
        s[mi] += step[:, 2]
        off_image = ((s[mi] < 1) | (s[mi] > n_levels - 2) | (y[mi] < 1) | (y[mi] > h - 2)
                     | (x[mi] < 1) | (x[mi] > w - 2))
        status[mi[off_image]] = 1
    status[status == _PENDING] = 2

    ok = status == _OK
    contrast = value + 0.5 * np.einsum("ij,ij->i", grad, offset)
    low = ok & (np.abs(contrast) < p.contrast_threshold)
    status[low] = 3

    ok = status == _OK
    tr = hess[:, 0, 0] + hess[:, 1, 1]
    det2 = hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] ** 2
    r = p.edge_ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        edge = (det2 <= 0) | (tr * tr / det2 >= (r + 1) ** 2 / r)
    status[ok & edge] = 4
    return status, s, y, x, offset, contrast


def _make_keypoint(o, s, y, x, off, contrast, p: PyramidParams) -> Keypoint:
    f = 2.0 ** o
    scale_index = float(s + off[2])
    return Keypoint(
        x=float((x + off[0]) * f),
        y=float((y + off[1]) * f),
        octave=int(o),
        scale_index=scale_index,
        sigma=p.sigma0 * 2.0 ** (o + scale_index / p.scales_per_octave),
        response=float(abs(contrast)),
    )


def refine_keypoint(site: Site, d: DoGPyramid, p: PyramidParams | None = None) -> Keypoint:
    """Refine one candidate site; raises :class:`KeypointRejected` with the reason."""
    p = p or d.params
    status, s, y, x, off, contrast = _refine_octave(
        d.octaves[site.octave], [site.scale], [site.y], [site.x], p)
    if status[0] != _OK:
        raise KeypointRejected(_REASON_CODES[int(status[0])])
    return _make_keypoint(site.octave, s[0], y[0], x[0], off[0], contrast[0], p)


def _refined_octave_keypoints(d: DoGPyramid, o: int, p: PyramidParams) -> list[Keypoint]:
    s, y, x = _octave_extrema(d.octaves[o])
    status, s, y, x, off, contrast = _refine_octave(d.octaves[o], s, y, x, p)
    seen = set()
    out = []
    for i in np.flatnonzero(status == _OK):
        key = (s[i], y[i], x[i])
        # several candidates can converge onto the same site
        if key in seen:
            continue
        seen.add(key)
        out.append(_make_keypoint(o, s[i], y[i], x[i], off[i], contrast[i], p))
    return out


# --------------------------------------------------------------------------
# orientation and descriptor

def _gradients(L: np.ndarray):
    """Central differences (unhalved) per level; zero on the border."""
    gx = np.zeros_like(L)
    gy = np.zeros_like(L)
    gx[:, 1:-1, 1:-1] = L[:, 1:-1, 2:] - L[:, 1:-1, :-2]
    gy[:, 1:-1, 1:-1] = L[:, 2:, 1:-1] - L[:, :-2, 1:-1]
    return gx, gy


def _octave_sigma(kp: Keypoint, p: PyramidParams) -> float:
    return p.sigma0 * 2.0 ** (kp.scale_index / p.scales_per_octave)


def _level_of(kp: Keypoint, n_levels: int) -> int:
    return int(min(max(math.floor(kp.scale_index + 0.5), 0), n_levels - 1))


def _orientation_histograms(kps: list[Keypoint], gx, gy, p: PyramidParams) -> np.ndarray:
    n_levels, h, w = gx.shape
    K = len(kps)
    lev = np.array([_level_of(k, n_levels) for k in kps], dtype=np.intp)
    sig_w = np.array([ORI_SIGMA_FACTOR * _octave_sigma(k, p) for k in kps])
    rad = np.rint(ORI_RADIUS_FACTOR * sig_w).astype(np.intp)
    cx = np.array([round(k.octave_xy()[0]) for k in kps], dtype=np.intp)
    cy = np.array([round(k.octave_xy()[1]) for k in kps], dtype=np.intp)
    R = int(rad.max())
    dy, dx = np.mgrid[-R:R + 1, -R:R + 1]
    dx = dx.ravel()[None, :]
    dy = dy.ravel()[None, :]
    px = cx[:, None] + dx
    py = cy[:, None] + dy
    valid = ((dx * dx + dy * dy <= (rad * rad)[:, None])
             & (px >= 1) & (px <= w - 2) & (py >= 1) & (py <= h - 2))
    pxc = np.clip(px, 0, w - 1)
    pyc = np.clip(py, 0, h - 1)
    lv = np.broadcast_to(lev[:, None], px.shape)
    gxs = gx[lv, pyc, pxc]
    gys = gy[lv, pyc, pxc]
    mag = np.hypot(gxs, gys)
    theta = np.arctan2(gys, gxs)
    weight = np.exp(-(dx * dx + dy * dy) / (2.0 * sig_w[:, None] ** 2))
    contrib = np.where(valid, mag * weight, 0.0)
    # linear vote into the two nearest bins, centres at multiples of 10 degrees
    fb = theta * ORI_BINS / TWO_PI
    b0 = np.floor(fb)
    frac = fb - b0
    b0 = b0.astype(np.intp) % ORI_BINS
    rows = np.arange(K)[:, None] * ORI_BINS
    hist = np.zeros(K * ORI_BINS)
    for b, wb in ((b0, 1 - frac), ((b0 + 1) % ORI_BINS, frac)):
        hist += np.bincount((rows + b).ravel(), weights=(contrib * wb).ravel(),
                            minlength=K * ORI_BINS)
    hist = hist.reshape(K, ORI_BINS)
    return (6 * hist + 4 * (np.roll(hist, 1, 1) + np.roll(hist, -1, 1))
            + np.roll(hist, 2, 1) + np.roll(hist, -2, 1)) / 16


def _histogram_peaks(hist: np.ndarray) -> list[float]:
    """Angles of local histogram peaks within 80% of the maximum."""
    top = hist.max()
    if top <= 0:
        return [0.0]
    left = np.roll(hist, 1)
    right = np.roll(hist, -1)
    peaks = np.flatnonzero((hist >= ORI_PEAK_RATIO * top) & (hist > left) & (hist >= right))
    if peaks.size == 0:
        peaks = np.array([int(np.argmax(hist))])
    angles = []
    for b in peaks:
        l, c, r = left[b], hist[b], right[b]
        denom = l - 2 * c + r
        shift = 0.5 * (l - r) / denom if denom != 0 else 0.0
        angles.append(((b + shift) * TWO_PI / ORI_BINS) % TWO_PI)
    return angles


def _oriented(kps: list[Keypoint], gx, gy, p: PyramidParams) -> list[Keypoint]:
    if not kps:
        return []
    hists = _orientation_histograms(kps, gx, gy, p)
    out = []
    for kp, hist in zip(kps, hists):
        out.extend(replace(kp, orientation=a) for a in _histogram_peaks(hist))
    return out


def assign_orientations(k: Keypoint, g: GaussianPyramid) -> list[Keypoint]:
    """Copies of ``k``, one per dominant gradient direction."""
    gx, gy = _gradients(g.octaves[k.octave])
    return _oriented([k], gx, gy, g.params)


def _sample_levels(stack: np.ndarray, lev: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear samples of ``stack[lev]`` at ``(x, y)``; zero outside the level."""
    _, h, w = stack.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - x0
    fy = yc - y0
    v = ((1 - fy) * ((1 - fx) * stack[lev, y0, x0] + fx * stack[lev, y0, x0 + 1])
         + fy * ((1 - fx) * stack[lev, y0 + 1, x0] + fx * stack[lev, y0 + 1, x0 + 1]))
    return np.where(inside, v, 0.0)


def _descriptors(kps: list[Keypoint], gx, gy, p: PyramidParams) -> np.ndarray:
    n_levels = gx.shape[0]
    K = len(kps)
    lev = np.array([_level_of(k, n_levels) for k in kps], dtype=np.intp)[:, None]
    spacing = np.array([DESC_BIN_SIGMAS * DESC_WIDTH / DESC_SAMPLES * _octave_sigma(k, p)
                        for k in kps])[:, None]
    ori = np.array([k.orientation for k in kps])[:, None]
    kx = np.array([k.octave_xy()[0] for k in kps])[:, None]
    ky = np.array([k.octave_xy()[1] for k in kps])[:, None]
    c, s = np.cos(ori), np.sin(ori)

    half = DESC_SAMPLES / 2
    grid = np.arange(DESC_SAMPLES) - (half - 0.5)
    v, u = np.meshgrid(grid, grid, indexing="ij")
    u = u.ravel()[None, :]
    v = v.ravel()[None, :]
    sx = kx + spacing * (c * u - s * v)
    sy = ky + spacing * (s * u + c * v)

    gxs = _sample_levels(gx, lev, sx, sy)
    gys = _sample_levels(gy, lev, sx, sy)
    mag = np.hypot(gxs, gys) * np.exp(-(u * u + v * v) / (2 * DESC_WINDOW_SIGMA ** 2))
    rel = (np.arctan2(gys, gxs) - ori) % TWO_PI

    per_bin = DESC_SAMPLES / DESC_WIDTH
    rb = (v + half) / per_bin - 0.5
    cb = (u + half) / per_bin - 0.5
    ob = rel * DESC_ORI_BINS / TWO_PI
    r0, c0, o0 = np.floor(rb), np.floor(cb), np.floor(ob)
    dr, dc, do = rb - r0, cb - c0, ob - o0
    r0 = np.broadcast_to(r0, mag.shape).astype(np.intp)
    c0 = np.broadcast_to(c0, mag.shape).astype(np.intp)
    o0 = o0.astype(np.intp)
    dr = np.broadcast_to(dr, mag.shape)
    dc = np.broadcast_to(dc, mag.shape)

    base = np.arange(K)[:, None] * (DESC_WIDTH * DESC_WIDTH * DESC_ORI_BINS)
    n_out = DESC_WIDTH * DESC_WIDTH * DESC_ORI_BINS
    hist = np.zeros(K * n_out)
    for ir, wr in ((0, 1 - dr), (1, dr)):
        r = r0 + ir
        for ic, wc in ((0, 1 - dc), (1, dc)):
            cc = c0 + ic
            inside = (r >= 0) & (r < DESC_WIDTH) & (cc >= 0) & (cc < DESC_WIDTH)
            for io, wo in ((0, 1 - do), (1, do)):
                o = (o0 + io) % DESC_ORI_BINS
                idx = base + (r * DESC_WIDTH + cc) * DESC_ORI_BINS + o
                wgt = mag * wr * wc * wo
                hist += np.bincount(idx[inside], weights=wgt[inside], minlength=K * n_out)
    desc = hist.reshape(K, n_out)
    return _normalize_descriptors(desc)


def _normalize_descriptors(desc: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)
    desc = np.minimum(desc, DESC_CLAMP)
    norm = np.linalg.norm(desc, axis=1, keepdims=True)
    return np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)


def compute_descriptor(k: Keypoint, g: GaussianPyramid) -> np.ndarray:
    if k.orientation is None:
        raise ValueError("keypoint has no orientation")
    gx, gy = _gradients(g.octaves[k.octave])
    return _descriptors([k], gx, gy, g.params)[0]


# --------------------------------------------------------------------------

def _sort_key(item):
    kp = item[0]
    return (kp.octave, kp.y, kp.x, kp.orientation)


def features_from_pyramid(g: GaussianPyramid) -> list[tuple[Keypoint, np.ndarray]]:
    p = g.params
    d = build_dog(g)
    out = []
    for o in range(len(d.octaves)):
        kps = _refined_octave_keypoints(d, o, p)
        if not kps:
            continue
        gx, gy = _gradients(g.octaves[o])
        kps = _oriented(kps, gx, gy, p)
        desc = _descriptors(kps, gx, gy, p)
        for kp, dv in zip(kps, desc):
            # a window with no gradient at all cannot be normalized
            if dv.any():
                out.append((kp, dv))
    out.sort(key=_sort_key)
    return out


def detect_sift(img: np.ndarray, p: PyramidParams = PyramidParams()) -> list[tuple[Keypoint, np.ndarray]]:
    """Keypoints with descriptors, ordered by ``(octave, y, x, orientation)``."""
    return features_from_pyramid(build_scale_space(img, p))
