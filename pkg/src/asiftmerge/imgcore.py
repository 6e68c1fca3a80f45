"""Image substrate: grayscale conversion, Gaussian filtering, resampling, affine warps.

Images are plain numpy arrays. A color image is an ``(h, w, 3)`` uint8 array
in RGB order; a raster is an ``(h, w)`` float64 array with nominal range
[0, 1]. Pixel centers sit at integer coordinates, so pixel ``(x, y)`` covers
``[x - 0.5, x + 0.5) x [y - 0.5, y + 0.5)``. Every affine map in this package
acts on those coordinates (``x`` is the column, ``y`` the row).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ImageTooSmallError, SingularMapError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def as_color_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) color image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("color image must be at least 1x1")
    return arr.astype(np.uint8, copy=False)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB uint8 image, scaled to [0, 1]."""
    rgb = as_color_image(img).astype(np.float64)
    wr, wg, wb = LUMA_WEIGHTS
    gray = (wr * rgb[..., 0] + wg * rgb[..., 1] + wb * rgb[..., 2]) / 255.0
    return np.clip(gray, 0.0, 1.0)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at ``ceil(4 sigma)`` and renormalized to unit sum."""
    radius = max(1, math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_axis(img: np.ndarray, sigma: float, axis: int) -> np.ndarray:
    """1-D Gaussian blur along one axis with reflect padding."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.copy()
    return ndimage.correlate1d(img, gaussian_kernel1d(sigma), axis=axis, mode="reflect")


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, horizontal pass then vertical pass.

    ``sigma == 0`` returns an unchanged copy.
    """
    if not math.isfinite(sigma):
        raise ValueError("sigma must be finite")
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.copy()
    return blur_axis(blur_axis(img, sigma, axis=1), sigma, axis=0)


def downsample2(img: np.ndarray) -> np.ndarray:
    """Keep every second pixel: output ``(x, y)`` is input ``(2x, 2y)``."""
    h, w = img.shape
    if h < 2 or w < 2:
        raise ImageTooSmallError(f"cannot downsample a {w}x{h} image")
    return np.ascontiguousarray(img[: (h // 2) * 2 : 2, : (w // 2) * 2 : 2])


@dataclass(frozen=True)
class AffineParams:
    """One camera pose: zoom ``lam``, spin ``psi``, tilt ``t`` and rotation ``phi``."""

    lam: float = 1.0
    psi: float = 0.0
    t: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.t >= 1:
            raise ValueError("tilt must be >= 1")
        if not 0 <= self.phi < math.pi:
            raise ValueError("phi must lie in [0, pi)")

    @property
    def latitude(self) -> float:
        return math.acos(1.0 / self.t)


@dataclass(frozen=True)
class AffineMap:
    """``(x, y) -> (m00 x + m01 y + tx, m10 x + m11 y + ty)``."""

    m00: float = 1.0
    m01: float = 0.0
    m10: float = 0.0
    m11: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def from_matrix(cls, m, tx: float = 0.0, ty: float = 0.0) -> "AffineMap":
        m = np.asarray(m, dtype=np.float64)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]), float(tx), float(ty))

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.m00, self.m01], [self.m10, self.m11]])

    @property
    def det(self) -> float:
        return self.m00 * self.m11 - self.m01 * self.m10

    def is_identity(self) -> bool:
        return self == AffineMap()

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (self.m00 * x + self.m01 * y + self.tx,
                self.m10 * x + self.m11 * y + self.ty)

    def then(self, other: "AffineMap") -> "AffineMap":
        """The map that applies ``self`` first and ``other`` second."""
        m = other.linear @ self.linear
        t = other.linear @ np.array([self.tx, self.ty]) + np.array([other.tx, other.ty])
        return AffineMap.from_matrix(m, t[0], t[1])

    def inverse(self) -> "AffineMap":
        d = self.det
        if d == 0 or not math.isfinite(d):
            raise SingularMapError("affine map is not invertible")
        inv = np.array([[self.m11, -self.m01], [-self.m10, self.m00]]) / d
        t = -inv @ np.array([self.tx, self.ty])
        return AffineMap.from_matrix(inv, t[0], t[1])


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def compose_affine(p: AffineParams) -> AffineMap:
    """``lam * R(psi) @ diag(t, 1) @ R(phi)`` with zero translation."""
    m = p.lam * rotation(p.psi) @ np.diag([p.t, 1.0]) @ rotation(p.phi)
    return AffineMap.from_matrix(m)


def fit_affine(amap: AffineMap, width: int, height: int) -> tuple[AffineMap, int, int]:
    """Re-translate ``amap`` so the warped image footprint starts at the output origin.

    Returns the fitted map and the output width and height (the bounding box
    of the four warped footprint corners).
    """
    if amap.det == 0:
        raise SingularMapError("affine map is not invertible")
    cx = np.array([-0.5, width - 0.5, -0.5, width - 0.5])
    cy = np.array([-0.5, -0.5, height - 0.5, height - 0.5])
    lin = AffineMap(amap.m00, amap.m01, amap.m10, amap.m11)
    wx, wy = lin.apply(cx, cy)
    x0, y0 = wx.min(), wy.min()
    # 1e-9 absorbs rounding in the corner transform so exact sizes don't grow by one
    out_w = max(1, math.ceil(wx.max() - x0 - 1e-9))
    out_h = max(1, math.ceil(wy.max() - y0 - 1e-9))
    fitted = AffineMap(amap.m00, amap.m01, amap.m10, amap.m11, -x0 - 0.5, -y0 - 0.5)
    return fitted, out_w, out_h


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear samples at ``(x, y)``; points outside ``[0, w-1] x [0, h-1]`` give 0."""
    h, w = img.shape
    eps = 1e-9
    inside = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = (1 - fx) * img[y0, x0] + fx * img[y0, x1]
    bot = (1 - fx) * img[y1, x0] + fx * img[y1, x1]
    out = (1 - fy) * top + fy * bot
    return np.where(inside, out, 0.0)


def affine_warp(img: np.ndarray, amap: AffineMap, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Warp ``img`` by ``amap`` using inverse mapping and bilinear sampling.

    By default the output frame is fitted to the bounding box of the warped
    image (see :func:`fit_affine`) and the map's own translation is ignored.
    Passing ``shape=(h, w)`` uses ``amap`` verbatim with that output size.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if shape is None:
        amap, out_w, out_h = fit_affine(amap, w, h)
    else:
        out_h, out_w = shape
    inv = amap.inverse()
    if inv.is_identity() and (out_h, out_w) == (h, w):
        return img.copy()
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx, sy = inv.apply(xs, ys)
    return sample_bilinear(img, sx, sy)
