"""Planar homographies: DLT estimation, bilinear warping, and the
perspective remap that turns a ground-view image into a pseudo top-down view.

Coordinate convention: an image of w x h pixels spans the plane rectangle
[0, w] x [0, h], with the four corner pixels pinned to the rectangle corners.
Pixel (ix, iy) therefore sits at plane point (ix * w/(w-1), iy * h/(h-1)).
This puts the fixed bottom edge of the perspective remap exactly on the
bottom pixel row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import DegenerateGeometryError, ImageBuffer, InvalidInputError


@dataclass(frozen=True, eq=False)
class HomographyMatrix:
    """3x3 projective map, normalized so m[2][2] = 1."""

    m: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.m, dtype=np.float64)
        if arr.shape != (3, 3):
            raise InvalidInputError(f"homography must be 3x3, got {arr.shape}")
        if abs(arr[2, 2]) < 1e-12:
            raise DegenerateGeometryError("homography has m[2][2] ~ 0, cannot normalize")
        arr = arr / arr[2, 2]
        if abs(np.linalg.det(arr)) <= 1e-12:
            raise DegenerateGeometryError("homography is singular")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "m", arr)

    def inverse(self) -> "HomographyMatrix":
        return HomographyMatrix(np.linalg.inv(self.m))

    def __eq__(self, other):
        return isinstance(other, HomographyMatrix) and np.array_equal(self.m, other.m)


@dataclass(frozen=True)
class IPMConfig:
    """Perspective-remap settings.

    strength is the fractional outward displacement of the top corners,
    fill controls out-of-bounds sampling, output_size is (width, height)
    or None for same-as-input.
    """

    strength: float = 0.3
    fill: str = "white"
    output_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.strength < 0:
            raise InvalidInputError("strength must be >= 0")
        if self.fill not in ("white", "edge"):
            raise InvalidInputError(f"fill must be 'white' or 'edge', got {self.fill!r}")
        if self.output_size is not None:
            w, h = self.output_size
            if w < 1 or h < 1:
                raise InvalidInputError("output_size must be positive")
            object.__setattr__(self, "output_size", (int(w), int(h)))


def apply_homography(h: HomographyMatrix, points: np.ndarray) -> np.ndarray:
    """Project (n, 2) points through h with perspective division."""
    pts = np.asarray(points, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ h.m.T
    w = proj[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateGeometryError("point projects to the line at infinity")
    return proj[:, :2] / w[:, None]


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> HomographyMatrix:
    """Solve for the homography mapping 4 src points onto 4 dst points.

    Uses the direct linear transform with m[2][2] pinned to 1, giving an
    8x8 linear system. Raises DegenerateGeometryError when the
    correspondences are collinear or otherwise singular.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise InvalidInputError("dlt_homography needs exactly 4 src and 4 dst points")

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError(f"degenerate correspondences: {exc}") from exc

    mat = HomographyMatrix(np.append(h, 1.0).reshape(3, 3))
    reproj = apply_homography(mat, src)
    if not np.allclose(reproj, dst, atol=1e-8):
        raise DegenerateGeometryError("correspondences are near-degenerate: reprojection failed")
    return mat


def ipm_correspondences(width: int, height: int, cfg: IPMConfig) -> tuple[np.ndarray, np.ndarray]:
    """Corner correspondences for the top-widening perspective remap.

    The top corners move outward by strength * width, the bottom corners
    stay fixed, so the rectangle maps onto an isosceles trapezoid.
    """
    if width <= 0 or height <= 0:
        raise InvalidInputError("width and height must be positive")
    w, h, s = float(width), float(height), cfg.strength
    src = np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
    dst = np.array([[-s * w, 0.0], [w + s * w, 0.0], [w, h], [0.0, h]])
    return src, dst


def rotation_homography(width: int, height: int, degrees: float) -> HomographyMatrix:
    """In-plane rotation about the image center, as a homography."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    cx, cy = width / 2.0, height / 2.0
    rot = np.array([[c, -s, cx - c * cx + s * cy],
                    [s, c, cy - s * cx - c * cy],
                    [0.0, 0.0, 1.0]])
    return HomographyMatrix(rot)


def _grid_to_plane(n_pix: int, extent: float, coords: np.ndarray) -> np.ndarray:
    if n_pix == 1:
        return np.full_like(coords, extent / 2.0)
    return coords * (extent / (n_pix - 1))


def _plane_to_grid(n_pix: int, extent: float, coords: np.ndarray) -> np.ndarray:
    if n_pix == 1:
        return np.zeros_like(coords)
    return coords * ((n_pix - 1) / extent)


def warp_image(img: ImageBuffer, h: HomographyMatrix, cfg: IPMConfig) -> ImageBuffer:
    """Backward-warp img through h with bilinear sampling.

    Every output pixel p is sampled from img at H^-1 p. Out-of-bounds
    samples follow cfg.fill: blend against white, or replicate the edge.
    """
    hin, win = img.height, img.width
    wout, hout = cfg.output_size if cfg.output_size is not None else (win, hin)
    hinv = h.inverse().m

    ix, iy = np.meshgrid(np.arange(wout, dtype=np.float64),
                         np.arange(hout, dtype=np.float64))
    px = _grid_to_plane(wout, float(wout), ix)
    py = _grid_to_plane(hout, float(hout), iy)

    denom = hinv[2, 0] * px + hinv[2, 1] * py + hinv[2, 2]
    bad = np.abs(denom) < 1e-12
    denom = np.where(bad, 1.0, denom)
    sx = (hinv[0, 0] * px + hinv[0, 1] * py + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * px + hinv[1, 1] * py + hinv[1, 2]) / denom
    sx = np.where(bad, -1e9, sx)
    sy = np.where(bad, -1e9, sy)

    gx = _plane_to_grid(win, float(win), sx)
    gy = _plane_to_grid(hin, float(hin), sy)

    if cfg.fill == "edge":
        gx = np.clip(gx, 0.0, win - 1.0)
        gy = np.clip(gy, 0.0, hin - 1.0)

    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    src = img.data.astype(np.float64)

    def fetch(xi, yi):
        if cfg.fill == "edge":
            xi = np.clip(xi, 0, win - 1)
            yi = np.clip(yi, 0, hin - 1)
            return src[yi, xi]
        inside = (xi >= 0) & (xi < win) & (yi >= 0) & (yi < hin)
        vals = src[np.clip(yi, 0, hin - 1), np.clip(xi, 0, win - 1)]
        return np.where(inside[..., None], vals, 255.0)

    v00 = fetch(x0, y0)
    v10 = fetch(x0 + 1, y0)
    v01 = fetch(x0, y0 + 1)
    v11 = fetch(x0 + 1, y0 + 1)
    top = v00 * (1.0 - fx) + v10 * fx
    bot = v01 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    return ImageBuffer(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def compute_ipm(img: ImageBuffer, cfg: IPMConfig) -> ImageBuffer:
    """Full perspective remap of img per cfg (correspondences, DLT, warp)."""
    src, dst = ipm_correspondences(img.width, img.height, cfg)
    return warp_image(img, dlt_homography(src, dst), cfg)


def compute_rotation_augment(img: ImageBuffer, degrees: float = 45.0,
                             fill: str = "white") -> ImageBuffer:
    """Rotated stand-in for the perspective remap (augmentation ablation)."""
    h = rotation_homography(img.width, img.height, degrees)
    return warp_image(img, h, IPMConfig(strength=0.0, fill=fill))
