"""Planar homography algebra and the four-point corner-displacement scheme
used to draw random perspective augmentations.

A homography is a non-singular 3x3 matrix acting on homogeneous pixel
coordinates. It is defined up to scale (8 degrees of freedom), so matrices
are kept in a canonical scaling: H33 = 1 whenever |H33| is not tiny, unit
Frobenius norm otherwise.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateCorrespondences,
    PointAtInfinity,
    SamplingExhausted,
    SingularHomography,
)
from .raster import PixelPoint, Raster, warp_and_crop

MAX_SAMPLE_ATTEMPTS = 100


def canonicalize(hmg: np.ndarray) -> np.ndarray:
    """Return H in canonical scale; raise SingularHomography if degenerate."""
    hmg = np.asarray(hmg, dtype=np.float64).reshape(3, 3)
    fro = np.linalg.norm(hmg)
    if fro < 1e-12:
        raise SingularHomography("homography is (near) the zero matrix")
    if abs(hmg[2, 2]) > 1e-9:
        out = hmg / hmg[2, 2]
    else:
        out = hmg / fro
    if abs(np.linalg.det(out)) <= 1e-12:
        raise SingularHomography("homography determinant vanishes")
    return out


def identity() -> np.ndarray:
    return np.eye(3)


def translation(du: float, dv: float) -> np.ndarray:
    hmg = np.eye(3)
    hmg[0, 2] = du
    hmg[1, 2] = dv
    return hmg


def apply_homography(hmg: np.ndarray, p: PixelPoint) -> PixelPoint:
    """Map pixel (u, v) through H; scale-invariant by construction."""
    hmg = np.asarray(hmg, dtype=np.float64)
    u, v = p
    w = hmg[2, 0] * u + hmg[2, 1] * v + hmg[2, 2]
    # Normalize the scale-invariance away before the at-infinity test so the
    # threshold means the same thing for H and c*H.
    if abs(w) <= 1e-12 * np.linalg.norm(hmg):
        raise PointAtInfinity(f"point {p} maps to infinity")
    return (
        (hmg[0, 0] * u + hmg[0, 1] * v + hmg[0, 2]) / w,
        (hmg[1, 0] * u + hmg[1, 1] * v + hmg[1, 2]) / w,
    )


def invert(hmg: np.ndarray) -> np.ndarray:
    hmg = canonicalize(hmg)
    return canonicalize(np.linalg.inv(hmg))


@dataclass(frozen=True)
class FourPointDisplacement:
    """Corner-displacement parameterization of a homography.

    base_corners holds four (u, v) points in fixed order: top-left,
    top-right, bottom-right, bottom-left. deltas holds the matching
    (du, dv) displacements. Valid draws keep the displaced quadrilateral
    strictly convex in the same winding order, which guarantees the
    recovered matrix is invertible.
    """

    base_corners: np.ndarray  # (4, 2)
    deltas: np.ndarray        # (4, 2)

    def __post_init__(self):
        object.__setattr__(self, "base_corners",
                           np.asarray(self.base_corners, dtype=np.float64).reshape(4, 2))
        object.__setattr__(self, "deltas",
                           np.asarray(self.deltas, dtype=np.float64).reshape(4, 2))

    @property
    def displaced_corners(self) -> np.ndarray:
        return self.base_corners + self.deltas


def is_strictly_convex(quad: np.ndarray) -> bool:
    """True when the 4 points form a strictly convex quad in TL,TR,BR,BL order.

    With u right / v down, that order has all consecutive edge cross
    products strictly positive.
    """
    q = np.asarray(quad, dtype=np.float64)
    for i in range(4):
        ax, ay = q[(i + 1) % 4] - q[i]
        bx, by = q[(i + 2) % 4] - q[(i + 1) % 4]
        if ax * by - ay * bx <= 0.0:
            return False
    return True


def solve_dlt(four_point: FourPointDisplacement) -> np.ndarray:
    """Recover the homography mapping base corners onto displaced corners.

    Solves the inhomogeneous 8x8 direct-linear-transform system with
    H33 = 1 (augmentation homographies are finite), after Hartley
    normalization of both point sets for conditioning.
    """
    src = four_point.base_corners
    dst = four_point.displaced_corners

    t_src, src_n = _hartley_normalize(src)
    t_dst, dst_n = _hartley_normalize(dst)

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src_n[i]
        xp, yp = dst_n[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -xp * x, -xp * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -yp * x, -yp * y]
        b[2 * i] = xp
        b[2 * i + 1] = yp

    if np.linalg.cond(a) > 1e12:
        raise DegenerateCorrespondences("four-point system is rank deficient")

    h = np.linalg.solve(a, b)
    h_norm = np.array([
        [h[0], h[1], h[2]],
        [h[3], h[4], h[5]],
        [h[6], h[7], 1.0],
    ])
    return canonicalize(np.linalg.inv(t_dst) @ h_norm @ t_src)


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform taking the centroid to the origin and the mean
    distance to sqrt(2); returns (T, T applied to pts)."""
    pts = np.asarray(pts, dtype=np.float64)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.mean(np.linalg.norm(centered, axis=1))
    s = np.sqrt(2.0) / mean_dist if mean_dist > 1e-12 else 1.0
    t = np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return t, centered * s


def sample_four_point(rng: np.random.Generator, width: int, height: int,
                      rho: float) -> FourPointDisplacement:
    """Draw a random corner displacement with radius rho.

    Base corners are the frame corners inset by rho so displaced corners
    stay inside the image; each delta is uniform on [-rho, rho]^2.
    Draws violating strict convexity are rejected and resampled, up to
    MAX_SAMPLE_ATTEMPTS times.
    """
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    if rho >= min(width, height) / 4:
        raise ValueError(
            f"rho={rho} too large for a {width}x{height} frame; need rho < min(w,h)/4"
        )

    base = np.array([
        [rho, rho],
        [width - 1.0 - rho, rho],
        [width - 1.0 - rho, height - 1.0 - rho],
        [rho, height - 1.0 - rho],
    ])
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        deltas = rng.uniform(-rho, rho, size=(4, 2))
        if is_strictly_convex(base + deltas):
            return FourPointDisplacement(base, deltas)
    raise SamplingExhausted(
        f"no convex corner draw in {MAX_SAMPLE_ATTEMPTS} attempts (rho={rho})"
    )


def augment(img: Raster, rng: np.random.Generator, rho: float) -> Raster:
    """One draw from the homography augmentation distribution of img."""
    four_point = sample_four_point(rng, img.width, img.height, rho)
    return warp_and_crop(img, solve_dlt(four_point))
