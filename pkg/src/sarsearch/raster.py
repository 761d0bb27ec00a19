"""Single-channel float imagery: container, bilinear resampling, perspective
warp, and the `.rstr` / PGM file formats.

Pixel coordinates follow the usual image convention: u grows to the right,
v grows downward, and integer coordinates land exactly on pixel centers.
The valid sampling domain is [0, width-1] x [0, height-1]; everything
outside reads as 0 (zero padding).
"""

import struct
from pathlib import Path

import numpy as np

from .errors import (
    IoError,
    MalformedHeader,
    SingularHomography,
    SizeMismatch,
    VersionMismatch,
)

# A pixel location (u, v); plain tuples keep call sites lightweight.
PixelPoint = tuple[float, float]

RSTR_MAGIC = b"RSTR"
RSTR_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, width, height


class Raster:
    """Immutable single-channel image with intensities nominally in [0, 1].

    Wraps a (height, width) float32 array; the buffer is frozen after
    construction so instances can be shared across threads.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"raster data must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster intensities must be finite")
        arr.flags.writeable = False
        self._data = arr

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def pixels(self) -> np.ndarray:
        """Read-only (height, width) float32 view of the intensities."""
        return self._data

    def __eq__(self, other) -> bool:
        return isinstance(other, Raster) and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.width, self.height, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Raster({self.width}x{self.height})"


def sample_bilinear(img: Raster, p: PixelPoint) -> float:
    """Bilinear interpolation of the four neighbors of p; 0.0 outside bounds."""
    val = _sample_grid(img.pixels, np.asarray([p[0]], dtype=np.float64),
                       np.asarray([p[1]], dtype=np.float64))
    return float(val[0])


def _sample_grid(data: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling with zero padding outside the image."""
    h, w = data.shape
    inside = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)

    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.floor(uc).astype(np.intp)
    y0 = np.floor(vc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0

    v00 = data[y0, x0]
    v10 = data[y0, x1]
    v01 = data[y1, x0]
    v11 = data[y1, x1]
    top = (1.0 - fx) * v00 + fx * v10
    bot = (1.0 - fx) * v01 + fx * v11
    out = (1.0 - fy) * top + fy * bot
    return np.where(inside, out, 0.0)


_GRID_CACHE: dict = {}


def _pixel_grid(w: int, h: int):
    """Cached meshgrid of output pixel coordinates (read-only)."""
    key = (w, h)
    if key not in _GRID_CACHE:
        uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        uu.flags.writeable = False
        vv.flags.writeable = False
        _GRID_CACHE[key] = (uu, vv)
    return _GRID_CACHE[key]


def warp_and_crop(img: Raster, hmg: np.ndarray) -> Raster:
    """Apply a homography to img and crop to the original frame.

    Implemented as a single inverse-warp pass: each output pixel (u, v) is
    sampled from the source at H^-1 (u, v), which is equivalent to warping
    forward and cropping the result back to the input size.

    Raises SingularHomography when the matrix cannot be inverted.
    """
    hmg = np.asarray(hmg, dtype=np.float64).reshape(3, 3)
    scale = np.linalg.norm(hmg)
    if scale < 1e-12 or abs(np.linalg.det(hmg / scale)) <= 1e-12:
        raise SingularHomography("homography determinant too small to invert")
    hinv = np.linalg.inv(hmg)

    h, w = img.height, img.width
    uu, vv = _pixel_grid(w, h)
    denom = hinv[2, 0] * uu + hinv[2, 1] * vv + hinv[2, 2]
    # Pixels whose preimage lies at infinity read as padding.
    bad = np.abs(denom) <= 1e-12
    denom = np.where(bad, 1.0, denom)
    su = (hinv[0, 0] * uu + hinv[0, 1] * vv + hinv[0, 2]) / denom
    sv = (hinv[1, 0] * uu + hinv[1, 1] * vv + hinv[1, 2]) / denom
    su = np.where(bad, -1.0, su)
    sv = np.where(bad, -1.0, sv)

    out = _sample_grid(img.pixels, su, sv)
    return Raster(out.astype(np.float32))


# --- file I/O ---------------------------------------------------------------


def write_raster(img: Raster, path) -> None:
    """Write the native `.rstr` container (16-byte header + LE f32 data)."""
    payload = _HEADER.pack(RSTR_MAGIC, RSTR_VERSION, img.width, img.height)
    payload += img.pixels.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise IoError(f"cannot write raster to {path}: {e}") from e


def read_raster(path) -> Raster:
    """Read a `.rstr` file, or import a binary PGM (P5, maxval 255).

    The format is sniffed from the leading bytes. PGM intensities are scaled
    to [0, 1] by dividing by 255.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read raster from {path}: {e}") from e

    if raw[:2] == b"P5":
        return _parse_pgm(raw, path)

    if len(raw) < _HEADER.size:
        raise MalformedHeader(f"{path}: file shorter than the 16-byte header")
    magic, version, width, height = _HEADER.unpack_from(raw)
    if magic != RSTR_MAGIC:
        raise MalformedHeader(f"{path}: bad magic {magic!r}")
    if version != RSTR_VERSION:
        raise VersionMismatch(f"{path}: unsupported raster version {version}")
    if width == 0 or height == 0:
        raise MalformedHeader(f"{path}: zero-sized raster {width}x{height}")

    body = raw[_HEADER.size:]
    expected = width * height * 4
    if len(body) != expected:
        raise SizeMismatch(
            f"{path}: expected {expected} payload bytes for {width}x{height}, got {len(body)}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(height, width)
    return Raster(data)


def _parse_pgm(raw: bytes, path) -> Raster:
    """Minimal P5 parser: whitespace-separated header, '#' comments allowed."""
    pos = 2  # past magic
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader(f"{path}: truncated PGM header")
        token = raw[start:pos]
        if not token.isdigit():
            raise MalformedHeader(f"{path}: non-numeric PGM header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise MalformedHeader(f"{path}: only maxval 255 PGM supported, got {maxval}")
    if width == 0 or height == 0:
        raise MalformedHeader(f"{path}: zero-sized PGM {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:pos + width * height]
    if len(body) != width * height:
        raise SizeMismatch(f"{path}: PGM payload truncated")
    data = np.frombuffer(body, dtype=np.uint8).reshape(height, width)
    return Raster(data.astype(np.float32) / 255.0)
