"""Synthetic SAR-like scenes and geo-referenced patch splits.

A scene is a smooth multi-scale structure field (three octaves of value
noise) multiplied by unit-mean exponential speckle, the textbook
single-look intensity model, clamped to [0, 1]. Key patches tile the scene
on a regular stride; query patches are key locations jittered by a
controlled pixel offset, so every query is guaranteed at least one
geo-overlapping key. Small offsets give an easy retrieval split, offsets
approaching the patch size a hard one.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SpecTooLarge
from .index import GeoFootprint
from .raster import Raster, read_raster, write_raster

SPECKLE_MEAN = 1.0  # unit-mean exponential intensity speckle


@dataclass(frozen=True)
class Scene:
    """A large raster with a geographic anchoring (origin of pixel (0,0)
    and geo-units per pixel)."""

    raster: Raster
    origin: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    name: str = "scene"

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def footprint(self, px: int, py: int, size: int) -> GeoFootprint:
        """Exact geo rectangle of the size x size patch at pixel (px, py)."""
        ox, oy = self.origin
        return GeoFootprint(ox + px * self.scale, oy + py * self.scale,
                            ox + (px + size) * self.scale, oy + (py + size) * self.scale)


@dataclass(frozen=True)
class SplitSpec:
    """Key/query split geometry.

    query_offset_range is the (min, max) per-axis jitter magnitude in
    pixels; both bounds must stay below patch_size so overlap with the base
    key patch is guaranteed.
    """

    patch_size: int = 64
    key_stride: int = 32
    n_queries: int = 100
    query_offset_range: tuple[int, int] = (0, 16)
    seed: int = 0

    @classmethod
    def easy(cls, patch_size: int = 64, **kw) -> "SplitSpec":
        """Large-overlap queries: jitter up to a quarter patch."""
        return cls(patch_size=patch_size,
                   query_offset_range=(0, patch_size // 4), **kw)

    @classmethod
    def hard(cls, patch_size: int = 64, **kw) -> "SplitSpec":
        """Minimal-overlap queries: jitter between half and a full patch."""
        return cls(patch_size=patch_size,
                   query_offset_range=(patch_size // 2, patch_size - 1), **kw)

    def validate(self) -> None:
        lo, hi = self.query_offset_range
        if self.patch_size < 1 or self.key_stride < 1 or self.n_queries < 1:
            raise ValueError("patch_size, key_stride and n_queries must be positive")
        if not (0 <= lo <= hi):
            raise ValueError(f"bad offset range {self.query_offset_range}")
        if hi >= self.patch_size:
            raise ValueError(
                f"max offset {hi} must stay below patch_size {self.patch_size} "
                "to guarantee overlap with a key patch")


@dataclass(frozen=True)
class PatchGeometry:
    """Placement of one patch inside a scene, before any embedding."""

    id: str
    scene: str
    px: int
    py: int
    size: int
    footprint: GeoFootprint


def _value_noise(rng: np.random.Generator, height: int, width: int,
                 cell: int) -> np.ndarray:
    """One octave: random lattice values, smoothstep-interpolated to pixels."""
    lat = rng.random((height // cell + 2, width // cell + 2))
    yy = np.arange(height)[:, None] / cell
    xx = np.arange(width)[None, :] / cell
    y0 = yy.astype(np.intp)
    x0 = xx.astype(np.intp)
    ty = yy - y0
    tx = xx - x0
    ty = ty * ty * (3.0 - 2.0 * ty)
    tx = tx * tx * (3.0 - 2.0 * tx)
    top = (1 - tx) * lat[y0, x0] + tx * lat[y0, x0 + 1]
    bot = (1 - tx) * lat[y0 + 1, x0] + tx * lat[y0 + 1, x0 + 1]
    return (1 - ty) * top + ty * bot


def generate_scene(seed: int, width: int, height: int,
                   origin: tuple[float, float] = (0.0, 0.0),
                   scale: float = 1.0,
                   name: str | None = None) -> Scene:
    """Deterministic synthetic scene: structure field times speckle.

    The structure field sums three value-noise octaves (cells of roughly
    1/8, 1/16 and 1/32 of the short side) and is rescaled to [0, 1]; the
    speckle factor is exponential with mean 1. The product is clamped to
    the nominal intensity range.
    """
    if width < 2 or height < 2:
        raise ValueError(f"scene must be at least 2x2, got {width}x{height}")
    rng = np.random.default_rng(seed)

    base = max(min(width, height) // 8, 2)
    field = np.zeros((height, width))
    for amp, cell in zip((1.0, 0.5, 0.25), (base, max(base // 2, 2), max(base // 4, 2))):
        field += amp * _value_noise(rng, height, width, cell)
    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.full_like(field, 0.5)

    speckle = rng.exponential(SPECKLE_MEAN, size=(height, width))
    img = np.clip(field * speckle, 0.0, 1.0)
    return Scene(Raster(img.astype(np.float32)), origin, scale,
                 name if name is not None else f"scene{seed:08d}")


def crop_patch(scene: Scene, px: int, py: int, size: int) -> Raster:
    pix = scene.raster.pixels
    if px < 0 or py < 0 or px + size > scene.raster.width or py + size > scene.raster.height:
        raise SpecTooLarge(f"patch {size}@({px},{py}) leaves the scene")
    return Raster(pix[py:py + size, px:px + size])


def extract_patches(scene: Scene, spec: SplitSpec):
    """Key tiling plus jittered query placements.

    Keys cover the scene at key_stride, row-major by origin. Queries pick
    n_queries distinct key locations (far enough from the border that the
    jitter cannot leave the scene) and shift them by a per-axis offset whose
    magnitude is drawn uniformly from query_offset_range, with random sign.
    Returns (keys, queries) as PatchGeometry lists.
    """
    spec.validate()
    p = spec.patch_size
    w, h = scene.raster.width, scene.raster.height
    if p > w or p > h:
        raise SpecTooLarge(f"patch_size {p} exceeds scene {w}x{h}")

    xs = range(0, w - p + 1, spec.key_stride)
    ys = range(0, h - p + 1, spec.key_stride)
    keys = [
        PatchGeometry(f"{scene.name}:k:{py:05d}:{px:05d}", scene.name,
                      px, py, p, scene.footprint(px, py, p))
        for py in ys for px in xs
    ]

    lo, hi = spec.query_offset_range
    eligible = [k for k in keys
                if k.px - hi >= 0 and k.px + hi <= w - p
                and k.py - hi >= 0 and k.py + hi <= h - p]
    if len(eligible) < spec.n_queries:
        raise SpecTooLarge(
            f"only {len(eligible)} jitterable key locations for "
            f"{spec.n_queries} queries (offset range {spec.query_offset_range})")

    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(len(eligible), size=spec.n_queries, replace=False)
    queries = []
    for i, ki in enumerate(chosen):
        base = eligible[ki]
        mag = rng.integers(lo, hi + 1, size=2)
        sign = rng.integers(0, 2, size=2) * 2 - 1
        qx = int(base.px + sign[0] * mag[0])
        qy = int(base.py + sign[1] * mag[1])
        queries.append(PatchGeometry(
            f"{scene.name}:q{i:03d}:{qy:05d}:{qx:05d}", scene.name,
            qx, qy, p, scene.footprint(qx, qy, p)))
    return keys, queries


# --- on-disk dataset ----------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_dataset(scene: Scene, keys, queries, outdir) -> Path:
    """Write patches as `.rstr` files plus a JSON manifest; returns the
    manifest path. Layout: <outdir>/patches/*.rstr, <outdir>/manifest.json."""
    outdir = Path(outdir)
    patch_dir = outdir / "patches"
    patch_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for role, geoms in (("key", keys), ("query", queries)):
        for i, g in enumerate(geoms):
            rel = f"patches/{role}_{i:05d}.rstr"
            write_raster(crop_patch(scene, g.px, g.py, g.size), outdir / rel)
            entries.append({
                "id": g.id, "role": role, "scene": g.scene,
                "px": g.px, "py": g.py, "size": g.size,
                "footprint": list(g.footprint.as_tuple()),
                "path": rel,
            })

    manifest = {
        "scene": {"name": scene.name, "width": scene.raster.width,
                  "height": scene.raster.height,
                  "origin": list(scene.origin), "scale": scene.scale},
        "patches": entries,
    }
    path = outdir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    role: str
    scene: str
    px: int
    py: int
    size: int
    footprint: GeoFootprint
    path: str


def load_manifest(dataset_dir) -> list[ManifestEntry]:
    dataset_dir = Path(dataset_dir)
    doc = json.loads((dataset_dir / MANIFEST_NAME).read_text())
    return [
        ManifestEntry(e["id"], e["role"], e["scene"], e["px"], e["py"],
                      e["size"], GeoFootprint(*e["footprint"]), e["path"])
        for e in doc["patches"]
    ]


def load_patch(dataset_dir, entry: ManifestEntry) -> Raster:
    return read_raster(Path(dataset_dir) / entry.path)
