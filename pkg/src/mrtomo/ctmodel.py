"""2-D parallel-beam CT forward model, phantoms, noise and graymap I/O.

The projector computes exact ray/pixel intersection lengths (Siddon style)
so that densified matrices are exact and coarse-grid projectors agree with
projecting replicated images to rounding error. Matrices are assembled
sparse once per geometry and cached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse

from .linops import LinOp

_AXIS_SNAP = 1e-14
_SEG_TOL = 1e-12

# (value, a, b, x0, y0, phi_deg) per ellipse, high-contrast variant
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam scan geometry over a square pixel grid of unit pitch.

    The detector row has unit spacing, is centered on the image center and
    defaults to ceil(sqrt(2 d)) bins so it covers the image diagonal.
    Angles are uniform in [0, pi).
    """

    side: int
    n_angles: int = 100
    n_detectors: Optional[int] = None

    def __post_init__(self):
        if self.side < 1:
            raise ValueError("side must be positive")
        if self.n_detectors is None:
            object.__setattr__(
                self, "n_detectors", math.ceil(math.sqrt(2.0 * self.side * self.side))
            )

    @property
    def m(self) -> int:
        return self.n_angles * self.n_detectors

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def offsets(self) -> np.ndarray:
        n = self.n_detectors
        return np.arange(n, dtype=float) - (n - 1) / 2.0


def ray_matrix(side: int, pixel_width: float, angles: np.ndarray, offsets: np.ndarray):
    """Sparse matrix of exact chord lengths, one row per (angle, detector) ray.

    The image spans [-side*pixel_width/2, side*pixel_width/2]^2; pixel
    (row, col) of the row-major flattening covers x in col-direction and y
    increasing with row. Rays lying exactly on a gridline are attributed to
    the pixel on the upper/right side.
    """
    h = float(pixel_width)
    half = side * h / 2.0
    grid = -half + h * np.arange(side + 1)
    n_d = offsets.size
    rows_out, cols_out, vals_out = [], [], []

    for a_idx, theta in enumerate(np.asarray(angles, dtype=float)):
        c0 = math.cos(theta)
        s0 = math.sin(theta)
        if abs(c0) < _AXIS_SNAP:
            c0 = 0.0
        if abs(s0) < _AXIS_SNAP:
            s0 = 0.0
        dx, dy = -s0, c0
        p0x = offsets * c0
        p0y = offsets * s0
        base = a_idx * n_d

        if dx == 0.0 or dy == 0.0:
            # axis-parallel rays cross one full row/column of pixels
            along_x = dy == 0.0  # ray travels in x, fixed y
            coord = p0y if along_x else p0x
            idx = np.floor((coord + half) / h).astype(int)
            ok = (idx >= 0) & (idx < side) & (coord < half) & (coord >= -half)
            for det in np.nonzero(ok)[0]:
                line = idx[det]
                if along_x:
                    pix = line * side + np.arange(side)
                else:
                    pix = np.arange(side) * side + line
                rows_out.append(np.full(side, base + det))
                cols_out.append(pix)
                vals_out.append(np.full(side, h))
            continue

        tx = (grid[None, :] - p0x[:, None]) / dx
        ty = (grid[None, :] - p0y[:, None]) / dy
        t_lo = np.maximum(np.minimum(tx[:, 0], tx[:, -1]), np.minimum(ty[:, 0], ty[:, -1]))
        t_hi = np.minimum(np.maximum(tx[:, 0], tx[:, -1]), np.maximum(ty[:, 0], ty[:, -1]))
        miss = t_lo >= t_hi
        t_lo = np.where(miss, 0.0, t_lo)
        t_hi = np.where(miss, 0.0, t_hi)
        ts = np.concatenate([tx, ty], axis=1)
        ts = np.clip(ts, t_lo[:, None], t_hi[:, None])
        ts.sort(axis=1)
        seg = np.diff(ts, axis=1)
        tmid = 0.5 * (ts[:, :-1] + ts[:, 1:])
        px = p0x[:, None] + tmid * dx
        py = p0y[:, None] + tmid * dy
        col = np.floor((px + half) / h).astype(int)
        row = np.floor((py + half) / h).astype(int)
        keep = (
            (seg > _SEG_TOL * max(1.0, h))
            & (col >= 0)
            & (col < side)
            & (row >= 0)
            & (row < side)
        )
        det_idx = np.broadcast_to(np.arange(n_d)[:, None], seg.shape)
        rows_out.append(base + det_idx[keep])
        cols_out.append(row[keep] * side + col[keep])
        vals_out.append(seg[keep])

    if rows_out:
        rows_cat = np.concatenate(rows_out)
        cols_cat = np.concatenate(cols_out)
        vals_cat = np.concatenate(vals_out)
    else:
        rows_cat = cols_cat = np.zeros(0, dtype=int)
        vals_cat = np.zeros(0)
    mat = sparse.coo_matrix(
        (vals_cat, (rows_cat, cols_cat)), shape=(len(angles) * n_d, side * side)
    )
    return mat.tocsr()


_projector_cache: dict[tuple, tuple] = {}


def _projector_pair(geom: Geometry, side: int, pixel_width: float):
    key = (side, float(pixel_width), geom.n_angles, geom.n_detectors)
    hit = _projector_cache.get(key)
    if hit is None:
        mat = ray_matrix(side, pixel_width, geom.angles, geom.offsets)
        hit = (mat, mat.T.tocsr())
        _projector_cache[key] = hit
    return hit


def project(geom: Geometry, x: np.ndarray, pixel_width: float = 1.0) -> np.ndarray:
    """Forward-project an image; returns an (n_angles, n_detectors) sinogram."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != geom.side * geom.side:
        raise ValueError(f"image has {x.size} pixels, geometry expects {geom.side}^2")
    mat, _ = _projector_pair(geom, geom.side, pixel_width)
    return (mat @ x).reshape(geom.n_angles, geom.n_detectors)


def backproject(geom: Geometry, y: np.ndarray, pixel_width: float = 1.0) -> np.ndarray:
    """Exact adjoint of project; returns a (side, side) image."""
    y = np.asarray(y, dtype=float).ravel()
    if y.size != geom.m:
        raise ValueError(f"sinogram has {y.size} bins, geometry expects {geom.m}")
    _, mat_t = _projector_pair(geom, geom.side, pixel_width)
    return (mat_t @ y).reshape(geom.side, geom.side)


def projector_op(geom: Geometry, pixel_width: float = 1.0) -> LinOp:
    """Full-resolution forward model as a flat LinOp."""
    mat, mat_t = _projector_pair(geom, geom.side, pixel_width)
    return LinOp(geom.side * geom.side, geom.m, lambda x: mat @ x, lambda y: mat_t @ y)


def coarse_projector(geom: Geometry, factor: int) -> LinOp:
    """Forward model on the grid coarsened by ``factor``, same detector array.

    Pixel width scales with the factor so the coarse grid covers the same
    physical square; one apply costs roughly 1/factor of the full model.
    """
    if geom.side % factor != 0:
        raise ValueError(f"side {geom.side} not divisible by factor {factor}")
    low = geom.side // factor
    mat, mat_t = _projector_pair(geom, low, float(factor))
    return LinOp(low * low, geom.m, lambda x: mat @ x, lambda y: mat_t @ y)


@dataclass(frozen=True)
class Phantom:
    kind: str
    side: int
    values: np.ndarray  # (side, side), entries in [0, 1]

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


def make_phantom(kind: str, side: int, rng_seed: int = 0) -> Phantom:
    """Deterministic test images in [0, 1].

    kinds: "flat" (constant 0.5), "shepp-logan" (ten-ellipse head phantom),
    "square-insert" (unit square spanning the central half, so its edges sit
    on multiples of side/4 and are exactly representable on coarse grids
    whose factor divides side/4).
    """
    if side < 1 or (side & (side - 1)) != 0:
        raise ValueError(f"side must be a power of two, got {side}")
    if kind == "flat":
        values = np.full((side, side), 0.5)
    elif kind == "shepp-logan":
        values = _shepp_logan(side)
    elif kind == "square-insert":
        if side < 4:
            raise ValueError("square-insert needs side >= 4")
        values = np.zeros((side, side))
        lo, hi = side // 4, side - side // 4
        values[lo:hi, lo:hi] = 1.0
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    values.setflags(write=False)
    return Phantom(kind=kind, side=side, values=values)


def _shepp_logan(side: int) -> np.ndarray:
    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    xg, yg = np.meshgrid(coords, coords)  # yg increases with row index
    img = np.zeros((side, side))
    for val, a, b, x0, y0, phi_deg in _SHEPP_LOGAN:
        phi = math.radians(phi_deg)
        c, s = math.cos(phi), math.sin(phi)
        xr = (xg - x0) * c + (yg - y0) * s
        yr = -(xg - x0) * s + (yg - y0) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return np.clip(img, 0.0, 1.0)


def add_noise(
    sino: np.ndarray, model: str, photons: float, seed: int = 0
) -> np.ndarray:
    """Simulate measurement noise for attenuation line integrals.

    poisson: b' = -log(max(1, Pois(photons * exp(-b))) / photons).
    gaussian: b' = b + N(0, exp(b)/photons) elementwise (delta-method
    variance of the poisson model). Deterministic given ``seed``.
    """
    if photons <= 0:
        raise ValueError("photons must be positive")
    sino = np.asarray(sino, dtype=float)
    rng = np.random.default_rng(seed)
    if model == "gaussian":
        std = np.sqrt(np.exp(sino) / photons)
        return sino + rng.standard_normal(sino.shape) * std
    if model == "poisson":
        if np.any(sino < 0):
            raise ValueError("poisson model expects nonnegative line integrals")
        counts = rng.poisson(photons * np.exp(-sino)).astype(float)
        return -np.log(np.maximum(counts, 1.0) / photons)
    raise ValueError(f"unknown noise model {model!r}")


def write_graymap(path: str, values: np.ndarray, header: Optional[dict] = None) -> None:
    """Write a 16-bit binary PGM plus a text sidecar holding the value scale.

    The sidecar (path + ".hdr") records vmin/vmax at full float precision
    and any extra geometry fields, so file -> data -> file round-trips
    byte-identically.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("graymap expects a 2-d array")
    if not np.all(np.isfinite(values)):
        raise ValueError("graymap values must be finite")
    vmin = float(values.min())
    vmax = float(values.max())
    scalespan = vmax - vmin
    if scalespan > 0:
        q = np.rint((values - vmin) / scalespan * 65535.0).astype(np.uint16)
    else:
        q = np.zeros(values.shape, dtype=np.uint16)
    hrows, wcols = values.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{wcols} {hrows}\n65535\n".encode("ascii"))
        f.write(q.astype(">u2").tobytes())
    fields = {"vmin": repr(vmin), "vmax": repr(vmax), "rows": str(hrows), "cols": str(wcols)}
    if header:
        for k, v in header.items():
            fields[str(k)] = str(v)
    with open(path + ".hdr", "w") as f:
        for k, v in fields.items():
            f.write(f"{k} = {v}\n")


def read_graymap(path: str):
    """Inverse of write_graymap; returns (values, header dict)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary graymap: magic {magic!r}")
        wcols, hrows = (int(tok) for tok in f.readline().split())
        maxval = int(f.readline())
        if maxval != 65535:
            raise ValueError(f"expected 16-bit graymap, maxval {maxval}")
        q = np.frombuffer(f.read(wcols * hrows * 2), dtype=">u2").reshape(hrows, wcols)
    header: dict[str, str] = {}
    with open(path + ".hdr") as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                header[k.strip()] = v.strip()
    vmin = float(header["vmin"])
    vmax = float(header["vmax"])
    values = vmin + q.astype(float) / 65535.0 * (vmax - vmin)
    return values, header
