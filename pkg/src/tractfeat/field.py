"""Fiber-orientation fields: per-voxel peak directions with QA values.

A field stores up to K unit peak directions per voxel plus a brain mask on the
same grid. Fields are immutable after construction; direction interpolation is
pure and safe for concurrent callers.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from numba import int64, njit

from .errors import FormatError, ShapeError, ValidationError
from .volume import GridSpec, Volume, voxel_to_world

NPK1_MAGIC = b"NPK1"
NPK1_VERSION = 1

PHANTOM_KINDS = ("straight", "arc", "crossing")


class OdfField:
    """Peak-direction field on a grid.

    ``peak_dirs`` has shape (X, Y, Z, K, 3), ``peak_qa`` (X, Y, Z, K) and
    ``peak_count`` (X, Y, Z). Slots beyond a voxel's count are zeroed. Peaks
    are kept sorted by descending QA; directions are unit vectors. Peak
    directions are axes (antipodally symmetric): -d represents the same peak.
    """

    def __init__(self, grid, peak_dirs, peak_qa, peak_count, brain_mask):
        peak_dirs = np.ascontiguousarray(peak_dirs, dtype=np.float64)
        peak_qa = np.ascontiguousarray(peak_qa, dtype=np.float64)
        peak_count = np.ascontiguousarray(peak_count, dtype=np.uint8)
        X, Y, Z = grid.dims
        if peak_dirs.ndim != 5 or peak_dirs.shape[:3] != (X, Y, Z) or peak_dirs.shape[4] != 3:
            raise ShapeError(f"peak_dirs shape {peak_dirs.shape} does not fit grid {grid.dims}")
        K = peak_dirs.shape[3]
        if peak_qa.shape != (X, Y, Z, K) or peak_count.shape != (X, Y, Z):
            raise ShapeError("peak_qa/peak_count shapes inconsistent with peak_dirs")
        if np.any(peak_count > K):
            raise ValidationError("peak_count exceeds the number of peak slots")
        if not isinstance(brain_mask, Volume) or brain_mask.kind != "mask":
            raise ValidationError("brain_mask must be a mask Volume")
        if not brain_mask.grid.same_grid(grid):
            raise ValidationError("brain_mask grid differs from field grid")

        slot = np.arange(K)[None, None, None, :]
        used = slot < peak_count[..., None]
        norms = np.linalg.norm(peak_dirs, axis=-1)
        if np.any(np.abs(norms[used] - 1.0) > 1e-6):
            raise ValidationError("peak directions must have unit norm within 1e-6")
        if np.any(peak_qa[used] < 0):
            raise ValidationError("QA values must be non-negative")

        # Sort peaks by descending QA (stable) and zero unused slots.
        order = np.argsort(-np.where(used, peak_qa, -np.inf), axis=-1, kind="stable")
        peak_qa = np.take_along_axis(peak_qa, order, axis=-1)
        peak_dirs = np.take_along_axis(peak_dirs, order[..., None], axis=-2)
        peak_qa = np.where(used, peak_qa, 0.0)
        peak_dirs = np.where(used[..., None], peak_dirs, 0.0)

        self.grid = grid
        self.peak_dirs = np.ascontiguousarray(peak_dirs)
        self.peak_qa = np.ascontiguousarray(peak_qa)
        self.peak_count = peak_count
        self.brain_mask = brain_mask
        self._mask_u8 = np.ascontiguousarray(brain_mask.data != 0, dtype=np.uint8)
        self._w2v = np.ascontiguousarray(grid.inverse_affine[:3, :])
        for arr in (self.peak_dirs, self.peak_qa, self.peak_count):
            arr.flags.writeable = False

    @property
    def max_peaks(self):
        return self.peak_dirs.shape[3]


@dataclass
class PhantomSpec:
    """Synthetic verification field: a straight bundle, a circular arc, or two
    crossing bundles."""

    kind: str
    dims: tuple = (10, 10, 10)
    voxel_size: tuple = (1.0, 1.0, 1.0)
    qa_value: float = 1.0
    axis: tuple = (1.0, 0.0, 0.0)            # straight
    center: tuple | None = None              # arc (world mm; default grid centre)
    radius: float = 20.0                     # arc
    plane: str = "xy"                        # arc
    axes: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))  # crossing
    halfwidth_mm: float | None = None        # arc annulus / crossing bundle half-width

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise ValidationError(f"kind must be one of {PHANTOM_KINDS}, got {self.kind!r}")
        if self.qa_value <= 0:
            raise ValidationError("qa_value must be positive")
        if self.kind == "arc":
            if self.plane not in ("xy", "xz", "yz"):
                raise ValidationError("plane must be 'xy', 'xz' or 'yz'")
            if self.radius <= max(self.voxel_size):
                raise ValidationError("arc radius must exceed the voxel size")
        if self.kind == "crossing":
            u1 = _unit(self.axes[0])
            u2 = _unit(self.axes[1])
            if np.linalg.norm(np.cross(u1, u2)) < 1e-6:
                raise ValidationError("crossing axes must not be parallel")


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValidationError("direction vector must be nonzero")
    return v / n


def make_phantom(spec):
    """Generate the synthetic field described by ``spec``."""
    grid = GridSpec.from_spacing(spec.dims, spec.voxel_size)
    X, Y, Z = grid.dims
    centers = voxel_to_world(grid, np.stack(np.meshgrid(
        np.arange(X), np.arange(Y), np.arange(Z), indexing="ij"), axis=-1).reshape(-1, 3))
    halfwidth = spec.halfwidth_mm if spec.halfwidth_mm is not None else max(spec.voxel_size)

    if spec.kind == "straight":
        u = _unit(spec.axis)
        K = 1
        dirs = np.tile(u, (X * Y * Z, 1, 1))
        qa = np.full((X * Y * Z, 1), spec.qa_value)
        count = np.ones(X * Y * Z, dtype=np.uint8)
        mask = np.ones(X * Y * Z, dtype=float)

    elif spec.kind == "arc":
        normal = {"xy": (0, 0, 1.0), "xz": (0, 1.0, 0), "yz": (1.0, 0, 0)}[spec.plane]
        normal = np.asarray(normal)
        c = np.asarray(spec.center, float) if spec.center is not None else \
            voxel_to_world(grid, (np.asarray(grid.dims) - 1) / 2.0)
        rel = centers - c
        off_normal = rel @ normal
        inplane = rel - off_normal[:, None] * normal
        rho = np.linalg.norm(inplane, axis=1)
        tangent = np.cross(normal, inplane)
        tnorm = np.linalg.norm(tangent, axis=1)
        ok = tnorm > 0
        K = 1
        dirs = np.zeros((X * Y * Z, 1, 3))
        dirs[ok, 0, :] = tangent[ok] / tnorm[ok, None]
        in_mask = ok & (np.abs(rho - spec.radius) <= halfwidth) & (np.abs(off_normal) <= halfwidth)
        qa = np.where(in_mask, spec.qa_value, 0.0)[:, None]
        count = in_mask.astype(np.uint8)
        dirs[~in_mask, 0, :] = 0.0
        mask = in_mask.astype(float)

    else:  # crossing
        u1, u2 = _unit(spec.axes[0]), _unit(spec.axes[1])
        c = voxel_to_world(grid, (np.asarray(grid.dims) - 1) / 2.0)
        rel = centers - c
        in1 = _within_bundle(rel, u1, halfwidth)
        in2 = _within_bundle(rel, u2, halfwidth)
        K = 2
        dirs = np.zeros((X * Y * Z, 2, 3))
        qa = np.zeros((X * Y * Z, 2))
        count = np.zeros(X * Y * Z, dtype=np.uint8)
        only2 = in2 & ~in1
        dirs[in1, 0, :] = u1
        qa[in1, 0] = spec.qa_value
        dirs[only2, 0, :] = u2
        qa[only2, 0] = spec.qa_value
        both = in1 & in2
        dirs[both, 1, :] = u2
        qa[both, 1] = spec.qa_value
        count[in1 | in2] = 1
        count[both] = 2
        mask = (in1 | in2).astype(float)

    shape = (X, Y, Z)
    brain = Volume(grid, mask.reshape(shape), kind="mask")
    return OdfField(grid, dirs.reshape(shape + (K, 3)), qa.reshape(shape + (K,)),
                    count.reshape(shape), brain)


def _within_bundle(rel, axis, halfwidth):
    """Perpendicular distance to the centre line along ``axis`` within bound."""
    par = rel @ axis
    perp = rel - par[:, None] * axis[None, :]
    return np.linalg.norm(perp, axis=1) <= halfwidth


# --------------------------------------------------------------------------
# Direction interpolation
# --------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _interp_dir(dirs, qa, cnt, w2v, px, py, pz, dx, dy, dz, qa_thr, cos_thr):
    """Best-aligned-peak trilinear interpolation at one world-mm point.

    Returns (ok, ux, uy, uz, qa). Each of the 8 surrounding voxels contributes
    its best |dot|-aligned peak with QA >= qa_thr, sign-flipped into the
    hemisphere of (dx, dy, dz); contributions are blended with trilinear
    weights (skipped voxels forfeit their weight). Fails when no voxel
    qualifies, blended QA < qa_thr, or the result turns more than the angular
    threshold away from the previous direction.
    """
    vx = w2v[0, 0] * px + w2v[0, 1] * py + w2v[0, 2] * pz + w2v[0, 3]
    vy = w2v[1, 0] * px + w2v[1, 1] * py + w2v[1, 2] * pz + w2v[1, 3]
    vz = w2v[2, 0] * px + w2v[2, 1] * py + w2v[2, 2] * pz + w2v[2, 3]
    X, Y, Z = cnt.shape
    ix = int(math.floor(vx))
    iy = int(math.floor(vy))
    iz = int(math.floor(vz))
    fx = vx - ix
    fy = vy - iy
    fz = vz - iz

    ax = 0.0
    ay = 0.0
    az = 0.0
    qacc = 0.0
    any_hit = False
    for ox in range(2):
        cx = ix + ox
        if cx < 0 or cx >= X:
            continue
        wx = fx if ox == 1 else 1.0 - fx
        for oy in range(2):
            cy = iy + oy
            if cy < 0 or cy >= Y:
                continue
            wy = fy if oy == 1 else 1.0 - fy
            for oz in range(2):
                cz = iz + oz
                if cz < 0 or cz >= Z:
                    continue
                wz = fz if oz == 1 else 1.0 - fz
                w = wx * wy * wz
                n = int64(cnt[cx, cy, cz])
                best = -1
                best_dot = -1.0
                best_sign = 1.0
                for p in range(n):
                    if qa[cx, cy, cz, p] < qa_thr:
                        break  # peaks sorted by descending QA
                    d = (dirs[cx, cy, cz, p, 0] * dx
                         + dirs[cx, cy, cz, p, 1] * dy
                         + dirs[cx, cy, cz, p, 2] * dz)
                    ad = abs(d)
                    if ad > best_dot:
                        best_dot = ad
                        best = p
                        best_sign = 1.0 if d >= 0.0 else -1.0
                if best >= 0:
                    any_hit = True
                    ax += w * best_sign * dirs[cx, cy, cz, best, 0]
                    ay += w * best_sign * dirs[cx, cy, cz, best, 1]
                    az += w * best_sign * dirs[cx, cy, cz, best, 2]
                    qacc += w * qa[cx, cy, cz, best]
    if not any_hit or qacc < qa_thr:
        return False, 0.0, 0.0, 0.0, 0.0
    nrm = math.sqrt(ax * ax + ay * ay + az * az)
    if nrm == 0.0:
        return False, 0.0, 0.0, 0.0, 0.0
    ux = ax / nrm
    uy = ay / nrm
    uz = az / nrm
    if ux * dx + uy * dy + uz * dz < cos_thr:
        return False, 0.0, 0.0, 0.0, 0.0
    return True, ux, uy, uz, qacc


def interpolate_direction(field, point, prev_dir, qa_threshold, angular_threshold_deg):
    """Interpolate a stepping direction at ``point`` (world mm).

    Returns ``(direction, qa)`` or ``None`` as the termination signal (points
    outside the grid terminate rather than raise).
    """
    p = np.asarray(point, dtype=float)
    d = np.asarray(prev_dir, dtype=float)
    cos_thr = math.cos(math.radians(angular_threshold_deg))
    ok, ux, uy, uz, q = _interp_dir(
        field.peak_dirs, field.peak_qa, field.peak_count, field._w2v,
        p[0], p[1], p[2], d[0], d[1], d[2], float(qa_threshold), cos_thr)
    if not ok:
        return None
    return np.array([ux, uy, uz]), q


# --------------------------------------------------------------------------
# NPK1 storage
# --------------------------------------------------------------------------

def _voxel_dtype(K):
    return np.dtype([("count", "u1"), ("slots", "<f4", (K, 4))])


def save_field(field, path):
    """Write a field in NPK1 (little-endian; voxel records with x fastest)."""
    X, Y, Z = field.grid.dims
    K = field.max_peaks
    head = bytearray()
    head += NPK1_MAGIC
    head += np.array([NPK1_VERSION], "<u4").tobytes()
    head += np.array(field.grid.dims, "<u4").tobytes()
    head += np.array(field.grid.voxel_size, "<f4").tobytes()
    head += np.asarray(field.grid.affine, "<f8").tobytes()
    head += np.array([K], "<u4").tobytes()

    rec = np.zeros(X * Y * Z, dtype=_voxel_dtype(K))
    # x-fastest voxel order; (K, 4) record layout stays row-major
    rec["count"] = field.peak_count.reshape(-1, order="F")
    slots = np.concatenate([field.peak_dirs, field.peak_qa[..., None]], axis=-1)
    rec["slots"] = slots.transpose(2, 1, 0, 3, 4).reshape(X * Y * Z, K, 4).astype("<f4")
    mask = field._mask_u8.reshape(-1, order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(head))
        fh.write(rec.tobytes())
        fh.write(mask.tobytes())


def load_field(path):
    """Read an NPK1 field; validates magic, version, and direction norms."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != NPK1_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    ver = int(np.frombuffer(raw, "<u4", count=1, offset=4)[0])
    if ver != NPK1_VERSION:
        raise FormatError(f"{path}: unsupported NPK1 version {ver}")
    dims = np.frombuffer(raw, "<u4", count=3, offset=8).astype(int)
    voxel_size = np.frombuffer(raw, "<f4", count=3, offset=20).astype(float)
    affine = np.frombuffer(raw, "<f8", count=16, offset=32).reshape(4, 4).copy()
    K = int(np.frombuffer(raw, "<u4", count=1, offset=160)[0])
    X, Y, Z = (int(d) for d in dims)
    nvox = X * Y * Z
    dt = _voxel_dtype(K)
    body = 164
    need = body + nvox * dt.itemsize + nvox
    if len(raw) < need:
        raise FormatError(f"{path}: truncated NPK1 payload")
    rec = np.frombuffer(raw, dtype=dt, count=nvox, offset=body)
    mask = np.frombuffer(raw, dtype="u1", count=nvox, offset=body + nvox * dt.itemsize)

    count = rec["count"].reshape((X, Y, Z), order="F")
    slots = rec["slots"].astype(np.float64).reshape(Z, Y, X, K, 4).transpose(2, 1, 0, 3, 4)
    dirs = slots[..., :3]
    qa = slots[..., 3]
    used = np.arange(K)[None, None, None, :] < count[..., None]
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms[used] - 1.0) > 1e-3):
        raise ValidationError(f"{path}: non-unit peak direction in file")
    # float32 storage wobble: restore exact unit norms
    dirs = np.where(used[..., None], dirs / np.where(norms == 0, 1.0, norms)[..., None], 0.0)

    grid = GridSpec(tuple(dims), tuple(voxel_size), affine)
    brain = Volume(grid, mask.reshape((X, Y, Z), order="F").astype(float), kind="mask")
    return OdfField(grid, dirs, qa, count, brain)
