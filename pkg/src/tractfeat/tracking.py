"""Deterministic whole-brain streamline tracking (Euler) over a peak field.

Seeds sit at voxel centres and are enumerated in fixed lexicographic (x, y, z)
order, one tracking attempt per qualifying peak. Tracking may run on several
threads; attempts are processed in fixed-size blocks collected in order, so
results are bit-identical for any thread count.
"""

import collections
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from numba import njit

from .errors import FormatError, ValidationError
from .field import _interp_dir
from .volume import GridSpec, voxel_to_world, world_to_voxel

_BLOCK = 1024  # attempts per tracing block; fixed so threading cannot reorder math


@dataclass(frozen=True)
class TrackingParams:
    """Tracking configuration. Defaults reproduce the reference protocol."""

    qa_threshold: float = 0.15958
    angular_threshold_deg: float = 90.0
    step_mm: float = 0.5
    smoothing: float = 0.5
    min_length_mm: float = 3.0
    max_length_mm: float = 500.0
    tip_iterations: int = 1
    max_tracts: int | None = 2_235_858
    seed_ordering: str = "lexicographic"

    def __post_init__(self):
        if self.step_mm <= 0:
            raise ValidationError("step_mm must be positive")
        if not (0.0 <= self.smoothing <= 1.0):
            raise ValidationError("smoothing must lie in [0, 1]")
        if not (self.min_length_mm < self.max_length_mm):
            raise ValidationError("min_length_mm must be below max_length_mm")
        for name in ("qa_threshold", "angular_threshold_deg", "min_length_mm", "max_length_mm"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.seed_ordering != "lexicographic":
            raise ValidationError("only lexicographic seed ordering is supported")

    @property
    def max_segments(self):
        return int(math.floor(self.max_length_mm / self.step_mm + 1e-9))


@dataclass
class Tractogram:
    """Ordered collection of streamlines (each an (n, 3) world-mm array)."""

    streamlines: list
    provenance: dict = dc_field(default_factory=dict)

    def __len__(self):
        return len(self.streamlines)


@njit(cache=True, nogil=True)
def _trace_leg(dirs, qa, cnt, mask, w2v, px, py, pz, dx, dy, dz,
               step, smooth, qa_thr, cos_thr, budget, lane, start, stride):
    """Euler-integrate one leg, writing accepted points into ``lane``.

    Each iteration interpolates a direction, blends it with the previous
    direction (weight ``smooth`` on the old one), renormalizes, and steps.
    Stops on interpolation failure, on leaving the brain mask, or when the
    segment budget is spent. Returns the number of accepted steps.
    """
    X, Y, Z = mask.shape
    n = 0
    while n < budget:
        ok, ux, uy, uz, q = _interp_dir(dirs, qa, cnt, w2v, px, py, pz,
                                        dx, dy, dz, qa_thr, cos_thr)
        if not ok:
            break
        bx = (1.0 - smooth) * ux + smooth * dx
        by = (1.0 - smooth) * uy + smooth * dy
        bz = (1.0 - smooth) * uz + smooth * dz
        bn = math.sqrt(bx * bx + by * by + bz * bz)
        if bn == 0.0:
            break
        bx /= bn
        by /= bn
        bz /= bn
        nx = px + step * bx
        ny = py + step * by
        nz = pz + step * bz
        vx = w2v[0, 0] * nx + w2v[0, 1] * ny + w2v[0, 2] * nz + w2v[0, 3]
        vy = w2v[1, 0] * nx + w2v[1, 1] * ny + w2v[1, 2] * nz + w2v[1, 3]
        vz = w2v[2, 0] * nx + w2v[2, 1] * ny + w2v[2, 2] * nz + w2v[2, 3]
        ix = int(math.floor(vx + 0.5))
        iy = int(math.floor(vy + 0.5))
        iz = int(math.floor(vz + 0.5))
        if ix < 0 or ix >= X or iy < 0 or iy >= Y or iz < 0 or iz >= Z:
            break
        if mask[ix, iy, iz] == 0:
            break
        idx = start + stride * n
        lane[idx, 0] = nx
        lane[idx, 1] = ny
        lane[idx, 2] = nz
        px = nx
        py = ny
        pz = nz
        dx = bx
        dy = by
        dz = bz
        n += 1
    return n


@njit(cache=True, nogil=True)
def _trace_block(seeds, init_dirs, dirs, qa, cnt, mask, w2v,
                 step, smooth, qa_thr, cos_thr, max_seg, buf, n_fwd, n_bwd):
    """Trace both legs for a block of (seed, initial direction) attempts.

    Lane layout: index ``max_seg`` holds the seed; the first leg is written
    leftwards (so it comes out reversed), the second leg rightwards. A seed
    outside the brain mask is flagged with ``n_fwd = -1``.
    """
    X, Y, Z = mask.shape
    C = max_seg
    for i in range(seeds.shape[0]):
        sx = seeds[i, 0]
        sy = seeds[i, 1]
        sz = seeds[i, 2]
        vx = w2v[0, 0] * sx + w2v[0, 1] * sy + w2v[0, 2] * sz + w2v[0, 3]
        vy = w2v[1, 0] * sx + w2v[1, 1] * sy + w2v[1, 2] * sz + w2v[1, 3]
        vz = w2v[2, 0] * sx + w2v[2, 1] * sy + w2v[2, 2] * sz + w2v[2, 3]
        ix = int(math.floor(vx + 0.5))
        iy = int(math.floor(vy + 0.5))
        iz = int(math.floor(vz + 0.5))
        if (ix < 0 or ix >= X or iy < 0 or iy >= Y or iz < 0 or iz >= Z
                or mask[ix, iy, iz] == 0):
            n_fwd[i] = -1
            n_bwd[i] = 0
            continue
        lane = buf[i]
        lane[C, 0] = sx
        lane[C, 1] = sy
        lane[C, 2] = sz
        nf = _trace_leg(dirs, qa, cnt, mask, w2v, sx, sy, sz,
                        init_dirs[i, 0], init_dirs[i, 1], init_dirs[i, 2],
                        step, smooth, qa_thr, cos_thr, max_seg, lane, C - 1, -1)
        nb = _trace_leg(dirs, qa, cnt, mask, w2v, sx, sy, sz,
                        -init_dirs[i, 0], -init_dirs[i, 1], -init_dirs[i, 2],
                        step, smooth, qa_thr, cos_thr, max_seg - nf, lane, C + 1, 1)
        n_fwd[i] = nf
        n_bwd[i] = nb


def _run_attempts(field, seeds, init_dirs, params):
    """Trace one block of attempts; returns per-attempt point arrays or None."""
    max_seg = params.max_segments
    B = len(seeds)
    buf = np.empty((B, 2 * max_seg + 1, 3), dtype=np.float64)
    n_fwd = np.empty(B, dtype=np.int64)
    n_bwd = np.empty(B, dtype=np.int64)
    cos_thr = math.cos(math.radians(params.angular_threshold_deg))
    _trace_block(np.ascontiguousarray(seeds, dtype=np.float64),
                 np.ascontiguousarray(init_dirs, dtype=np.float64),
                 field.peak_dirs, field.peak_qa, field.peak_count,
                 field._mask_u8, field._w2v,
                 params.step_mm, params.smoothing, params.qa_threshold,
                 cos_thr, max_seg, buf, n_fwd, n_bwd)
    out = []
    C = max_seg
    for i in range(B):
        nf, nb = n_fwd[i], n_bwd[i]
        if nf < 0 or nf + nb < 1 or (nf + nb) * params.step_mm < params.min_length_mm:
            out.append(None)
        else:
            out.append(buf[i, C - nf:C + nb + 1].copy())
    return out


def propagate(field, seed_point, init_dir, params):
    """Track one streamline bidirectionally from a seed.

    Both legs start at the seed, one along ``init_dir`` and one opposite; the
    first leg is reversed and joined to the second with the seed shared once.
    Returns None when the result would be shorter than ``min_length_mm``.
    """
    d = np.asarray(init_dir, dtype=float)
    d = d / np.linalg.norm(d)
    return _run_attempts(field, np.asarray(seed_point, float)[None, :], d[None, :], params)[0]


def _enumerate_attempts(field, params):
    """Seed attempts: in-mask voxel centres x qualifying peaks, lex order."""
    vox = np.argwhere(field._mask_u8 > 0)  # C-scan == lexicographic (x, y, z)
    if len(vox) == 0:
        return np.empty((0, 3)), np.empty((0, 3))
    K = field.max_peaks
    slot = np.arange(K)[None, :]
    qa = field.peak_qa[vox[:, 0], vox[:, 1], vox[:, 2]]
    cnt = field.peak_count[vox[:, 0], vox[:, 1], vox[:, 2]]
    qual = (slot < cnt[:, None]) & (qa >= params.qa_threshold)
    nq = qual.sum(axis=1)
    total = int(nq.sum())
    if total == 0:
        return np.empty((0, 3)), np.empty((0, 3))
    rep = np.repeat(np.arange(len(vox)), nq)
    offsets = np.cumsum(nq) - nq
    peak_idx = np.arange(total) - np.repeat(offsets, nq)
    seeds = voxel_to_world(field.grid, vox[rep])
    init_dirs = field.peak_dirs[vox[rep, 0], vox[rep, 1], vox[rep, 2], peak_idx]
    return seeds, init_dirs


def _ordered_parallel(tasks, worker, threads):
    """Run ``worker`` over ``tasks`` with bounded lookahead, yielding in order."""
    if threads <= 1:
        for t in tasks:
            yield worker(t)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        pending = collections.deque()
        for t in tasks:
            pending.append(ex.submit(worker, t))
            if len(pending) >= threads * 2:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def track_whole_brain(field, params=None, threads=1):
    """Seed every in-mask voxel and track from each qualifying peak.

    Output streamlines appear in seed-enumeration order; tracking stops once
    ``max_tracts`` streamlines have been accepted.
    """
    params = params or TrackingParams()
    seeds, init_dirs = _enumerate_attempts(field, params)
    cap = params.max_tracts if params.max_tracts is not None else (1 << 62)
    streamlines = []
    blocks = ((seeds[i:i + _BLOCK], init_dirs[i:i + _BLOCK])
              for i in range(0, len(seeds), _BLOCK))

    def worker(block):
        return _run_attempts(field, block[0], block[1], params)

    for results in _ordered_parallel(blocks, worker, threads):
        for pts in results:
            if pts is not None:
                streamlines.append(pts)
                if len(streamlines) >= cap:
                    break
        if len(streamlines) >= cap:
            break
    prov = {"params": asdict(params),
            "field": f"grid={field.grid.dims},K={field.max_peaks}"}
    return Tractogram(streamlines, prov)


# --------------------------------------------------------------------------
# Tractogram filtering
# --------------------------------------------------------------------------

def _point_voxels(grid, pts):
    v = np.floor(world_to_voxel(grid, pts) + 0.5).astype(np.int64)
    inb = np.all((v >= 0) & (v < np.array(grid.dims)), axis=1)
    return v, inb


def filter_roi(tractogram, roi):
    """Keep streamlines with at least one point inside the ROI mask."""
    if len(tractogram.streamlines) == 0:
        return Tractogram([], dict(tractogram.provenance))
    lengths = np.array([len(s) for s in tractogram.streamlines])
    pts = np.concatenate(tractogram.streamlines, axis=0)
    v, inb = _point_voxels(roi.grid, pts)
    hit = np.zeros(len(pts), dtype=bool)
    hit[inb] = roi.data[v[inb, 0], v[inb, 1], v[inb, 2]] == 1
    starts = np.cumsum(lengths) - lengths
    keep = np.logical_or.reduceat(hit, starts)
    kept = [s for s, k in zip(tractogram.streamlines, keep) if k]
    return Tractogram(kept, dict(tractogram.provenance))


def prune_tip(tractogram, roi, iterations=1):
    """Iteratively drop streamlines whose support is a single visit.

    Per iteration, voxel visit counts are taken over all streamlines (each
    streamline counts once per voxel); a streamline is removed when it visits
    a voxel no other streamline visits, unless that voxel lies inside the ROI.
    """
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    grid = roi.grid
    dims = np.array(grid.dims)
    protected = (roi.data != 0).ravel()
    current = list(tractogram.streamlines)
    for _ in range(iterations):
        if not current:
            break
        lengths = np.array([len(s) for s in current])
        pts = np.concatenate(current, axis=0)
        v, inb = _point_voxels(grid, pts)
        flat = np.full(len(pts), -1, dtype=np.int64)
        flat[inb] = np.ravel_multi_index((v[inb, 0], v[inb, 1], v[inb, 2]), tuple(dims))
        stream_id = np.repeat(np.arange(len(current)), lengths)
        ok = flat >= 0
        pairs = np.unique(np.stack([stream_id[ok], flat[ok]], axis=1), axis=0)
        support = np.bincount(pairs[:, 1], minlength=int(np.prod(dims)))
        weak = (support[pairs[:, 1]] == 1) & ~protected[pairs[:, 1]]
        doomed = np.zeros(len(current), dtype=bool)
        doomed[pairs[weak, 0]] = True
        if not doomed.any():
            break
        current = [s for s, d in zip(current, doomed) if not d]
    return Tractogram(current, dict(tractogram.provenance))


# --------------------------------------------------------------------------
# TRK-compatible storage and text summary
# --------------------------------------------------------------------------

_TRK_DTYPE = np.dtype([
    ("id_string", "S6"),
    ("dim", "<i2", (3,)),
    ("voxel_size", "<f4", (3,)),
    ("origin", "<f4", (3,)),
    ("n_scalars", "<i2"),
    ("scalar_name", "S20", (10,)),
    ("n_properties", "<i2"),
    ("property_name", "S20", (10,)),
    ("vox_to_ras", "<f4", (4, 4)),
    ("reserved", "S444"),
    ("voxel_order", "S4"),
    ("pad2", "S4"),
    ("image_orientation_patient", "<f4", (6,)),
    ("pad1", "S2"),
    ("invert_x", "S1"),
    ("invert_y", "S1"),
    ("invert_z", "S1"),
    ("swap_xy", "S1"),
    ("swap_yz", "S1"),
    ("swap_zx", "S1"),
    ("n_count", "<i4"),
    ("version", "<i4"),
    ("hdr_size", "<i4"),
])
assert _TRK_DTYPE.itemsize == 1000


def save_trk(tractogram, grid, path):
    """Write a version-2 TRK file (points stored in corner-based voxel-mm)."""
    hdr = np.zeros((), dtype=_TRK_DTYPE)
    hdr["id_string"] = b"TRACK"
    hdr["dim"] = grid.dims
    hdr["voxel_size"] = grid.voxel_size
    hdr["n_scalars"] = 0
    hdr["n_properties"] = 0
    hdr["vox_to_ras"] = grid.affine
    hdr["voxel_order"] = b"RAS"
    hdr["n_count"] = len(tractogram.streamlines)
    hdr["version"] = 2
    hdr["hdr_size"] = 1000
    vs = np.asarray(grid.voxel_size)
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        for s in tractogram.streamlines:
            voxmm = ((world_to_voxel(grid, s) + 0.5) * vs).astype("<f4")
            fh.write(np.array([len(s)], "<i4").tobytes())
            fh.write(voxmm.tobytes())


def load_trk(path):
    """Read a TRK file written by :func:`save_trk`; returns (Tractogram, GridSpec)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 1000:
        raise FormatError(f"{path}: truncated TRK header")
    hdr = np.frombuffer(raw[:1000], dtype=_TRK_DTYPE)[0]
    if not hdr["id_string"].startswith(b"TRACK"):
        raise FormatError(f"{path}: bad TRK id string")
    if int(hdr["hdr_size"]) != 1000:
        raise FormatError(f"{path}: unexpected TRK header size")
    grid = GridSpec(tuple(int(d) for d in hdr["dim"]),
                    tuple(float(v) for v in hdr["voxel_size"]),
                    np.array(hdr["vox_to_ras"], dtype=float))
    vs = np.asarray(grid.voxel_size)
    streamlines = []
    off = 1000
    n_count = int(hdr["n_count"])
    for _ in range(n_count):
        n = int(np.frombuffer(raw, "<i4", count=1, offset=off)[0])
        off += 4
        pts = np.frombuffer(raw, "<f4", count=3 * n, offset=off).reshape(n, 3)
        off += 12 * n
        streamlines.append(voxel_to_world(grid, pts / vs - 0.5))
    return Tractogram(streamlines), grid


def streamline_length(points, step=None):
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def tractogram_summary(tractogram):
    """Plain-text count and length statistics (no timestamps)."""
    n = len(tractogram.streamlines)
    lines = [f"streamlines\t{n}"]
    if n:
        lens = np.array([streamline_length(s) for s in tractogram.streamlines])
        lines += [
            f"total_length_mm\t{lens.sum():.6f}",
            f"mean_length_mm\t{lens.mean():.6f}",
            f"min_length_mm\t{lens.min():.6f}",
            f"max_length_mm\t{lens.max():.6f}",
        ]
    else:
        lines += ["total_length_mm\t0.000000"]
    return "\n".join(lines) + "\n"
