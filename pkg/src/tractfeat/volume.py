"""3-D volumes with affine geometry, NIfTI-1 I/O, and nearest-neighbour resampling.

All geometry in this package is expressed in world millimetres; voxel indices
only appear at the I/O boundary and when looking up a containing voxel.
"""

import gzip
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, UnsupportedDataTypeError, ValidationError

VOLUME_KINDS = ("scalar", "label", "mask")

# NIfTI-1 header, 348 bytes, little-endian.
_HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "<i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "<i4"),
    ("session_error", "<i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"),
    ("intent_p2", "<f4"),
    ("intent_p3", "<f4"),
    ("intent_code", "<i2"),
    ("datatype", "<i2"),
    ("bitpix", "<i2"),
    ("slice_start", "<i2"),
    ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"),
    ("scl_slope", "<f4"),
    ("scl_inter", "<f4"),
    ("slice_end", "<i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "<f4"),
    ("cal_min", "<f4"),
    ("slice_duration", "<f4"),
    ("toffset", "<f4"),
    ("glmax", "<i4"),
    ("glmin", "<i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "<i2"),
    ("sform_code", "<i2"),
    ("quatern_b", "<f4"),
    ("quatern_c", "<f4"),
    ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"),
    ("qoffset_y", "<f4"),
    ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)),
    ("srow_y", "<f4", (4,)),
    ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
])
assert _HEADER_DTYPE.itemsize == 348

_DTYPE_CODES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _column_norms(affine):
    return np.sqrt((np.asarray(affine, float)[:3, :3] ** 2).sum(axis=0))


@dataclass(frozen=True)
class GridSpec:
    """Voxel grid geometry: shape, spacing, and voxel-index -> world-mm affine."""

    dims: tuple
    voxel_size: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ShapeError(f"dims must be 3 positive integers, got {self.dims}")
        affine = np.array(self.affine, dtype=float)
        if affine.shape != (4, 4):
            raise ShapeError(f"affine must be 4x4, got {affine.shape}")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValidationError("affine is not invertible")
        vs = _column_norms(affine)
        if np.any(vs <= 0):
            raise ValidationError("voxel sizes derived from affine must be positive")
        affine.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in vs))
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_spacing(cls, dims, voxel_size, origin=(0.0, 0.0, 0.0)):
        aff = np.eye(4)
        aff[:3, :3] = np.diag(voxel_size)
        aff[:3, 3] = origin
        return cls(tuple(dims), tuple(voxel_size), aff)

    @property
    def inverse_affine(self):
        return np.linalg.inv(self.affine)

    @property
    def voxel_volume(self):
        """Volume of one voxel in mm^3 (voxel axes assumed orthogonal)."""
        return float(self.voxel_size[0] * self.voxel_size[1] * self.voxel_size[2])

    def same_grid(self, other, tol=1e-6):
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=tol)


class Volume:
    """A 3-D scalar/label/mask image on a :class:`GridSpec`.

    ``data`` is indexed ``[x, y, z]``. Volumes are treated as immutable after
    construction and are safe to share across threads.
    """

    def __init__(self, grid, data, kind="scalar"):
        if kind not in VOLUME_KINDS:
            raise ValidationError(f"kind must be one of {VOLUME_KINDS}, got {kind!r}")
        data = np.asarray(data, dtype=np.float64)
        if data.shape != tuple(grid.dims):
            raise ShapeError(f"data shape {data.shape} does not match dims {grid.dims}")
        if kind == "mask" and not np.isin(data, (0.0, 1.0)).all():
            raise ValidationError("mask volumes may contain only {0, 1}")
        if kind == "label":
            if np.any(data < 0) or not np.array_equal(data, np.round(data)):
                raise ValidationError("label volumes must hold non-negative integers")
        self.grid = grid
        self.data = data
        self.kind = kind
        self.data.flags.writeable = False

    @property
    def dims(self):
        return self.grid.dims

    @property
    def voxel_size(self):
        return self.grid.voxel_size

    @property
    def affine(self):
        return self.grid.affine


def voxel_to_world(vol_or_grid, index):
    """Map voxel indices (or fractional voxel coordinates) to world mm."""
    grid = vol_or_grid.grid if isinstance(vol_or_grid, Volume) else vol_or_grid
    idx = np.asarray(index, dtype=float)
    return idx @ grid.affine[:3, :3].T + grid.affine[:3, 3]


def world_to_voxel(vol_or_grid, point):
    """Map world-mm points to fractional voxel coordinates."""
    grid = vol_or_grid.grid if isinstance(vol_or_grid, Volume) else vol_or_grid
    inv = grid.inverse_affine
    pts = np.asarray(point, dtype=float)
    return pts @ inv[:3, :3].T + inv[:3, 3]


def containing_voxel(vol_or_grid, point):
    """Integer voxel whose cube contains each point (half-open on the upper face)."""
    v = world_to_voxel(vol_or_grid, point)
    return np.floor(v + 0.5).astype(np.int64)


def _infer_kind(arr, datatype_code):
    if datatype_code in (16, 64):
        return "scalar"
    if np.isin(arr, (0, 1)).all():
        return "mask"
    if np.all(arr >= 0):
        return "label"
    return "scalar"


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def load_volume(path, kind="auto"):
    """Read a NIfTI-1 volume (.nii or .nii.gz).

    Data is promoted to float64 with scl_slope/scl_inter applied. The affine
    is the sform when present, else the qform, else diagonal(pixdim). ``kind``
    may force the volume kind; the default infers it from the stored datatype
    and value set.
    """
    raw = _read_bytes(path)
    if len(raw) < 348:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE)[0]
    if hdr["magic"] not in (b"n+1", b"n+1\x00"):
        raise FormatError(f"{path}: bad NIfTI-1 magic {hdr['magic']!r}")
    if int(hdr["sizeof_hdr"]) != 348:
        raise FormatError(f"{path}: sizeof_hdr is {hdr['sizeof_hdr']}, expected 348")
    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise ShapeError(f"{path}: expected a 3-D image, header says {ndim}-D")
    dims = tuple(int(d) for d in hdr["dim"][1:4])
    if any(d <= 0 for d in dims):
        raise ShapeError(f"{path}: non-positive dimension in {dims}")
    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise UnsupportedDataTypeError(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    offset = int(hdr["vox_offset"])
    n = int(np.prod(dims))
    end = offset + n * dtype.itemsize
    if end > len(raw):
        raise FormatError(f"{path}: truncated data section")
    arr = np.frombuffer(raw[offset:end], dtype=dtype).reshape(dims, order="F")
    data = arr.astype(np.float64)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        data = data * slope + inter

    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        affine = _qform_affine(hdr)
    else:
        affine = np.eye(4)
        affine[:3, :3] = np.diag(np.abs(hdr["pixdim"][1:4]))
    grid = GridSpec(dims, _column_norms(affine), affine)

    if kind == "auto":
        kind = _infer_kind(data, code)
    return Volume(grid, data, kind=kind)


def _qform_affine(hdr):
    b, c, d = (float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"]))
    w2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(w2) if w2 > 0 else 0.0
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pix = np.abs(hdr["pixdim"][1:4]).astype(float)
    qfac = -1.0 if float(hdr["pixdim"][0]) == -1.0 else 1.0
    pix[2] *= qfac
    affine = np.eye(4)
    affine[:3, :3] = rot @ np.diag(pix)
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def save_volume(vol, path):
    """Write a Volume as single-file NIfTI-1 (.nii, or .nii.gz when so named).

    Labels and masks are stored as int32, scalars as float32; the affine goes
    into the sform (and qform offset fields are left zero).
    """
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"][0] = 3
    hdr["dim"][1:4] = vol.dims
    hdr["dim"][4:] = 1
    if vol.kind == "scalar":
        out = vol.data.astype("<f4")
        hdr["datatype"] = 16
        hdr["bitpix"] = 32
    else:
        out = vol.data.astype("<i4")
        hdr["datatype"] = 8
        hdr["bitpix"] = 32
    hdr["pixdim"][0] = 1
    hdr["pixdim"][1:4] = vol.voxel_size
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 1
    hdr["scl_inter"] = 0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 2
    hdr["qform_code"] = 0
    hdr["srow_x"] = vol.affine[0]
    hdr["srow_y"] = vol.affine[1]
    hdr["srow_z"] = vol.affine[2]
    hdr["magic"] = b"n+1"

    payload = hdr.tobytes() + b"\x00" * 4 + out.tobytes(order="F")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def resample_nearest(src, target):
    """Resample ``src`` onto the ``target`` grid by nearest voxel centre.

    Output voxel centres are mapped through target's affine into world space
    and back through src's inverse affine; out-of-bounds samples become 0.
    Never invents label values.
    """
    if isinstance(target, Volume):
        target = target.grid
    tx, ty, tz = np.meshgrid(
        np.arange(target.dims[0]), np.arange(target.dims[1]), np.arange(target.dims[2]),
        indexing="ij",
    )
    idx = np.stack([tx, ty, tz], axis=-1).reshape(-1, 3)
    world = voxel_to_world(target, idx)
    src_v = np.floor(world_to_voxel(src.grid, world) + 0.5).astype(np.int64)
    valid = np.all((src_v >= 0) & (src_v < np.array(src.dims)), axis=1)
    out = np.zeros(len(idx))
    sv = src_v[valid]
    out[valid] = src.data[sv[:, 0], sv[:, 1], sv[:, 2]]
    return Volume(target, out.reshape(target.dims), kind=src.kind)
