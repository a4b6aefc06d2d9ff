"""Lesion features: the tract-disruption feature and four first-order features.

The disruption feature couples a lesion-filtered tractogram with a label
atlas: endpoint pairs are counted symmetrically into an N x N matrix, the
matrix is normalized by its maximum, column sums give a per-region load, and
the load is Hadamard-weighted by the lesion volume per region.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateDataWarning, DegenerateInputError, ShapeError, ValidationError
from .volume import Volume, voxel_to_world, world_to_voxel

FEATURE_KINDS = ("tractographic", "volumetric", "spatial", "morphological",
                 "volumetric_spatial")
_FIXED_DIMS = {"volumetric": 1, "spatial": 3, "morphological": 6}

MORPH_NAMES = ("maj", "min", "ratio", "solid", "round", "surf")


class Atlas:
    """Label volume plus the ordered list of region labels (length N)."""

    def __init__(self, volume, labels=None, name=""):
        if volume.kind != "label":
            raise ValidationError("atlas volume must be a label volume")
        present = np.unique(volume.data)
        present = present[present > 0].astype(np.int64)
        if labels is None:
            labels = present
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) < 2:
            raise ValidationError("atlas needs at least two region labels")
        if np.any(labels <= 0) or np.any(np.diff(labels) <= 0):
            raise ValidationError("labels must be distinct positive integers, ascending")
        if not np.isin(present, labels).all():
            raise ValidationError("volume contains labels missing from the label list")
        self.volume = volume
        self.labels = labels
        self.name = name

    @property
    def n(self):
        return len(self.labels)

    def label_indices(self, values):
        """Map label values to [0, N) region indices; -1 for background/unknown."""
        values = np.asarray(values, dtype=np.int64)
        pos = np.searchsorted(self.labels, values)
        pos_c = np.clip(pos, 0, self.n - 1)
        ok = (values > 0) & (self.labels[pos_c] == values)
        return np.where(ok, pos_c, -1)


@dataclass
class FeatureVector:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValidationError(f"unknown feature kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not np.isfinite(self.values).all():
            raise ValidationError("feature values must be finite")
        want = _FIXED_DIMS.get(self.kind)
        if want is not None and len(self.values) != want:
            raise ShapeError(f"{self.kind} feature must have dim {want}")
        if self.kind in ("tractographic", "volumetric_spatial") and np.any(self.values < 0):
            raise ValidationError(f"{self.kind} feature must be non-negative")

    @property
    def dim(self):
        return len(self.values)


def _endpoint_labels(tractogram, atlas):
    if len(tractogram.streamlines) == 0:
        return np.empty((0, 2), dtype=np.int64)
    ends = np.array([[s[0], s[-1]] for s in tractogram.streamlines])
    grid = atlas.volume.grid
    v = np.floor(world_to_voxel(grid, ends.reshape(-1, 3)) + 0.5).astype(np.int64)
    dims = np.array(grid.dims)
    inb = np.all((v >= 0) & (v < dims), axis=1)
    lab = np.zeros(len(v), dtype=np.int64)
    lab[inb] = atlas.volume.data[v[inb, 0], v[inb, 1], v[inb, 2]].astype(np.int64)
    return lab.reshape(-1, 2)


def disruption_matrix(tractogram, atlas):
    """Symmetric endpoint-pair counts per region pair (threshold 0, end-type).

    Each streamline whose two endpoints land on nonzero labels i and j adds 1
    to d_ij and d_ji (once to d_ii when i == j); streamlines touching the
    background with either endpoint contribute nothing.
    """
    n = atlas.n
    counts = np.zeros((n, n), dtype=np.int64)
    lab = _endpoint_labels(tractogram, atlas)
    idx = atlas.label_indices(lab)
    ok = (idx[:, 0] >= 0) & (idx[:, 1] >= 0)
    i, j = idx[ok, 0], idx[ok, 1]
    eq = i == j
    np.add.at(counts, (i[eq], j[eq]), 1)
    np.add.at(counts, (i[~eq], j[~eq]), 1)
    np.add.at(counts, (j[~eq], i[~eq]), 1)
    return counts


def normalize_disruption(counts):
    """Divide by the maximum entry; all entries land in [0, 1]."""
    counts = np.asarray(counts)
    m = counts.max() if counts.size else 0
    if m <= 0:
        raise DegenerateInputError("disruption matrix is all zero")
    return counts / m


def region_load(normalized):
    """Column sums of the normalized disruption matrix."""
    normalized = np.asarray(normalized, dtype=float)
    return normalized.sum(axis=0)


def lesion_weights(lesion, atlas):
    """Lesion volume (mm^3) per atlas region; background voxels count nowhere."""
    if lesion.kind != "mask":
        raise ValidationError("lesion must be a mask volume")
    if not lesion.grid.same_grid(atlas.volume.grid):
        raise ValidationError("lesion and atlas must share one grid (resample first)")
    vals = atlas.volume.data[lesion.data > 0].astype(np.int64)
    idx = atlas.label_indices(vals)
    gamma = np.bincount(idx[idx >= 0], minlength=atlas.n).astype(float)
    return gamma * lesion.grid.voxel_volume


def tractographic_feature(gamma, load):
    """Hadamard product of the lesion weight vector and the region load."""
    gamma = np.asarray(gamma, dtype=float)
    load = np.asarray(load, dtype=float)
    if gamma.shape != load.shape:
        raise ShapeError(f"length mismatch: {gamma.shape} vs {load.shape}")
    return FeatureVector("tractographic", gamma * load)


def tractographic_from_tracts(tractogram, lesion, atlas):
    """Full chain lesion-tracts -> feature, with the degenerate fallback.

    A lesion outside every atlas region (or a tractogram yielding an all-zero
    disruption matrix) cannot produce the feature; it is defined as the zero
    vector and a warning is emitted.
    """
    gamma = lesion_weights(lesion, atlas)
    counts = disruption_matrix(tractogram, atlas)
    if gamma.max() == 0 or counts.max() == 0:
        warnings.warn("degenerate lesion/tractogram: tract-disruption feature "
                      "set to the zero vector", DegenerateDataWarning)
        return FeatureVector("tractographic", np.zeros(atlas.n)), counts
    load = region_load(normalize_disruption(counts))
    return tractographic_feature(gamma, load), counts


def volumetric_feature(lesion):
    """Lesion volume in mm^3."""
    nvox = int(np.count_nonzero(lesion.data))
    return FeatureVector("volumetric", [nvox * lesion.grid.voxel_volume])


def _lesion_coords(lesion):
    idx = np.argwhere(lesion.data > 0)
    if len(idx) == 0:
        raise DegenerateInputError("lesion mask is empty")
    return voxel_to_world(lesion.grid, idx)


def spatial_feature(lesion):
    """Centroid of the lesion in world mm."""
    return FeatureVector("spatial", _lesion_coords(lesion).mean(axis=0))


def morphological_feature(lesion):
    """Shape features: [major, minor, major/minor, solidity, roundness, surface].

    Major/minor axis lengths are 4*sqrt of the extreme eigenvalues of the
    voxel-centre covariance (ellipsoid convention). A degenerate minor axis
    yields a 0 ratio sentinel. Solidity is volume over convex-hull volume of
    the voxel centres, clamped to 1; roundness is the sphericity
    pi^(1/3)*(6V)^(2/3)/A with A the exposed voxel-face surface.
    """
    coords = _lesion_coords(lesion)
    centred = coords - coords.mean(axis=0)
    cov = centred.T @ centred / len(coords)
    eigvals = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    major = 4.0 * np.sqrt(eigvals[-1])
    minor = 4.0 * np.sqrt(eigvals[0])
    ratio = major / minor if minor > 0 else 0.0

    volume = np.count_nonzero(lesion.data) * lesion.grid.voxel_volume
    try:
        hull_volume = ConvexHull(coords).volume
    except QhullError:
        hull_volume = 0.0
    solidity = min(volume / hull_volume, 1.0) if hull_volume > 0 else 1.0

    surface = _exposed_surface(lesion)
    roundness = np.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / surface
    return FeatureVector("morphological",
                         [major, minor, ratio, solidity, roundness, surface])


def _exposed_surface(lesion):
    m = lesion.data > 0
    vs = lesion.grid.voxel_size
    face_area = (vs[1] * vs[2], vs[0] * vs[2], vs[0] * vs[1])
    total = 0.0
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (1, 1)
        padded = np.pad(m, pad)
        diff = padded.astype(np.int8)
        total += np.abs(np.diff(diff, axis=axis)).sum() * face_area[axis]
    return float(total)


def volumetric_spatial_feature(lesion, atlas):
    """Lesion volume distribution over atlas regions (identical to the weights)."""
    return FeatureVector("volumetric_spatial", lesion_weights(lesion, atlas))


def all_features(lesion, atlas, lesion_tracts):
    """All five feature kinds for one lesion already on the atlas grid."""
    tract, counts = tractographic_from_tracts(lesion_tracts, lesion, atlas)
    return {
        "tractographic": tract,
        "volumetric": volumetric_feature(lesion),
        "spatial": spatial_feature(lesion),
        "morphological": morphological_feature(lesion),
        "volumetric_spatial": volumetric_spatial_feature(lesion, atlas),
    }, counts


# --------------------------------------------------------------------------
# TSV output
# --------------------------------------------------------------------------

def feature_header(atlas):
    cols = ["subject_id"]
    cols += [f"T_{l}" for l in atlas.labels]
    cols += [f"VS_{l}" for l in atlas.labels]
    cols += ["vol", "cx", "cy", "cz"]
    cols += list(MORPH_NAMES)
    return cols


def feature_row(subject_id, feats):
    vals = np.concatenate([
        feats["tractographic"].values,
        feats["volumetric_spatial"].values,
        feats["volumetric"].values,
        feats["spatial"].values,
        feats["morphological"].values,
    ])
    return [subject_id] + [repr(float(v)) for v in vals]


def write_features_tsv(path, atlas, rows):
    """rows: iterable of (subject_id, feature dict)."""
    with open(path, "w") as fh:
        fh.write("\t".join(feature_header(atlas)) + "\n")
        for subject_id, feats in rows:
            fh.write("\t".join(feature_row(subject_id, feats)) + "\n")


def write_disruption_tsv(path, atlas, counts):
    with open(path, "w") as fh:
        fh.write("\t".join(["label"] + [str(l) for l in atlas.labels]) + "\n")
        for lab, row in zip(atlas.labels, counts):
            fh.write("\t".join([str(lab)] + [str(int(c)) for c in row]) + "\n")
