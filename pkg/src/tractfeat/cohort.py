"""Synthetic evaluation cohort: lesions over a crossing-bundle phantom.

Grades are generated from the connectivity-weighted overlap between each
lesion and a designated critical bundle, so the tract-disruption feature has
signal to recover while purely positional features see only part of it.
"""

import json
import os

import numpy as np

from .field import PhantomSpec, make_phantom, save_field
from .tracking import TrackingParams
from .volume import Volume, save_volume, voxel_to_world

COHORT_DIMS = 32
COHORT_REGIONS = 8
BUNDLE_HALFWIDTH_MM = 3.0
NOISE_SIGMA = 0.3
# Weighted-overlap volume (mm^3) that corresponds to the top grade.
OVERLAP_FULL_SCALE = 140.0


def octant_atlas(grid):
    """Eight-region label volume splitting the grid into octants."""
    X, Y, Z = grid.dims
    x, y, z = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    labels = 1 + (x >= X // 2) + 2 * (y >= Y // 2) + 4 * (z >= Z // 2)
    return Volume(grid, labels.astype(float), kind="label")


def crossing_field(dims=COHORT_DIMS, halfwidth=BUNDLE_HALFWIDTH_MM):
    spec = PhantomSpec("crossing", dims=(dims,) * 3, voxel_size=(1.0, 1.0, 1.0),
                       axes=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
                       halfwidth_mm=halfwidth, qa_value=1.0)
    return make_phantom(spec)


def critical_bundle_weights(field):
    """Per-voxel connectivity weight of the critical (x-axis) bundle.

    Inside the bundle the weight is the local peak count, so the crossing
    region (two bundles) weighs double; elsewhere it is 0.
    """
    grid = field.grid
    X, Y, Z = grid.dims
    idx = np.stack(np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z),
                               indexing="ij"), axis=-1).reshape(-1, 3)
    centers = voxel_to_world(grid, idx)
    c = voxel_to_world(grid, (np.asarray(grid.dims) - 1) / 2.0)
    rel = centers - c
    perp = rel - np.outer(rel @ [1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    inside = (np.linalg.norm(perp, axis=1) <= BUNDLE_HALFWIDTH_MM).reshape(X, Y, Z)
    return np.where(inside, field.peak_count.astype(float), 0.0)


def _sphere_mask(grid, center, radius):
    X, Y, Z = grid.dims
    idx = np.stack(np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z),
                               indexing="ij"), axis=-1)
    d = np.linalg.norm(idx - np.asarray(center), axis=-1)
    return (d <= radius).astype(float)


def generate_cohort(out_dir, n_subjects=40, seed=0, dims=COHORT_DIMS,
                    noise_sigma=NOISE_SIGMA):
    """Write field, atlas, lesion masks, clinical table, and a run config.

    Returns the config dict (also stored as config.json in ``out_dir``).
    """
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    lesion_dir = os.path.join(out_dir, "lesions")
    os.makedirs(lesion_dir, exist_ok=True)

    field = crossing_field(dims)
    grid = field.grid
    field_path = os.path.join(out_dir, "field.npk")
    save_field(field, field_path)

    atlas_vol = octant_atlas(grid)
    atlas_path = os.path.join(out_dir, "atlas.nii.gz")
    save_volume(atlas_vol, atlas_path)

    weights = critical_bundle_weights(field)
    voxvol = grid.voxel_volume
    c = (dims - 1) / 2.0

    clinical_rows = []
    for i in range(n_subjects):
        sid = f"sub-{i:03d}"
        radius = rng.uniform(2.0, 5.0)

        u = rng.uniform()
        if u < 0.5:    # on or near the critical bundle
            center = (rng.uniform(4, dims - 5), c + rng.normal(0, 2.5),
                      c + rng.normal(0, 2.5))
        elif u < 0.75:  # on the other bundle
            center = (c + rng.normal(0, 2.5), rng.uniform(4, dims - 5),
                      c + rng.normal(0, 2.5))
        else:           # anywhere in the volume
            center = tuple(rng.uniform(3, dims - 4, size=3))
        center = np.clip(center, radius, dims - 1 - radius)
        lesion = _sphere_mask(grid, center, radius)
        save_volume(Volume(grid, lesion, kind="mask"),
                    os.path.join(lesion_dir, f"{sid}.nii.gz"))

        overlap = float((weights * lesion).sum()) * voxvol / OVERLAP_FULL_SCALE
        grade = int(np.clip(np.round(4.0 * overlap + rng.normal(0.0, noise_sigma)),
                            0, 4))
        clinical_rows.append((sid, grade, 90.0))

    clinical_path = os.path.join(out_dir, "clinical.tsv")
    with open(clinical_path, "w") as fh:
        fh.write("subject_id\tmRS\tdays_to_mRS\n")
        for sid, grade, days in clinical_rows:
            fh.write(f"{sid}\t{grade}\t{days}\n")

    config = {
        "field": field_path,
        "atlas": atlas_path,
        "lesion_dir": lesion_dir,
        "clinical": clinical_path,
        "output_dir": os.path.join(out_dir, "out"),
        "tracking": {k: v for k, v in vars(TrackingParams()).items()},
        "forest": {"n_trees": 300, "max_depth": 3, "rng_seed": seed},
        "features": ["tractographic", "volumetric", "spatial", "morphological",
                     "volumetric_spatial"],
        "mrs_window": [80.0, 100.0],
    }
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return config
