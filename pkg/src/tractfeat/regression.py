"""Outcome regression: z-scoring, zero-variance removal, a from-scratch
random-forest regressor (300 trees, depth 3 by default), recursive feature
elimination scored by leave-one-out MAE, and the LOOCV evaluation report.

Determinism contract: every fit derives its random stream from explicit
seeds (per-tree splitmix64 streams; per-fold seeds keyed on the held-out
subject id), and fold training rows are canonicalized by subject id, so
reports do not depend on subject order or thread count.
"""

import hashlib
from dataclasses import dataclass, field as dc_field

import numpy as np
from numba import int64, njit, uint64

from .errors import DegenerateInputError, ShapeError, ValidationError

MRS_MIN, MRS_MAX = 0, 4

_U64_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_U64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_MIX2 = np.uint64(0x94D049BB133111EB)


# --------------------------------------------------------------------------
# Scaling and variance screening
# --------------------------------------------------------------------------

@dataclass
class Scaler:
    mean: np.ndarray
    scale: np.ndarray      # population std; 1.0 on constant dimensions
    constant: np.ndarray   # bool per dimension


def _constant_columns(X):
    return np.all(X == X[0], axis=0)


def zscore_fit(X):
    """Per-dimension (x - mean)/std with population std.

    Constant dimensions keep scale 1 so they pass through as (x - mean),
    which :func:`drop_zero_variance` then removes.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateInputError("need at least 2 rows to fit a scaler")
    const = _constant_columns(X)
    mean = X.mean(axis=0)
    mean[const] = X[0, const]  # exact, avoids summation wobble on constants
    std = np.sqrt(((X - mean) ** 2).mean(axis=0))
    scale = np.where(const | (std == 0), 1.0, std)
    return Scaler(mean, scale, const | (std == 0))


def zscore_apply(scaler, X):
    return (np.asarray(X, dtype=float) - scaler.mean) / scaler.scale


def drop_zero_variance(X):
    """Remove constant dimensions; returns (reduced X, kept indices)."""
    X = np.asarray(X, dtype=float)
    kept = np.flatnonzero(~_constant_columns(X))
    return X[:, kept], kept


# --------------------------------------------------------------------------
# Random forest regressor
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 300
    max_depth: int = 3
    min_samples_split: int = 2
    mtry: int | None = None  # None: ceil(d / 3) at fit time
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValidationError("min_samples_split must be >= 2")


@njit(cache=True, nogil=True)
def _mix64(z):
    z = (z ^ (z >> uint64(30))) * _U64_MIX1
    z = (z ^ (z >> uint64(27))) * _U64_MIX2
    return z ^ (z >> uint64(31))


@njit(cache=True, nogil=True)
def _rng_next(state):
    state[0] = state[0] + _U64_GOLDEN
    return _mix64(state[0])


@njit(cache=True, nogil=True)
def _rng_below(state, n):
    return int64(_rng_next(state) % uint64(n))


@njit(cache=True, nogil=True)
def _best_split_feature(X, y, idx, a, b, f, sse_parent, vals, ys):
    """Best midpoint threshold for one feature; returns (gain, threshold)."""
    m = b - a
    for i in range(m):
        vals[i] = X[idx[a + i], f]
        ys[i] = y[idx[a + i]]
    order = np.argsort(vals[:m])
    s1 = 0.0
    s2 = 0.0
    for i in range(m):
        s1 += ys[i]
        s2 += ys[i] * ys[i]
    best_gain = 0.0
    best_thr = 0.0
    l1 = 0.0
    l2 = 0.0
    for k in range(1, m):
        yv = ys[order[k - 1]]
        l1 += yv
        l2 += yv * yv
        v0 = vals[order[k - 1]]
        v1 = vals[order[k]]
        if v0 == v1:
            continue
        r1 = s1 - l1
        r2 = s2 - l2
        sse_l = l2 - l1 * l1 / k
        sse_r = r2 - r1 * r1 / (m - k)
        gain = sse_parent - sse_l - sse_r
        if gain > best_gain:
            best_gain = gain
            best_thr = 0.5 * (v0 + v1)
    return best_gain, best_thr


@njit(cache=True, nogil=True)
def _build_tree(X, y, state, max_depth, min_split, mtry,
                feat, thr, val, imp, idx, lo, hi, scratch, pool, vals, ys):
    M = idx.shape[0]
    d = X.shape[1]
    n_nodes = feat.shape[0]
    for node in range(n_nodes):
        lo[node] = -1
    lo[0] = 0
    hi[0] = M
    for node in range(n_nodes):
        feat[node] = -2
        val[node] = 0.0
        if lo[node] < 0:
            continue
        a = lo[node]
        b = hi[node]
        m = b - a
        s = 0.0
        for i in range(a, b):
            s += y[idx[i]]
        mean = s / m
        val[node] = mean
        feat[node] = -1
        depth = 0
        v = node + 1
        while v > 1:
            v >>= 1
            depth += 1
        if depth >= max_depth or m < min_split:
            continue
        sse_p = 0.0
        for i in range(a, b):
            dv = y[idx[i]] - mean
            sse_p += dv * dv
        if sse_p <= 0.0:
            continue
        for i in range(d):
            pool[i] = i
        kf = mtry if mtry < d else d
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for c in range(kf):
            j = c + _rng_below(state, d - c)
            tmp = pool[c]
            pool[c] = pool[j]
            pool[j] = tmp
            f = pool[c]
            gain, cut = _best_split_feature(X, y, idx, a, b, f, sse_p, vals, ys)
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_thr = cut
        if best_f < 0:
            continue
        # stable partition: left gets x <= threshold, original order kept
        nl = 0
        for i in range(a, b):
            if X[idx[i], best_f] <= best_thr:
                scratch[nl] = idx[i]
                nl += 1
        nr = nl
        for i in range(a, b):
            if X[idx[i], best_f] > best_thr:
                scratch[nr] = idx[i]
                nr += 1
        for i in range(m):
            idx[a + i] = scratch[i]
        feat[node] = best_f
        thr[node] = best_thr
        imp[best_f] += best_gain
        left = 2 * node + 1
        right = 2 * node + 2
        lo[left] = a
        hi[left] = a + nl
        lo[right] = a + nl
        hi[right] = b


@njit(cache=True, nogil=True)
def _fit_forest(X, y, n_trees, max_depth, min_split, mtry, seed,
                feat, thr, val, imp):
    M = X.shape[0]
    d = X.shape[1]
    state = np.empty(1, np.uint64)
    boot = np.empty(M, np.int64)
    lo = np.empty(feat.shape[1], np.int64)
    hi = np.empty(feat.shape[1], np.int64)
    scratch = np.empty(M, np.int64)
    pool = np.empty(d, np.int64)
    vals = np.empty(M, np.float64)
    ys = np.empty(M, np.float64)
    for t in range(n_trees):
        state[0] = _mix64(seed ^ _mix64(uint64(t) + _U64_GOLDEN))
        for i in range(M):
            boot[i] = _rng_below(state, M)
        _build_tree(X, y, state, max_depth, min_split, mtry,
                    feat[t], thr[t], val[t], imp[t],
                    boot, lo, hi, scratch, pool, vals, ys)


@njit(cache=True, nogil=True)
def _predict_forest(feat, thr, val, X, out):
    T = feat.shape[0]
    for r in range(X.shape[0]):
        s = 0.0
        for t in range(T):
            node = 0
            while feat[t, node] >= 0:
                if X[r, feat[t, node]] <= thr[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            s += val[t, node]
        out[r] = s / T
    return out


class RegressionForest:
    """A fitted forest: flattened trees plus per-tree importance credits."""

    def __init__(self, spec, feat, thr, val, imp, y_range, n_features):
        self.spec = spec
        self._feat = feat
        self._thr = thr
        self._val = val
        self._imp = imp
        self.y_range = y_range
        self.n_features = n_features

    @property
    def n_trees(self):
        return self._feat.shape[0]

    def tree_depths(self):
        """Maximum split depth per tree (0 for a stump with no split)."""
        depths = []
        for t in range(self.n_trees):
            deepest = 0
            for node in range(self._feat.shape[1]):
                if self._feat[t, node] >= 0:
                    depth = (node + 1).bit_length() - 1
                    deepest = max(deepest, depth + 1)
            depths.append(deepest)
        return depths


def rf_train(X, y, spec=None):
    """Fit a bootstrap forest of depth-limited variance-reduction trees."""
    spec = spec or ForestSpec()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError("X rows must match y length")
    if X.shape[0] < 2:
        raise DegenerateInputError("need at least 2 samples to train")
    if X.shape[1] < 1:
        raise DegenerateInputError("need at least 1 feature dimension")
    d = X.shape[1]
    mtry = spec.mtry if spec.mtry is not None else -(-d // 3)
    n_nodes = 2 ** (spec.max_depth + 1) - 1
    feat = np.empty((spec.n_trees, n_nodes), dtype=np.int64)
    thr = np.zeros((spec.n_trees, n_nodes), dtype=np.float64)
    val = np.zeros((spec.n_trees, n_nodes), dtype=np.float64)
    imp = np.zeros((spec.n_trees, d), dtype=np.float64)
    seed = np.uint64(spec.rng_seed & 0xFFFFFFFFFFFFFFFF)
    _fit_forest(X, y, spec.n_trees, spec.max_depth, spec.min_samples_split,
                int(mtry), seed, feat, thr, val, imp)
    return RegressionForest(spec, feat, thr, val, imp,
                            (float(y.min()), float(y.max())), d)


def rf_predict(forest, x):
    """Mean of the trees' leaf values; accepts one sample or a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.ascontiguousarray(np.atleast_2d(x))
    if X.shape[1] != forest.n_features:
        raise ShapeError(f"expected {forest.n_features} features, got {X.shape[1]}")
    out = np.empty(X.shape[0])
    _predict_forest(forest._feat, forest._thr, forest._val, X, out)
    return float(out[0]) if single else out


def clamp_round_mrs(value):
    """Round half away from zero, then clamp into the valid grade range."""
    v = np.floor(np.abs(value) + 0.5) * np.sign(value)
    return int(min(max(v, MRS_MIN), MRS_MAX))


def predict_mrs(forest, x):
    return clamp_round_mrs(rf_predict(forest, x))


def rf_importance(forest):
    """Mean decrease in variance, normalized per tree then overall to sum 1."""
    imp = forest._imp
    sums = imp.sum(axis=1, keepdims=True)
    per_tree = np.divide(imp, sums, out=np.zeros_like(imp), where=sums > 0)
    mean = per_tree.mean(axis=0)
    total = mean.sum()
    return mean / total if total > 0 else mean


# --------------------------------------------------------------------------
# Datasets, folds, metrics
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    subject_ids: list

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2:
            raise ShapeError("X must be 2-D")
        if len(self.y) != self.X.shape[0] or len(self.subject_ids) != self.X.shape[0]:
            raise ShapeError("row counts of X, y, subject_ids must match")
        if len(self.feature_names) != self.X.shape[1]:
            raise ShapeError("feature_names must match X columns")
        if not np.isfinite(self.X).all():
            raise ValidationError("X contains NaN/Inf")
        if np.any((self.y < MRS_MIN) | (self.y > MRS_MAX)):
            raise ValidationError(f"grades must lie in [{MRS_MIN}, {MRS_MAX}]")
        if self.X.shape[0] < 2:
            raise DegenerateInputError("need at least 2 subjects")

    @property
    def n_subjects(self):
        return self.X.shape[0]

    def subset(self, dims):
        return Dataset(self.X[:, dims], self.y,
                       [self.feature_names[i] for i in dims], self.subject_ids)


@dataclass
class EvalReport:
    accuracy: float
    mae_mean: float
    mae_std: float
    per_subject: list = dc_field(default_factory=list)  # (id, true, predicted)


def derive_seed(base_seed, token):
    """Stable 64-bit seed from a base seed and a text token."""
    digest = hashlib.blake2b(f"{base_seed}|{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def evaluation_metrics(truth, predictions):
    """Exact-match accuracy and MAE (mean, population std of absolute errors)."""
    truth = np.asarray(truth, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if truth.shape != predictions.shape or truth.size == 0:
        raise ShapeError("truth and predictions must be same-length, non-empty")
    err = np.abs(predictions - truth)
    accuracy = float(np.mean(predictions == truth))
    return accuracy, float(err.mean()), float(err.std())


def _canonical_order(subject_ids, exclude=None):
    """Row indices sorted by subject id, optionally without one held-out row."""
    rows = [j for j in range(len(subject_ids)) if j != exclude]
    return sorted(rows, key=lambda j: str(subject_ids[j]))


def _fold_train_indices(subject_ids, held_out):
    return _canonical_order(subject_ids, exclude=held_out)


def _loocv_raw_errors(data, spec, dims):
    """Raw-prediction absolute errors per held-out subject (scaler refit per fold)."""
    dims = np.asarray(dims, dtype=int)
    errors = np.empty(data.n_subjects)
    for i in range(data.n_subjects):
        train = _fold_train_indices(data.subject_ids, i)
        Xt = data.X[train][:, dims]
        yt = data.y[train].astype(float)
        scaler = zscore_fit(Xt)
        fold_spec = ForestSpec(spec.n_trees, spec.max_depth, spec.min_samples_split,
                               spec.mtry, derive_seed(spec.rng_seed, data.subject_ids[i]))
        forest = rf_train(zscore_apply(scaler, Xt), yt, fold_spec)
        raw = rf_predict(forest, zscore_apply(scaler, data.X[i, dims]))
        errors[i] = abs(raw - data.y[i])
    return errors


def rfe_loocv(data, spec=None):
    """Recursive feature elimination scored by leave-one-out raw MAE.

    From full dimensionality down to 1: score the current subset by LOOCV
    MAE, then drop the dimension with the smallest forest importance (fit on
    all rows; ties keep the lowest index). Returns (selected dims, curve); the
    curve has one (cardinality, MAE) entry per cardinality, and the returned
    subset attains its minimum with ties broken toward fewer dimensions.
    """
    spec = spec or ForestSpec()
    d = data.X.shape[1]
    if d < 1:
        raise DegenerateInputError("no feature dimensions left after screening")
    active = list(range(d))
    curve = []
    best_mae = np.inf
    best_set = list(active)
    for k in range(d, 0, -1):
        mae = float(_loocv_raw_errors(data, spec, active).mean())
        curve.append((k, mae))
        if mae <= best_mae:  # <=: later entries have smaller cardinality
            best_mae = mae
            best_set = list(active)
        if k > 1:
            order = _canonical_order(data.subject_ids)
            Xa = data.X[order][:, active]
            ya = data.y[order].astype(float)
            scaler = zscore_fit(Xa)
            imp_spec = ForestSpec(spec.n_trees, spec.max_depth, spec.min_samples_split,
                                  spec.mtry, derive_seed(spec.rng_seed, f"rfe-{k}"))
            forest = rf_train(zscore_apply(scaler, Xa), ya, imp_spec)
            weakest = int(np.argmin(rf_importance(forest)))
            del active[weakest]
    return np.array(best_set, dtype=int), curve


def loocv_evaluate(data, spec=None, selected=None):
    """Leave-one-out evaluation with rounded, clamped grade predictions.

    The scaler and forest are refit inside every fold; fold seeds are keyed on
    the held-out subject id so subject order cannot change the metrics.
    """
    spec = spec or ForestSpec()
    dims = np.arange(data.X.shape[1]) if selected is None else np.asarray(selected, int)
    if len(dims) < 1:
        raise DegenerateInputError("no feature dimensions selected")
    per_subject = []
    for i in range(data.n_subjects):
        train = _fold_train_indices(data.subject_ids, i)
        Xt = data.X[train][:, dims]
        yt = data.y[train].astype(float)
        scaler = zscore_fit(Xt)
        fold_spec = ForestSpec(spec.n_trees, spec.max_depth, spec.min_samples_split,
                               spec.mtry, derive_seed(spec.rng_seed, data.subject_ids[i]))
        forest = rf_train(zscore_apply(scaler, Xt), yt, fold_spec)
        raw = rf_predict(forest, zscore_apply(scaler, data.X[i, dims]))
        per_subject.append((data.subject_ids[i], int(data.y[i]), clamp_round_mrs(raw)))
    truth = [t for _, t, _ in per_subject]
    preds = [p for _, _, p in per_subject]
    accuracy, mae_mean, mae_std = evaluation_metrics(truth, preds)
    return EvalReport(accuracy, mae_mean, mae_std, per_subject)


# --------------------------------------------------------------------------
# Cohort tables (feature TSV + clinical TSV)
# --------------------------------------------------------------------------

FEATURE_COLUMNS = {
    "tractographic": lambda name: name.startswith("T_"),
    "volumetric_spatial": lambda name: name.startswith("VS_"),
    "volumetric": lambda name: name == "vol",
    "spatial": lambda name: name in ("cx", "cy", "cz"),
    "morphological": lambda name: name in ("maj", "min", "ratio", "solid",
                                           "round", "surf"),
}


class MissingSubjectError(KeyError):
    """A subject present in the feature table has no clinical row."""

    def __init__(self, subject_id):
        super().__init__(subject_id)
        self.subject_id = subject_id


def read_tsv(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split("\t")
    return header, [ln.split("\t") for ln in lines[1:]]


def load_clinical_tsv(path):
    """Rows of (subject_id, mRS, days_to_mRS)."""
    header, rows = read_tsv(path)
    want = ["subject_id", "mRS", "days_to_mRS"]
    if header[:3] != want:
        raise ValidationError(f"clinical table must start with columns {want}")
    return {r[0]: (int(r[1]), float(r[2])) for r in rows}


def build_datasets(features_path, clinical_path, window=(80.0, 100.0)):
    """Join the feature table with clinical grades into per-kind Datasets.

    Subjects outside the days-to-grade window are dropped; a feature-table
    subject missing from the clinical table raises MissingSubjectError.
    """
    header, rows = read_tsv(features_path)
    clinical = load_clinical_tsv(clinical_path)
    kept_rows = []
    for r in rows:
        sid = r[0]
        if sid not in clinical:
            raise MissingSubjectError(sid)
        mrs, days = clinical[sid]
        if window[0] <= days <= window[1]:
            kept_rows.append((sid, mrs, [float(v) for v in r[1:]]))
    if len(kept_rows) < 2:
        raise DegenerateInputError("fewer than 2 subjects inside the grade window")
    names = header[1:]
    datasets = {}
    for kind, pred in FEATURE_COLUMNS.items():
        cols = [i for i, n in enumerate(names) if pred(n)]
        X = np.array([[vals[i] for i in cols] for _, _, vals in kept_rows])
        datasets[kind] = Dataset(X, [m for _, m, _ in kept_rows],
                                 [names[i] for i in cols],
                                 [s for s, _, _ in kept_rows])
    return datasets
