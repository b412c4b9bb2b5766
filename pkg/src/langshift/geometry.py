"""Language vectors, language subspaces and the layer-area selection built on them.

A language subspace at one layer is the affine set spanned by the token mean and
the leading right singular vectors of the centred token matrix; its covariance
surrogate ``K = V diag(s)^2 V^T / (n - 1)`` is compared across languages with the
affine-invariant log-eigenvalue distance on SPD matrices plus the Euclidean gap
between the means.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import (
    AreaTooSmallError,
    ComponentIndexError,
    InvalidInputError,
    NotPositiveDefiniteError,
    NumericalFailure,
    UnknownKeyError,
)
from .repstore import PoolingMethod, sentence_vectors

DEFAULT_VARIANCE = 0.90
DEFAULT_BETA = 0.30
RIDGE_SCALE = 1e-6
LDA_RIDGE_SCALE = 1e-8
ONLINE_W_NEW = 0.25
ONLINE_W_OLD = 0.75


# ---------------------------------------------------------------------------
# language vectors


@dataclass(frozen=True)
class LanguageVectorTable:
    """``vectors[lang]`` is an ``(L, d)`` array; row ``i - 1`` holds layer ``i``."""

    languages: tuple
    num_layers: int
    vectors: dict

    def __post_init__(self):
        for lang in self.languages:
            arr = self.vectors.get(lang)
            if arr is None:
                raise InvalidInputError(f"no vectors for language {lang!r}")
            if arr.ndim != 2 or arr.shape[0] != self.num_layers:
                raise InvalidInputError(
                    f"language {lang!r}: expected ({self.num_layers}, d) vectors, got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"language {lang!r}: non-finite language vector")

    @property
    def hidden_dim(self):
        return self.vectors[self.languages[0]].shape[1]

    def get(self, language, layer):
        if language not in self.vectors:
            raise UnknownKeyError(f"unknown language {language!r}")
        if not 1 <= layer <= self.num_layers:
            raise UnknownKeyError(f"layer {layer} outside 1..{self.num_layers}")
        return self.vectors[language][layer - 1]

    def replace(self, language, layer, vector):
        """Copy of the table with one vector swapped out."""
        vectors = {k: v.copy() for k, v in self.vectors.items()}
        vectors[language][layer - 1] = np.asarray(vector, dtype=np.float64)
        return LanguageVectorTable(self.languages, self.num_layers, vectors)

    def checksum(self, language=None, layers=None):
        h = hashlib.sha256()
        for lang in self.languages if language is None else [language]:
            arr = self.vectors[lang]
            rows = arr if layers is None else arr[[i - 1 for i in layers]]
            h.update(np.ascontiguousarray(rows, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def compute_language_vectors(dump, method=PoolingMethod.MEAN):
    """Average the pooled sentence vectors of every language at every layer."""
    vectors = {}
    for lang in dump.languages:
        rows = []
        for layer in range(1, dump.num_layers + 1):
            sv = sentence_vectors(dump, lang, layer, method)
            if sv.shape[0] == 0:
                raise InvalidInputError(f"language {lang!r} has no sentences at layer {layer}")
            rows.append(sv.mean(axis=0))
        vectors[lang] = np.stack(rows)
    return LanguageVectorTable(tuple(dump.languages), dump.num_layers, vectors)


# ---------------------------------------------------------------------------
# subspaces and distance


@dataclass(frozen=True)
class LanguageSubspace:
    mean: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray
    rank: int
    spd: np.ndarray
    sample_count: int
    variance_threshold: float = DEFAULT_VARIANCE

    @property
    def dim(self):
        return self.mean.shape[0]


def fit_subspace(x, variance_threshold=DEFAULT_VARIANCE):
    """Fit the affine subspace holding ``variance_threshold`` of the variance of ``x``.

    Parameters
    ----------
    x : array_like, shape (n, d)
        Token representations, ``n >= 2``.
    variance_threshold : float
        Fraction of total squared singular-value energy the retained
        directions must reach.

    Returns
    -------
    LanguageSubspace
    """
    x = numkit.as_matrix(x)
    n, d = x.shape
    if n < 2:
        raise InvalidInputError(f"need at least 2 samples to fit a subspace, got {n}")
    if not 0.0 < variance_threshold <= 1.0:
        raise InvalidInputError(f"variance threshold must lie in (0, 1], got {variance_threshold}")
    mean = x.mean(axis=0)
    res = numkit.svd(x - mean)
    energy = res.singular_values ** 2
    total = energy.sum()
    if not total > 0.0:
        raise NumericalFailure("degenerate subspace: data has zero variance (k = 0)")
    captured = np.cumsum(energy) / total
    # guard against the last cumulative ratio landing a few ulps under 1
    k = int(np.searchsorted(captured, variance_threshold - 1e-12, side="left")) + 1
    k = min(k, len(energy))
    sigma = res.singular_values[:k]
    basis = res.vt[:k].T
    spd = (basis * sigma ** 2) @ basis.T / (n - 1)
    spd = 0.5 * (spd + spd.T)
    return LanguageSubspace(mean=mean, basis=basis, singular_values=sigma, rank=k,
                            spd=spd, sample_count=n, variance_threshold=variance_threshold)


def default_ridge(k_a, k_b):
    """Shared ridge ``1e-6 * mean trace / d`` for a pair of surrogates."""
    d = k_a.shape[0]
    return RIDGE_SCALE * 0.5 * (np.trace(k_a) + np.trace(k_b)) / d


def log_eigen_term(k_a, k_b):
    """``sqrt(sum(log(lambda_i)^2))`` over the eigenvalues of ``inv(k_a) @ k_b``.

    The pencil is solved in both orders (``lambda`` and ``1/lambda`` give the same
    squared logs) and the two results averaged, so the value is symmetric in its
    arguments bit for bit and whitening error from the worse-conditioned side is
    halved. Identical inputs return 0 exactly.
    """
    k_a = numkit.as_matrix(k_a, "k_a")
    k_b = numkit.as_matrix(k_b, "k_b")
    if k_a.shape == k_b.shape and np.array_equal(k_a, k_b):
        numkit.cholesky(k_a)
        return 0.0
    forward = np.sum(np.log(numkit.spd_pencil_eigenvalues(k_a, k_b)) ** 2)
    backward = np.sum(np.log(numkit.spd_pencil_eigenvalues(k_b, k_a)) ** 2)
    return float(np.sqrt(0.5 * (forward + backward)))


def subspace_distance(s_a, s_b, ridge=None):
    """Distance between two language subspaces.

    ``ridge`` is added to the diagonal of both surrogates before the pencil
    solve; ``None`` picks :func:`default_ridge`. With ``ridge=0`` a rank-deficient
    surrogate raises ``NotPositiveDefiniteError``.
    """
    if s_a.spd.shape != s_b.spd.shape:
        raise InvalidInputError(f"dimension mismatch: {s_a.spd.shape} vs {s_b.spd.shape}")
    if ridge is None:
        ridge = default_ridge(s_a.spd, s_b.spd)
    if ridge < 0:
        raise InvalidInputError(f"ridge must be non-negative, got {ridge}")
    eye = np.eye(s_a.spd.shape[0])
    try:
        term = log_eigen_term(s_a.spd + ridge * eye, s_b.spd + ridge * eye)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(
            f"{exc}; regularize with a positive ridge", pivot=exc.pivot
        ) from exc
    return term + float(np.linalg.norm(s_a.mean - s_b.mean))


@dataclass
class DistanceProfile:
    layer_distances: np.ndarray
    language_pair: tuple
    metadata: dict = field(default_factory=dict)

    @property
    def num_layers(self):
        return len(self.layer_distances)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "distance"])
            for i, dist in enumerate(self.layer_distances, start=1):
                writer.writerow([i, repr(float(dist))])


def distance_profile(shifted_layers, dominant_layers, variance_threshold=DEFAULT_VARIANCE,
                     ridge=None, language_pair=("non-dominant", "dominant")):
    """Per-layer distance between a dominant-like stream and the dominant stream.

    Both arguments are sequences of token matrices, item ``i`` holding layer ``i + 1``.
    """
    if len(shifted_layers) != len(dominant_layers):
        raise InvalidInputError("both streams must cover the same number of layers")
    dists = []
    ridges = []
    for layer, (xs, xd) in enumerate(zip(shifted_layers, dominant_layers), start=1):
        try:
            sa = fit_subspace(xs, variance_threshold)
            sb = fit_subspace(xd, variance_threshold)
            r = default_ridge(sa.spd, sb.spd) if ridge is None else ridge
            dists.append(subspace_distance(sa, sb, r))
            ridges.append(r)
        except (InvalidInputError, NumericalFailure) as exc:
            raise type(exc)(f"layer {layer}: {exc}") from exc
    meta = {
        "variance_threshold": variance_threshold,
        "ridge": ridges,
        "sample_sizes": [[len(a), len(b)] for a, b in zip(shifted_layers, dominant_layers)],
    }
    return DistanceProfile(np.asarray(dists), tuple(language_pair), meta)


def average_profiles(profiles):
    """Layerwise mean of several profiles (e.g. one per non-dominant language)."""
    if not profiles:
        raise InvalidInputError("no profiles to average")
    stacked = np.stack([p.layer_distances for p in profiles])
    pairs = [p.language_pair for p in profiles]
    return DistanceProfile(stacked.mean(axis=0), ("mean", pairs[0][1]),
                           {"pairs": [list(p) for p in pairs]})


# ---------------------------------------------------------------------------
# shift-area selection


@dataclass(frozen=True)
class ShiftArea:
    l_to: int
    l_bk: int
    beta: float
    selected_layers: tuple
    contiguous: bool

    def __post_init__(self):
        if not 1 <= self.l_to < self.l_bk:
            raise InvalidInputError(f"need 1 <= L_to < L_bk, got L_to={self.l_to}, L_bk={self.l_bk}")

    @property
    def area_layers(self):
        """Layers ``L_to..L_bk`` inclusive."""
        return tuple(range(self.l_to, self.l_bk + 1))

    @property
    def mcl_layers(self):
        """Layers ``L_to..L_bk - 1`` where the contrastive loss is applied."""
        return tuple(range(self.l_to, self.l_bk))

    def to_dict(self):
        return {"L_to": self.l_to, "L_bk": self.l_bk, "beta": self.beta,
                "selected_layers": list(self.selected_layers), "contiguous": self.contiguous}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data):
        return cls(l_to=int(data["L_to"]), l_bk=int(data["L_bk"]), beta=float(data["beta"]),
                   selected_layers=tuple(data["selected_layers"]),
                   contiguous=bool(data["contiguous"]))


def area_size(num_layers, beta):
    # round first so that e.g. 10 * 0.3 = 3.0000000000000004 counts as 3
    return math.ceil(round(num_layers * beta, 9))


def select_shift_area(profile, beta=DEFAULT_BETA):
    """Pick the ``ceil(L * beta)`` layers with the smallest distance.

    ``profile`` is a :class:`DistanceProfile` or a plain sequence of distances.
    When the chosen layers are not contiguous, ``L_to``/``L_bk`` come from the
    contiguous window of the same width with the smallest distance sum and the
    area is flagged ``contiguous=False``.
    """
    dists = np.asarray(getattr(profile, "layer_distances", profile), dtype=np.float64)
    num_layers = len(dists)
    if not 0.0 < beta <= 1.0:
        raise InvalidInputError(f"beta must lie in (0, 1], got {beta}")
    if num_layers < 2:
        raise AreaTooSmallError(f"need at least 2 layers, got {num_layers}")
    count = area_size(num_layers, beta)
    if count < 2:
        raise AreaTooSmallError(
            f"ceil({num_layers} * {beta}) = {count} layers cannot hold L_to < L_bk"
        )
    order = sorted(range(num_layers), key=lambda i: (dists[i], i))
    chosen = tuple(sorted(i + 1 for i in order[:count]))
    if chosen[-1] - chosen[0] + 1 == count:
        return ShiftArea(chosen[0], chosen[-1], beta, chosen, True)
    sums = [dists[s:s + count].sum() for s in range(num_layers - count + 1)]
    start = int(np.argmin(sums)) + 1
    return ShiftArea(start, start + count - 1, beta, chosen, False)


# ---------------------------------------------------------------------------
# online language-vector estimate


def eta_weights(eta, step):
    """Weights ``(w_new, w_old)`` of the eta-enhanced running mean after ``step`` batches."""
    if eta < 1.0:
        raise InvalidInputError(f"enhancement factor must be >= 1, got {eta}")
    powers = eta ** np.arange(step + 1, dtype=np.float64)
    total = powers.sum()
    return float(powers[-1] / total), float(powers[:-1].sum() / total)


@dataclass(frozen=True)
class OnlineVectorEstimator:
    """Exponentially weighted running estimate of one language vector.

    ``step`` counts the batches absorbed so far. With ``eta`` set, every update
    recomputes the weights from :func:`eta_weights` at the current step (which
    must then be at least 1) instead of keeping the fixed pair.
    """

    current: np.ndarray
    step: int = 0
    w_new: float = ONLINE_W_NEW
    w_old: float = ONLINE_W_OLD
    eta: float | None = None

    def __post_init__(self):
        if self.eta is not None:
            if self.step < 1:
                raise InvalidInputError("eta-weighted estimates start from step >= 1")
            w_new, w_old = eta_weights(self.eta, self.step)
            object.__setattr__(self, "w_new", w_new)
            object.__setattr__(self, "w_old", w_old)
        if not 0.0 < self.w_new < 1.0 or abs(self.w_new + self.w_old - 1.0) > 1e-12:
            raise InvalidInputError(
                f"weights must satisfy 0 < w_new < 1 and w_new + w_old = 1, "
                f"got ({self.w_new}, {self.w_old})"
            )


def online_update(est, u):
    """Absorb one batch mean ``u``: ``w_new * u + w_old * current``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != est.current.shape:
        raise InvalidInputError(f"dimension mismatch: {u.shape} vs {est.current.shape}")
    # written as current + w_new * (u - current) so that u == current is an exact fixed point
    new = est.current + est.w_new * (u - est.current)
    return OnlineVectorEstimator(new, est.step + 1, est.w_new, est.w_old, est.eta)


# ---------------------------------------------------------------------------
# LDA


@dataclass(frozen=True)
class LdaProjection:
    projection: np.ndarray
    class_means: dict
    classes: tuple
    mean: np.ndarray
    eigenvalues: np.ndarray

    @property
    def component_count(self):
        return self.projection.shape[1]


def lda_fit(x, labels, components=None, ridge=None):
    """Fisher discriminant directions, strongest first.

    Solves the generalized problem ``S_b w = lambda S_w w`` by whitening with the
    Cholesky factor of the (ridge-regularized) within-class scatter. Columns are
    scaled to unit length with their largest-magnitude entry positive.
    """
    x = numkit.as_matrix(x)
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise InvalidInputError("labels and rows differ in length")
    classes = tuple(sorted(set(labels.tolist()), key=str))
    if len(classes) < 2:
        raise InvalidInputError("LDA needs at least 2 classes")
    max_components = len(classes) - 1
    if components is None:
        components = max_components
    if not 1 <= components <= max_components:
        raise ComponentIndexError(f"{components} components requested, at most {max_components} available")
    d = x.shape[1]
    mean = x.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    means = {}
    for c in classes:
        xc = x[labels == c]
        if xc.shape[0] < 2:
            raise InvalidInputError(f"class {c!r} has fewer than 2 samples")
        mc = xc.mean(axis=0)
        means[c] = mc
        centered = xc - mc
        s_w += centered.T @ centered
        diff = (mc - mean)[:, None]
        s_b += xc.shape[0] * (diff @ diff.T)
    if ridge is None:
        ridge = LDA_RIDGE_SCALE * np.trace(s_w) / d
    s_w = s_w + ridge * np.eye(d)
    try:
        low = numkit.cholesky(0.5 * (s_w + s_w.T))
    except NotPositiveDefiniteError as exc:
        raise NumericalFailure(f"within-class scatter is singular: {exc}") from exc
    y = numkit.solve_lower(low, s_b)
    whitened = numkit.solve_lower(low, y.T)
    vals, vecs = numkit.sym_eigensolve(0.5 * (whitened + whitened.T))
    # back-substitute w = inv(L^T) y
    w = np.zeros((d, components))
    for j in range(components):
        col = vecs[:, j].copy()
        for i in range(d - 1, -1, -1):
            col[i] = (vecs[i, j] - low[i + 1:, i] @ col[i + 1:]) / low[i, i]
        col /= np.linalg.norm(col)
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        w[:, j] = col
    return LdaProjection(w, means, classes, mean, vals)


def lda_project(proj, x, components=(1,)):
    """Centred ``x`` projected on the requested 1-based discriminant components."""
    idx = []
    for c in components:
        if not 1 <= c <= proj.component_count:
            raise ComponentIndexError(
                f"component {c} out of range 1..{proj.component_count}"
            )
        idx.append(c - 1)
    x = numkit.as_matrix(x)
    return (x - proj.mean) @ proj.projection[:, idx]


def lda_rows_to_csv(path, languages, coords, components):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "language"] + [f"comp_{c}" for c in components])
        for i, (lang, row) in enumerate(zip(languages, coords)):
            writer.writerow([i, lang] + [repr(float(v)) for v in row])
