"""Embedding compression: random projection, hypersphere normalization,
principal-component features, and k-means centroid cosine similarities.

The feature recipe is: project raw embeddings E (n x d) with a Gaussian
random matrix G (d x m, i.i.d. N(0,1) entries, no scaling — the subsequent
normalization absorbs the missing 1/sqrt(m) factor), center by the training
mean and normalize every row onto the unit hypersphere, then derive two
K-dimensional summaries: projections onto the top-K covariance eigenvectors,
and cosine similarities to K k-means centroids. Centroids are kept as raw
cluster means (not renormalized); the cosine formula divides by their norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-10
_EIGENVALUE_TIE_TOL = 1e-10


@dataclass(frozen=True)
class CompressionModel:
    """Fitted compression state, reusable on out-of-sample embeddings."""

    projection: np.ndarray   # (d, m) Gaussian projection G
    mean: np.ndarray         # (m,) training mean of projected embeddings
    pca_axes: np.ndarray     # (K, m) orthonormal rows, descending eigenvalue
    centroids: np.ndarray    # (K, m) raw k-means centroids
    seed: int
    notes: tuple[str, ...] = ()

    @property
    def n_components(self) -> int:
        return self.pca_axes.shape[0]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def projected_dim(self) -> int:
        return self.projection.shape[1]


def jl_project(E: np.ndarray, m: int, seed: int,
               projection: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Project rows of E onto m dimensions with a seeded Gaussian matrix.

    Returns (projected rows, G). `projection` overrides the sampled matrix
    (test hook; shape must be (d, m)).
    """
    E = np.asarray(E, dtype=float)
    if E.ndim != 2:
        raise DataError("embeddings must be a 2-d matrix")
    d = E.shape[1]
    if d < 1 or m < 1:
        raise ConfigError("embedding and target dimensions must be >= 1")
    if projection is None:
        projection = np.random.default_rng(seed).standard_normal((d, m))
    else:
        projection = np.asarray(projection, dtype=float)
        if projection.shape != (d, m):
            raise DataError(f"projection shape {projection.shape} != {(d, m)}")
    return E @ projection, projection


def center_normalize(E_bar: np.ndarray,
                     mean: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Center rows by the (stored or column) mean and scale to unit norm.

    Returns (X, mean). Pass a stored mean to transform out-of-sample rows.
    """
    E_bar = np.asarray(E_bar, dtype=float)
    if mean is None:
        mean = E_bar.mean(axis=0)
    centered = E_bar - mean
    norms = np.linalg.norm(centered, axis=1)
    tol = 1e-12 * max(float(norms.max(initial=0.0)), 1.0)
    zero = np.nonzero(norms <= tol)[0]
    if zero.size:
        raise DataError(f"row {int(zero[0])} equals the mean embedding; "
                        "cannot normalize a zero vector")
    return centered / norms[:, None], mean


def pca_features(X: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Top-K covariance eigenvectors and the projections X @ axes.T.

    Axes are ordered by descending eigenvalue; each axis is flipped so its
    largest-magnitude coordinate is positive. Returns (axes (K, m),
    features (n, K), notes) where notes records near-ties among the kept
    eigenvalues (axes not unique).
    """
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    if not 1 <= K <= min(n - 1, m):
        raise ConfigError(f"K must lie in [1, min(n-1, m)] = "
                          f"[1, {min(n - 1, m)}], got {K}")
    cov = np.cov(X, rowvar=False, ddof=1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:K]
    vals = eigvals[order]
    axes = eigvecs[:, order].T.copy()
    for k in range(K):
        if axes[k, np.argmax(np.abs(axes[k]))] < 0:
            axes[k] = -axes[k]
    notes = tuple(
        f"pca: eigenvalues {k} and {k + 1} tie within {_EIGENVALUE_TIE_TOL:g} "
        "(axes not unique)"
        for k in range(K - 1) if abs(vals[k] - vals[k + 1]) <= _EIGENVALUE_TIE_TOL
    )
    return axes, X @ axes.T, notes


def _kmeans_once(X: np.ndarray, K: int, rng: np.random.Generator):
    """One Lloyd run with k-means++ seeding.

    Returns (centroids, inertia, notes, inertia history per iteration).
    """
    n = X.shape[0]
    centroids = np.empty((K, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            centroids[k] = X[rng.integers(n)]
        else:
            centroids[k] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[k]) ** 2).sum(axis=1))

    notes: list[str] = []
    history: list[float] = []
    prev_inertia = np.inf
    for _ in range(KMEANS_MAX_ITER):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), labels].sum())
        history.append(inertia)
        for k in range(K):
            members = labels == k
            if members.any():
                centroids[k] = X[members].mean(axis=0)
            else:
                far = int(dists.min(axis=1).argmax())
                centroids[k] = X[far]
                notes.append(f"kmeans: empty cluster {k} reseeded to row {far}")
        if prev_inertia - inertia < KMEANS_TOL:
            break
        prev_inertia = inertia
    dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(dists.min(axis=1).sum())
    return centroids, inertia, notes, history


def centroid_similarities(X: np.ndarray, K: int, seed: int,
                          centroids: np.ndarray | None = None):
    """K-means centroids of X and cosine similarities of each row to them.

    Runs Lloyd's algorithm from k-means++ starts (10 restarts, best inertia
    kept, ties broken by restart index). Pass stored centroids to score
    out-of-sample rows without refitting. Returns (centroids, similarities
    (n, K), notes).
    """
    X = np.asarray(X, dtype=float)
    notes: tuple[str, ...] = ()
    if centroids is None:
        if not 1 <= K <= X.shape[0]:
            raise ConfigError(f"K must lie in [1, n], got {K}")
        seeds = np.random.SeedSequence(seed).spawn(KMEANS_RESTARTS)
        best = None
        for idx, child in enumerate(seeds):
            cents, inertia, run_notes, _ = _kmeans_once(
                X, K, np.random.default_rng(child))
            if best is None or inertia < best[0]:
                best = (inertia, idx, cents, tuple(run_notes))
        _, _, centroids, notes = best
    cent_norms = np.linalg.norm(centroids, axis=1)
    if (cent_norms == 0.0).any():
        raise NumericalError("zero-norm centroid; cosine similarity undefined")
    row_norms = np.linalg.norm(X, axis=1)
    if (row_norms == 0.0).any():
        raise DataError("zero-norm row; cosine similarity undefined")
    sims = (X @ centroids.T) / (row_norms[:, None] * cent_norms[None, :])
    return centroids, sims, notes


def fit_compression(E: np.ndarray, m: int, K: int, seed: int,
                    projection: np.ndarray | None = None
                    ) -> tuple[CompressionModel, np.ndarray, np.ndarray, np.ndarray]:
    """Fit the full compression stack on training embeddings.

    Returns (model, X normalized, X_pc, X_sim). Projection and k-means seeds
    are derived from `seed` so one integer pins the whole fit.
    """
    ss = np.random.SeedSequence(seed).spawn(2)
    proj_seed = int(ss[0].generate_state(1)[0])
    km_seed = int(ss[1].generate_state(1)[0])
    projected, G = jl_project(E, m, proj_seed, projection=projection)
    X, mean = center_normalize(projected)
    axes, x_pc, pca_notes = pca_features(X, K)
    centroids, x_sim, km_notes = centroid_similarities(X, K, km_seed)
    model = CompressionModel(projection=G, mean=mean, pca_axes=axes,
                             centroids=centroids, seed=seed,
                             notes=tuple(pca_notes) + tuple(km_notes))
    return model, X, x_pc, x_sim


def transform(model: CompressionModel, E_new: np.ndarray
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply a fitted model to new embedding rows; no refitting.

    Returns (X normalized, X_pc, X_sim).
    """
    E_new = np.asarray(E_new, dtype=float)
    if E_new.ndim != 2 or E_new.shape[1] != model.input_dim:
        raise DataError(f"expected rows of dimension {model.input_dim}, "
                        f"got shape {E_new.shape}")
    projected = E_new @ model.projection
    X, _ = center_normalize(projected, mean=model.mean)
    x_pc = X @ model.pca_axes.T
    _, x_sim, _ = centroid_similarities(X, model.centroids.shape[0],
                                        seed=0, centroids=model.centroids)
    return X, x_pc, x_sim


def feature_names(K: int, m: int | None = None) -> tuple[str, ...]:
    """Column labels for (sim, pc[, emb]) feature blocks."""
    names = [f"sim_{k}" for k in range(K)] + [f"pc_{k}" for k in range(K)]
    if m is not None:
        names += [f"emb_{j}" for j in range(m)]
    return tuple(names)


# -- text serialization -------------------------------------------------------
#
# Diffable single-file format: '#'-prefixed manifest lines, then one
# `[section]` header per array followed by CSV rows with full-precision
# floats (repr round trip).

def save_compression_model(model: CompressionModel, path) -> None:
    d, m = model.projection.shape
    k = model.centroids.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# demandml compression model v1\n")
        fh.write(f"# seed: {model.seed}\n")
        fh.write(f"# d: {d}\n# m: {m}\n# K: {k}\n")
        for note in model.notes:
            fh.write(f"# note: {note}\n")
        for name, arr in (("projection", model.projection),
                          ("mean", model.mean.reshape(1, -1)),
                          ("pca_axes", model.pca_axes),
                          ("centroids", model.centroids)):
            fh.write(f"[{name}]\n")
            for row in arr:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_compression_model(path) -> CompressionModel:
    meta: dict[str, str] = {}
    notes: list[str] = []
    sections: dict[str, list[list[float]]] = {}
    current: list[list[float]] | None = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    if key.strip() == "note":
                        notes.append(value.strip())
                    else:
                        meta[key.strip()] = value.strip()
                continue
            if line.startswith("[") and line.endswith("]"):
                current = sections.setdefault(line[1:-1], [])
                continue
            if current is None:
                raise DataError(f"{path}: data row before any [section]")
            current.append([float(v) for v in line.split(",")])
    missing = {"projection", "mean", "pca_axes", "centroids"} - sections.keys()
    if missing:
        raise DataError(f"{path}: missing sections {sorted(missing)}")
    return CompressionModel(
        projection=np.array(sections["projection"]),
        mean=np.array(sections["mean"][0]),
        pca_axes=np.array(sections["pca_axes"]),
        centroids=np.array(sections["centroids"]),
        seed=int(meta.get("seed", "0")),
        notes=tuple(notes),
    )
