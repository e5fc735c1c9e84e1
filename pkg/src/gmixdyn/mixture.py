"""Gaussian-mixture data model.

Components are defined by a label map, frequencies and covariances; the
mean geometry is prescribed only through the overlap Gram matrix over
the index set Y* = components + {*}, where the * entry is the model
initialization theta_0.  Mean vectors are realized by applying a factor
of the Gram to a seeded random orthonormal frame, so results depend on
the overlaps only while replications stay independent.
"""

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import DimensionTooSmall, GramNotPSD
from . import rng as rngmod

GRAM_TOL = 1e-10
FREQ_TOL = 1e-12

CovLike = Union[str, np.ndarray]


@dataclass(frozen=True)
class Component:
    id: object
    label: float
    frequency: float
    covariance: CovLike = "identity"  # "identity" or dense symmetric PSD

    def is_identity(self):
        return isinstance(self.covariance, str) and self.covariance == "identity"


@dataclass
class MixtureSpec:
    components: list
    overlap_gram: np.ndarray  # (K+1, K+1) over components + {*}
    ambient_dim: int

    def __post_init__(self):
        self.overlap_gram = np.asarray(self.overlap_gram, dtype=float)
        K = len(self.components)
        if self.overlap_gram.shape != (K + 1, K + 1):
            raise ValueError(
                f"overlap_gram must be ({K + 1},{K + 1}) over components + star"
            )
        if not np.allclose(self.overlap_gram, self.overlap_gram.T, atol=1e-12):
            raise ValueError("overlap_gram must be symmetric")
        freqs = np.array([c.frequency for c in self.components])
        if np.any(freqs <= 0) or np.any(freqs > 1):
            raise ValueError("frequencies must lie in (0, 1]")
        if abs(freqs.sum() - 1.0) > FREQ_TOL:
            raise ValueError(f"frequencies sum to {freqs.sum()}, not 1")
        w = np.linalg.eigvalsh(self.overlap_gram)
        if w.min() < -GRAM_TOL:
            raise GramNotPSD(f"overlap_gram min eigenvalue {w.min():.3e} < -{GRAM_TOL}")
        for c in self.components:
            if not c.is_identity():
                R = np.asarray(c.covariance, float)
                if R.shape != (self.ambient_dim, self.ambient_dim):
                    raise ValueError("covariance shape must match ambient_dim")
                if not np.allclose(R, R.T, atol=1e-12):
                    raise ValueError("covariance must be symmetric")
                if np.linalg.eigvalsh(R).min() < -GRAM_TOL:
                    raise GramNotPSD("component covariance not PSD")

    @property
    def n_components(self):
        return len(self.components)

    @property
    def star_index(self):
        return len(self.components)

    @property
    def frequencies(self):
        return np.array([c.frequency for c in self.components])

    @property
    def labels(self):
        return np.array([c.label for c in self.components], dtype=float)

    def theta0_norm(self):
        return float(np.sqrt(max(self.overlap_gram[-1, -1], 0.0)))


def two_class_spec(
    coupling,
    ambient_dim,
    theta0_norm=0.1,
    theta0_overlap=(0.0, 0.0),
    self_overlap=1.0,
    frequencies=(0.5, 0.5),
    labels=(-1.0, 1.0),
    covariance="identity",
):
    """The two-component geometry used throughout the experiments:
    nu(y,y) = self_overlap, nu(y0,y1) = coupling, ||theta_0|| given,
    theta_0-to-mean overlaps configurable (orthogonal by default)."""
    o0, o1 = theta0_overlap
    gram = np.array(
        [
            [self_overlap, coupling, o0],
            [coupling, self_overlap, o1],
            [o0, o1, theta0_norm**2],
        ]
    )
    comps = [
        Component(id=0, label=labels[0], frequency=frequencies[0], covariance=covariance),
        Component(id=1, label=labels[1], frequency=frequencies[1], covariance=covariance),
    ]
    return MixtureSpec(components=comps, overlap_gram=gram, ambient_dim=ambient_dim)


def _gram_factor(gram):
    """F with F.T @ F = gram, F of shape (rank, K+1).  Tiny negative
    eigenvalues inside the PSD tolerance are clipped to zero."""
    w, E = np.linalg.eigh(gram)
    if w.min() < -GRAM_TOL:
        raise GramNotPSD(f"gram min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    scale = max(w.max(), 1.0)
    keep = w > 1e-14 * scale
    F = (np.sqrt(w[keep])[:, None]) * E[:, keep].T
    return F


def realize_means(spec: MixtureSpec, rng_seed: int) -> np.ndarray:
    """Mean vectors consistent with the overlap Gram.

    Returns an (n, K+1) array whose columns are x_hat(a) for a in Y*
    (last column = theta_0).  A random orthonormal frame is sampled from
    the seed, then the Gram factor is applied; the realized Gram matches
    overlap_gram to 1e-10.
    """
    F = _gram_factor(spec.overlap_gram)
    r = F.shape[0]
    n = spec.ambient_dim
    if n < r:
        raise DimensionTooSmall(f"ambient_dim {n} < rank(gram) {r}")
    g = rngmod.stream(rng_seed, rngmod.STREAM_MEANS, atom="noise").standard_normal((n, r))
    Q, R = np.linalg.qr(g)
    Q = Q * np.sign(np.diag(R))  # fix the QR sign ambiguity
    means = Q @ F
    means.flags.writeable = False
    return means


@dataclass
class Dataset:
    X: np.ndarray              # (n, m), samples as columns
    latents: np.ndarray        # (m,) component indices
    labels: np.ndarray         # (m,) label values y(zeta_i)
    means_realized: np.ndarray  # (n, K+1) incl. theta_0 column
    spec: MixtureSpec
    seed: int
    rows_by_component: tuple = field(default=None)

    def __post_init__(self):
        if self.rows_by_component is None:
            self.rows_by_component = tuple(
                np.flatnonzero(self.latents == k) for k in range(self.spec.n_components)
            )
        for arr in (self.X, self.latents, self.labels):
            arr.flags.writeable = False

    @property
    def m(self):
        return self.X.shape[1]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def theta0(self):
        return self.means_realized[:, -1]

    def rows_of(self, k):
        return self.rows_by_component[k]

    def counts(self):
        return np.array([len(ix) for ix in self.rows_by_component])


def fixed_counts(frequencies, m):
    """Largest-remainder apportionment of m samples to frequencies."""
    raw = np.asarray(frequencies) * m
    counts = np.floor(raw).astype(int)
    rem = m - counts.sum()
    order = np.argsort(-(raw - counts))
    counts[order[:rem]] += 1
    return counts


def cov_half_apply(comp: Component, G):
    """R(zeta)^{1/2} @ G."""
    if comp.is_identity():
        return G
    R = np.asarray(comp.covariance, float)
    w, E = np.linalg.eigh(R)
    w = np.clip(w, 0.0, None)
    return E @ (np.sqrt(w)[:, None] * (E.T @ G))


def cov_apply(comp: Component, G):
    """R(zeta) @ G."""
    if comp.is_identity():
        return G
    return np.asarray(comp.covariance, float) @ G


def sample_dataset(
    spec: MixtureSpec,
    m: int,
    rng_seed: int,
    means=None,
    assignment="multinomial",
    dtype=np.float64,
) -> Dataset:
    """Draw m labeled samples x_i = x_hat(zeta_i) + R(zeta_i)^{1/2} g.

    `assignment` is "multinomial" (latents i.i.d. by frequency) or
    "fixed" (deterministic per-component counts, largest remainder).
    Deterministic given (spec, m, rng_seed, means).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if means is None:
        means = realize_means(spec, rng_seed)
    K = spec.n_components
    gen_lat = rngmod.stream(rng_seed, rngmod.STREAM_DATA, atom="latents")
    if assignment == "multinomial":
        latents = gen_lat.choice(K, size=m, p=spec.frequencies)
    elif assignment == "fixed":
        counts = fixed_counts(spec.frequencies, m)
        latents = np.repeat(np.arange(K), counts)
    else:
        raise ValueError(f"unknown assignment mode {assignment!r}")
    labels = spec.labels[latents]

    gen_noise = rngmod.fast_stream(rng_seed, rngmod.STREAM_DATA, atom="noise")
    n = spec.ambient_dim
    X = gen_noise.standard_normal((n, m), dtype=dtype)
    if not all(c.is_identity() for c in spec.components):
        for k, comp in enumerate(spec.components):
            ix = np.flatnonzero(latents == k)
            X[:, ix] = cov_half_apply(comp, X[:, ix])
    X += means[:, latents].astype(dtype, copy=False)
    return Dataset(
        X=X,
        latents=latents,
        labels=labels.astype(dtype, copy=False),
        means_realized=means,
        spec=spec,
        seed=rng_seed,
    )
