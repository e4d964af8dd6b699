"""Mixture-of-factor-analyzers representation and density computations.

Every density evaluation goes through the low-rank identities

    inv(L L' + Psi) = inv(Psi) - inv(Psi) L inv(I + L' inv(Psi) L) L' inv(Psi)
    det(L L' + Psi) = det(Psi) det(I + L' inv(Psi) L)

so only p x p systems are ever factorized.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)

# Inner p x p systems with a worse condition number are treated as singular.
MAX_INNER_CONDITION = 1e12


class NumericalError(ArithmeticError):
    """A computation hit a degenerate model (singular system, total underflow)."""

    def __init__(self, message: str, condition: Optional[float] = None,
                 component: Optional[int] = None):
        super().__init__(message)
        self.condition = condition
        self.component = component


def _frozen(array, ndim: int, name: str) -> np.ndarray:
    arr = np.array(array, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FactorComponent:
    """One local factor analyzer: x = loadings @ z + mean + noise."""

    mean: np.ndarray
    loadings: np.ndarray
    noise_diag: np.ndarray
    weight: float

    def __post_init__(self):
        mean = _frozen(self.mean, 1, "mean")
        loadings = _frozen(self.loadings, 2, "loadings")
        noise = _frozen(self.noise_diag, 1, "noise_diag")
        d = mean.shape[0]
        if loadings.shape[0] != d or noise.shape[0] != d:
            raise ValueError(
                f"dimension mismatch: mean {mean.shape}, loadings {loadings.shape}, "
                f"noise_diag {noise.shape}")
        p = loadings.shape[1]
        if not 1 <= p <= max(d - 1, 1):
            raise ValueError(f"number of factors must be in [1, {max(d - 1, 1)}], got {p}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(loadings))
                and np.all(np.isfinite(noise))):
            raise ValueError("component parameters must be finite")
        if np.any(noise <= 0):
            raise ValueError("noise_diag entries must be strictly positive")
        weight = float(self.weight)
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"weight must lie in [0, 1], got {weight}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "noise_diag", noise)
        object.__setattr__(self, "weight", weight)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    def replace(self, **changes) -> "FactorComponent":
        return dataclasses.replace(self, **changes)


class TraceStep(NamedTuple):
    action: str
    n_components: int
    factors: tuple
    message_length: float
    log_likelihood: float


@dataclass
class FitTrace:
    """Step-by-step record of a fit.

    ``steps`` and ``stored_models`` run in parallel: one model snapshot per
    step (EM traces leave ``stored_models`` empty). ``selected`` indexes the
    step whose model was returned.
    """

    steps: list = field(default_factory=list)
    stored_models: list = field(default_factory=list)
    selected: Optional[int] = None
    flags: list = field(default_factory=list)

    def record(self, action: str, model: "MixtureModel", message_length: float,
               log_likelihood: float, snapshot: bool = True) -> None:
        self.steps.append(TraceStep(action, model.n_components, model.factors,
                                    float(message_length), float(log_likelihood)))
        if snapshot:
            self.stored_models.append(model)

    @property
    def message_lengths(self) -> np.ndarray:
        return np.array([s.message_length for s in self.steps])


@dataclass(frozen=True, eq=False)
class MixtureModel:
    components: tuple
    dim: int
    trace: FitTrace = field(default_factory=FitTrace, compare=False)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        for k, c in enumerate(comps):
            if c.dim != self.dim:
                raise ValueError(f"component {k} has dimension {c.dim}, expected {self.dim}")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"component weights sum to {total!r}, expected 1")
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_components(cls, components: Sequence[FactorComponent],
                        normalize: bool = False,
                        trace: Optional[FitTrace] = None) -> "MixtureModel":
        comps = list(components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        if normalize:
            w = np.array([c.weight for c in comps])
            w = w / w.sum()
            comps = [c.replace(weight=wk) for c, wk in zip(comps, w)]
        return cls(tuple(comps), comps[0].dim, trace if trace is not None else FitTrace())

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def factors(self) -> tuple:
        return tuple(c.n_factors for c in self.components)

    def __getitem__(self, k: int) -> FactorComponent:
        return self.components[k]

    def __len__(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be a non-empty N x d matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (pts.shape[0],):
                raise ValueError(f"labels must have length {pts.shape[0]}, got shape {labels.shape}")
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.round(labels)):
                    raise ValueError("labels must be integers")
            labels = labels.astype(np.int64)
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def as_points(data) -> np.ndarray:
    """Accept a Dataset or anything array-like; return an N x d float array."""
    if isinstance(data, Dataset):
        return data.points
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return x


class Responsibilities(np.ndarray):
    """N x K posterior memberships; an ndarray subclass so it slots into numpy code."""

    def __new__(cls, values):
        arr = np.asarray(values, dtype=float).view(cls)
        return arr

    @property
    def values(self) -> np.ndarray:
        return self.view(np.ndarray)

    @property
    def soft_counts(self) -> np.ndarray:
        return self.values.sum(axis=0)


class _Inner(NamedTuple):
    """Per-component low-rank quantities shared by densities and the E-step."""

    inv_noise: np.ndarray   # d
    scaled_t: np.ndarray    # p x d, L' inv(Psi)
    chol: np.ndarray        # lower Cholesky factor of I + L' inv(Psi) L
    logdet: float           # log det(L L' + Psi)


def _inner(comp: FactorComponent, index: Optional[int] = None) -> _Inner:
    inv_noise = 1.0 / comp.noise_diag
    scaled_t = comp.loadings.T * inv_noise
    m = scaled_t @ comp.loadings
    m[np.diag_indices_from(m)] += 1.0
    try:
        chol = linalg.cholesky(m, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("inner factor system is not positive definite",
                             condition=float(np.linalg.cond(m)), component=index) from None
    # M >= I, so cond(M) <= trace(M); only pay for the exact estimate when the bound trips.
    if not np.trace(m) < MAX_INNER_CONDITION:
        cond = float(np.linalg.cond(m))
        if not cond < MAX_INNER_CONDITION:
            raise NumericalError("inner factor system is near-singular",
                                 condition=cond, component=index)
    diag = np.diag(chol)
    logdet = float(np.sum(np.log(comp.noise_diag)) + 2.0 * np.sum(np.log(diag)))
    return _Inner(inv_noise, scaled_t, chol, logdet)


def _component_terms(comp: FactorComponent, x: np.ndarray, index: Optional[int] = None):
    """Log-density of each row of x, and the latent posterior means Omega (x - mu)."""
    inner = _inner(comp, index)
    r = x - comp.mean
    a = r @ inner.scaled_t.T                                  # N x p
    ez = linalg.cho_solve((inner.chol, True), a.T).T          # N x p
    maha = np.einsum("ij,ij,j->i", r, r, inner.inv_noise) - np.einsum("ij,ij->i", a, ez)
    logpdf = -0.5 * (comp.dim * LOG_2PI + inner.logdet + maha)
    return logpdf, ez, inner


def component_covariance(comp: FactorComponent) -> np.ndarray:
    """Dense covariance L L' + diag(Psi)."""
    cov = comp.loadings @ comp.loadings.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += comp.noise_diag
    return cov


def component_precision_quadform(comp: FactorComponent, x) -> np.ndarray:
    """Squared Mahalanobis distance of each row of x under the component covariance."""
    x = as_points(x)
    inner = _inner(comp)
    r = x - comp.mean
    a = r @ inner.scaled_t.T
    b = linalg.solve_triangular(inner.chol, a.T, lower=True).T
    return np.einsum("ij,ij,j->i", r, r, inner.inv_noise) - np.einsum("ij,ij->i", b, b)


def component_log_pdf(comp: FactorComponent, x) -> np.ndarray:
    """Vectorized log N(x_i; mu, L L' + Psi) over the rows of x."""
    x = as_points(x)
    if x.shape[1] != comp.dim:
        raise ValueError(f"points have dimension {x.shape[1]}, component has {comp.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return _component_terms(comp, x)[0]


def component_log_density(comp: FactorComponent, x) -> float:
    """log N(x; mu, L L' + Psi) for a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("component_log_density expects a single point")
    return float(component_log_pdf(comp, x[None, :])[0])


def weighted_log_densities(model: MixtureModel, data) -> np.ndarray:
    """N x K matrix of log(pi_k) + log N(x_i | component k)."""
    x = as_points(data)
    if x.shape[1] != model.dim:
        raise ValueError(f"data dimension {x.shape[1]} does not match model dimension {model.dim}")
    out = np.empty((x.shape[0], model.n_components))
    with np.errstate(divide="ignore"):
        for k, comp in enumerate(model.components):
            out[:, k] = np.log(comp.weight) + _component_terms(comp, x, k)[0]
    return out


def point_log_likelihoods(model: MixtureModel, data) -> np.ndarray:
    return logsumexp(weighted_log_densities(model, data), axis=1)


def mixture_log_likelihood(model: MixtureModel, data) -> float:
    """Sum over points of log sum_k pi_k N(x_i; mu_k, Sigma_k)."""
    x = as_points(data)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate the likelihood of an empty dataset")
    return float(np.sum(point_log_likelihoods(model, x)))


def normalize_log_rows(log_joint: np.ndarray) -> np.ndarray:
    norm = logsumexp(log_joint, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero(~np.isfinite(norm.ravel()))[0])
        raise NumericalError(f"every component underflows for point {bad}")
    return np.exp(log_joint - norm)


def responsibilities(model: MixtureModel, data) -> Responsibilities:
    """Posterior memberships h_ik, computed in log space and row-normalized."""
    return Responsibilities(normalize_log_rows(weighted_log_densities(model, data)))
