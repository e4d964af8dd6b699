"""MML-penalized EM for mixtures of factor analyzers.

The E- and M-steps update all components in parallel. Between iterations the
weakest under-supported component (smallest soft-count-to-threshold ratio) is
annihilated, one at a time, and memberships are recomputed before the next
candidate is examined.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .mml import annihilation_threshold, code_length_terms
from .model import (FactorComponent, FitTrace, MixtureModel, NumericalError,
                    Responsibilities, _component_terms, as_points)

logger = logging.getLogger(__name__)

# A (p + 1) x (p + 1) M-step system worse than this is reported as singular.
MAX_MSTEP_CONDITION = 1e13


@dataclass(frozen=True)
class EmConfig:
    epsilon: float = 1e-5
    max_iters: int = 1000
    variance_floor_scale: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not self.variance_floor_scale >= 0:
            raise ValueError("variance_floor_scale must be non-negative")


@dataclass(frozen=True)
class EStepMoments:
    """Sufficient statistics of one E-step.

    ``ez[k]`` holds h_ik E[z | G_k, x_i] row by row; ``ezz[k]`` holds
    sum_i h_ik E[z z' | G_k, x_i]. ``cov_z[k]`` is the posterior latent
    covariance (I + L' inv(Psi) L)^-1, shared by all points.
    """

    ez: List[np.ndarray]
    ezz: List[np.ndarray]
    resp: Responsibilities
    cov_z: List[np.ndarray]
    log_likelihood: float

    @property
    def soft_counts(self) -> np.ndarray:
        return self.resp.soft_counts


def variance_floor(x: np.ndarray, scale: float) -> np.ndarray:
    """Per-feature lower bound on the noise variances."""
    var = np.var(x, axis=0)
    if not np.any(var > 0):
        raise ValueError("data have zero variance in every feature")
    floor = scale * var
    floor[var <= 0] = scale * var.mean()
    # keeps the floor strictly positive even when scale is 0
    return np.maximum(floor, np.finfo(float).tiny)


def e_step(model: MixtureModel, data) -> EStepMoments:
    x = as_points(data)
    n, k_total = x.shape[0], model.n_components
    log_joint = np.empty((n, k_total))
    raw_ez, cov_z = [], []
    with np.errstate(divide="ignore"):
        for k, comp in enumerate(model.components):
            logpdf, ez, inner = _component_terms(comp, x, k)
            log_joint[:, k] = np.log(comp.weight) + logpdf
            raw_ez.append(ez)
            cov_z.append(linalg.cho_solve((inner.chol, True), np.eye(comp.n_factors)))
    norm = logsumexp(log_joint, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero(~np.isfinite(norm.ravel()))[0])
        raise NumericalError(f"every component underflows for point {bad}")
    h = np.exp(log_joint - norm)
    ez_w, ezz = [], []
    for k in range(k_total):
        hk = h[:, k]
        wez = hk[:, None] * raw_ez[k]
        ezz_k = hk.sum() * cov_z[k] + wez.T @ raw_ez[k]
        ez_w.append(wez)
        ezz.append(0.5 * (ezz_k + ezz_k.T))
    return EStepMoments(ez_w, ezz, Responsibilities(h), cov_z, float(norm.sum()))


def mml_weights(soft_counts, thresholds) -> np.ndarray:
    """Dirichlet-penalized weights max(0, N_k - T_k), normalized.

    If no component clears its threshold, the best-supported one (largest
    N_k / T_k) keeps all the mass so the mixture never becomes empty.
    """
    soft_counts = np.asarray(soft_counts, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    excess = np.maximum(0.0, soft_counts - thresholds)
    total = excess.sum()
    if total > 0:
        return excess / total
    w = np.zeros_like(soft_counts)
    w[int(np.argmax(soft_counts / thresholds))] = 1.0
    return w


def m_step(model: MixtureModel, data, moments: EStepMoments, mml_mode: bool = False,
           floor=None, variance_floor_scale: float = 1e-6) -> MixtureModel:
    """Closed-form parameter update.

    Loadings and mean are solved jointly from the augmented latent vector
    [z, 1]. With ``mml_mode`` the weights follow the thresholded update and
    components that fall below their threshold come back with weight 0 and
    untouched parameters.
    """
    x = as_points(data)
    n, d = x.shape
    if floor is None:
        floor = variance_floor(x, variance_floor_scale)
    h = moments.resp.values
    counts = h.sum(axis=0)
    if mml_mode:
        thresholds = np.array([annihilation_threshold(d, c.n_factors) for c in model.components])
        weights = mml_weights(counts, thresholds)
    else:
        weights = counts / counts.sum()

    comps = []
    for k, comp in enumerate(model.components):
        if weights[k] == 0.0:
            comps.append(comp.replace(weight=0.0))
            continue
        p = comp.n_factors
        nk = counts[k]
        hk = h[:, k]
        wez = moments.ez[k]
        # sum_i h_ik x_i [E z_i', 1] and sum_i h_ik E[z~ z~']
        rhs = np.empty((d, p + 1))
        rhs[:, :p] = x.T @ wez
        rhs[:, p] = x.T @ hk
        gram = np.empty((p + 1, p + 1))
        gram[:p, :p] = moments.ezz[k]
        gram[:p, p] = gram[p, :p] = wez.sum(axis=0)
        gram[p, p] = nk
        try:
            cond = np.linalg.cond(gram)
        except np.linalg.LinAlgError:
            cond = np.inf
        if not cond < MAX_MSTEP_CONDITION:
            raise NumericalError(f"M-step system for component {k} is singular",
                                 condition=float(cond), component=k)
        sol = linalg.solve(gram, rhs.T, assume_a="sym").T          # d x (p + 1)
        loadings, mean = sol[:, :p], sol[:, p]
        # Equivalent to diag(sum h x x' - L~ sum h E[z~] x') / N_k, but without
        # the cancellation that form suffers when the data sit far from 0.
        ez_raw = wez / np.where(hk > 0, hk, 1.0)[:, None]
        resid = x - mean - ez_raw @ loadings.T
        noise = (hk @ resid ** 2 + nk * np.einsum("ij,jk,ik->i", loadings, moments.cov_z[k], loadings)) / nk
        noise = np.maximum(noise, floor)
        comps.append(FactorComponent(mean, loadings, noise, weights[k]))
    return MixtureModel.from_components(comps, normalize=True)


def _converged(prev: float, cur: float, eps: float) -> bool:
    return abs(cur - prev) < eps * max(abs(cur), 1.0)


def drop_component(model: MixtureModel, index: int) -> MixtureModel:
    """Remove one component and renormalize the remaining weights."""
    if model.n_components == 1:
        raise ValueError("cannot remove the last component")
    rest = [c for k, c in enumerate(model.components) if k != index]
    w = np.array([c.weight for c in rest])
    if w.sum() <= 0:
        w = np.full(len(rest), 1.0 / len(rest))
    else:
        w = w / w.sum()
    return MixtureModel.from_components([c.replace(weight=wk) for c, wk in zip(rest, w)],
                                        normalize=True)


def _thresholds(model: MixtureModel) -> np.ndarray:
    return np.array([annihilation_threshold(model.dim, c.n_factors) for c in model.components])


def run_em_mml(model: MixtureModel, data, config: EmConfig = EmConfig(), floor=None):
    """Iterate E/M to convergence of the message length, annihilating as needed.

    Returns the fitted model and a FitTrace with one ``iteration`` entry per
    EM pass and one ``annihilate`` entry per removed component.
    """
    x = as_points(data)
    n, d = x.shape
    if model.dim != d:
        raise ValueError(f"data dimension {d} does not match model dimension {model.dim}")
    if floor is None:
        floor = variance_floor(x, config.variance_floor_scale)
    trace = FitTrace()

    def length(m, mom):
        return code_length_terms(m.weights, m.factors, d, n, mom.log_likelihood).total

    if np.any(model.weights == 0):
        model = MixtureModel.from_components([c for c in model.components if c.weight > 0])
    moments = e_step(model, x)
    prev = length(model, moments)
    trace.record("start", model, prev, moments.log_likelihood, snapshot=False)
    converged = False

    for _ in range(int(config.max_iters)):
        annihilated = False
        counts = moments.soft_counts
        thresholds = _thresholds(model)
        while model.n_components > 1 and np.any(counts < thresholds):
            weakest = int(np.argmin(counts / thresholds))
            logger.debug("annihilating component %d (N_k=%.3g, T_k=%.3g)",
                         weakest, counts[weakest], thresholds[weakest])
            model = drop_component(model, weakest)
            moments = e_step(model, x)
            counts = moments.soft_counts
            thresholds = _thresholds(model)
            trace.record("annihilate", model, length(model, moments),
                         moments.log_likelihood, snapshot=False)
            annihilated = True
        if model.n_components == 1 and counts[0] < thresholds[0]:
            if "clamped" not in trace.flags:
                trace.flags.append("clamped")

        model = m_step(model, x, moments, mml_mode=True, floor=floor)
        moments = e_step(model, x)
        cur = length(model, moments)
        trace.record("iteration", model, cur, moments.log_likelihood, snapshot=False)
        settled = model.n_components == 1 or np.all(moments.soft_counts >= _thresholds(model))
        if not annihilated and settled and _converged(prev, cur, config.epsilon):
            converged = True
            break
        prev = cur

    if not converged:
        trace.flags.append("max_iters")
    return MixtureModel.from_components(model.components, trace=trace), trace
