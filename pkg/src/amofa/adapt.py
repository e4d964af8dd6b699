"""Adaptive model search: grow by splits and factor additions, then prune.

The incremental phase starts from a one-component, one-factor model. Each
step builds two candidates, a component split and a factor addition, polishes
both with MML-EM, and adopts whichever has the shorter message length. Once
the decrease stalls, components are removed one at a time down to a single
one. Every intermediate model is archived and the one with the minimum
message length is returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .em import EmConfig, EStepMoments, drop_component, e_step, run_em_mml, variance_floor
from .mml import annihilation_threshold
from .model import (FactorComponent, FitTrace, MixtureModel, NumericalError, as_points,
                    component_covariance, component_precision_quadform)

logger = logging.getLogger(__name__)

INIT, SPLIT, ADD_FACTOR, ANNIHILATE = "init", "split", "add_factor", "annihilate"

# Noise variance below this fraction of a coordinate's modeled variance counts as pinned.
PIN_RATIO = 1e-3


@dataclass(frozen=True)
class AmofaConfig:
    em: EmConfig = field(default_factory=EmConfig)
    outer_epsilon: float = 1e-4
    max_steps: int = 200

    def __post_init__(self):
        if not self.outer_epsilon > 0:
            raise ValueError(f"outer_epsilon must be positive, got {self.outer_epsilon}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


class Candidate(NamedTuple):
    action: str
    index: int
    model: MixtureModel
    message_length: float
    log_likelihood: float


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def init_model(data, variance_floor_scale: float = 1e-6) -> MixtureModel:
    """One component, one factor, aligned with the leading principal axis."""
    x = as_points(data)
    n, d = x.shape
    floor = variance_floor(x, variance_floor_scale)
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, bias=True).reshape(d, d)
    evals, evecs = np.linalg.eigh(cov)
    lead = _canonical_signs(evecs[:, -1:])
    loadings = lead * np.sqrt(max(evals[-1], 0.0))
    noise = np.maximum(np.diag(cov) - loadings[:, 0] ** 2, floor)
    trace = FitTrace()
    if n < d + 1:
        trace.flags.append("few_points")
    return MixtureModel.from_components([FactorComponent(mean, loadings, noise, 1.0)], trace=trace)


def kurtosis_score(index: int, model: MixtureModel, data, resp=None) -> float:
    """Soft-count Mardia kurtosis of one component, standardized.

    Returns NaN when the component's soft count is below d + 1, which
    excludes it from split selection.
    """
    x = as_points(data)
    d = x.shape[1]
    if resp is None:
        resp = e_step(model, x).resp
    h = np.asarray(resp)[:, index]
    nk = h.sum()
    if nk < d + 1:
        return float("nan")
    maha = component_precision_quadform(model.components[index], x)
    b2 = float(h @ maha ** 2) / nk
    ref = d * (d + 2)
    return (b2 - ref) / np.sqrt(8.0 * ref / nk)


def select_split_component(model: MixtureModel, data, resp) -> Optional[int]:
    """Component whose kurtosis departs most from the Gaussian value (|gamma| largest)."""
    x = as_points(data)
    d = x.shape[1]
    counts = np.asarray(resp).sum(axis=0)
    best, best_score = None, -np.inf
    for k in range(model.n_components):
        if counts[k] < 2 * (d + 1):
            continue
        g = kurtosis_score(k, model, x, resp)
        if np.isfinite(g) and abs(g) > best_score:
            best, best_score = k, abs(g)
    return best


def split_offset(comp: FactorComponent) -> np.ndarray:
    """Eigenvalue-weighted sum of the eigenvectors of the modeled covariance."""
    evals, evecs = np.linalg.eigh(component_covariance(comp))
    return _canonical_signs(evecs) @ evals


def bimodal_axis_offset(comp: FactorComponent, x: np.ndarray) -> np.ndarray:
    """One standard deviation along the principal axis where x is most platykurtic.

    Two clusters side by side show up as negative excess kurtosis along the
    axis that separates them, whether or not that axis carries most variance.
    """
    evals, evecs = np.linalg.eigh(component_covariance(comp))
    evecs = _canonical_signs(evecs)
    t = (x - comp.mean) @ evecs
    t = t - t.mean(axis=0)
    m2 = np.mean(t ** 2, axis=0)
    m4 = np.mean(t ** 4, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        kurt = m4 / m2 ** 2
    # degenerate axes (no spread left after underflow) are never chosen
    kurt[~np.isfinite(kurt)] = np.inf
    i = int(np.argmin(kurt))
    return evecs[:, i] * np.sqrt(evals[i])


def principal_form(comp: FactorComponent, floor=None) -> FactorComponent:
    """Re-express a component's covariance with principal-axis loadings.

    The loadings become the leading eigenvectors scaled by the excess of their
    eigenvalues over the mean trailing eigenvalue; the noise keeps the
    diagonal of the covariance exact. With one factor in two dimensions the
    covariance is reproduced exactly.
    """
    p = comp.n_factors
    evals, evecs = np.linalg.eigh(component_covariance(comp))
    evecs = _canonical_signs(evecs)
    d = evals.shape[0]
    rest = evals[:d - p].mean() if d > p else 0.0
    top = evecs[:, ::-1][:, :p]
    loadings = top * np.sqrt(np.maximum(evals[::-1][:p] - rest, 0.0))
    noise = (evecs ** 2) @ np.where(np.arange(d) >= d - p, rest, evals)
    if floor is not None:
        noise = np.maximum(noise, floor)
    return comp.replace(loadings=loadings, noise_diag=noise)


def is_pinned(comp: FactorComponent, ratio: float = PIN_RATIO) -> bool:
    """True when some noise variance is negligible next to that coordinate's total.

    EM cannot move a coordinate whose noise sits at zero: the latent posterior
    reproduces it exactly, so the mean and loading rows stay where they are.
    """
    total = comp.noise_diag + np.einsum("ij,ij->i", comp.loadings, comp.loadings)
    return bool(np.any(comp.noise_diag < ratio * total))


def unpin(model: MixtureModel, floor=None) -> MixtureModel:
    if not any(is_pinned(c) for c in model.components):
        return model
    return MixtureModel.from_components(
        [principal_form(c, floor) if is_pinned(c) else c for c in model.components])


def _polish(model, x, config: AmofaConfig, floor, action, index) -> Candidate:
    fitted, em_trace = run_em_mml(unpin(model, floor), x, config.em, floor=floor)
    last = em_trace.steps[-1]
    return Candidate(action, index, fitted, last.message_length, last.log_likelihood)


def split_proposal(model: MixtureModel, data, index: int, config: AmofaConfig = AmofaConfig(),
                   resp=None, floor=None) -> Optional[MixtureModel]:
    """Replace one component by a locally fitted pair, before any global refit.

    The pair comes from a two-component MML-EM run on the points the
    component wins outright; their weights are scaled by the parent's. None
    when the component has too little support or the local fit keeps only
    one child.
    """
    x = as_points(data)
    n, d = x.shape
    if floor is None:
        floor = variance_floor(x, config.em.variance_floor_scale)
    if resp is None:
        resp = e_step(model, x).resp
    resp = np.asarray(resp)
    if resp[:, index].sum() < 2 * (d + 1):
        return None
    members = np.argmax(resp, axis=1) == index
    if members.sum() < 2 * (d + 1):
        return None

    parent = model.components[index]
    local_x = x[members]
    base = principal_form(parent, floor)
    best = None
    # The eigenvalue-weighted offset can start the local fit in a left/right
    # saddle of stacked clusters; a second start along the most bimodal axis
    # avoids that, and the shorter local message length wins.
    for w in (split_offset(parent), bimodal_axis_offset(parent, local_x)):
        children = [base.replace(mean=parent.mean + w, weight=0.5),
                    base.replace(mean=parent.mean - w, weight=0.5)]
        try:
            local, local_trace = run_em_mml(MixtureModel.from_components(children), local_x,
                                            config.em, floor=floor)
        except NumericalError as exc:
            logger.debug("local split fit of component %d failed: %s", index, exc)
            continue
        if local.n_components < 2:
            continue
        length = local_trace.steps[-1].message_length
        if best is None or length < best[0]:
            best = (length, local)
    if best is None:
        return None

    comps = list(model.components)
    comps[index:index + 1] = [c.replace(weight=parent.weight * c.weight)
                              for c in best[1].components]
    return MixtureModel.from_components(comps)


def split_component(model: MixtureModel, data, index: int, config: AmofaConfig = AmofaConfig(),
                    resp=None, floor=None) -> Optional[Candidate]:
    """Split one component in two and refit; None when the split is infeasible."""
    x = as_points(data)
    if floor is None:
        floor = variance_floor(x, config.em.variance_floor_scale)
    proposal = split_proposal(model, x, index, config, resp, floor)
    if proposal is None:
        return None
    return _polish(proposal, x, config, floor, SPLIT, index)


def covariance_gaps(model: MixtureModel, data, resp) -> np.ndarray:
    """Frobenius distance between each component's weighted sample and modeled covariance."""
    x = as_points(data)
    resp = np.asarray(resp)
    gaps = np.empty(model.n_components)
    for k, comp in enumerate(model.components):
        h = resp[:, k]
        nk = h.sum()
        if nk <= 0:
            gaps[k] = -np.inf
            continue
        r = x - comp.mean
        sample = (r * h[:, None]).T @ r / nk
        gaps[k] = np.linalg.norm(sample - component_covariance(comp), "fro")
    return gaps


def residual_factor(comp: FactorComponent, x: np.ndarray, h: np.ndarray,
                    ez: np.ndarray) -> np.ndarray:
    """New loading column: leading principal direction of the reconstruction residuals.

    ``ez`` holds the unweighted posterior latent means of the rows of x.
    """
    resid = (ez @ comp.loadings.T + comp.mean) - x
    nk = h.sum()
    centre = h @ resid / nk
    rc = resid - centre
    cov = (rc * h[:, None]).T @ rc / nk
    evals, evecs = np.linalg.eigh(cov)
    lead = _canonical_signs(evecs[:, -1:])[:, 0]
    return lead * np.sqrt(max(evals[-1], 0.0))


def factor_add_candidate(model: MixtureModel, data, config: AmofaConfig = AmofaConfig(),
                         moments: Optional[EStepMoments] = None,
                         floor=None) -> Optional[Candidate]:
    """Add one residual factor to the worst-fitting component and refit."""
    x = as_points(data)
    d = x.shape[1]
    if floor is None:
        floor = variance_floor(x, config.em.variance_floor_scale)
    if moments is None:
        moments = e_step(model, x)
    resp = moments.resp.values
    gaps = covariance_gaps(model, x, resp)
    for k, comp in enumerate(model.components):
        if comp.n_factors >= d - 1:
            gaps[k] = -np.inf
    if not np.any(np.isfinite(gaps)):
        return None
    index = int(np.argmax(gaps))
    comp = model.components[index]
    h = resp[:, index]
    ez = moments.ez[index] / np.where(h > 0, h, 1.0)[:, None]
    column = residual_factor(comp, x, h, ez)
    grown = comp.replace(loadings=np.column_stack([comp.loadings, column]))
    comps = list(model.components)
    comps[index] = grown
    return _polish(MixtureModel.from_components(comps), x, config, floor, ADD_FACTOR, index)


def downsize_phase(model: MixtureModel, data, config: AmofaConfig = AmofaConfig(),
                   floor=None) -> List[MixtureModel]:
    """Remove the weakest component, refit, and archive, until one is left."""
    x = as_points(data)
    d = x.shape[1]
    if floor is None:
        floor = variance_floor(x, config.em.variance_floor_scale)
    snapshots = []
    while model.n_components > 1:
        counts = e_step(model, x).soft_counts
        thresholds = np.array([annihilation_threshold(d, c.n_factors) for c in model.components])
        weakest = int(np.argmin(counts / thresholds))
        model, _ = run_em_mml(unpin(drop_component(model, weakest), floor), x, config.em,
                              floor=floor)
        snapshots.append(model)
    return snapshots


def amofa_fit(data, config: AmofaConfig = AmofaConfig()):
    """Fit a mixture of factor analyzers with automatic model selection.

    Returns ``(model, trace)``; ``trace.stored_models[trace.selected]`` is
    the returned model.
    """
    x = as_points(data)
    floor = variance_floor(x, config.em.variance_floor_scale)
    trace = FitTrace()
    start = init_model(x, config.em.variance_floor_scale)
    trace.flags.extend(start.trace.flags)

    current = _polish(start, x, config, floor, INIT, 0)
    trace.record(INIT, current.model, current.message_length, current.log_likelihood)

    for _ in range(config.max_steps):
        moments = e_step(current.model, x)
        candidates = []
        k = select_split_component(current.model, x, moments.resp)
        if k is not None:
            cand = split_component(current.model, x, k, config, resp=moments.resp, floor=floor)
            if cand is not None:
                candidates.append(cand)
        cand = factor_add_candidate(current.model, x, config, moments=moments, floor=floor)
        if cand is not None:
            candidates.append(cand)
        if not candidates:
            break
        best = min(candidates, key=lambda c: c.message_length)
        logger.debug("%s on component %d: %.4f -> %.4f", best.action, best.index,
                     current.message_length, best.message_length)
        trace.record(best.action, best.model, best.message_length, best.log_likelihood)
        stalled = (current.message_length - best.message_length
                   < config.outer_epsilon * abs(current.message_length))
        current = best
        if stalled:
            break
    else:
        trace.flags.append("max_steps")

    for snap in downsize_phase(current.model, x, config, floor=floor):
        last = snap.trace.steps[-1]
        trace.record(ANNIHILATE, snap, last.message_length, last.log_likelihood)

    lengths = trace.message_lengths
    trace.selected = int(np.argmin(lengths))
    chosen = trace.stored_models[trace.selected]
    return MixtureModel.from_components(chosen.components, trace=trace), trace
