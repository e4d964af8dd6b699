"""Message-length (MML) code lengths for mixtures of factor analyzers.

All code lengths are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import MixtureModel, as_points, mixture_log_likelihood

# Normalizer of Rissanen's universal prior over the positive integers.
UNIVERSAL_PRIOR_NORMALIZER = 2.865064
LOG_NORMALIZER = math.log(UNIVERSAL_PRIOR_NORMALIZER)


def log_star(k: int) -> float:
    """Iterated logarithm ln k + ln ln k + ..., keeping positive terms only."""
    total = 0.0
    term = math.log(k)
    while term > 0:
        total += term
        term = math.log(term)
    return total


def universal_code_length(k: int) -> float:
    """Code length of the positive integer k under the universal prior."""
    if isinstance(k, float) and not k.is_integer():
        raise ValueError(f"k must be an integer, got {k}")
    k = int(k)
    if k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    return log_star(k) + LOG_NORMALIZER


def component_param_count(d: int, p: int) -> float:
    """Parameter cost C_k = d (p + 2) + L*(p) of a d-dimensional, p-factor component."""
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    if not 1 <= p <= max(d - 1, 1):
        raise ValueError(f"number of factors must be in [1, {max(d - 1, 1)}], got {p}")
    return d * (p + 2) + universal_code_length(p)


def annihilation_threshold(d: int, p: int) -> float:
    """Soft count below which a component does not pay for its own parameters."""
    return component_param_count(d, p) / 2.0


@dataclass(frozen=True)
class CodeLengthReport:
    total: float
    param_cost: float
    integer_cost: float
    neg_log_likelihood: float
    per_component_C: np.ndarray


def code_length_terms(weights, factors, d: int, n: int, log_likelihood: float) -> CodeLengthReport:
    """Assemble the message length from already-computed pieces.

    Zero-weight components are skipped entirely; they are not part of the
    encoded model.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise ValueError("mixture weights must be non-negative")
    keep = weights > 0
    w = weights[keep]
    p = [int(f) for f, kept in zip(factors, keep) if kept]
    if n * w.min(initial=np.inf) <= 0 or not p:
        raise ValueError("no component with positive support")
    c = np.array([component_param_count(d, pk) for pk in p])
    k_nz = len(p)
    param_cost = (float(np.sum(0.5 * c * np.log(n * w / 12.0)))
                  + 0.5 * k_nz * math.log(n / 12.0)
                  + float(np.sum(0.5 * (c + 1.0))))
    integer_cost = universal_code_length(k_nz) + sum(universal_code_length(pk) for pk in p)
    nll = -float(log_likelihood)
    return CodeLengthReport(param_cost + integer_cost + nll, param_cost, integer_cost, nll, c)


def message_length(model: MixtureModel, data, log_likelihood: float | None = None) -> CodeLengthReport:
    """Generalized MML objective of ``model`` on ``data``.

    Pass ``log_likelihood`` when it is already known to skip re-evaluating it.
    """
    x = as_points(data)
    if log_likelihood is None:
        log_likelihood = mixture_log_likelihood(model, x)
    return code_length_terms(model.weights, model.factors, model.dim, x.shape[0], log_likelihood)
