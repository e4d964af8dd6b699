"""Dataset loading and synthetic generators.

Random streams come from numpy's PCG64 bit generator, seeded explicitly, so a
(spec, n, seed) triple reproduces the same points on every platform numpy
supports.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import Dataset


class CsvFormatError(ValueError):
    """Malformed CSV input; ``line`` and ``column`` are 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)
        self.line = line
        self.column = column


def parse_csv(text: str, has_labels: bool = False, header: bool = False) -> Dataset:
    rows = []
    width = None
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, start=1):
        if header and lineno == 1:
            continue
        if not row or all(not cell.strip() for cell in row):
            continue
        if width is None:
            width = len(row)
            if has_labels and width < 2:
                raise CsvFormatError("need at least one feature column and a label column", lineno)
        elif len(row) != width:
            raise CsvFormatError(f"ragged row: expected {width} fields, found {len(row)}", lineno)
        values = []
        for col, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(f"non-numeric value {cell.strip()!r}", lineno, col) from None
            if not math.isfinite(v):
                raise CsvFormatError(f"non-finite value {cell.strip()!r}", lineno, col)
            values.append(v)
        if has_labels and not float(values[-1]).is_integer():
            raise CsvFormatError(f"label {row[-1].strip()!r} is not an integer", lineno, width)
        rows.append(values)
    if not rows:
        raise CsvFormatError("no data rows")
    table = np.array(rows, dtype=float)
    if has_labels:
        return Dataset(table[:, :-1], table[:, -1].astype(np.int64))
    return Dataset(table)


def load_csv(path, has_labels: bool = False, header: bool = False) -> Dataset:
    """Read a numeric CSV (no header unless ``header``); labels come from the last column."""
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return parse_csv(text, has_labels=has_labels, header=header)


def format_csv(points, labels=None) -> str:
    points = np.asarray(points, dtype=float)
    out = io.StringIO()
    for i, row in enumerate(points):
        fields = [repr(float(v)) for v in row]
        if labels is not None:
            fields.append(str(int(labels[i])))
        out.write(",".join(fields) + "\n")
    return out.getvalue()


def save_csv(path, data: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(data.points, data.labels))


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a Gaussian mixture to sample from."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    n: int = 1000
    seed: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {mu.shape}, "
                             f"covariances {cov.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        for j, c in enumerate(cov):
            if not np.allclose(c, c.T):
                raise ValueError(f"covariance {j} is not symmetric")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError(f"covariance {j} is not positive definite")
        if self.n < 1:
            raise ValueError("n must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    def with_sampling(self, n: int, seed: int) -> "GeneratorSpec":
        return GeneratorSpec(self.weights, self.means, self.covariances, n, seed)

    @classmethod
    def from_json(cls, text: str, n: int = 1000, seed: int = 0) -> "GeneratorSpec":
        try:
            raw = json.loads(text)
            return cls(raw["weights"], raw["means"], raw["covariances"],
                       int(raw.get("n", n)), int(raw.get("seed", seed)))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"invalid generator spec: {exc}") from None


def sample_mixture(spec: GeneratorSpec) -> Dataset:
    """Draw ``spec.n`` labelled points; the label is the index of the source component."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    k, d = spec.means.shape
    labels = rng.choice(k, size=spec.n, p=spec.weights)
    z = rng.standard_normal((spec.n, d))
    chol = np.linalg.cholesky(spec.covariances)
    points = spec.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
    return Dataset(points, labels)


def example1_spec(n: int = 900, seed: int = 0) -> GeneratorSpec:
    """Three separable Gaussians stacked along the second axis."""
    cov = np.diag([2.0, 0.2])
    return GeneratorSpec(np.full(3, 1.0 / 3.0),
                         [[0.0, -2.0], [0.0, 0.0], [0.0, 2.0]],
                         [cov, cov, cov], n, seed)


def example2_spec(n: int = 1000, seed: int = 0) -> GeneratorSpec:
    """Four Gaussians, three of them overlapping, two sharing a mean."""
    return GeneratorSpec([0.3, 0.3, 0.3, 0.1],
                         [[-4.0, -4.0], [-4.0, -4.0], [2.0, 2.0], [-1.0, -6.0]],
                         [[[0.8, 0.5], [0.5, 0.8]],
                          [[5.0, -2.0], [-2.0, 5.0]],
                          [[2.0, -1.0], [-1.0, 2.0]],
                          [[0.125, 0.0], [0.0, 0.125]]],
                         n, seed)


EXAMPLES = {"1": example1_spec, "2": example2_spec}


def waveform(n: int = 500, seed: int = 0) -> Dataset:
    """Breiman's three-class waveform data (21 features, unit Gaussian noise).

    Each class is a random convex combination of two of three shifted
    triangular waves; the Bayes error rate is about 14%.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    i = np.arange(1, 22)
    h1 = np.maximum(6.0 - np.abs(i - 11), 0.0)
    h2 = np.maximum(6.0 - np.abs(i - 15), 0.0)
    h3 = np.maximum(6.0 - np.abs(i - 7), 0.0)
    pairs = [(h1, h2), (h1, h3), (h2, h3)]
    labels = rng.integers(0, 3, size=n)
    u = rng.uniform(size=n)
    noise = rng.standard_normal((n, 21))
    points = np.empty((n, 21))
    for c, (a, b) in enumerate(pairs):
        sel = labels == c
        points[sel] = u[sel, None] * a + (1.0 - u[sel, None]) * b
    return Dataset(points + noise, labels)
