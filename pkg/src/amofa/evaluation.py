"""Clustering agreement (NID) and class-conditional classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .adapt import AmofaConfig, amofa_fit
from .model import Dataset, MixtureModel, as_points, point_log_likelihoods, responsibilities


@dataclass(frozen=True)
class Clustering:
    """Cluster assignments, relabelled to 0..R-1 in sorted label order."""

    assignments: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.assignments).ravel()
        if raw.size == 0:
            raise ValueError("a clustering needs at least one point")
        canon = np.unique(raw, return_inverse=True)[1].ravel().astype(np.int64)
        canon.setflags(write=False)
        object.__setattr__(self, "assignments", canon)

    def __len__(self) -> int:
        return self.assignments.size

    @property
    def n_clusters(self) -> int:
        return int(self.assignments.max()) + 1


def _as_clustering(u) -> Clustering:
    return u if isinstance(u, Clustering) else Clustering(u)


def contingency(u, v) -> np.ndarray:
    u, v = _as_clustering(u), _as_clustering(v)
    if len(u) != len(v):
        raise ValueError(f"clusterings have different lengths: {len(u)} vs {len(v)}")
    table = np.zeros((u.n_clusters, v.n_clusters), dtype=np.int64)
    np.add.at(table, (u.assignments, v.assignments), 1)
    return table


def _entropy_of_counts(counts: np.ndarray) -> float:
    counts = counts[counts > 0].astype(float)
    p = counts / counts.sum()
    return -math.fsum(p * np.log(p))


def clustering_entropy(u) -> float:
    """Entropy (nats) of the cluster-size distribution."""
    u = _as_clustering(u)
    return _entropy_of_counts(np.bincount(u.assignments))


def mutual_information(u, v) -> float:
    table = contingency(u, v).astype(float)
    n = table.sum()
    a = table.sum(axis=1, keepdims=True)
    b = table.sum(axis=0, keepdims=True)
    nz = table > 0
    pij = table[nz] / n
    # fsum is correctly rounded, so the result does not depend on cell order
    # and MI(u, v) == MI(v, u) exactly
    mi = math.fsum(pij * np.log(table[nz] * n / (a @ b)[nz]))
    return max(mi, 0.0)


def nid(u, v) -> float:
    """Normalized information distance 1 - MI / max(H(u), H(v)).

    Two single-cluster partitions are identical, so their distance is 0.
    """
    table = contingency(u, v)
    hu = _entropy_of_counts(table.sum(axis=1))
    hv = _entropy_of_counts(table.sum(axis=0))
    denom = max(hu, hv)
    if denom == 0.0:
        return 0.0
    value = 1.0 - mutual_information(u, v) / denom
    return min(max(value, 0.0), 1.0)


def hard_assignments(model: MixtureModel, data) -> np.ndarray:
    """Index of the most responsible component per point; ties go to the lowest index."""
    return np.argmax(np.asarray(responsibilities(model, data)), axis=1)


def hard_cluster(model: MixtureModel, data) -> Clustering:
    return Clustering(hard_assignments(model, data))


@dataclass
class ClassifierBundle:
    """One density model per class label."""

    models: Dict[int, MixtureModel]

    def __post_init__(self):
        if not self.models:
            raise ValueError("a classifier needs at least one class model")
        dims = {m.dim for m in self.models.values()}
        if len(dims) != 1:
            raise ValueError(f"class models disagree on dimension: {sorted(dims)}")
        self.models = dict(sorted(self.models.items()))

    @property
    def dim(self) -> int:
        return next(iter(self.models.values())).dim

    @property
    def labels(self) -> np.ndarray:
        return np.array(list(self.models))

    def class_log_likelihoods(self, data) -> np.ndarray:
        x = as_points(data)
        if x.shape[1] != self.dim:
            raise ValueError(f"data dimension {x.shape[1]} does not match model dimension {self.dim}")
        return np.column_stack([point_log_likelihoods(m, x) for m in self.models.values()])

    def predict(self, data) -> np.ndarray:
        # argmax keeps the first maximum and labels are sorted, so ties go to the lowest label
        return self.labels[np.argmax(self.class_log_likelihoods(data), axis=1)]


def classify(bundle: ClassifierBundle, x) -> int:
    """Maximum-likelihood class of a single point, without class priors."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("classify expects a single point; use ClassifierBundle.predict for batches")
    return int(bundle.predict(x[None, :])[0])


def train_classifier(data: Dataset, config: AmofaConfig = AmofaConfig()) -> ClassifierBundle:
    if data.labels is None:
        raise ValueError("training data need labels")
    models = {}
    for label in np.unique(data.labels):
        model, _ = amofa_fit(data.points[data.labels == label], config)
        models[int(label)] = model
    return ClassifierBundle(models)


@dataclass(frozen=True)
class CrossValidationResult:
    fold_accuracies: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies, ddof=1)) if self.fold_accuracies.size > 1 else 0.0


def cross_validate(data: Dataset, folds: int = 10, config: AmofaConfig = AmofaConfig(),
                   seed: int = 0, progress=None) -> CrossValidationResult:
    """Stratified k-fold accuracy of class-conditional AMoFA classifiers.

    ``progress`` is called as ``progress(fold_index, accuracy)`` after each fold.
    """
    if data.labels is None:
        raise ValueError("cross-validation needs labelled data")
    if folds < 2:
        raise ValueError("folds must be at least 2")
    classes = np.unique(data.labels)
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs = []
    for i, (train, test) in enumerate(splitter.split(data.points, data.labels)):
        missing = np.setdiff1d(classes, data.labels[train])
        if missing.size:
            raise ValueError(f"fold {i}: classes {missing.tolist()} absent from the training split")
        bundle = train_classifier(Dataset(data.points[train], data.labels[train]), config)
        acc = float(np.mean(bundle.predict(data.points[test]) == data.labels[test]))
        accs.append(acc)
        if progress is not None:
            progress(i, acc)
    return CrossValidationResult(np.array(accs))
