"""Line-oriented text format for fitted models and classifier bundles.

Schema v1 (one record per line, fields separated by single spaces)::

    amofa-model 1
    dim <d>
    components <K>
    component <k> weight <w> factors <p>
    mean <d floats>
    noise <d floats>
    loadings <d*p floats, column-major>
    ...                                   (one block per component)
    trace <n_steps> selected <index|-> flags <comma-list|->
    step <i> <action> <K> <p_list> <message_length> <log_likelihood>
    ...
    end

Floats are written with ``repr``, which round-trips IEEE doubles exactly.
A bundle wraps several models::

    amofa-bundle 1
    classes <C>
    class <label>
    <model block>
    ...
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .evaluation import ClassifierBundle
from .model import FactorComponent, FitTrace, MixtureModel, TraceStep

SCHEMA_VERSION = 1
MODEL_MAGIC = "amofa-model"
BUNDLE_MAGIC = "amofa-bundle"


class ModelFileError(ValueError):
    """Corrupt or truncated model file; ``offset`` is the byte offset of the bad line."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class SchemaVersionError(ModelFileError):
    def __init__(self, found, offset: int):
        super().__init__(f"unsupported schema version {found!r}; this reader handles "
                         f"version {SCHEMA_VERSION}", offset)
        self.found = found


def _floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _model_lines(model: MixtureModel) -> List[str]:
    lines = [f"{MODEL_MAGIC} {SCHEMA_VERSION}", f"dim {model.dim}",
             f"components {model.n_components}"]
    for k, c in enumerate(model.components):
        lines.append(f"component {k} weight {c.weight!r} factors {c.n_factors}")
        lines.append("mean " + _floats(c.mean))
        lines.append("noise " + _floats(c.noise_diag))
        lines.append("loadings " + _floats(c.loadings.ravel(order="F")))
    tr = model.trace
    selected = "-" if tr.selected is None else str(tr.selected)
    flags = ",".join(tr.flags) if tr.flags else "-"
    lines.append(f"trace {len(tr.steps)} selected {selected} flags {flags}")
    for i, s in enumerate(tr.steps):
        plist = ";".join(str(p) for p in s.factors)
        lines.append(f"step {i} {s.action} {s.n_components} {plist} "
                     f"{float(s.message_length)!r} {float(s.log_likelihood)!r}")
    lines.append("end")
    return lines


def dumps_model(model: MixtureModel) -> str:
    return "\n".join(_model_lines(model)) + "\n"


def dumps_bundle(bundle: ClassifierBundle) -> str:
    lines = [f"{BUNDLE_MAGIC} {SCHEMA_VERSION}", f"classes {len(bundle.models)}"]
    for label, model in bundle.models.items():
        lines.append(f"class {int(label)}")
        lines.extend(_model_lines(model))
    return "\n".join(lines) + "\n"


class _Reader:
    """Walks the lines of a file, remembering each line's byte offset."""

    def __init__(self, text: str):
        self.lines: List[Tuple[int, str]] = []
        offset = 0
        for raw in text.splitlines(keepends=True):
            self.lines.append((offset, raw.rstrip("\r\n")))
            offset += len(raw.encode("utf-8"))
        self.end = offset
        self.pos = 0

    def next(self, what: str) -> Tuple[int, List[str]]:
        if self.pos >= len(self.lines):
            raise ModelFileError(f"unexpected end of file, expected {what}", self.end)
        offset, line = self.lines[self.pos]
        self.pos += 1
        return offset, line.split(" ")

    def expect(self, key: str, n_fields=None) -> Tuple[int, List[str]]:
        offset, fields = self.next(f"'{key}' line")
        if fields[0] != key:
            raise ModelFileError(f"expected '{key}' line, found {fields[0]!r}", offset)
        if n_fields is not None and len(fields) - 1 != n_fields:
            raise ModelFileError(f"'{key}' line needs {n_fields} values, found {len(fields) - 1}",
                                 offset)
        return offset, fields[1:]


def _int(token: str, offset: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ModelFileError(f"expected an integer, found {token!r}", offset) from None


def _vector(reader: _Reader, key: str, n: int) -> np.ndarray:
    offset, fields = reader.expect(key, n)
    try:
        return np.array([float(t) for t in fields], dtype=float)
    except ValueError as exc:
        raise ModelFileError(f"bad number in '{key}' line: {exc}", offset) from None


def _read_header(reader: _Reader, magic: str) -> None:
    offset, fields = reader.next("file header")
    if fields[0] != magic or len(fields) != 2:
        raise ModelFileError(f"not an {magic} file", offset)
    if fields[1] != str(SCHEMA_VERSION):
        raise SchemaVersionError(fields[1], offset)


def _read_model(reader: _Reader) -> MixtureModel:
    _read_header(reader, MODEL_MAGIC)
    offset, (dim,) = reader.expect("dim", 1)
    d = _int(dim, offset)
    offset, (count,) = reader.expect("components", 1)
    k_total = _int(count, offset)
    if d < 1 or k_total < 1:
        raise ModelFileError("dim and components must be positive", offset)
    comps = []
    for k in range(k_total):
        offset, fields = reader.expect("component", 5)
        if fields[0] != str(k) or fields[1] != "weight" or fields[3] != "factors":
            raise ModelFileError(f"malformed header for component {k}", offset)
        try:
            weight = float(fields[2])
        except ValueError:
            raise ModelFileError(f"bad weight {fields[2]!r}", offset) from None
        p = _int(fields[4], offset)
        if p < 1:
            raise ModelFileError("factors must be positive", offset)
        mean = _vector(reader, "mean", d)
        noise = _vector(reader, "noise", d)
        lo_offset = reader.lines[reader.pos][0] if reader.pos < len(reader.lines) else reader.end
        loadings = _vector(reader, "loadings", d * p).reshape((d, p), order="F")
        try:
            comps.append(FactorComponent(mean, loadings, noise, weight))
        except ValueError as exc:
            raise ModelFileError(f"component {k}: {exc}", lo_offset) from None

    offset, fields = reader.expect("trace", 5)
    if fields[1] != "selected" or fields[3] != "flags":
        raise ModelFileError("malformed trace line", offset)
    n_steps = _int(fields[0], offset)
    trace = FitTrace(selected=None if fields[2] == "-" else _int(fields[2], offset),
                     flags=[] if fields[4] == "-" else fields[4].split(","))
    for i in range(n_steps):
        offset, fields = reader.expect("step", 6)
        if fields[0] != str(i):
            raise ModelFileError(f"expected step {i}, found {fields[0]!r}", offset)
        try:
            factors = tuple(int(t) for t in fields[3].split(";"))
            trace.steps.append(TraceStep(fields[1], int(fields[2]), factors,
                                         float(fields[4]), float(fields[5])))
        except ValueError as exc:
            raise ModelFileError(f"bad trace step: {exc}", offset) from None
    reader.expect("end", 0)
    try:
        return MixtureModel.from_components(comps, trace=trace)
    except ValueError as exc:
        raise ModelFileError(str(exc), offset) from None


def _check_done(reader: _Reader) -> None:
    if reader.pos < len(reader.lines):
        raise ModelFileError("trailing content after model", reader.lines[reader.pos][0])


def loads_model(text: str) -> MixtureModel:
    reader = _Reader(text)
    model = _read_model(reader)
    _check_done(reader)
    return model


def loads_bundle(text: str) -> ClassifierBundle:
    reader = _Reader(text)
    _read_header(reader, BUNDLE_MAGIC)
    offset, (count,) = reader.expect("classes", 1)
    n_classes = _int(count, offset)
    if n_classes < 1:
        raise ModelFileError("a bundle needs at least one class", offset)
    models: Dict[int, MixtureModel] = {}
    for _ in range(n_classes):
        offset, (label,) = reader.expect("class", 1)
        label = _int(label, offset)
        if label in models:
            raise ModelFileError(f"duplicate class {label}", offset)
        models[label] = _read_model(reader)
    _check_done(reader)
    try:
        return ClassifierBundle(models)
    except ValueError as exc:
        raise ModelFileError(str(exc), 0) from None


def _read_text(path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def save_model(model: MixtureModel, path) -> None:
    _write_text(path, dumps_model(model))


def load_model(path) -> MixtureModel:
    return loads_model(_read_text(path))


def save_bundle(bundle: ClassifierBundle, path) -> None:
    _write_text(path, dumps_bundle(bundle))


def load_bundle(path) -> ClassifierBundle:
    return loads_bundle(_read_text(path))
