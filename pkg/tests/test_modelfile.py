import numpy as np
import pytest

from amofa.evaluation import ClassifierBundle
from amofa.model import FitTrace, MixtureModel, mixture_log_likelihood
from amofa.modelfile import (ModelFileError, SchemaVersionError, dumps_bundle, dumps_model,
                             load_model, loads_bundle, loads_model, save_model)
from conftest import random_model


def with_trace(model):
    trace = FitTrace(selected=1, flags=["few_points"])
    trace.record("init", model, 123.456, -100.25)
    trace.record("split", model, 1e-300, -np.pi)
    return MixtureModel.from_components(model.components, trace=trace)


def test_round_trip_is_bit_exact(rng, tmp_path):
    for _ in range(20):
        model = with_trace(random_model(rng, int(rng.integers(2, 9)), int(rng.integers(1, 5))))
        path = tmp_path / "m.txt"
        save_model(model, path)
        back = load_model(path)
        for a, b in zip(model.components, back.components):
            assert a.weight == b.weight
            for name in ("mean", "loadings", "noise_diag"):
                assert np.array_equal(getattr(a, name), getattr(b, name))
        assert back.trace.steps == model.trace.steps
        assert back.trace.selected == 1 and back.trace.flags == ["few_points"]
        x = rng.normal(size=(30, model.dim))
        assert mixture_log_likelihood(back, x) == mixture_log_likelihood(model, x)
        assert dumps_model(back) == dumps_model(model)


def test_loadings_are_column_major(rng):
    model = random_model(rng, 4, 1, max_p=3)
    lam = model.components[0].loadings
    line = [ln for ln in dumps_model(model).splitlines() if ln.startswith("loadings")][0]
    values = [float(t) for t in line.split()[1:]]
    assert values == lam.ravel(order="F").tolist()


def test_truncated_file_reports_byte_offset(rng):
    text = dumps_model(with_trace(random_model(rng, 3, 2)))
    cut = text[: len(text) // 2]
    cut = cut[: cut.rfind("\n") + 1]
    with pytest.raises(ModelFileError) as info:
        loads_model(cut)
    assert info.value.offset == len(cut.encode())
    assert "byte" in str(info.value)


def test_corrupt_number_points_at_line(rng):
    text = dumps_model(random_model(rng, 3, 1))
    start = text.index("noise")
    bad = text[:start] + "noise 1.0 oops 2.0" + text[text.index("\n", start):]
    with pytest.raises(ModelFileError) as info:
        loads_model(bad)
    assert info.value.offset == start


def test_version_bump_is_explicit(rng):
    text = dumps_model(random_model(rng, 2, 1)).replace("amofa-model 1", "amofa-model 2", 1)
    with pytest.raises(SchemaVersionError) as info:
        loads_model(text)
    assert info.value.found == "2" and info.value.offset == 0


def test_trailing_garbage_rejected(rng):
    with pytest.raises(ModelFileError):
        loads_model(dumps_model(random_model(rng, 2, 1)) + "extra\n")


def test_bundle_round_trip(rng):
    bundle = ClassifierBundle({3: random_model(rng, 3, 2), 1: random_model(rng, 3, 1)})
    back = loads_bundle(dumps_bundle(bundle))
    assert list(back.models) == [1, 3]
    x = rng.normal(size=(40, 3))
    assert np.array_equal(back.predict(x), bundle.predict(x))
    with pytest.raises(ModelFileError):
        loads_model(dumps_bundle(bundle))
