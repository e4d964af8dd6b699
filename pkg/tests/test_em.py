import numpy as np
import pytest

from amofa.data import example1_spec, sample_mixture
from amofa.em import (EmConfig, drop_component, e_step, m_step, mml_weights, run_em_mml,
                      variance_floor)
from amofa.mml import annihilation_threshold
from amofa.model import (FactorComponent, MixtureModel, NumericalError, mixture_log_likelihood,
                         responsibilities)
from conftest import random_model


def test_config_validation():
    with pytest.raises(ValueError):
        EmConfig(epsilon=0)
    with pytest.raises(ValueError):
        EmConfig(max_iters=0)
    assert EmConfig().epsilon == 1e-5


def test_latent_mean_hand_example():
    comp = FactorComponent([0.0, 0.0], [[1.0], [0.0]], [1.0, 1.0], 1.0)
    mom = e_step(MixtureModel.from_components([comp]), [[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(mom.ez[0], [[1.0], [0.0]], atol=1e-15)


def test_moments_match_dense_oracle(rng):
    model = random_model(rng, 5, 3)
    x = rng.normal(scale=3.0, size=(40, 5))
    mom = e_step(model, x)
    h = np.asarray(responsibilities(model, x))
    for k, c in enumerate(model.components):
        cov = c.loadings @ c.loadings.T + np.diag(c.noise_diag)
        omega = c.loadings.T @ np.linalg.inv(cov)
        ez = (x - c.mean) @ omega.T
        cov_z = np.eye(c.n_factors) - omega @ c.loadings
        np.testing.assert_allclose(mom.ez[k], h[:, k, None] * ez, atol=1e-10)
        ezz = h[:, k].sum() * cov_z + (h[:, k, None] * ez).T @ ez
        np.testing.assert_allclose(mom.ezz[k], ezz, atol=1e-9)
        assert np.array_equal(mom.ezz[k], mom.ezz[k].T)
        assert np.linalg.eigvalsh(mom.ezz[k]).min() >= -1e-9
    assert mom.log_likelihood == pytest.approx(mixture_log_likelihood(model, x), rel=1e-12)


def test_sample_mean_is_fixed_point_of_single_component_update(rng):
    x = rng.normal(loc=[3.0, -1.0, 7.0], size=(200, 3)) @ rng.normal(size=(3, 3))
    comp = FactorComponent(x.mean(axis=0), [[1.0], [0.0], [0.5]], [1.0, 2.0, 1.0], 1.0)
    model = MixtureModel.from_components([comp])
    new = m_step(model, x, e_step(model, x))
    np.testing.assert_allclose(new.components[0].mean, x.mean(axis=0), rtol=0, atol=1e-12)


def test_single_component_mean_converges_to_sample_mean(rng):
    z = rng.normal(size=(200, 1))
    x = [3.0, -1.0, 7.0] + z @ [[2.0, 1.0, -1.0]] + rng.normal(size=(200, 3)) * [0.5, 1.0, 0.8]
    comp = FactorComponent([0.0, 0.0, 0.0], [[1.0], [0.0], [0.5]], [1.0, 2.0, 1.0], 1.0)
    model = MixtureModel.from_components([comp])
    for _ in range(500):
        model = m_step(model, x, e_step(model, x))
    np.testing.assert_allclose(model.components[0].mean, x.mean(axis=0), rtol=0, atol=1e-8)


def test_mml_mode_zeroes_unsupported_weight(rng):
    x = rng.normal(size=(300, 2))
    comps = [FactorComponent([0.0, 0.0], [[1.0], [0.0]], [1.0, 1.0], 0.99),
             FactorComponent([4.0, 4.0], [[1.0], [0.0]], [1.0, 1.0], 0.01)]
    model = MixtureModel.from_components(comps)
    mom = e_step(model, x)
    assert mom.soft_counts[1] < annihilation_threshold(2, 1)
    new = m_step(model, x, mom, mml_mode=True)
    assert new.components[1].weight == 0.0
    assert new.components[0].weight == 1.0
    plain = m_step(model, x, mom, mml_mode=False)
    assert plain.components[1].weight > 0


def test_mml_weights_fallback():
    np.testing.assert_allclose(mml_weights([10.0, 2.0], [3.0, 3.0]), [1.0, 0.0])
    np.testing.assert_allclose(mml_weights([2.0, 2.5], [3.0, 3.0]), [0.0, 1.0])
    np.testing.assert_allclose(mml_weights([13.0, 8.0], [3.0, 3.0]), [10 / 15, 5 / 15])


def test_em_ascent_two_components(rng):
    for _ in range(100):
        model = random_model(rng, 2, 2, scale=2.0)
        x = np.vstack([rng.normal(size=(60, 2)) + 2, rng.normal(size=(60, 2)) - 2])
        floor = variance_floor(x, 0.0)
        ll = mixture_log_likelihood(model, x)
        for _ in range(5):
            model = m_step(model, x, e_step(model, x), floor=floor)
            new = mixture_log_likelihood(model, x)
            assert new >= ll - 1e-9 * abs(ll)
            ll = new


def test_noise_floor_on_duplicated_points():
    x = np.repeat(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]), 50, axis=0)
    comp = FactorComponent([0.5, 1.0, 1.5], [[0.5], [1.0], [1.5]], [0.1, 0.1, 0.1], 1.0)
    model = MixtureModel.from_components([comp])
    floor = variance_floor(x, 1e-6)
    for _ in range(20):
        model = m_step(model, x, e_step(model, x), floor=floor)
    assert np.all(model.components[0].noise_diag >= floor)


def test_degenerate_augmented_system_is_reported():
    # the factor points along an axis where the data never move, so E[z] is
    # constant and its posterior variance is ~1e-14: [z, 1] is rank-deficient
    x = np.column_stack([np.zeros(50), np.random.default_rng(0).normal(size=50)])
    comp = FactorComponent([0.0, 0.0], [[1e5], [0.0]], [1e-4, 1.0], 1.0)
    model = MixtureModel.from_components([comp])
    with pytest.raises(NumericalError) as info:
        m_step(model, x, e_step(model, x), floor=np.array([1e-12, 1e-12]))
    assert info.value.component == 0
    assert info.value.condition >= 1e13


def test_zero_support_component_keeps_parameters():
    x = np.random.default_rng(0).normal(size=(50, 2))
    far = FactorComponent([1e4, 1e4], [[1.0], [0.0]], [1e-3, 1e-3], 0.5)
    comps = [FactorComponent([0.0, 0.0], [[1.0], [0.0]], [1.0, 1.0], 0.5), far]
    model = MixtureModel.from_components(comps)
    new = m_step(model, x, e_step(model, x))
    assert new.components[1].weight == 0.0
    assert np.array_equal(new.components[1].mean, far.mean)


def test_variance_floor():
    x = np.array([[0.0, 5.0], [2.0, 5.0]])
    np.testing.assert_allclose(variance_floor(x, 1e-6), [1e-6, 0.5e-6])
    with pytest.raises(ValueError):
        variance_floor(np.ones((4, 2)), 1e-6)


def test_far_tiny_component_dies(rng):
    x = rng.normal(size=(400, 2))
    comps = [FactorComponent([0.0, 0.0], [[0.5], [0.5]], [1.0, 1.0], 0.98),
             FactorComponent([8.0, 8.0], [[0.5], [0.0]], [1.0, 1.0], 0.02)]
    model, trace = run_em_mml(MixtureModel.from_components(comps), x)
    assert model.n_components == 1
    assert "annihilate" in [s.action for s in trace.steps]
    assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_example1_trace_is_monotone_between_annihilations():
    ds = sample_mixture(example1_spec(seed=3))
    comps = [FactorComponent([0.0, m], [[1.0], [0.0]], [1.0, 0.5], 1 / 3) for m in (-1.5, 0.2, 1.8)]
    model, trace = run_em_mml(MixtureModel.from_components(comps, normalize=True), ds.points)
    lengths = trace.message_lengths
    actions = [s.action for s in trace.steps]
    for i in range(1, len(lengths)):
        if actions[i] == "iteration" and actions[i - 1] != "annihilate":
            assert lengths[i] <= lengths[i - 1] + 1e-8 * abs(lengths[i - 1])
    assert "max_iters" not in trace.flags
    assert model.n_components == 3


def test_one_annihilation_per_substep(rng):
    x = rng.normal(size=(200, 2))
    comps = [FactorComponent(rng.normal(size=2), [[1.0], [0.0]], [1.0, 1.0], 0.2) for _ in range(5)]
    model, trace = run_em_mml(MixtureModel.from_components(comps, normalize=True), x)
    prev = trace.steps[0].n_components
    for s in trace.steps[1:]:
        if s.action == "annihilate":
            assert s.n_components == prev - 1
        prev = s.n_components


def test_last_component_is_clamped():
    x = np.array([[0.0, 0.0], [1.0, 0.5], [2.0, 0.1]])
    comps = [FactorComponent([1.0, 0.2], [[1.0], [0.0]], [1.0, 1.0], 0.5),
             FactorComponent([1.0, 0.3], [[1.0], [0.1]], [1.0, 1.0], 0.5)]
    model, trace = run_em_mml(MixtureModel.from_components(comps), x, EmConfig(max_iters=50))
    assert model.n_components == 1
    assert "clamped" in trace.flags


def test_run_em_mml_deterministic(rng):
    x = rng.normal(size=(150, 3))
    model = random_model(rng, 3, 2, scale=1.0)
    _, a = run_em_mml(model, x)
    _, b = run_em_mml(model, x)
    assert a.steps == b.steps


def test_drop_component_renormalizes(rng):
    model = random_model(rng, 3, 4)
    for k in range(4):
        dropped = drop_component(model, k)
        assert dropped.n_components == 3
        assert abs(dropped.weights.sum() - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        drop_component(MixtureModel.from_components([model.components[0].replace(weight=1.0)]), 0)
