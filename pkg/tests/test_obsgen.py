import numpy as np
import pytest
from scipy import stats

from src.errors import ObservationSingularityError
from src.obsgen import (MarginalFn, SelectionMatrix, apply_full_observation, build_latent_obs_operator,
                        observe_trajectory, sample_selection_matrix)
from src.rom import PodAeModel


def test_probability_extremes():
    assert all(r.size == 0 for r in sample_selection_matrix(5, 10, 0.0, seed=0).rows)
    full = sample_selection_matrix(5, 10, 1.0, seed=0)
    assert all(np.array_equal(r, np.arange(10)) for r in full.rows)


def test_row_sizes_follow_binomial():
    m, n, p = 1000, 500, 0.01
    sizes = sample_selection_matrix(m, n, p, seed=3).row_sizes
    se = np.sqrt(n * p * (1 - p) / m)
    assert abs(sizes.mean() - n * p) < 3 * se
    kmax = 12
    observed = np.array([np.sum(sizes == k) for k in range(kmax)] + [np.sum(sizes >= kmax)])
    probs = np.append(stats.binom.pmf(np.arange(kmax), n, p), stats.binom.sf(kmax - 1, n, p))
    # pool sparse tail bins so every expected count is >= 5
    expected = m * probs
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_selection_seeded_and_round_trips(tmp_path):
    a = sample_selection_matrix(20, 30, 0.2, seed=11)
    b = sample_selection_matrix(20, 30, 0.2, seed=11)
    assert all(np.array_equal(x, y) for x, y in zip(a.rows, b.rows))
    loaded = SelectionMatrix.load(a.save(tmp_path / "selection.txt"))
    assert np.array_equal(loaded.to_dense(), a.to_dense())
    assert (loaded.p, loaded.seed) == (0.2, 11)


def test_invalid_probability():
    with pytest.raises(ValueError):
        sample_selection_matrix(2, 3, 1.5, seed=0)


def test_observation_examples():
    H = SelectionMatrix(1, 3, (np.array([0]),))
    x = np.array([2.0, 5.0, 7.0])
    assert np.allclose(apply_full_observation(H, MarginalFn("quadratic"), x), [4.0])
    x[0] = 0.5
    assert np.allclose(apply_full_observation(H, MarginalFn("reciprocal"), x), [1.0])


def test_observation_matches_dense_product(rng):
    H = sample_selection_matrix(40, 200, 0.05, seed=1)
    x = rng.uniform(0.1, 2.0, size=200)
    for kind in ("quadratic", "reciprocal"):
        f = MarginalFn(kind)
        assert np.allclose(apply_full_observation(H, f, x), H.to_dense() @ f(x), atol=1e-12)


def test_reciprocal_singularity_names_index():
    H = SelectionMatrix(1, 4, (np.array([1, 2]),))
    with pytest.raises(ObservationSingularityError) as err:
        apply_full_observation(H, MarginalFn("reciprocal"), np.array([0.0, 1.0, -0.5, 3.0]))
    assert err.value.index == 2


def test_noisy_stream_is_seeded(rng):
    H = sample_selection_matrix(5, 8, 0.5, seed=0)
    X = rng.standard_normal((8, 6))
    clean = observe_trajectory(H, MarginalFn(), X)
    noisy = observe_trajectory(H, MarginalFn(), X, noise_std=0.1, seed=4)
    assert clean.shape == (5, 6)
    assert np.array_equal(noisy, observe_trajectory(H, MarginalFn(), X, noise_std=0.1, seed=4))
    assert not np.array_equal(noisy, clean)


def test_identity_stack_collapses_to_sum_of_squares(rng, make_identity_rom):
    n = 4
    H = SelectionMatrix(1, n, (np.arange(n),))
    op = build_latent_obs_operator(make_identity_rom(1), H, MarginalFn("quadratic"), make_identity_rom(n))
    x = rng.standard_normal(n)
    assert op(x) == pytest.approx([np.sum(x ** 2)])


def test_zero_decoder_gives_constant(rng, make_random_rom):
    x_rom = make_random_rom(rng, 6, 3, 2)
    for layer in x_rom.decoder.layers:
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0
    y_rom = make_random_rom(rng, 4, 2, 2)
    H = sample_selection_matrix(4, 6, 0.5, seed=0)
    op = build_latent_obs_operator(y_rom, H, MarginalFn("quadratic"), x_rom)
    expected = y_rom.encode(np.zeros(4))
    assert np.allclose(op(rng.standard_normal(2)), expected)
    assert np.allclose(op(rng.standard_normal(2)), expected)


def test_stack_matches_staged_application(rng, make_random_rom):
    x_rom = make_random_rom(rng, 10, 4, 3)
    y_rom = make_random_rom(rng, 6, 3, 2)
    H = sample_selection_matrix(6, 10, 0.3, seed=2)
    f = MarginalFn("quadratic")
    op = build_latent_obs_operator(y_rom, H, f, x_rom)
    samples = rng.standard_normal((7, 3))
    batch = op.evaluate_batch(samples)
    for k, s in enumerate(samples):
        full = x_rom.decode(s)
        y = H.to_dense() @ f(full)
        staged = y_rom.encode(y)
        assert np.allclose(op(s), staged, atol=1e-12)
        assert np.allclose(batch[k], staged, atol=1e-10)


def test_chain_mismatch_rejected(rng, make_random_rom):
    H = sample_selection_matrix(6, 10, 0.3, seed=2)
    with pytest.raises(ValueError):
        build_latent_obs_operator(make_random_rom(rng, 5, 3, 2), H, MarginalFn(), make_random_rom(rng, 10, 4, 3))
    with pytest.raises(ValueError):
        build_latent_obs_operator(make_random_rom(rng, 6, 3, 2), H, MarginalFn(), make_random_rom(rng, 9, 4, 3))


def test_operator_dims(rng, make_random_rom):
    x_rom: PodAeModel = make_random_rom(rng, 10, 4, 3)
    y_rom: PodAeModel = make_random_rom(rng, 6, 3, 2)
    op = build_latent_obs_operator(y_rom, sample_selection_matrix(6, 10, 0.3, seed=2), MarginalFn(), x_rom)
    assert (op.input_dim, op.output_dim) == (3, 2)


@pytest.mark.parametrize("kind", ["quadratic", "reciprocal"])
def test_observation_additive_over_split_rows(rng, kind):
    H = sample_selection_matrix(15, 60, 0.2, seed=4)
    left, right = [], []
    for r in H.rows:
        mask = rng.random(r.size) < 0.5
        left.append(r[mask])
        right.append(r[~mask])
    H1 = SelectionMatrix(H.m, H.n, tuple(left))
    H2 = SelectionMatrix(H.m, H.n, tuple(right))
    f = MarginalFn(kind)
    x = rng.uniform(0.1, 2.0, size=(60, 3))
    total = apply_full_observation(H1, f, x) + apply_full_observation(H2, f, x)
    assert np.allclose(apply_full_observation(H, f, x), total, atol=1e-12)
