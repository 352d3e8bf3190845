import numpy as np
import pytest

from src.assim import (AssimProblem, Covariance, cost, cost_gradient, expected_cost_check, make_schedule,
                       minimize, run_gla)
from src.forecast import LatentLayout, Seq2SeqForecaster, rollout
from src.models import GlaConfig
from src.obsgen import MarginalFn, SelectionMatrix, build_latent_obs_operator
from src.surrogate import PolynomialSurrogate, exponent_table


def linear_operator(M, offset=None):
    M = np.atleast_2d(M)
    c = np.zeros((M.shape[0], 1)) if offset is None else np.asarray(offset, float).reshape(-1, 1)
    return PolynomialSurrogate(1, exponent_table(M.shape[1], 1), np.hstack([c, M]))


def quartic_operator(rng, dim, out):
    E = exponent_table(dim, 4)
    return PolynomialSurrogate(4, E, 0.1 * rng.standard_normal((out, E.shape[0])))


def spd(rng, dim):
    A = rng.standard_normal((dim, dim))
    M = A @ A.T + dim * np.eye(dim)
    return 0.5 * (M + M.T)


def test_cost_zero_at_consistent_background(rng):
    op = quartic_operator(rng, 3, 2)
    xb = rng.standard_normal(3)
    p = AssimProblem(xb, op(xb), Covariance(np.eye(3)), Covariance(np.eye(2)), op)
    assert cost(p, xb) == pytest.approx(0.0, abs=1e-14)


def test_scalar_cost():
    p = AssimProblem([0.0], [2.0], Covariance(np.eye(1)), Covariance(np.eye(1)), linear_operator([[1.0]]))
    assert cost(p, [1.0]) == pytest.approx(1.0)


def test_cost_matches_dense_inverse(rng):
    for dim_x, dim_y in [(3, 2), (8, 12), (20, 5)]:
        B, R = spd(rng, dim_x), spd(rng, dim_y)
        H = rng.standard_normal((dim_y, dim_x))
        xb, y, x = rng.standard_normal(dim_x), rng.standard_normal(dim_y), rng.standard_normal(dim_x)
        p = AssimProblem(xb, y, Covariance(B), Covariance(R), linear_operator(H))
        db, dy = x - xb, y - H @ x
        oracle = 0.5 * db @ np.linalg.inv(B) @ db + 0.5 * dy @ np.linalg.inv(R) @ dy
        assert cost(p, x) == pytest.approx(oracle, rel=1e-10)


def test_cost_rejects_non_finite(rng):
    p = AssimProblem(np.zeros(2), np.zeros(1), Covariance(np.eye(2)), Covariance(np.eye(1)),
                     linear_operator([[1.0, 1.0]]))
    with pytest.raises(ValueError):
        cost(p, [np.nan, 0.0])


def test_covariance_validation():
    with pytest.raises(ValueError):
        Covariance(np.array([[1.0, 0.5], [0.4, 1.0]]))
    with pytest.raises(ValueError):
        Covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_dimension_mismatch_rejected(rng):
    with pytest.raises(ValueError):
        AssimProblem(np.zeros(3), np.zeros(2), Covariance(np.eye(3)), Covariance(np.eye(2)),
                     linear_operator(np.ones((2, 2))))


def test_gradient_vanishes_at_linear_optimum(rng):
    B, R = spd(rng, 4), spd(rng, 3)
    H = rng.standard_normal((3, 4))
    xb, y = rng.standard_normal(4), rng.standard_normal(3)
    K = B @ H.T @ np.linalg.inv(H @ B @ H.T + R)
    xa = xb + K @ (y - H @ xb)
    p = AssimProblem(xb, y, Covariance(B), Covariance(R), linear_operator(H))
    assert np.linalg.norm(cost_gradient(p, xa)) < 1e-8


def test_gradient_with_constant_operator(rng):
    B = spd(rng, 3)
    op = linear_operator(np.zeros((2, 3)), offset=[1.0, -1.0])
    xb, x = rng.standard_normal(3), rng.standard_normal(3)
    p = AssimProblem(xb, np.zeros(2), Covariance(B), Covariance(np.eye(2)), op)
    assert np.allclose(cost_gradient(p, x), np.linalg.solve(B, x - xb))


def test_gradient_matches_finite_differences(rng):
    for _ in range(100):
        dim_x, dim_y = rng.integers(1, 5, size=2)
        op = quartic_operator(rng, dim_x, dim_y)
        p = AssimProblem(rng.standard_normal(dim_x), rng.standard_normal(dim_y), Covariance(spd(rng, dim_x)),
                         Covariance(spd(rng, dim_y)), op)
        x = rng.uniform(-1, 1, size=dim_x)
        g = cost_gradient(p, x)
        h = 1e-6
        fd = np.array([(cost(p, x + h * e) - cost(p, x - h * e)) / (2 * h) for e in np.eye(dim_x)])
        assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_minimize_stays_at_consistent_background(rng):
    op = quartic_operator(rng, 3, 2)
    xb = rng.standard_normal(3)
    p = AssimProblem(xb, op(xb), Covariance(np.eye(3)), Covariance(np.eye(2)), op)
    res = minimize(p, 50, 1e-8)
    assert np.array_equal(res.x, xb)
    assert res.iterations == 0


def test_minimize_scalar():
    p = AssimProblem([0.0], [2.0], Covariance(np.eye(1)), Covariance(np.eye(1)), linear_operator([[1.0]]))
    res = minimize(p, 50, 1e-10)
    assert res.x[0] == pytest.approx(1.0, abs=1e-8)
    assert res.cost == pytest.approx(1.0)


def test_minimize_reproduces_linear_gaussian_analysis(rng):
    for _ in range(50):
        dim_x = int(rng.integers(1, 13))
        dim_y = int(rng.integers(1, 13))
        B, R = spd(rng, dim_x), spd(rng, dim_y)
        H = rng.standard_normal((dim_y, dim_x))
        xb, y = rng.standard_normal(dim_x), rng.standard_normal(dim_y)
        K = B @ H.T @ np.linalg.inv(H @ B @ H.T + R)
        oracle = xb + K @ (y - H @ xb)
        res = minimize(AssimProblem(xb, y, Covariance(B), Covariance(R), linear_operator(H)), 500, 1e-11)
        assert np.allclose(res.x, oracle, atol=1e-6)


def test_trace_is_monotone_and_never_worse(rng):
    for _ in range(20):
        op = quartic_operator(rng, 4, 3)
        p = AssimProblem(rng.standard_normal(4), rng.standard_normal(3), Covariance(np.eye(4)),
                         Covariance(0.1 * np.eye(3)), op)
        res = minimize(p, 50, 0.01)
        assert np.all(np.diff(res.trace) <= 0)
        assert res.cost <= cost(p, p.background)


@pytest.mark.parametrize("dim_x,dim_y", [(1, 1), (8, 6), (30, 30)])
def test_expected_cost_identity(dim_x, dim_y):
    check = expected_cost_check(dim_x, dim_y, n_mc=100_000, seed=dim_x)
    assert check.expected == (dim_x + dim_y) / 2
    assert check.within(3.0)


def test_expected_cost_invariant_to_scaling():
    a = expected_cost_check(1, 1, n_mc=100_000, seed=9)
    b = expected_cost_check(1, 1, n_mc=100_000, seed=9, b_scale=4.0)
    assert b.mean == pytest.approx(a.mean, rel=1e-12)


def test_make_schedule():
    assert make_schedule(5, 3, 10, 2) == (5, 6, 7, 15, 16, 17)
    assert make_schedule(0, 2, 5, 0) == ()
    with pytest.raises(ValueError):
        make_schedule(0, 5, 3, 2)


# ---------- GLA loop ----------
def _stack(rng, make_identity_rom, d=3, m=2, persistence=False):
    model = Seq2SeqForecaster.init(d, 4, 3, enc_hidden=5, dec_hidden=5, head_hidden=6, seed=0)
    if persistence:
        for layer in model.head.layers:
            layer.weights[:] = 0.0
            layer.bias[:] = 0.0
    H = SelectionMatrix(m, d, tuple(np.arange(d)[k::m] for k in range(m)))
    op = build_latent_obs_operator(make_identity_rom(m), H, MarginalFn("quadratic"), make_identity_rom(d))
    warm = rng.uniform(0.5, 1.5, size=(6, d))
    return model, op, warm


def test_empty_schedule_equals_rollout(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom)
    res = run_gla(model, op, warm, None, GlaConfig(n_s=50), horizon=10)
    assert np.array_equal(res.trajectory, rollout(model, warm, 10))
    assert res.report["assimilated_flag"].sum() == 0


def test_perfect_observations_keep_background(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom)
    free = rollout(model, warm, 9)
    obs = op.H.to_dense() @ (free.T ** 2)
    cfg = GlaConfig(d_p=2, n_s=60, schedule=(2, 5), grad_tol=1e-6)
    res = run_gla(model, op, warm, obs, cfg)
    assert np.allclose(res.trajectory, free, atol=1e-6)
    assert list(res.report.columns[:8]) == ["step", "latent_rel_err", "full_rel_err", "assimilated_flag",
                                            "cost_before", "cost_after", "optimizer_iters", "trace_monotone"]


def test_assimilation_pulls_toward_truth(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom, d=3, m=3, persistence=True)
    horizon = 12
    free = rollout(model, warm, horizon)
    truth = free + 0.3
    obs = op.H.to_dense() @ (truth.T ** 2)
    cfg = GlaConfig(d_p=2, r_s=0.5, n_s=100, schedule=(3, 4, 5), b_scale=1.0, r_scale=0.01)
    res = run_gla(model, op, warm, obs, cfg, truth=truth.T, state_model=make_identity_rom(3))
    rep = res.report
    hit = rep[rep["assimilated_flag"] == 1]
    assert list(hit["step"]) == [3, 4, 5]
    assert np.all(hit["cost_after"] <= hit["cost_before"])
    free_err = np.linalg.norm(free[3] - truth[3]) / np.linalg.norm(truth[3])
    assert rep.loc[3, "full_rel_err"] < free_err


def test_component_mismatch_rejected(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom)
    with pytest.raises(ValueError):
        run_gla(model, op, warm[:, :2], None, GlaConfig(), horizon=5)
    with pytest.raises(ValueError):
        run_gla(model, op, warm, np.zeros((2, 5)), GlaConfig(schedule=(7,)))


def test_per_burst_refit_reports_every_step(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom)
    obs = np.ones((2, 8))
    res = run_gla(model, op, warm, obs, GlaConfig(d_p=2, n_s=40, schedule=(1, 2, 3), refit="per_burst",
                                                  validate_surrogate=True))
    assert res.report["assimilated_flag"].sum() == 3
    assert res.report.loc[res.report["assimilated_flag"] == 1, "surrogate_rrmse"].notna().all()


def test_outer_loops_keep_cost_and_trace_monotone(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom, d=3, m=3, persistence=True)
    free = rollout(model, warm, 8)
    obs = op.H.to_dense() @ ((free.T + 0.4) ** 2)
    cfg = GlaConfig(d_p=2, r_s=0.5, n_s=80, schedule=(2, 3, 6), n_outer=3, outer_tol=1e-6)
    hit = run_gla(model, op, warm, obs, cfg).report.query("assimilated_flag == 1")
    assert (hit["cost_after"] <= hit["cost_before"]).all()
    assert (hit["trace_monotone"] == 1).all()


def _joint_stack(rng, make_identity_rom):
    model = Seq2SeqForecaster.init(5, 4, 3, enc_hidden=5, dec_hidden=5, head_hidden=6, seed=0)
    for layer in model.head.layers:
        layer.weights[:] = 0.0
        layer.bias[:] = 0.0
    model.layout = LatentLayout(("u", "c"), (3, 2))
    H = SelectionMatrix(3, 3, tuple(np.array([k]) for k in range(3)))
    op = build_latent_obs_operator(make_identity_rom(3), H, MarginalFn("quadratic"), make_identity_rom(3))
    return model, op, rng.uniform(0.5, 1.5, size=(6, 5))


def test_observed_block_leaves_other_fields_at_background(rng, make_identity_rom):
    model, op, warm = _joint_stack(rng, make_identity_rom)
    free = rollout(model, warm, 10)
    obs = op.H.to_dense() @ ((free[:, :3].T + 0.3) ** 2)
    cfg = GlaConfig(d_p=2, r_s=0.5, n_s=80, schedule=(2, 5), observed_field="u")
    res = run_gla(model, op, warm, obs, cfg, truth=free[:, :3].T + 0.3, state_model=make_identity_rom(3))
    assert np.array_equal(res.trajectory[:, 3:], free[:, 3:])
    assert not np.allclose(res.trajectory[2, :3], free[2, :3])
    assert res.report["full_rel_err"].notna().all()


def test_observed_field_needs_layout(rng, make_identity_rom):
    model, op, warm = _stack(rng, make_identity_rom)
    with pytest.raises(ValueError):
        run_gla(model, op, warm, np.ones((2, 5)), GlaConfig(schedule=(1,), observed_field="u"))
