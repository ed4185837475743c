import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fm4pde.scheduler import (Scheduler, TimeGrid, geometric_grid, guidance_coefficients,
                              hybrid_grid, scheduler_eval, uniform_grid, validate_grid)


def test_linear_scheduler_values():
    s = Scheduler()
    assert scheduler_eval(s, 0.5) == (0.5, 0.5, 1.0, -1.0)
    assert scheduler_eval(s, 0.0) == (0.0, 1.0, 1.0, -1.0)
    assert scheduler_eval(s, 1.0) == (1.0, 0.0, 1.0, -1.0)


def test_scheduler_domain_error():
    with pytest.raises(ValueError):
        scheduler_eval(Scheduler(), 1.5)
    with pytest.raises(ValueError):
        Scheduler(kind="cosine")
    with pytest.raises(ValueError):
        Scheduler(eps_stab=-1e-3)


def test_guidance_coefficients_against_closed_form():
    # a_t = 1/t, b_t = 1/t - 1 for the linear path without stabilization
    a, b = guidance_coefficients(Scheduler(eps_stab=0.0), 0.5)
    assert a == pytest.approx(2.0)
    assert b == pytest.approx(1.0)
    # eps-stabilized value at t = 0: b_0 = 1 / eps
    assert guidance_coefficients(Scheduler(eps_stab=1e-3), 0.0)[1] == pytest.approx(1000.0)
    # sigma_1 = 0 annihilates b at t = 1
    assert guidance_coefficients(Scheduler(), 1.0)[1] == 0.0
    with pytest.raises(ValueError):
        guidance_coefficients(Scheduler(eps_stab=0.0), 0.0)


@given(st.floats(0.01, 0.99), st.floats(1e-6, 1e-2))
@settings(max_examples=50, deadline=None)
def test_stabilized_coefficients_limit(t, eps):
    # a_t * t -> 1 and (b_t + 1) * t -> 1 as eps -> 0; both deviations are
    # bounded by eps / t
    a, b = guidance_coefficients(Scheduler(eps_stab=eps), t)
    assert abs(a * t - 1.0) <= eps / t + 1e-12
    assert abs((b + 1.0) * t - 1.0) <= eps / t + 1e-12


def test_geometric_grid_step_count():
    # t_k = 0.01 * 1.1^k reaches 0.5 after ceil(ln 50 / ln 1.1) = 42 steps
    grid = geometric_grid(0.01, 0.5, 0.1)
    assert grid.n_steps == 42
    assert grid.times[0] == 0.01
    assert grid.times[-1] == 0.5


def test_geometric_grid_one_doubling():
    grid = geometric_grid(0.25, 0.5, 1.0)
    assert np.allclose(grid.times, [0.25, 0.5])
    assert grid.n_steps == 1


def test_geometric_grid_guidance_invariant():
    # b_t * dt = eta * (1 - t) exactly on unclamped steps; the max over all
    # steps is attained at the first node
    eta = 0.1
    grid = geometric_grid(0.01, 0.5, eta)
    b = (1.0 - grid.times[:-1]) / grid.times[:-1]
    prods = b * grid.dts
    assert np.allclose(prods[:-1], eta * (1.0 - grid.times[:-2]), atol=1e-14)
    assert prods.max() == pytest.approx(eta * (1.0 - grid.times[0]))
    assert prods.max() <= eta


def test_geometric_grid_domain_errors():
    with pytest.raises(ValueError):
        geometric_grid(0.0, 0.5, 0.1)      # would reintroduce the singularity
    with pytest.raises(ValueError):
        geometric_grid(0.6, 0.5, 0.1)
    with pytest.raises(ValueError):
        geometric_grid(0.01, 0.5, -0.1)


def test_uniform_grid_spacing():
    grid = uniform_grid(0.0, 0.01, 100)
    assert np.allclose(grid.dts, 0.0099)
    grid = uniform_grid(0.0, 0.1, 9)
    assert np.allclose(grid.times, np.arange(10) * 0.1)


def test_uniform_grid_empty_interval():
    with pytest.raises(ValueError):
        uniform_grid(0.5, 0.5, 1)
    with pytest.raises(ValueError):
        uniform_grid(0.0, -0.1, 10)


def test_grid_reproducible():
    g1 = geometric_grid(0.01, 0.5, 0.1)
    g2 = geometric_grid(0.01, 0.5, 0.1)
    assert np.array_equal(g1.times, g2.times)


def test_grid_json_roundtrip():
    grid = hybrid_grid(1e-3, 0.05, 0.5, 0.01, 20)
    back = TimeGrid.from_json(grid.to_json())
    assert np.array_equal(back.times, grid.times)
    assert back.kind == grid.kind
    assert back.delta_min == grid.delta_min
    assert back.t_star == grid.t_star
    obj = json.loads(grid.to_json())
    assert set(obj) == {"kind", "times", "delta_min", "t_star"}


def test_validate_grid_clauses():
    # clause (b) ratio 0.0099 / 0.0199 ~ 0.497 < 0.5 near the terminal: pass
    grid = uniform_grid(0.0, 0.01, 100)
    assert validate_grid(grid, c_delta=0.499, epsilon0=0.1) == []
    # coarse grid with tiny floor: clause (b) fires
    grid = uniform_grid(0.0, 0.001, 10)
    violations = validate_grid(grid, c_delta=0.25, epsilon0=0.3)
    assert any(v.clause == "b" for v in violations)
    # geometric grid stopping at 0.5 passes the noise-floor clause
    grid = geometric_grid(0.01, 0.5, 0.05)
    violations = validate_grid(grid, c_delta=0.25, epsilon0=0.1)
    assert all(v.clause != "c" for v in violations)


def test_validate_grid_preconditions():
    grid = uniform_grid(0.0, 0.01, 10)
    with pytest.raises(ValueError):
        validate_grid(grid, c_delta=0.6, epsilon0=0.1)
    with pytest.raises(ValueError):
        validate_grid(grid, c_delta=0.25, epsilon0=0.0)


def test_hybrid_grid_stitching():
    grid = hybrid_grid(1e-3, 0.05, 0.5, 0.01, 50)
    assert np.sum(grid.times == 0.5) == 1
    assert grid.t_star == 0.5
    assert grid.times[-1] == pytest.approx(0.99)
    assert np.all(np.diff(grid.times) > 0)


def test_grid_rejects_nonincreasing():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 0.1, 0.2]), "uniform", 0.1)
