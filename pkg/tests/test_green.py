import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import dense_exit_time, dense_green, gambler_solve
from rwre.environment import (ArrayEnvironment, HomogeneousEnvironment, ParameterError,
                              build_two_point_law, point_mass_law, random_omega, ssrw_law)
from rwre.green import (absorb, exit_probabilities, expected_exit_time, green_operator_apply,
                        green_power_sum, green_row, phat, slab_green_heat_kernel, slab_power_sum,
                        ssrw_exit_time_slab, ssrw_green_ball, ssrw_green_full, ssrw_green_killed)
from rwre.lattice import Direction, Rect, make_explicit, make_slab

UNIFORM2 = np.full(4, 0.25)


def test_single_site_green():
    dom = make_explicit([[0, 0]])
    row = ssrw_green_killed(dom, [0, 0])
    assert row.interior[0] == pytest.approx(1.0)
    assert np.allclose(row.boundary, 0.25) and len(row.boundary) == 4


def test_one_dimensional_interval():
    dom = make_explicit([[-1], [0], [1]])
    row = ssrw_green_killed(dom, [0])
    assert row.at([[0]])[0] == pytest.approx(2.0)
    assert row.at([[1]])[0] == pytest.approx(1.0)
    assert row.boundary.sum() == pytest.approx(1.0)


def test_boundary_mass_and_dense_oracle(rng):
    dom = make_explicit(Rect([-2, -1], [2, 2]).enumerate())
    omega = random_omega(2, 0.8, dom.n_sites, rng)
    row = green_row(omega, dom, [0, 0])
    assert row.boundary.sum() == pytest.approx(1.0, abs=1e-12)
    ref = dense_green(dom.sites.tolist(), omega.tolist(), (0, 0))
    for s, v in zip(dom.sites.tolist(), row.interior):
        assert v == pytest.approx(ref[tuple(s)], rel=1e-12)
    for s, v in zip(dom.boundary.tolist(), row.boundary):
        assert v == pytest.approx(ref[tuple(s)], rel=1e-12)


def test_operator_constant_functions(rng):
    dom = make_explicit(Rect([-3, -3], [3, 3]).enumerate())
    omega = random_omega(2, 0.6, dom.n_sites, rng)
    t = expected_exit_time(omega, dom, [1, 0])
    assert green_operator_apply(omega, dom, 1.0, [1, 0]) == pytest.approx(t, rel=1e-12)
    assert green_operator_apply(omega, dom, 0.0, [1, 0]) == 0.0
    assert t == pytest.approx(dense_exit_time(dom.sites.tolist(), omega.tolist(), (1, 0)), rel=1e-12)


def test_optional_stopping_identity(rng):
    dom = make_explicit(Rect([-3, -2], [4, 2]).enumerate())
    omega = random_omega(2, 0.7, dom.n_sites, rng)
    row = green_row(omega, dom, [0, 1])
    lhs = float(row.boundary @ dom.boundary[:, 0])
    drift = omega[:, 0] - omega[:, 1]
    assert lhs == pytest.approx(float(row.interior @ drift), abs=1e-12)


def test_phat_ssrw_is_half():
    r = phat(HomogeneousEnvironment(UNIFORM2), [0, 0], 6)
    assert r.direct == pytest.approx(0.5, abs=1e-12)
    assert r.green_form == pytest.approx(0.5, abs=1e-12)


def test_phat_homogeneous_matches_gambler():
    law = point_mass_law(2, 0.5, [1 / 8, -1 / 8, 0, 0])
    env = HomogeneousEnvironment(law.omega_atoms[0])
    L = 7
    r = phat(env, [0, 0], L, cap=3)
    # projection on e1 is a lazy walk: p = P(+e1 | move along e1)
    p = law.omega_atoms[0][0] / (law.omega_atoms[0][0] + law.omega_atoms[0][1])
    assert r.direct == pytest.approx(1 - gambler_solve(L, L, p), abs=1e-12)
    assert r.discrepancy < 1e-12


@given(st.integers(0, 2**31), st.integers(2, 6))
def test_phat_identity_random(seed, L):
    law = build_two_point_law(2, 0.3, 0.06, transverse_noise=0.05, seed=seed)
    r = phat(law, [0, 0], L, env_id=seed % 97)
    assert r.discrepancy < 1e-12


def test_phat_absorbing_brackets_periodic():
    law = build_two_point_law(2, 0.3, 0.06, seed=5)
    r = phat(law, [0, 0], 4, transverse="absorbing", leakage_tol=1e-8)
    assert r.lateral <= 1e-8 or r.flagged
    assert r.lower <= r.upper


def test_phat_rejects_bad_args():
    with pytest.raises(ParameterError):
        phat(ssrw_law(2), [0, 0], 0)
    with pytest.raises(ParameterError):
        phat(ssrw_law(2), [0, 0], 3, transverse="mirror")


def test_transverse_symmetry_of_ssrw_row():
    dom = make_slab(Direction(1, 1), 4, [0, 0, 0], 4, periodic=False)
    row = ssrw_green_killed(dom, [0, 0, 0])
    a = row.at([[1, 2, -1], [1, -2, 1], [1, 1, 2], [1, -1, -2]])
    assert np.allclose(a, a[0], rtol=1e-10)


@pytest.mark.parametrize("d,L", [(2, 3), (2, 8), (3, 4)])
def test_ssrw_slab_exit_time(d, L):
    assert ssrw_exit_time_slab(d, L) == d * L * (L + 1)
    dom = make_slab(Direction(1, 1), L, [0] * d, 2, periodic=True)
    assert expected_exit_time(HomogeneousEnvironment(np.full(2 * d, 1 / (2 * d))), dom,
                              [0] * d) == pytest.approx(d * L * (L + 1), rel=1e-10)


def test_heat_kernel_matches_direct_slab():
    L = 4
    pts = np.array([[0, 0, 0], [1, 1, 0], [-2, 0, 3]])
    hk = slab_green_heat_kernel(3, L, pts)
    dom = make_slab(Direction(1, 1), L, [0, 0, 0], 40, periodic=False)
    row = ssrw_green_killed(dom, [0, 0, 0])
    assert np.allclose(hk, row.at(pts), rtol=1e-5)


def test_power_sum_exponent_and_monotone():
    vals = [slab_power_sum(3, L, 0.5).value for L in (4, 8)]
    assert vals[1] > vals[0]
    slope = math.log(vals[1] / vals[0]) / math.log(2)
    assert slope < 2.0 + 0.3


def test_green_power_sum_single_site():
    assert green_power_sum(make_explicit([[0, 0, 0]]), 0.5) == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        green_power_sum(make_explicit([[0, 0]]), 1.0)


def test_ball_green_matches_sparse_solve():
    R = 3
    bg = ssrw_green_ball(3, R)
    dom = make_explicit(Rect([-R] * 3, [R] * 3).enumerate())
    row = ssrw_green_killed(dom, [0, 0, 0])
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, -1, 3]])
    assert np.allclose(bg.at(pts), row.at(pts), rtol=1e-10)


def test_full_green_d3():
    pts = [[0, 0, 0], [1, 0, 0], [0, -1, 0], [0, 0, 1]]
    full = ssrw_green_full(3, pts, 24)
    g0 = full.values[0]
    assert g0 == pytest.approx(1.516386, abs=5e-3)  # Watson's constant
    J = full.values[1:] - g0
    assert np.all(J < 0)
    assert np.allclose(J, -1.0, atol=3 * full.error.max() + 1e-3)
    with pytest.raises(ParameterError):
        ssrw_green_full(2, pts, 10)


def test_absorb_multi_column(rng):
    dom = make_explicit(Rect([0, 0], [2, 2]).enumerate())
    omega = random_omega(2, 0.9, dom.n_sites, rng)
    m = dom.boundary.shape[0]
    H = absorb(omega, dom, np.eye(m))
    assert np.allclose(H.sum(axis=1), 1.0)
    ep = exit_probabilities(ArrayEnvironment(dom, omega), dom, [1, 1])
    assert sum(ep.values()) == pytest.approx(1.0)
