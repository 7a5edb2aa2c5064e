import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwre.environment import HomogeneousEnvironment, ParameterError, point_mass_law, ssrw_law
from rwre.renorm import (_box_extent, _cell_range, bad_prob_recursion, box_of_cell,
                         c7_closed_form, classify_box0, classify_box_k, concrete_K,
                         make_scale_sequence, middle_frontal_k, verify_conditions, xi_k,
                         xi_sequence_check)

DRIFT = point_mass_law(2, 0.5, [1 / 8, -1 / 8, 0, 0])


@pytest.fixture(scope="module")
def seq():
    return make_scale_sequence(0.5, 1000)


def test_concrete_K_and_first_terms(seq):
    assert concrete_K(0.5) == 1408 and seq.K == 1408
    assert seq.a[0] == 2 and seq.a[1] == 1409**3
    assert seq.alpha[0] == 1409**5
    assert seq.L == 2 and seq.N0 == 16 and seq.N_prime[0] == 8
    for k in range(1, 50):
        assert seq.alpha[k] == (k + 1 + seq.K) ** 5
        assert seq.b[k] == seq.a[k] * (k + 1 + seq.K) ** 2
        assert seq.N[k] == seq.a[k] * seq.N_prime[k]
        assert seq.N_prime[k] == seq.b[k - 1] * seq.N_prime[k - 1]


def test_sequence_validation():
    with pytest.raises(ParameterError):
        make_scale_sequence(1.2, 5)
    with pytest.raises(ParameterError):
        make_scale_sequence(0.5, 10**5)
    with pytest.raises(ParameterError):
        make_scale_sequence(0.5, 5, N0_override=7)


def test_conditions_hold_at_concrete_choice(seq):
    audit = verify_conditions(seq)
    for c in ("C1", "C2", "C3", "C4", "C5"):
        assert audit.conditions[c]["holds"], c
    assert audit.all_hold and not audit.K_overridden


def test_c7_sharp_and_closed_form(seq):
    c7 = verify_conditions(seq).conditions["C7"]
    assert c7["sharp_bound_holds"]
    assert c7["partial_vs_closed_form"] <= 1e-30
    assert c7["sharp_bound_constant"] == pytest.approx(128 * 1.2020569031595942 / 11)
    assert c7["product"] >= c7["infinite_product"]


def test_c7_closed_form_against_long_partial():
    K = 50
    with mpmath.workdps(30):
        prod = mpmath.mpf(1)
        for k in range(1, 200001):
            prod *= 1 - mpmath.mpf(8) / (k + K) ** 2
        # tail beyond the partial product is about exp(-8 / (K + 200000))
        tail = mpmath.exp(-mpmath.mpf(8) / (K + 200000))
        assert abs(prod * tail - c7_closed_form(K)) < 1e-9


def test_degenerate_K_breaks_C5():
    audit = verify_conditions(make_scale_sequence(0.5, 50, K_override=1))
    c5 = audit.conditions["C5"]
    assert not c5["holds"] and c5["first_violation"] == 1
    assert audit.K_overridden


def test_xi_values():
    assert xi_k(0) == 1 and xi_k(1) == Fraction(3, 4)
    prod = Fraction(1)
    for j in range(1, 30):
        prod *= 1 - Fraction(1, (j + 1) ** 2)
        assert xi_k(j) == prod > Fraction(1, 2)
    with pytest.raises(ParameterError):
        xi_k(-1)


def test_xi_sequence_check():
    r = xi_sequence_check(20000)
    assert r["all_above_half"] and r["gap_decreasing"] and r["matches_closed_form"]
    assert 0 < r["final_gap"] < 1e-4


def test_bad_prob_recursion():
    s = make_scale_sequence(0.5, 100)
    probe = bad_prob_recursion(s, 1.0, 2)
    m0 = 24 * probe.series_partial[-1] + 1.0
    r = bad_prob_recursion(s, m0, 2)
    assert r.inf_positive and r.recursion_holds and r.first_failure is None
    assert r.cauchy_after_60 < 1e-12
    assert r.union_monotone_from is not None
    assert not probe.inf_positive
    with pytest.raises(ParameterError):
        bad_prob_recursion(s, 0.0, 2)


def test_box0_drifted_good():
    v = classify_box0(HomogeneousEnvironment(DRIFT.omega_atoms[0]), DRIFT, 4, c2=2.0)
    assert v.good and v.evidence["mode"] == "exact"
    assert v.evidence["inf_front"] > v.constants["front_threshold"]


def test_box0_ssrw_bad():
    law = ssrw_law(2, 0.5)
    v = classify_box0(HomogeneousEnvironment(law.omega_atoms[0]), law, 4)
    assert v.verdict == "bad"
    assert v.constants["time_threshold"] == math.inf


def test_box0_sampled_deterministic():
    env = HomogeneousEnvironment(DRIFT.omega_atoms[0])
    kw = dict(c2=2.0, exact_budget=0, n_walks=30, n_starts=3, seed=4)
    a = classify_box0(env, DRIFT, 4, **kw)
    b = classify_box0(env, DRIFT, 4, **kw)
    assert a.to_dict() == b.to_dict()
    assert a.evidence["mode"] == "sampled" and a.verdict in ("good", "bad", "inconclusive")


def test_middle_frontal_k_geometry():
    star, back = middle_frontal_k(4, 2, [0, 0])
    assert star.lo[0] == 2 and star.hi[0] == 3 and back.hi[0] == 2
    assert star.hi[1] == 63 and star.lo[1] == -63


NK, NPK, NP = 4, 2, 8


def _cells():
    rng = _cell_range(_box_extent([0, 0], NP), NK, NPK)
    return rng, list(itertools.product(*[range(lo, hi + 1) for lo, hi in rng]))


def _map(bad=()):
    _, cells = _cells()
    m = {z: "good" for z in cells}
    for z in bad:
        m[z] = "bad"
    return m


def test_box_k_zero_and_one_bad():
    assert classify_box_k(0, [0, 0], NK, NPK, NP, _map()).good
    rng, cells = _cells()
    assert classify_box_k(0, [0, 0], NK, NPK, NP, _map([cells[len(cells) // 2]])).good


def test_box_k_two_far_bad():
    rng, cells = _cells()
    far = [(rng[0][0], rng[1][0]), (rng[0][1], rng[1][1])]
    assert classify_box_k(0, [0, 0], NK, NPK, NP, _map(far)).verdict == "bad"


def test_box_k_missing_inconclusive():
    m = _map()
    m.pop(next(iter(m)))
    assert classify_box_k(0, [0, 0], NK, NPK, NP, m).verdict == "inconclusive"


@settings(max_examples=30)
@given(st.data())
def test_box_k_monotone(data):
    _, cells = _cells()
    idx = data.draw(st.lists(st.integers(0, len(cells) - 1), max_size=6, unique=True))
    sub = data.draw(st.lists(st.sampled_from(idx), unique=True)) if idx else []
    big = classify_box_k(0, [0, 0], NK, NPK, NP, _map([cells[i] for i in idx]))
    small = classify_box_k(0, [0, 0], NK, NPK, NP, _map([cells[i] for i in sub]))
    if big.good:
        assert small.good


def test_cell_range_brute_force():
    N, Np, Npar = 2, 1, 4
    par = _box_extent([0, 0], Npar)
    rng = _cell_range(par, N, Np)
    hits = set()
    for z1 in range(-20, 21):
        for z2 in range(-300, 301):
            ext = _box_extent(box_of_cell([z1, z2], N, Np), N)
            if all(lo <= phi and plo <= hi for (lo, hi), (plo, phi) in zip(ext, par)):
                hits.add((z1, z2))
    assert min(h[0] for h in hits) == rng[0][0] and max(h[0] for h in hits) == rng[0][1]
    assert min(h[1] for h in hits) == rng[1][0] and max(h[1] for h in hits) == rng[1][1]
    assert len(hits) == (rng[0][1] - rng[0][0] + 1) * (rng[1][1] - rng[1][0] + 1)
