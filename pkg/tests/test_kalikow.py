import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import enumerate_annealed_green
from rwre.environment import (ParameterError, build_two_point_law, kappa, law_lambda,
                              point_mass_law, ssrw_law)
from rwre.green import green_row
from rwre.kalikow import (drift_bound_report, kalikow_drift, kalikow_environment, kalikow_tables,
                          kalikow_witness, truncation_iterates, verify_kalikow_corollary,
                          verify_kalikow_formula)
from rwre.lattice import CapacityError, Rect, make_explicit, random_connected_sites

QLD = build_two_point_law(2, 0.2, 0.04, seed=3)
NOISY = build_two_point_law(2, 0.2, 0.04, transverse_noise=0.05, seed=3)
BOX3 = make_explicit(Rect([-1, -1], [1, 1]).enumerate())


def test_single_site_kalikow_is_mean_vector():
    dom = make_explicit([[0, 0]])
    kal = kalikow_environment(QLD, dom, [0, 0])
    assert np.allclose(kal.vectors[0], QLD.probs @ QLD.omega_atoms)
    assert kal.expected_green[0] == pytest.approx(1.0)


def test_point_mass_law_reproduces_environment():
    law = point_mass_law(2, 0.5, [1 / 8, -1 / 8, 1 / 16, -1 / 16])
    kal = kalikow_environment(law, BOX3, [0, 0])
    assert np.allclose(kal.vectors, law.omega_atoms[0], atol=1e-15)


@pytest.mark.parametrize("law", [QLD, NOISY])
def test_formula_and_corollary_on_box(law):
    f = verify_kalikow_formula(law, BOX3, [0, 0])
    c = verify_kalikow_corollary(law, BOX3, [0, 0])
    assert f["max_abs_error"] < 1e-12
    assert c["time_error"] < 1e-12 and c["exit_law_error"] < 1e-12


def test_path_domain_formula():
    dom = make_explicit([[i, 0] for i in range(-2, 4)])
    for x in ([0, 0], [3, 0], [-2, 0]):
        assert verify_kalikow_formula(NOISY, dom, x)["max_abs_error"] < 1e-12


def test_enumeration_oracle_tiny_domain():
    sites = [(0, 0), (1, 0), (0, 1), (1, 1)]
    dom = make_explicit(sites)
    kal = kalikow_environment(NOISY, dom, [0, 0])
    ref = enumerate_annealed_green(NOISY.omega_atoms.tolist(), NOISY.probs.tolist(),
                                   dom.sites.tolist(), (0, 0))
    pts = [tuple(p) for p in np.vstack([dom.sites, dom.boundary]).tolist()]
    assert np.allclose(kal.expected_green, [ref[p] for p in pts], atol=1e-14)
    row = green_row(kal.vectors, dom, [0, 0])
    assert np.allclose(row.values, kal.expected_green, atol=1e-12)


def test_mc_mode_agrees_with_exact():
    dom = make_explicit([[0, 0], [1, 0], [0, 1]])
    ex = kalikow_environment(NOISY, dom, [0, 0])
    mc = kalikow_environment(NOISY, dom, [0, 0], mode="mc", n_samples=20000, seed=1)
    se = mc.provenance["stderr"]
    assert np.all(np.abs(mc.vectors - ex.vectors) <= 4 * se + 1e-12)


def test_direct_and_f_formula_drifts_agree():
    dom = make_explicit([[0, 0], [1, 0], [1, 1], [2, 1], [0, -1]])
    for y in dom.sites.tolist():
        a = kalikow_drift(NOISY, dom, [0, 0], y, "direct")
        b = kalikow_drift(NOISY, dom, [0, 0], y, "f_formula")
        assert np.allclose(a, b, atol=1e-12)
    with pytest.raises(ParameterError):
        kalikow_drift(NOISY, dom, [0, 0], [0, 0], "other")


def test_truncation_is_monotone_and_converges():
    kal = kalikow_environment(NOISY, BOX3, [0, 0])
    it = truncation_iterates(kal, 400)
    assert np.all(np.diff(it, axis=0) >= -1e-15)
    assert np.allclose(it[-1], kal.expected_green, atol=1e-10)


def test_kalikow_vectors_are_elliptic_probabilities():
    kal = kalikow_environment(NOISY, BOX3, [1, 0])
    assert np.allclose(kal.vectors.sum(axis=1), 1.0)
    assert kal.vectors.min() >= kappa(2) - 1e-15


@settings(max_examples=10)
@given(st.integers(0, 2**31))
def test_drift_bound_on_random_domains(seed):
    rng = np.random.default_rng(seed)
    doms = [make_explicit(random_connected_sites(2, int(rng.integers(1, 9)), rng))
            for _ in range(3)]
    rep = drift_bound_report(QLD, doms)
    assert rep.holds and rep.max_deviation <= rep.bound + 1e-12


def test_drift_bound_requires_qld():
    with pytest.raises(ParameterError):
        drift_bound_report(ssrw_law(2), [BOX3])


def test_witness_below_lambda():
    doms = [BOX3, make_explicit([[0, 0], [1, 0]])]
    w = kalikow_witness(QLD, doms)
    assert w["witness"] >= w["lambda_minus_bound"] - 1e-12
    assert w["sampled_only"] and w["lambda"] == pytest.approx(law_lambda(QLD))


def test_enumeration_cap():
    with pytest.raises(CapacityError):
        kalikow_tables(QLD, BOX3, cap=100)


def test_disconnected_domain_rejected():
    with pytest.raises((ParameterError, ValueError)):
        kalikow_tables(QLD, make_explicit([[0, 0], [5, 5]]))
