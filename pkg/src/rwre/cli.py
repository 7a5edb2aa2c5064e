"""Command-line experiment runner.

Every suite reads an optional JSON config (validated against the versioned
schema in ``rwre/schema``), fills in recorded defaults, runs, and writes
``<suite>.csv`` and ``<suite>.json`` into ``--out``. Identical configs give
byte-identical files whatever ``--threads`` is.

Exit codes: 0 all hard assertions pass, 1 an assertion failed, 2 config
error, 3 budget error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .environment import (ArrayEnvironment, EnvironmentLaw, HomogeneousEnvironment,
                          ParameterError, QuenchedEnvironment, build_two_point_law,
                          check_condition, law_lambda, random_omega)
from .lattice import CapacityError, Direction, DomainError, make_explicit, make_slab

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3

SUITES = ("velocity", "kalikow-verify", "phat-identity", "gambler", "polynomial-probe", "tgamma",
          "expansion", "renorm-audit", "box-classify", "green-scaling")

DEFAULT_LAWS = {
    "velocity": {"d": 2, "epsilon": 0.2, "lambda": 0.04, "kind": "switch"},
    "kalikow-verify": {"d": 2, "epsilon": 0.2, "lambda": 0.04, "kind": "switch"},
    "phat-identity": {"d": 2, "epsilon": 0.2, "lambda": 0.04, "kind": "switch"},
    "polynomial-probe": {"d": 2, "epsilon": 0.5, "lambda": 0.125, "kind": "switch"},
    "tgamma": {"d": 2, "epsilon": 0.5, "lambda": 0.1, "kind": "switch"},
    "expansion": {"d": 3, "epsilon": 0.2, "lambda": 0.02, "kind": "flip",
                  "transverse_noise": 0.05},
    "box-classify": {"d": 2, "epsilon": 0.5, "lambda": 0.1, "kind": "switch"},
}

DEFAULT_PARAMS = {
    "velocity": {"n_walks": 2000, "n_steps": 2000, "hitting_levels": [], "epsilon_grid": None,
                 "lambda_rule": {"factor": 1.0, "power": 2.0}, "step_cap": 10**6,
                 "chunk": 4096},
    "kalikow-verify": {"box_half_width": 1, "x": None, "mode": "exact", "enumeration_cap": 2**20,
                       "n_samples": 20000, "n_random_domains": 20, "max_domain_size": 10,
                       "tolerance": 1e-9},
    "phat-identity": {"L": 10, "n_envs": 50, "cap": None, "environments": "band",
                      "tolerance": 1e-9},
    "gambler": {"max_a": 20, "max_b": 20, "p_grid": [round(0.1 * k, 1) for k in range(1, 10)],
                "tolerance_solve": 1e-12, "tolerance_forms": 1e-14},
    "polynomial-probe": {"M": 8, "K": 2.0, "n_walks": 2000, "n_starts": None, "level": 0.95,
                         "step_cap": 10**6, "expect": None},
    "tgamma": {"gamma": 0.5, "M_list": [4, 8, 12, 16], "n_walks": 4000, "cap_factor": 10,
               "level": 0.95, "step_cap": 10**6, "expect": None},
    "expansion": {"R": 50, "epsilon_grid": [], "lambda_rule": {"factor": 1.0, "power": 2.0},
                  "n_walks": 2000, "n_steps": 2000, "d2_tolerance": 1e-6,
                  "row_sum_tolerance": 1e-14},
    "renorm-audit": {"epsilon": 0.5, "k_max": 1000, "K_override": None, "theta": 0.5,
                     "N0_override": None, "xi_k_max": 10**6, "m0": None, "recursion_k_max": 100,
                     "recursion_d": 2, "assert_conditions": ["C1", "C2", "C3", "C4", "C5"],
                     "dump_k": 10},
    "box-classify": {"N0": 4, "n_envs": 4, "c2": 2.0, "c4": 1.0, "delta": 0.1, "lambda_power": 2,
                     "epsilon": None, "exact_budget": 2 * 10**5, "n_walks": 200, "n_starts": 8,
                     "level": 0.95, "expect": None, "level_k": None},
    "green-scaling": {
        "exit_time": {"d": 2, "L_list": [8, 16, 32], "tolerance": 0.05},
        "power_sums": [
            {"d": 3, "alpha": 0.5, "L_list": [8, 16, 32], "rtol": 1e-4, "max_exponent": None,
             "max_ratio": None},
            {"d": 5, "alpha": 0.8, "L_list": [16, 32], "rtol": 1e-3, "max_exponent": None,
             "max_ratio": 1.3},
        ],
        "random_instances": {"n": 100, "max_size": 10, "epsilon": 0.5, "tolerance": 1e-12},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class Assertion:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class SuiteResult:
    rows: list = field(default_factory=list)
    assertions: list = field(default_factory=list)
    payload: dict = field(default_factory=dict)
    labels: list = field(default_factory=list)

    def row(self, name: str, mean, stderr=0.0, n: int = 0) -> None:
        self.rows.append((name, float(mean), float(stderr), int(n)))

    def check(self, name: str, passed: bool, **detail) -> None:
        self.assertions.append(Assertion(name, bool(passed), detail))


# ---------------------------------------------------------------------------
# configuration


def load_schema() -> dict:
    text = resources.files("rwre").joinpath(f"schema/config.v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def _merge(defaults, given):
    if isinstance(defaults, dict) and isinstance(given, dict):
        out = copy.deepcopy(defaults)
        for k, v in given.items():
            out[k] = _merge(defaults.get(k), v) if k in defaults else copy.deepcopy(v)
        return out
    return copy.deepcopy(given)


def resolve_config(suite: str, doc: dict | None, seed: int | None = None) -> dict:
    """Validate ``doc`` and fill every default explicitly.

    Raises
    ------
    ConfigError
        With the failing field path on schema violations.
    """
    doc = {"schema_version": SCHEMA_VERSION} if doc is None else copy.deepcopy(doc)
    if doc.get("experiment", suite) != suite:
        raise ConfigError(f"config is for experiment {doc['experiment']!r}, not {suite!r}")
    doc["experiment"] = suite
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {e.message}")
    out = {"schema_version": SCHEMA_VERSION, "experiment": suite,
           "seed": int(doc.get("seed", 0)) if seed is None else int(seed)}
    if suite in DEFAULT_LAWS:
        out["law"] = _merge(DEFAULT_LAWS[suite], doc.get("law", {})) if "support" not in doc.get(
            "law", {}) else copy.deepcopy(doc["law"])
        if "support" in out["law"]:
            out["law"].setdefault("master_seed", out["seed"])
        else:
            out["law"].setdefault("kind", "switch")
            out["law"].setdefault("transverse_noise", 0.0)
            out["law"].setdefault("master_seed", out["seed"])
    elif "law" in doc:
        raise ConfigError(f"config field law: suite {suite!r} takes no law")
    out["params"] = _merge(DEFAULT_PARAMS[suite], doc.get("params", {}))
    errors = list(validator.iter_errors(out))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {e.message}")
    return out


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_law(section: dict, epsilon: float | None = None, lam: float | None = None) -> EnvironmentLaw:
    """Law from a config section; ``epsilon``/``lam`` override the two-point form."""
    if "support" in section:
        sup = section["support"]
        return EnvironmentLaw(section["d"], section["epsilon"], np.array([s["xi"] for s in sup]),
                              np.array([s["prob"] for s in sup]), section.get("master_seed", 0))
    return build_two_point_law(section["d"], section["epsilon"] if epsilon is None else epsilon,
                               section["lambda"] if lam is None else lam,
                               section.get("transverse_noise", 0.0), section.get("master_seed", 0),
                               section.get("kind", "switch"))


# ---------------------------------------------------------------------------
# suites


def _velocity(cfg, threads) -> SuiteResult:
    from .walker import estimate_hitting_ratios, estimate_velocity

    p, res = cfg["params"], SuiteResult()
    res.labels.append("empirical consistency check at desk scale, not a proof of the asymptotic "
                      "statement")
    grid = p["epsilon_grid"]
    rule = p["lambda_rule"]
    laws = ([build_law(cfg["law"])] if not grid else
            [build_law(cfg["law"], e, rule["factor"] * e ** rule["power"]) for e in grid])
    table = []
    for i, law in enumerate(laws):
        eps, d, lam = law.epsilon, law.d, law_lambda(law)
        v = estimate_velocity(law, p["n_steps"], p["n_walks"], stream_offset=i * p["n_walks"],
                              seed=cfg["seed"], threads=threads, chunk=p["chunk"])
        tag = f"eps={eps!r}"
        res.row(f"lambda[{tag}]", lam)
        res.row(f"v_hat[{tag}]", v.mean, v.stderr, v.n)
        resid = abs(v.mean - lam)
        res.check(f"drift_ceiling[{tag}]", resid <= eps / (2 * d) + 3 * v.stderr,
                  residual=resid, bound=eps / (2 * d), stderr=v.stderr)
        qld = check_condition(law, "QLD")
        if d == 2 and qld.holds:
            res.check(f"empirical_consistency_qld[{tag}]", resid <= eps**2 / d + 3 * v.stderr,
                      residual=resid, bound=eps**2 / d, stderr=v.stderr)
        row = {"epsilon": eps, "lambda": lam, "v_hat": v.mean, "stderr": v.stderr,
               "qld": qld.holds, "hitting": []}
        if p["hitting_levels"]:
            hits = estimate_hitting_ratios(law, p["hitting_levels"], p["n_walks"], p["step_cap"],
                                           stream_offset=(len(laws) + i) * p["n_walks"],
                                           seed=cfg["seed"], threads=threads, chunk=p["chunk"])
            for h in hits:
                if h.estimate is None:
                    res.check(f"lln_hitting[{tag},n={h.n}]", False, reason="no walk reached")
                    continue
                res.row(f"T_n_over_n[{tag},n={h.n}]", h.estimate.mean, h.estimate.stderr,
                        h.estimate.n)
                inv = 1.0 / v.mean if v.mean > 0 else math.inf
                sig = math.hypot(h.estimate.stderr, v.stderr / v.mean**2 if v.mean > 0 else math.inf)
                ok = h.n_capped == 0 and abs(h.estimate.mean - inv) <= 4 * sig
                res.check(f"lln_hitting[{tag},n={h.n}]", ok, mean=h.estimate.mean,
                          inverse_velocity=inv, joint_sigma=sig, capped=h.n_capped)
                row["hitting"].append({"n": h.n, "mean": h.estimate.mean,
                                       "stderr": h.estimate.stderr, "capped": h.n_capped})
        table.append(row)
    res.payload["table"] = table
    return res


def _square(d: int, r: int) -> np.ndarray:
    axes = [np.arange(-r, r + 1)] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def _kalikow(cfg, threads) -> SuiteResult:
    from .kalikow import drift_bound_report, verify_kalikow_corollary, verify_kalikow_formula
    from .kalikow import kalikow_tables
    from .lattice import random_connected_sites

    p, res = cfg["params"], SuiteResult()
    law = build_law(cfg["law"])
    d = law.d
    dom = make_explicit(_square(d, p["box_half_width"]))
    x = np.zeros(d, dtype=np.int64) if p["x"] is None else np.asarray(p["x"], dtype=np.int64)
    tab = kalikow_tables(law, dom, p["mode"], p["enumeration_cap"], p["n_samples"], cfg["seed"])
    f = verify_kalikow_formula(law, dom, x, tables=tab)
    c = verify_kalikow_corollary(law, dom, x, tables=tab)
    tol = p["tolerance"]
    res.row("formula_max_abs_error", f["max_abs_error"], 0.0, f["n_points"])
    res.row("corollary_time_error", c["time_error"])
    res.row("corollary_exit_law_tv", c["exit_law_tv"])
    res.row("expected_exit_time", c["expected_exit_time"])
    if p["mode"] == "exact":
        res.check("kalikow_formula", f["max_abs_error"] < tol, **f)
        res.check("kalikow_corollary_time", c["time_error"] < tol, error=c["time_error"])
        res.check("kalikow_corollary_exit_law", c["exit_law_tv"] < tol, tv=c["exit_law_tv"])
    res.payload.update({"formula": f, "corollary": c, "configurations": tab.count})
    if p["n_random_domains"]:
        rng = np.random.default_rng(cfg["seed"])
        doms = [make_explicit(random_connected_sites(d, int(rng.integers(1, p["max_domain_size"] + 1)),
                                                     rng))
                for _ in range(p["n_random_domains"])]
        if check_condition(law, "QLD").holds:
            rep = drift_bound_report(law, doms, p["enumeration_cap"])
            res.row("drift_bound_max_deviation", rep.max_deviation, 0.0, rep.n_triples)
            res.check("drift_bound", rep.holds, max_deviation=rep.max_deviation, bound=rep.bound)
            res.payload["drift_bound"] = {k: getattr(rep, k) for k in rep.__dataclass_fields__}
        else:
            res.payload["drift_bound"] = "skipped: law does not satisfy the quadratic drift condition"
    return res


def _phat(cfg, threads) -> SuiteResult:
    from .green import phat, symmetric_slab

    p, res = cfg["params"], SuiteResult()
    law = build_law(cfg["law"])
    d, L = law.d, p["L"]
    cap = 2 * L if p["cap"] is None else p["cap"]
    x = np.zeros(d, dtype=np.int64)
    vals, disc = [], []
    for k in range(p["n_envs"]):
        if p["environments"] == "law":
            env = QuenchedEnvironment(law, k)
        else:
            dom = symmetric_slab(x, L, cap, periodic=True)
            rng = np.random.default_rng([cfg["seed"], k])
            env = ArrayEnvironment(dom, random_omega(d, law.epsilon, dom.n_sites, rng))
        r = phat(env, x, L, cap=cap, transverse="periodic")
        vals.append(r.direct)
        disc.append(r.discrepancy)
    worst = max(disc)
    res.row("phat_mean", float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
            if len(vals) > 1 else 0.0, len(vals))
    res.row("identity_max_discrepancy", worst, 0.0, len(disc))
    res.check("phat_identity", worst < p["tolerance"], max_discrepancy=worst)
    res.payload.update({"phat": vals, "discrepancy": disc, "cap": cap})
    return res


def _gambler(cfg, threads) -> SuiteResult:
    from .ballistic import gambler_exit_left, gambler_exit_left_alt, gambler_exit_left_solve

    p, res = cfg["params"], SuiteResult()
    e_solve = e_forms = 0.0
    n = 0
    for pr in p["p_grid"]:
        for a in range(1, p["max_a"] + 1):
            for b in range(1, p["max_b"] + 1):
                c = gambler_exit_left(a, b, pr)
                e_solve = max(e_solve, abs(c - gambler_exit_left_solve(a, b, pr)))
                e_forms = max(e_forms, abs(c - gambler_exit_left_alt(a, b, pr)))
                n += 1
    res.row("closed_form_vs_solve", e_solve, 0.0, n)
    res.row("printed_forms", e_forms, 0.0, n)
    res.check("gambler_solve", e_solve < p["tolerance_solve"], max_error=e_solve)
    res.check("gambler_forms", e_forms < p["tolerance_forms"], max_error=e_forms)
    return res


def _probe(cfg, threads) -> SuiteResult:
    from .ballistic import polynomial_condition_probe

    p, res = cfg["params"], SuiteResult()
    law = build_law(cfg["law"])
    rep = polynomial_condition_probe(law, p["M"], p["K"], p["n_walks"], p["n_starts"],
                                     cfg["seed"], p["level"], p["step_cap"], threads)
    res.row("sup_non_frontal", rep.sup_estimate, 0.0, rep.n_walks * rep.n_starts)
    res.row("sup_upper", rep.sup_upper)
    res.row("threshold", rep.threshold)
    res.payload["report"] = rep.to_dict()
    res.labels.append(f"verdict: {rep.verdict}; sampled coverage {rep.coverage:.3g} of B*_M")
    if p["expect"] is not None:
        res.check("expected_verdict", rep.verdict == p["expect"], verdict=rep.verdict)
    return res


def _tgamma(cfg, threads) -> SuiteResult:
    from .ballistic import t_gamma_probe

    p, res = cfg["params"], SuiteResult()
    law = build_law(cfg["law"])
    rep = t_gamma_probe(law, p["gamma"], p["M_list"], p["n_walks"], cfg["seed"], p["level"],
                        p["cap_factor"], p["step_cap"], threads)
    for M, pr, k in zip(rep.M, rep.probabilities, rep.counts):
        res.row(f"back_exit[M={M}]", pr, math.sqrt(pr * (1 - pr) / p["n_walks"]), p["n_walks"])
    res.row("slope", rep.slope, rep.slope_stderr, rep.n_fit)
    res.payload["report"] = {k: getattr(rep, k) for k in rep.__dataclass_fields__}
    res.labels.append(f"verdict: {rep.verdict}; {rep.note}")
    if p["expect"] is not None:
        res.check("expected_verdict", rep.verdict == p["expect"], verdict=rep.verdict)
    return res


def _expansion(cfg, threads) -> SuiteResult:
    from .expansion import expansion_terms, expansion_vs_simulation

    p, res = cfg["params"], SuiteResult()
    law = build_law(cfg["law"])
    rep = expansion_terms(law, p["R"])
    d2 = float(np.max(np.abs(rep.d2)))
    res.row("C_row_sum_max", rep.C_row_sum_max)
    res.row("J_mean", float(np.mean(rep.J)), float(np.max(rep.J_error)), len(rep.J))
    res.row("d2_max_abs", d2)
    res.row("d1_e1", float(rep.d1[0]))
    res.check("C_rows_sum_to_zero", rep.C_row_sum_max < p["row_sum_tolerance"],
              value=rep.C_row_sum_max)
    res.check("C_symmetric", rep.C_asymmetry < p["row_sum_tolerance"], value=rep.C_asymmetry)
    res.check("J_isotropic", rep.J_isotropic, anisotropy=rep.J_anisotropy,
              error_bar=float(np.max(rep.J_error)))
    res.check("d2_vanishes", d2 < p["d2_tolerance"], value=d2)
    res.check("d2_within_certificate", d2 <= rep.d2_bound + 1e-15, value=d2, bound=rep.d2_bound)
    res.check("lambda_identity", rep.lambda_identity_error <= 1e-15,
              error=rep.lambda_identity_error)
    out = rep.to_dict()
    if p["epsilon_grid"]:
        rule = p["lambda_rule"]

        def family(e):
            return build_law(cfg["law"], e, rule["factor"] * e ** rule["power"])

        sim = expansion_vs_simulation(family, p["epsilon_grid"], p["n_walks"], p["n_steps"],
                                      cfg["seed"], threads)
        for r in sim.grid:
            res.row(f"v_hat[eps={r.epsilon!r}]", r.velocity.mean, r.velocity.stderr, r.velocity.n)
            res.check(f"drift_ceiling[eps={r.epsilon!r}]", r.within_ceiling,
                      residual=r.residual, stderr=r.velocity.stderr)
        out["grid"] = [r.to_dict() for r in sim.grid]
        out["fit_exponent"], out["fit_verdict"] = sim.fit_exponent, sim.fit_verdict
        out["fit_points"] = sim.fit_points
    res.payload["report"] = out
    return res


def _renorm(cfg, threads) -> SuiteResult:
    from .renorm import bad_prob_recursion, make_scale_sequence, verify_conditions, xi_sequence_check

    p, res = cfg["params"], SuiteResult()
    seq = make_scale_sequence(p["epsilon"], p["k_max"], p["K_override"], p["theta"],
                              p["N0_override"])
    if seq.K_overridden:
        res.labels.append(f"K overridden to {seq.K} (desk scale); not the concrete choice")
    audit = verify_conditions(seq)
    for name, v in audit.conditions.items():
        res.row(f"holds[{name}]", 1.0 if v["holds"] else 0.0)
        if name in p["assert_conditions"]:
            res.check(name, v["holds"], **{k: w for k, w in v.items() if k != "holds"})
    res.row("K", seq.K)
    res.row("c_lower_star", audit.c_lower_star)
    res.row("c_upper_star", audit.c_upper_star)
    res.row("C7_product", audit.conditions["C7"]["product"])
    res.check("C7_closed_form", audit.conditions["C7"]["partial_vs_closed_form"] < 1e-12,
              difference=audit.conditions["C7"]["partial_vs_closed_form"])
    payload = {"audit": audit.to_dict(), "K": seq.K, "L": seq.L, "N0": seq.N0,
               "alpha0": seq.alpha[0],
               "sequence_head": seq.to_rows()[: p["dump_k"] + 1]}
    if p["xi_k_max"]:
        xs = xi_sequence_check(p["xi_k_max"])
        res.check("Xi_above_half", xs["all_above_half"] and xs["matches_closed_form"], **xs)
        res.check("Xi_gap_monotone", xs["gap_decreasing"], final_gap=xs["final_gap"])
        payload["xi"] = xs
    if p["m0"] is not None:
        rseq = make_scale_sequence(p["epsilon"], p["recursion_k_max"], p["K_override"],
                                   p["theta"], p["N0_override"])
        rec = bad_prob_recursion(rseq, p["m0"], p["recursion_d"])
        res.check("bad_prob_recursion", rec.recursion_holds, first_failure=rec.first_failure)
        res.row("inf_m", rec.inf_m)
        payload["recursion"] = {k: v for k, v in rec.to_dict().items()
                                if k not in ("m", "log_bounds", "series_partial", "union_term")}
    res.payload.update(payload)
    return res


def _box(cfg, threads) -> SuiteResult:
    from .renorm import classify_box0, classify_box_k

    p, res = cfg["params"], SuiteResult()
    law = build_law(cfg["law"])
    verdicts = []
    for k in range(p["n_envs"]):
        env = QuenchedEnvironment(law, k) if not law.is_deterministic else \
            HomogeneousEnvironment(law.omega_atoms[0])
        v = classify_box0(env, law, p["N0"], None, p["epsilon"], p["delta"], p["c2"], p["c4"],
                          p["lambda_power"], p["exact_budget"], p["n_walks"], p["n_starts"],
                          cfg["seed"] + k, p["level"], box_id=(k,))
        verdicts.append(v.to_dict())
    good = sum(v["verdict"] == "good" for v in verdicts)
    res.row("good_fraction", good / len(verdicts), 0.0, len(verdicts))
    res.payload["level0"] = verdicts
    if p["expect"] is not None:
        res.check("expected_level0", all(v["verdict"] == p["expect"] for v in verdicts),
                  verdicts=[v["verdict"] for v in verdicts])
    lk = p["level_k"]
    if lk is not None:
        vmap = {tuple(e["z"]): e["verdict"] for e in lk.get("verdicts", [])}
        default = lk.get("default_verdict")
        if default is not None:
            from .renorm import _box_extent, _cell_range

            rng = _cell_range(_box_extent(lk["parent_center"], lk["N_parent"]), lk["N_k"],
                              lk["N_prime_k"])
            total = math.prod(hi - lo + 1 for lo, hi in rng)
            if total > 10**6:
                raise CapacityError("level-k window has more than 10**6 sub-boxes")
            grids = np.meshgrid(*[np.arange(lo, hi + 1) for lo, hi in rng], indexing="ij")
            for z in np.stack(grids, axis=-1).reshape(-1, len(rng)).tolist():
                vmap.setdefault(tuple(z), default)
        bv = classify_box_k(0, lk["parent_center"], lk["N_k"], lk["N_prime_k"], lk["N_parent"],
                            vmap)
        res.payload["level_k"] = bv.to_dict()
        res.row("level_k_good", 1.0 if bv.good else 0.0)
        if lk.get("expect") is not None:
            res.check("expected_level_k", bv.verdict == lk["expect"], verdict=bv.verdict)
    return res


def _green(cfg, threads) -> SuiteResult:
    from .green import (expected_exit_time, green_row, kernel_matrices, slab_power_sum,
                        ssrw_exit_time_slab)
    from .environment import omega_on
    from .lattice import random_connected_sites

    p, res = cfg["params"], SuiteResult()
    et = p["exit_time"]
    d = et["d"]
    ratios = []
    for L in et["L_list"]:
        slab = make_slab(Direction(1, 1), L, np.zeros(d, dtype=np.int64), 1, periodic=True)
        t = expected_exit_time(HomogeneousEnvironment(np.full(2 * d, 1 / (2 * d))), slab,
                               np.zeros(d, dtype=np.int64))
        res.row(f"exit_time_over_L2[L={L}]", t / L**2)
        res.check(f"exit_time_oracle[L={L}]", abs(t - ssrw_exit_time_slab(d, L)) < 1e-8 * t,
                  solve=t, oracle=ssrw_exit_time_slab(d, L))
        ratios.append(t / L**2)
    mean = float(np.mean(ratios))
    spread = max(abs(r - mean) / mean for r in ratios)
    res.check("exit_time_scaling", spread <= et["tolerance"], ratios=ratios, spread=spread)
    sums = []
    for ps in p["power_sums"]:
        vals = [slab_power_sum(ps["d"], L, ps["alpha"], rtol=ps.get("rtol", 1e-4)) for L in
                ps["L_list"]]
        tag = f"d={ps['d']},alpha={ps['alpha']!r}"
        for L, v in zip(ps["L_list"], vals):
            res.row(f"power_sum[{tag},L={L}]", v.value, v.tail_estimate, v.n_orbits)
        x = np.log(ps["L_list"])
        y = np.log([v.value for v in vals])
        slope = float(np.polyfit(x, y, 1)[0])
        a = ps["alpha"]
        limit = ps.get("max_exponent")
        limit = 1 + 2 * (1 - a) / (2 - a) + 0.25 if limit is None else limit
        entry = {"d": ps["d"], "alpha": a, "L": ps["L_list"], "values": [v.value for v in vals],
                 "tails": [v.tail_estimate for v in vals], "exponent": slope}
        if ps["d"] == 3 or ps.get("max_exponent") is not None:
            res.check(f"power_sum_exponent[{tag}]", slope <= limit, exponent=slope, limit=limit)
            entry["limit"] = limit
        if ps.get("max_ratio") is not None:
            ratio = vals[-1].value / vals[-2].value
            res.check(f"power_sum_ratio[{tag}]", ratio < ps["max_ratio"], ratio=ratio,
                      limit=ps["max_ratio"])
            entry["ratio"] = ratio
        sums.append(entry)
    ri = p["random_instances"]
    rng = np.random.default_rng(cfg["seed"])
    worst_rec = worst_mass = 0.0
    for _ in range(ri["n"]):
        dd = 2
        sites = random_connected_sites(dd, int(rng.integers(1, ri["max_size"] + 1)), rng)
        dom = make_explicit(sites)
        env = ArrayEnvironment(dom, random_omega(dd, ri["epsilon"], dom.n_sites, rng))
        x = dom.sites[int(rng.integers(dom.n_sites))]
        row = green_row(env, dom, x)
        Q, R = kernel_matrices(dom, omega_on(env, dom))
        e = np.zeros(dom.n_sites)
        e[int(dom.index_of(x)[0])] = 1.0
        worst_rec = max(worst_rec, float(np.max(np.abs(row.interior - e - Q.T @ row.interior))),
                        float(np.max(np.abs(row.boundary - R.T @ row.interior))))
        worst_mass = max(worst_mass, abs(float(row.boundary.sum()) - 1.0))
    if ri["n"]:
        res.row("recursion_residual_max", worst_rec, 0.0, ri["n"])
        res.row("boundary_mass_error_max", worst_mass, 0.0, ri["n"])
        res.check("green_recursion", worst_rec <= ri["tolerance"], max_residual=worst_rec)
        res.check("boundary_mass", worst_mass <= ri["tolerance"], max_error=worst_mass)
    res.payload.update({"exit_time_ratios": ratios, "power_sums": sums})
    return res


RUNNERS = {"velocity": _velocity, "kalikow-verify": _kalikow, "phat-identity": _phat,
           "gambler": _gambler, "polynomial-probe": _probe, "tgamma": _tgamma,
           "expansion": _expansion, "renorm-audit": _renorm, "box-classify": _box,
           "green-scaling": _green}


# ---------------------------------------------------------------------------
# emission


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        v = int(obj)
        return v if abs(v) < 2**53 else str(v)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, Fraction):
        return str(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _csv_text(rows, h: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "mean", "stderr", "n", "config_hash"])
    for name, mean, se, n in rows:
        w.writerow([name, repr(mean), repr(se), n, h])
    return buf.getvalue()


def run_experiment(cfg: dict, out_dir, threads: int = 1) -> tuple[int, dict]:
    """Run a resolved config and write its CSV and JSON files.

    Returns the exit code and the JSON document.
    """
    suite = cfg["experiment"]
    h = config_hash(cfg)
    res = RUNNERS[suite](cfg, max(1, int(threads)))
    ok = all(a.passed for a in res.assertions)
    doc = {
        "suite": suite, "version": __version__, "config": cfg, "config_hash": h,
        "seed": cfg["seed"], "labels": res.labels,
        "assertions": [{"name": a.name, "passed": a.passed, "detail": a.detail}
                       for a in res.assertions],
        "all_passed": ok,
        "rows": [{"name": r[0], "mean": r[1], "stderr": r[2], "n": r[3]} for r in res.rows],
        "results": res.payload,
    }
    doc = _clean(doc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{suite}.csv").write_text(_csv_text(res.rows, h), encoding="utf-8")
    (out / f"{suite}.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")
    return (EXIT_OK if ok else EXIT_ASSERT), doc


def emit_report(doc: dict, stream=None) -> None:
    """Human-readable summary: one line per assertion, then the rows."""
    stream = sys.stdout if stream is None else stream
    print(f"{doc['suite']}  config_hash={doc['config_hash']}  seed={doc['seed']}", file=stream)
    for lab in doc["labels"]:
        print(f"  note: {lab}", file=stream)
    for a in doc["assertions"]:
        print(f"  {'PASS' if a['passed'] else 'FAIL'}  {a['name']}", file=stream)
    for r in doc["rows"]:
        print(f"  {r['name']}: {r['mean']} (stderr {r['stderr']}, n {r['n']})", file=stream)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwre", description="Random walk in random environment "
                                 "experiment runner.")
    ap.add_argument("--version", action="version", version=f"rwre {__version__}")
    sub = ap.add_subparsers(dest="suite", required=True)
    for s in SUITES:
        sp = sub.add_parser(s, help=f"run the {s} suite")
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, default=Path("rwre-out"), help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (results do "
                        "not depend on it)")
        sp.add_argument("--quiet", action="store_true", help="suppress the summary")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = None
        if args.config is not None:
            try:
                doc = json.loads(args.config.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = resolve_config(args.suite, doc, args.seed)
        code, out = run_experiment(cfg, args.out, args.threads)
    except (ConfigError, ParameterError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    if not args.quiet:
        emit_report(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
