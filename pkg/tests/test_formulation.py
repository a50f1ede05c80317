import json

import numpy as np
import pytest

from sctep.network import Bus, Generator, Line, NetworkCase, Scenario, SystemState, \
    case_from_dict, serialize_case
from sctep.formulation import (
    MIN_CURTAILMENT, MIN_EXPECTED_COST, Objective, build_nlp, derivative_check,
    dump_problem_text, eval_constraints, eval_objective, expected_counts,
)
from tests.conftest import make_two_bus


def grand(case):
    return [o.id for o in case.options]


def flow_case(g=10.0, b=-30.0):
    """Two buses joined by a line with prescribed series admittance."""
    return NetworkCase(
        name="flow", base_mva=100.0, c_curt_load=1e4, c_curt_res=100.0,
        buses=(Bus(id=1, v_min=0.9, v_max=1.1, is_reference=True),
               Bus(id=2, v_min=0.9, v_max=1.1, demand_p=50.0)),
        lines=(Line(id=1, from_bus=1, to_bus=2, g=g, b=b, s_max=500.0),),
        generators=(Generator(id=1, bus=1, p_min=0, p_max=200, q_min=-100, q_max=100),),
        flex_providers=(), scenarios=(Scenario(id=1, weight=1.0),),
        states=(SystemState(k=0, weight=1.0),), options=(),
    )


def test_counts_match_closed_form(case5):
    prob = build_nlp(case5, [], MIN_CURTAILMENT)
    expect = expected_counts(case5)
    assert prob.n_var == expect["n_var"] == 820
    assert prob.m_eq == expect["m_eq"] == 428
    assert prob.m_ineq == expect["m_ineq"] == 396


def test_empty_coalition_zeroes_investment_bounds(case5):
    prob = build_nlp(case5, [], MIN_CURTAILMENT)
    lay = prob.layout
    for l in range(lay.nl):
        assert prob.ub[lay.li(l)] == 0.0
    for f in range(lay.nf):
        assert prob.ub[lay.fi(f)] == 0.0


def test_grand_coalition_opens_caps(case5):
    prob = build_nlp(case5, grand(case5), MIN_EXPECTED_COST)
    lay = prob.layout
    for l, ln in enumerate(case5.lines):
        assert prob.ub[lay.li(l)] == pytest.approx(ln.li_max / case5.base_mva)
    for f, fx in enumerate(case5.flex_providers):
        assert prob.ub[lay.fi(f)] == pytest.approx(fx.fi_max / case5.base_mva)


def test_unknown_option_rejected(case5):
    with pytest.raises(KeyError):
        build_nlp(case5, [999], MIN_CURTAILMENT)


def test_flow_equation_matches_hand_substitution():
    # sending end at 1+j0, receiving at 0.95+j0, G=10, B=-30:
    # p = (e^2+f^2)G - (ee'+ff')G - (fe'-ef')B = 10 - 9.5 - 0 = 0.5
    # q = -(e^2+f^2)B + (ee'+ff')B - (fe'-ef')G = 30 - 28.5 - 0 = 1.5
    case = flow_case(g=10.0, b=-30.0)
    prob = build_nlp(case, [], MIN_CURTAILMENT)
    lay = prob.layout
    x = np.zeros(prob.n_var)
    x[lay.e(0, 0, 0)] = 1.0
    x[lay.e(0, 0, 1)] = 0.95
    x[lay.p(0, 0, 0)] = 0.5
    x[lay.q(0, 0, 0)] = 1.5
    r = eval_constraints(prob, x)
    assert r[0] == pytest.approx(0.0, abs=1e-15)   # p-flow row of arc 1->2
    assert r[1] == pytest.approx(0.0, abs=1e-15)   # q-flow row of arc 1->2
    x[lay.p(0, 0, 0)] = 0.0
    r = eval_constraints(prob, x)
    assert r[0] == pytest.approx(-0.5)


def test_zero_voltage_difference_means_zero_flow():
    case = flow_case()
    prob = build_nlp(case, [], MIN_CURTAILMENT)
    lay = prob.layout
    x = np.zeros(prob.n_var)
    for bidx in (0, 1):
        x[lay.e(0, 0, bidx)] = 1.0
    r = eval_constraints(prob, x)
    assert abs(r[0]) < 1e-15 and abs(r[1]) < 1e-15


def test_reference_bus_anchoring(case5):
    prob = build_nlp(case5, [], MIN_CURTAILMENT)
    lay = prob.layout
    ref = case5.bus_index[case5.reference_bus.id]
    for s in range(lay.ns):
        for k in range(lay.nk):
            assert prob.lb[lay.f(s, k, ref)] == prob.ub[lay.f(s, k, ref)] == 0.0
            assert prob.lb[lay.e(s, k, ref)] == 0.0


def test_outaged_line_pinned_and_rows_omitted(case5):
    prob = build_nlp(case5, [], MIN_CURTAILMENT)
    lay = prob.layout
    k = 1  # state k=1 outages line id 1
    out_line = case5.line_index[case5.states[k].outaged_line]
    for d in (0, 1):
        a = 2 * out_line + d
        assert prob.lb[lay.p(0, k, a)] == prob.ub[lay.p(0, k, a)] == 0.0
        assert prob.lb[lay.q(0, k, a)] == prob.ub[lay.q(0, k, a)] == 0.0
    tag = f"s{case5.scenarios[0].id},k{case5.states[k].k}"
    assert not any(name.startswith("pflow[1->2") and name.endswith(tag + "]")
                   for name in prob.eq.names)
    thermal_k = [n for n in prob.ineq.names if n.startswith("thermal") and tag in n]
    assert len(thermal_k) == 2 * (len(case5.lines) - 1)


def test_outage_forces_curtailment_structurally():
    # one line, outaged: the only feasible point of the P-balance at bus 2
    # has LC equal to the demand
    case = make_two_bus(demand_q=0.0, with_outage=True)
    prob = build_nlp(case, [], MIN_CURTAILMENT)
    lay = prob.layout
    x = np.zeros(prob.n_var)
    row = prob.eq.names.index("balP[2;s1,k1]")
    x[lay.lc(0, 1, 1)] = case.buses[1].demand_p / case.base_mva
    assert prob.eq.values(x)[row] == pytest.approx(0.0, abs=1e-15)
    x[lay.lc(0, 1, 1)] = 0.0
    assert prob.eq.values(x)[row] == pytest.approx(-1.0)


def test_nested_coalitions_only_relax_bounds(case5):
    rng = np.random.default_rng(7)
    ids = [o.id for o in case5.options]
    for _ in range(5):
        t_ids = set(rng.choice(ids, size=rng.integers(1, len(ids) + 1), replace=False).tolist())
        s_ids = {i for i in t_ids if rng.random() < 0.6}
        ps = build_nlp(case5, s_ids, MIN_CURTAILMENT)
        pt = build_nlp(case5, t_ids, MIN_CURTAILMENT)
        assert np.all(pt.ub >= ps.ub)
        assert np.all(pt.lb == ps.lb)
        # identical structure: same rows, coefficients, constants
        assert ps.eq.names == pt.eq.names and ps.ineq.names == pt.ineq.names
        assert (ps.eq.lin != pt.eq.lin).nnz == 0
        assert np.array_equal(ps.ineq.q_c, pt.ineq.q_c)
        assert np.array_equal(ps.eq.const, pt.eq.const)


def test_constraints_are_quadratic_with_constant_hessian(case5):
    prob = build_nlp(case5, grand(case5), MIN_EXPECTED_COST)
    rng = np.random.default_rng(3)
    x1 = rng.standard_normal(prob.n_var)
    x2 = rng.standard_normal(prob.n_var)
    # Jacobian is affine in x for degree-<=2 polynomials
    j = lambda x: np.concatenate([
        prob.eq.jacobian(x).toarray().ravel(),
        prob.ineq.jacobian(x).toarray().ravel()])
    lhs = j(x1) + j(x2)
    rhs = j(x1 + x2) + j(np.zeros(prob.n_var))
    assert np.allclose(lhs, rhs, atol=1e-10)
    lam_eq = rng.standard_normal(prob.m_eq)
    lam_in = rng.standard_normal(prob.m_ineq)
    h1 = prob.lagrangian_hessian(1.0, lam_eq, lam_in)
    h2 = prob.lagrangian_hessian(1.0, lam_eq, lam_in)
    assert (h1 != h2).nnz == 0
    # symmetric up to summation order of duplicate entries
    asym = np.abs((h1 - h1.T).toarray()).max()
    assert asym < 1e-12 * max(1.0, np.abs(h1.toarray()).max())


def test_curtailment_objective_ignores_cost_parameters(case5, case5_doc):
    doc = json.loads(json.dumps(case5_doc))
    doc["c_curt_load"] = 123.0
    doc["c_curt_res"] = 7.0
    for g in doc["generators"]:
        g["cost_c0"], g["cost_c1"], g["cost_c2"] = 99.0, 77.0, 0.5
    for ln in doc["lines"]:
        ln["c_inv"] = 55.0
    perturbed = case_from_dict(doc)
    p1 = build_nlp(case5, grand(case5), MIN_CURTAILMENT)
    p2 = build_nlp(perturbed, grand(perturbed), MIN_CURTAILMENT)
    rng = np.random.default_rng(11)
    for _ in range(3):
        x = rng.standard_normal(p1.n_var)
        v1, g1 = eval_objective(p1, x)
        v2, g2 = eval_objective(p2, x)
        assert v1 == v2
        assert np.array_equal(g1, g2)


def test_curtailment_objective_values(case5):
    prob = build_nlp(case5, [], MIN_CURTAILMENT)
    lay = prob.layout
    x = np.zeros(prob.n_var)
    assert eval_objective(prob, x)[0] == 0.0
    x[lay.lc(0, 0, 0)] = 10.0 / case5.base_mva  # 10 MW at one (s, k, n)
    assert eval_objective(prob, x)[0] == pytest.approx(10.0)


def test_expected_cost_single_state_hand_value():
    # one scenario (weight 1), normal state weight 0.95, one generator with
    # linear cost: objective = 0.95 * c1 * P
    case = make_two_bus()
    doc = serialize_case(case)
    doc["states"] = [{"k": 0, "weight": 0.95}]
    case = case_from_dict(doc)
    prob = build_nlp(case, [], MIN_EXPECTED_COST)
    lay = prob.layout
    x = np.zeros(prob.n_var)
    x[lay.pg(0, 0, 0)] = 150.0 / case.base_mva
    val, _ = eval_objective(prob, x)
    assert val == pytest.approx(0.95 * 10.0 * 150.0)


def test_expected_cost_records_probability_weights(case5):
    prob = build_nlp(case5, [], MIN_EXPECTED_COST)
    weights = prob.obj.weights
    assert weights[(1, 0)] == pytest.approx(0.5 * 0.95)
    assert weights[(2, 3)] == pytest.approx(0.5 * 0.05)
    # verbatim weights: they do not sum to one (0.95 + 6 * 0.05 per scenario)
    assert sum(weights.values()) == pytest.approx(1.25)


def test_objective_tag_validation():
    with pytest.raises(ValueError):
        Objective("nonsense")


def test_derivative_check_flat_and_interior(case5):
    prob = build_nlp(case5, grand(case5), MIN_EXPECTED_COST)
    assert derivative_check(prob, step=1e-6, n_hvp=2, seed=0) < 1e-6
    rng = np.random.default_rng(5)
    lo = np.where(np.isfinite(prob.lb), prob.lb, -1.0)
    hi = np.where(np.isfinite(prob.ub), prob.ub, 1.0)
    x = lo + (hi - lo) * rng.uniform(0.3, 0.7, prob.n_var)
    assert derivative_check(prob, x, step=1e-6, n_hvp=2, seed=1) < 1e-5


def test_linear_rows_have_exact_jacobian(case5):
    prob = build_nlp(case5, [], MIN_CURTAILMENT)
    rows = [i for i, name in enumerate(prob.eq.names) if name.startswith("bal")]
    rng = np.random.default_rng(9)
    x = rng.standard_normal(prob.n_var)
    J = prob.eq.jacobian(x)
    step = 1e-3  # linear rows differentiate exactly at any step; large step kills roundoff
    for i in rows[:20]:
        cols = J[i].tocoo().col
        for c in cols[:5]:
            xp, xm = x.copy(), x.copy()
            xp[c] += step
            xm[c] -= step
            fd = (prob.eq.values(xp)[i] - prob.eq.values(xm)[i]) / (2 * step)
            assert abs(fd - J[i, c]) < 1e-10


def test_dump_problem_text(two_bus):
    prob = build_nlp(two_bus, [], MIN_CURTAILMENT)
    text = dump_problem_text(prob)
    lines = text.splitlines()
    assert sum(1 for l in lines if l.startswith("VAR ")) == prob.n_var
    assert sum(1 for l in lines if l.startswith("EQ ")) == prob.m_eq
    assert sum(1 for l in lines if l.startswith("LE ")) == prob.m_ineq
    assert lines[-1].startswith("MIN curtailment")
    assert any("thermal" in l and "<=0" in l for l in lines)
