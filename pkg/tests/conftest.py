import json

import pytest

from sctep import bundled_case_path
from sctep.network import (Bus, FlexProvider, Generator, InvestmentOption, Line,
                           NetworkCase, Scenario, SystemState, load_case,
                           series_admittance)


@pytest.fixture(scope="session")
def case5():
    return load_case(bundled_case_path())


def make_two_bus(demand_p=100.0, demand_q=20.0, with_outage=False, res_p=0.0,
                 s_max=150.0, li_max=0.0, fi_max=0.0) -> NetworkCase:
    """Reference bus with one generator feeding a single load over one line."""
    g, b = series_admittance(0.01, 0.1)
    states = [SystemState(k=0, weight=0.95 if with_outage else 1.0)]
    if with_outage:
        states.append(SystemState(k=1, weight=0.05, outaged_line=1))
    options = []
    if li_max:
        options.append(InvestmentOption(id=1, kind="line", device=1))
    flex = ()
    if fi_max:
        flex = (FlexProvider(id=1, bus=2, fi_max=fi_max, c_flex=30.0, c_inv=5.0),)
        options.append(InvestmentOption(id=len(options) + 1, kind="flex", device=1))
    return NetworkCase(
        name="two-bus", base_mva=100.0, c_curt_load=1e4, c_curt_res=100.0,
        buses=(Bus(id=1, v_min=0.95, v_max=1.05, is_reference=True),
               Bus(id=2, v_min=0.95, v_max=1.05, demand_p=demand_p,
                   demand_q=demand_q, res_p=res_p)),
        lines=(Line(id=1, from_bus=1, to_bus=2, g=g, b=b, s_max=s_max,
                    li_max=li_max, c_inv=5.0),),
        generators=(Generator(id=1, bus=1, p_min=0.0, p_max=300.0,
                              q_min=-100.0, q_max=100.0, cost_c1=10.0),),
        flex_providers=flex,
        scenarios=(Scenario(id=1, weight=1.0),),
        states=tuple(states),
        options=tuple(options),
    )


@pytest.fixture()
def two_bus():
    return make_two_bus()


def make_triangle(li_max=50.0, fi_max=50.0) -> NetworkCase:
    """Three buses in a ring with two investment options; small enough that a
    full coalition sweep costs four solves."""
    g, b = series_admittance(0.005, 0.05)
    return NetworkCase(
        name="triangle", base_mva=100.0, c_curt_load=1e4, c_curt_res=100.0,
        buses=(Bus(id=1, v_min=0.94, v_max=1.06, is_reference=True),
               Bus(id=2, v_min=0.94, v_max=1.06, demand_p=120.0, demand_q=30.0),
               Bus(id=3, v_min=0.94, v_max=1.06, demand_p=40.0, demand_q=10.0)),
        lines=(Line(id=1, from_bus=1, to_bus=2, g=g, b=b, s_max=90.0,
                    li_max=li_max, c_inv=5.0),
               Line(id=2, from_bus=2, to_bus=3, g=g, b=b, s_max=90.0),
               Line(id=3, from_bus=1, to_bus=3, g=g, b=b, s_max=90.0)),
        generators=(Generator(id=1, bus=1, p_min=0.0, p_max=400.0,
                              q_min=-150.0, q_max=150.0, cost_c1=12.0),),
        flex_providers=(FlexProvider(id=1, bus=2, fi_max=fi_max, c_flex=30.0,
                                     c_inv=5.0),),
        scenarios=(Scenario(id=1, weight=1.0),),
        states=(SystemState(k=0, weight=0.95),
                SystemState(k=1, weight=0.05, outaged_line=1)),
        options=(InvestmentOption(id=1, kind="line", device=1),
                 InvestmentOption(id=2, kind="flex", device=1)),
    )


@pytest.fixture()
def triangle():
    return make_triangle()


@pytest.fixture()
def case5_doc(case5):
    return json.loads(open(bundled_case_path()).read())
