"""Regenerate the bundled 5-bus case fixture.

Five buses, six 800 MVA lines, three 1500 MW / +-750 MVAr generators (the one
at bus 3 cheapest), loads of 1100 MW / 400 MVAr at bus 1 and 500 MW / 200 MVAr
at bus 2, a 500 MW wind site at bus 4 with a two-scenario profile, N-1
contingencies on every line, 100 MVA reinforcement headroom per line, and
100 MW flexibility sites at buses 1 and 2. Line impedances and generator cost
coefficients are reconstructions chosen so the N-1 pattern is binding.
"""

from pathlib import Path

from sctep.network import (
    Bus, FlexProvider, Generator, InvestmentOption, Line, NetworkCase, Scenario,
    SystemState, save_case, series_admittance, validate_case,
)

# line id -> (from, to, r, x) in p.u. on 100 MVA; kept stiff enough that the
# reactive demand stays servable in every N-1 state (the model has no
# reactive-load relief), so the 800 MVA thermal ratings drive curtailment
LINE_DATA = {
    1: (1, 2, 0.0002, 0.0020),
    2: (1, 3, 0.00145, 0.0145),
    3: (1, 4, 0.0012, 0.0120),
    4: (2, 5, 0.0014, 0.0140),
    5: (3, 4, 0.00004, 0.0004),
    6: (4, 5, 0.00004, 0.0004),
}

S_MAX = 800.0   # MVA, uniform rating that makes several contingencies binding
LI_MAX = 100.0  # MVA of reinforcement headroom per line
FI_MAX = 100.0  # MW of installable flexibility per site
Q_BASE = 150.0  # MVAr of pre-existing reactive range at each flexibility site
C_INV = 5.0     # EUR/MVA/h (lines) and EUR/MW/h (flexibility)
C_FLEX = 30.0   # EUR/MWh activation price
C_CURT = 1.0e4  # EUR/MWh load-curtailment penalty
C_CURT_RES = 100.0  # EUR/MWh RES-curtailment penalty (reconstructed default)


def build() -> NetworkCase:
    buses = (
        Bus(id=1, v_min=0.90, v_max=1.10, demand_p=1100.0, demand_q=400.0),
        Bus(id=2, v_min=0.90, v_max=1.10, demand_p=500.0, demand_q=200.0),
        Bus(id=3, v_min=0.90, v_max=1.10, is_reference=True),
        Bus(id=4, v_min=0.90, v_max=1.10, res_p=500.0),
        Bus(id=5, v_min=0.90, v_max=1.10),
    )
    lines = tuple(
        Line(id=i, from_bus=f, to_bus=t, g=round(g, 6), b=round(b, 6),
             s_max=S_MAX, li_max=LI_MAX, c_inv=C_INV)
        for i, (f, t, r, x) in LINE_DATA.items()
        for g, b in [series_admittance(r, x)]
    )
    generators = (
        Generator(id=1, bus=3, p_min=0.0, p_max=1500.0, q_min=-750.0, q_max=750.0,
                  cost_c0=0.0, cost_c1=20.0, cost_c2=0.015),
        Generator(id=2, bus=4, p_min=0.0, p_max=1500.0, q_min=-750.0, q_max=750.0,
                  cost_c0=0.0, cost_c1=35.0, cost_c2=0.020),
        Generator(id=3, bus=5, p_min=0.0, p_max=1500.0, q_min=-750.0, q_max=750.0,
                  cost_c0=0.0, cost_c1=40.0, cost_c2=0.025),
    )
    flex = (
        FlexProvider(id=1, bus=1, q_up_base=Q_BASE, q_dn_base=Q_BASE,
                     fi_max=FI_MAX, c_flex=C_FLEX, c_inv=C_INV),
        FlexProvider(id=2, bus=2, q_up_base=Q_BASE, q_dn_base=Q_BASE,
                     fi_max=FI_MAX, c_flex=C_FLEX, c_inv=C_INV),
    )
    scenarios = (
        Scenario(id=1, weight=0.5, overrides={4: {"res_p": 500.0}}),
        Scenario(id=2, weight=0.5, overrides={4: {"res_p": 0.0}}),
    )
    states = (SystemState(k=0, weight=0.95),) + tuple(
        SystemState(k=i, weight=0.05, outaged_line=i) for i in LINE_DATA
    )
    options = tuple(
        InvestmentOption(id=i, kind="line", device=i) for i in LINE_DATA
    ) + (
        InvestmentOption(id=7, kind="flex", device=1),
        InvestmentOption(id=8, kind="flex", device=2),
    )
    return NetworkCase(
        name="case5", base_mva=100.0, c_curt_load=C_CURT, c_curt_res=C_CURT_RES,
        buses=buses, lines=lines, generators=generators, flex_providers=flex,
        scenarios=scenarios, states=states, options=options,
    )


if __name__ == "__main__":
    case = build()
    problems = validate_case(case)
    for d in problems:
        print(f"{d.severity}: {d.message}")
    assert not any(d.is_error for d in problems)
    out = Path(__file__).resolve().parents[1] / "src" / "sctep" / "cases" / "case5.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_case(case, out)
    print(f"wrote {out}")
