"""Monolithic sparse NLP for stochastic AC security-constrained expansion planning.

The model is written in rectangular voltage coordinates (v = e + jf), which
makes every nonlinear expression quadratic: power-flow definitions and bus
balances are quadratic equalities, thermal and voltage limits quadratic
inequalities, and all device/investment limits linear. The Lagrangian Hessian
is therefore constant in the decision variables.

Variables, per scenario s and state k: bus voltages (e, f), directed branch
flows (p, q) for both ends of every line, generator dispatch (P, Q), flexible
up/down modulation (P+, P-, Q+, Q-) and bus curtailments (LC for load, RC for
RES). Reinforcement capacities LI (per line, MVA) and flexibility capacities
FI (per provider, MW) are first-stage: a single variable coupling all (s, k).

Closed-form sizes, with B buses, L lines, G generators, F providers,
S scenarios and K states (one outaged line per contingency state):

    n_var  = L + F + S*K*(4B + 4L + 2G + 4F)
    m_eq   = S * [ 2B*K + 4*(L*K - (K-1)) ]        flow definitions + balances
    m_ineq = S * [ (2B + 4F)*K + 2*(L*K - (K-1)) ]  voltage + flex + thermal

Internally everything is per-unit on the case power base; objectives report
MW (curtailment) or EUR/h (expected cost).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .network import NetworkCase

INF = float("inf")


@dataclass(frozen=True)
class Objective:
    """Objective selector: 'curtailment' (robust planning) or 'cost' (expected cost)."""
    tag: str

    def __post_init__(self):
        if self.tag not in ("curtailment", "cost"):
            raise ValueError(f"unknown objective tag {self.tag!r}")


MIN_CURTAILMENT = Objective("curtailment")
MIN_EXPECTED_COST = Objective("cost")


class VariableLayout:
    """Dense index map from (entity, scenario, state) to flat variable indices.

    First-stage investment variables come first (LI per line, then FI per
    provider); each (scenario, state) block follows with fixed in-block
    offsets. Directed arcs are numbered 2*line + d with d = 0 for the
    from->to end and d = 1 for to->from.
    """

    def __init__(self, case: NetworkCase):
        self.case = case
        self.nb = len(case.buses)
        self.nl = len(case.lines)
        self.ng = len(case.generators)
        self.nf = len(case.flex_providers)
        self.na = 2 * self.nl
        self.ns = len(case.scenarios)
        self.nk = len(case.states)
        self.n_first = self.nl + self.nf
        nb, na, ng, nf = self.nb, self.na, self.ng, self.nf
        self.oe = 0
        self.of = nb
        self.op = 2 * nb
        self.oq = 2 * nb + na
        self.opg = 2 * nb + 2 * na
        self.oqg = self.opg + ng
        self.opup = self.oqg + ng
        self.opdn = self.opup + nf
        self.oqup = self.opdn + nf
        self.oqdn = self.oqup + nf
        self.olc = self.oqdn + nf
        self.orc = self.olc + nb
        self.block_size = self.orc + nb
        self.n_var = self.n_first + self.ns * self.nk * self.block_size

    # first-stage
    def li(self, line_idx: int) -> int:
        return line_idx

    def fi(self, flex_idx: int) -> int:
        return self.nl + flex_idx

    # recourse blocks
    def block_start(self, s: int, k: int) -> int:
        return self.n_first + (s * self.nk + k) * self.block_size

    def e(self, s, k, bus_idx):
        return self.block_start(s, k) + self.oe + bus_idx

    def f(self, s, k, bus_idx):
        return self.block_start(s, k) + self.of + bus_idx

    def p(self, s, k, arc_idx):
        return self.block_start(s, k) + self.op + arc_idx

    def q(self, s, k, arc_idx):
        return self.block_start(s, k) + self.oq + arc_idx

    def pg(self, s, k, gen_idx):
        return self.block_start(s, k) + self.opg + gen_idx

    def qg(self, s, k, gen_idx):
        return self.block_start(s, k) + self.oqg + gen_idx

    def p_up(self, s, k, flex_idx):
        return self.block_start(s, k) + self.opup + flex_idx

    def p_dn(self, s, k, flex_idx):
        return self.block_start(s, k) + self.opdn + flex_idx

    def q_up(self, s, k, flex_idx):
        return self.block_start(s, k) + self.oqup + flex_idx

    def q_dn(self, s, k, flex_idx):
        return self.block_start(s, k) + self.oqdn + flex_idx

    def lc(self, s, k, bus_idx):
        return self.block_start(s, k) + self.olc + bus_idx

    def rc(self, s, k, bus_idx):
        return self.block_start(s, k) + self.orc + bus_idx

    def arc_ends(self, arc_idx: int) -> tuple[int, int]:
        """(sending bus index, receiving bus index) of a directed arc."""
        line = self.case.lines[arc_idx // 2]
        i = self.case.bus_index[line.from_bus]
        j = self.case.bus_index[line.to_bus]
        return (i, j) if arc_idx % 2 == 0 else (j, i)

    @cached_property
    def var_names(self) -> list[str]:
        case = self.case
        names = [f"LI[{ln.id}]" for ln in case.lines]
        names += [f"FI[{fx.id}]" for fx in case.flex_providers]
        for s, scn in enumerate(case.scenarios):
            for k, st in enumerate(case.states):
                tag = f"s{scn.id},k{st.k}"
                names += [f"e[{b.id};{tag}]" for b in case.buses]
                names += [f"f[{b.id};{tag}]" for b in case.buses]
                for pref in ("p", "q"):
                    for a in range(self.na):
                        ln = case.lines[a // 2]
                        ends = (ln.from_bus, ln.to_bus) if a % 2 == 0 else (ln.to_bus, ln.from_bus)
                        names.append(f"{pref}[{ends[0]}->{ends[1]};{tag}]")
                names += [f"Pg[{g.id};{tag}]" for g in case.generators]
                names += [f"Qg[{g.id};{tag}]" for g in case.generators]
                for pref in ("Pup", "Pdn", "Qup", "Qdn"):
                    names += [f"{pref}[{fx.id};{tag}]" for fx in case.flex_providers]
                names += [f"LC[{b.id};{tag}]" for b in case.buses]
                names += [f"RC[{b.id};{tag}]" for b in case.buses]
        return names


class _Rows:
    """Accumulates rows of quadratic constraints c(x) = sum coef*x_i*x_j + a.x + b."""

    def __init__(self):
        self.names: list[str] = []
        self.lin_r: list[int] = []
        self.lin_c: list[int] = []
        self.lin_v: list[float] = []
        self.q_row: list[int] = []
        self.q_i: list[int] = []
        self.q_j: list[int] = []
        self.q_c: list[float] = []
        self.const: list[float] = []

    def new_row(self, name: str, const: float = 0.0) -> int:
        self.names.append(name)
        self.const.append(const)
        return len(self.names) - 1

    def lin(self, row: int, col: int, coef: float) -> None:
        self.lin_r.append(row)
        self.lin_c.append(col)
        self.lin_v.append(coef)

    def quad(self, row: int, i: int, j: int, coef: float) -> None:
        if coef == 0.0:
            return
        if i > j:
            i, j = j, i
        self.q_row.append(row)
        self.q_i.append(i)
        self.q_j.append(j)
        self.q_c.append(coef)


class ConstraintBlock:
    """Compiled quadratic constraint group with vectorized value/Jacobian evaluation."""

    def __init__(self, rows: _Rows, n_var: int):
        self.m = len(rows.names)
        self.n = n_var
        self.names = rows.names
        self.const = np.asarray(rows.const, dtype=float)
        self.lin = sp.csr_matrix(
            (rows.lin_v, (rows.lin_r, rows.lin_c)), shape=(self.m, n_var))
        self.q_row = np.asarray(rows.q_row, dtype=np.int64)
        self.q_i = np.asarray(rows.q_i, dtype=np.int64)
        self.q_j = np.asarray(rows.q_j, dtype=np.int64)
        self.q_c = np.asarray(rows.q_c, dtype=float)
        # Jacobian structure: entry (row, i) with value coef * x[mul]
        diag = self.q_i == self.q_j
        off = ~diag
        self._jr = np.concatenate([self.q_row[off], self.q_row[off], self.q_row[diag]])
        self._jc = np.concatenate([self.q_i[off], self.q_j[off], self.q_i[diag]])
        self._jcoef = np.concatenate([self.q_c[off], self.q_c[off], 2.0 * self.q_c[diag]])
        self._jmul = np.concatenate([self.q_j[off], self.q_i[off], self.q_i[diag]])

    def values(self, x: np.ndarray) -> np.ndarray:
        out = self.lin @ x + self.const
        if len(self.q_c):
            quad = self.q_c * x[self.q_i] * x[self.q_j]
            out = out + np.bincount(self.q_row, weights=quad, minlength=self.m)
        return out

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        if not len(self._jcoef):
            return self.lin.copy()
        data = self._jcoef * x[self._jmul]
        jq = sp.csr_matrix((data, (self._jr, self._jc)), shape=(self.m, self.n))
        return (self.lin + jq).tocsr()

    def hessian_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """COO entries (i, j, coef, row): Hessian of row r is sum over its entries."""
        diag = self.q_i == self.q_j
        off = ~diag
        hi = np.concatenate([self.q_i[off], self.q_j[off], self.q_i[diag]])
        hj = np.concatenate([self.q_j[off], self.q_i[off], self.q_j[diag]])
        hc = np.concatenate([self.q_c[off], self.q_c[off], 2.0 * self.q_c[diag]])
        hrow = np.concatenate([self.q_row[off], self.q_row[off], self.q_row[diag]])
        return hi, hj, hc, hrow


@dataclass
class CompiledObjective:
    """Quadratic objective sum coef*x_i*x_j + lin.x + const in reporting units."""
    tag: str
    q_i: np.ndarray
    q_j: np.ndarray
    q_c: np.ndarray
    lin: np.ndarray
    const: float
    # (scenario id, state k) -> weight used for the expected-cost objective
    weights: dict[tuple[int, int], float] = field(default_factory=dict)

    def value_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        grad = self.lin.copy()
        val = float(self.lin @ x) + self.const
        if len(self.q_c):
            val += float(np.sum(self.q_c * x[self.q_i] * x[self.q_j]))
            np.add.at(grad, self.q_i, self.q_c * x[self.q_j])
            np.add.at(grad, self.q_j, self.q_c * x[self.q_i])
        return val, grad

    def hessian_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        diag = self.q_i == self.q_j
        off = ~diag
        hi = np.concatenate([self.q_i[off], self.q_j[off], self.q_i[diag]])
        hj = np.concatenate([self.q_j[off], self.q_i[off], self.q_j[diag]])
        hc = np.concatenate([self.q_c[off], self.q_c[off], 2.0 * self.q_c[diag]])
        return hi, hj, hc


class NlpProblem:
    """Sparse quadratically-constrained program for one case + coalition + objective.

    Equalities come first in the declared constraint order, inequalities
    (written as c(x) <= 0) after. Problems built for nested coalitions differ
    only in variable bounds, never in constraint structure.
    """

    def __init__(self, case, enabled_options, objective, layout, lb, ub, eq, ineq, obj):
        self.case = case
        self.enabled_options: frozenset[int] = enabled_options
        self.objective = objective      # Objective marker
        self.layout: VariableLayout = layout
        self.lb: np.ndarray = lb
        self.ub: np.ndarray = ub
        self.eq: ConstraintBlock = eq
        self.ineq: ConstraintBlock = ineq
        self.obj: CompiledObjective = obj

    @property
    def n_var(self) -> int:
        return self.layout.n_var

    @property
    def m_eq(self) -> int:
        return self.eq.m

    @property
    def m_ineq(self) -> int:
        return self.ineq.m

    def row_name(self, idx: int) -> str:
        if idx < self.eq.m:
            return self.eq.names[idx]
        return self.ineq.names[idx - self.eq.m]

    @cached_property
    def hessian_structure(self):
        """Static COO pattern of the Lagrangian Hessian.

        Multiplier slot layout: [sigma_obj, eq multipliers..., ineq multipliers...].
        """
        ei, ej, ec, erow = self.eq.hessian_entries()
        ii, ij, ic, irow = self.ineq.hessian_entries()
        oi, oj, oc = self.obj.hessian_entries()
        hi = np.concatenate([oi, ei, ii])
        hj = np.concatenate([oj, ej, ij])
        hc = np.concatenate([oc, ec, ic])
        hmul = np.concatenate([
            np.zeros(len(oi), dtype=np.int64),
            1 + erow,
            1 + self.eq.m + irow,
        ])
        return hi, hj, hc, hmul

    def lagrangian_hessian(self, sigma: float, lam_eq: np.ndarray,
                           lam_ineq: np.ndarray) -> sp.csc_matrix:
        """sigma * H(obj) + sum lam_eq_i H(c_eq_i) + sum lam_ineq_j H(c_ineq_j)."""
        hi, hj, hc, hmul = self.hessian_structure
        mvec = np.concatenate([[sigma], lam_eq, lam_ineq])
        data = hc * mvec[hmul]
        return sp.csc_matrix((data, (hi, hj)), shape=(self.n_var, self.n_var))


def _effective_caps(case: NetworkCase, enabled: frozenset[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-line and per-provider investment caps (p.u.) under a coalition."""
    base = case.base_mva
    li_cap = np.zeros(len(case.lines))
    fi_cap = np.zeros(len(case.flex_providers))
    for opt in case.options:
        if opt.id not in enabled:
            continue
        if opt.kind == "line":
            li_cap[case.line_index[opt.device]] = case.lines[case.line_index[opt.device]].li_max / base
        else:
            fi_cap[case.flex_index[opt.device]] = case.flex_providers[case.flex_index[opt.device]].fi_max / base
    return li_cap, fi_cap


def build_nlp(case: NetworkCase, coalition, objective: Objective | str) -> NlpProblem:
    """Compile the planning NLP for the investment options enabled by `coalition`.

    `coalition` is any iterable of option ids (an object exposing
    `option_ids(case)` is also accepted). Options outside the coalition keep
    their LI/FI variables but with upper bound zero; contingency states pin the
    outaged line's flow variables to zero and omit its flow-definition and
    thermal rows. The reference bus has f fixed to 0 and e >= 0 in every
    (scenario, state).
    """
    if hasattr(coalition, "option_ids"):
        enabled = frozenset(coalition.option_ids(case))
    else:
        enabled = frozenset(int(i) for i in coalition)
    known = {o.id for o in case.options}
    unknown = enabled - known
    if unknown:
        raise KeyError(f"coalition references unknown option ids {sorted(unknown)}")
    if isinstance(objective, str):
        objective = Objective(objective)

    base = case.base_mva
    lay = VariableLayout(case)
    nb, nl, ng, nf = lay.nb, lay.nl, lay.ng, lay.nf
    li_cap, fi_cap = _effective_caps(case, enabled)

    lb = np.full(lay.n_var, -INF)
    ub = np.full(lay.n_var, INF)

    for l in range(nl):
        lb[lay.li(l)] = 0.0
        ub[lay.li(l)] = li_cap[l]
    for fx in range(nf):
        lb[lay.fi(fx)] = 0.0
        ub[lay.fi(fx)] = fi_cap[fx]

    ref_idx = case.bus_index[case.reference_bus.id]
    eq = _Rows()
    ineq = _Rows()

    for s, scn in enumerate(case.scenarios):
        dp = np.array([case.scenario_value(scn, b, "demand_p") for b in case.buses]) / base
        dq = np.array([case.scenario_value(scn, b, "demand_q") for b in case.buses]) / base
        rp = np.array([case.scenario_value(scn, b, "res_p") for b in case.buses]) / base
        for k, st in enumerate(case.states):
            tag = f"s{scn.id},k{st.k}"
            out_line = None if st.outaged_line is None else case.line_index[st.outaged_line]

            # bounds for this block
            for bidx, b in enumerate(case.buses):
                ie, if_ = lay.e(s, k, bidx), lay.f(s, k, bidx)
                lb[ie], ub[ie] = -b.v_max, b.v_max
                lb[if_], ub[if_] = -b.v_max, b.v_max
                ilc, irc = lay.lc(s, k, bidx), lay.rc(s, k, bidx)
                lb[ilc], ub[ilc] = 0.0, dp[bidx]
                lb[irc], ub[irc] = 0.0, rp[bidx]
            lb[lay.e(s, k, ref_idx)] = 0.0
            lb[lay.f(s, k, ref_idx)] = 0.0
            ub[lay.f(s, k, ref_idx)] = 0.0
            for gidx, g in enumerate(case.generators):
                lb[lay.pg(s, k, gidx)], ub[lay.pg(s, k, gidx)] = g.p_min / base, g.p_max / base
                lb[lay.qg(s, k, gidx)], ub[lay.qg(s, k, gidx)] = g.q_min / base, g.q_max / base
            for fidx, fx in enumerate(case.flex_providers):
                for idx, b0 in ((lay.p_up(s, k, fidx), fx.p_up_base), (lay.p_dn(s, k, fidx), fx.p_dn_base),
                                (lay.q_up(s, k, fidx), fx.q_up_base), (lay.q_dn(s, k, fidx), fx.q_dn_base)):
                    lb[idx] = 0.0
                    ub[idx] = b0 / base + fi_cap[fidx]
            if out_line is not None:
                for d in (0, 1):
                    a = 2 * out_line + d
                    for idx in (lay.p(s, k, a), lay.q(s, k, a)):
                        lb[idx] = 0.0
                        ub[idx] = 0.0

            # flow definitions (both directions of every in-service line)
            for lidx, ln in enumerate(case.lines):
                if lidx == out_line:
                    continue
                G, B = ln.g, ln.b
                for d in (0, 1):
                    a = 2 * lidx + d
                    n_idx, m_idx = lay.arc_ends(a)
                    en, fn = lay.e(s, k, n_idx), lay.f(s, k, n_idx)
                    em, fm = lay.e(s, k, m_idx), lay.f(s, k, m_idx)
                    nm = f"{case.buses[n_idx].id}->{case.buses[m_idx].id}"
                    r = eq.new_row(f"pflow[{nm};{tag}]")
                    eq.lin(r, lay.p(s, k, a), 1.0)
                    eq.quad(r, en, en, -G)
                    eq.quad(r, fn, fn, -G)
                    eq.quad(r, en, em, G)
                    eq.quad(r, fn, fm, G)
                    eq.quad(r, fn, em, B)
                    eq.quad(r, en, fm, -B)
                    r = eq.new_row(f"qflow[{nm};{tag}]")
                    eq.lin(r, lay.q(s, k, a), 1.0)
                    eq.quad(r, en, en, B)
                    eq.quad(r, fn, fn, B)
                    eq.quad(r, en, em, -B)
                    eq.quad(r, fn, fm, -B)
                    eq.quad(r, fn, em, G)
                    eq.quad(r, en, fm, -G)

            # bus power balances
            for bidx, b in enumerate(case.buses):
                r = eq.new_row(f"balP[{b.id};{tag}]", const=rp[bidx] - dp[bidx])
                eq.lin(r, lay.lc(s, k, bidx), 1.0)
                eq.lin(r, lay.rc(s, k, bidx), -1.0)
                rq = eq.new_row(f"balQ[{b.id};{tag}]", const=-dq[bidx])
                for gidx, g in enumerate(case.generators):
                    if case.bus_index[g.bus] == bidx:
                        eq.lin(r, lay.pg(s, k, gidx), 1.0)
                        eq.lin(rq, lay.qg(s, k, gidx), 1.0)
                for fidx, fx in enumerate(case.flex_providers):
                    if case.bus_index[fx.bus] == bidx:
                        eq.lin(r, lay.p_up(s, k, fidx), 1.0)
                        eq.lin(r, lay.p_dn(s, k, fidx), -1.0)
                        eq.lin(rq, lay.q_up(s, k, fidx), 1.0)
                        eq.lin(rq, lay.q_dn(s, k, fidx), -1.0)
                for lidx, ln in enumerate(case.lines):
                    for d in (0, 1):
                        a = 2 * lidx + d
                        if lay.arc_ends(a)[0] == bidx:
                            eq.lin(r, lay.p(s, k, a), -1.0)
                            eq.lin(rq, lay.q(s, k, a), -1.0)

            # thermal limits: p^2 + q^2 <= (s_max + LI)^2, both ends, shared LI
            for lidx, ln in enumerate(case.lines):
                if lidx == out_line:
                    continue
                smax = ln.s_max / base
                ili = lay.li(lidx)
                for d in (0, 1):
                    a = 2 * lidx + d
                    n_idx, m_idx = lay.arc_ends(a)
                    nm = f"{case.buses[n_idx].id}->{case.buses[m_idx].id}"
                    r = ineq.new_row(f"thermal[{nm};{tag}]", const=-smax * smax)
                    ineq.quad(r, lay.p(s, k, a), lay.p(s, k, a), 1.0)
                    ineq.quad(r, lay.q(s, k, a), lay.q(s, k, a), 1.0)
                    ineq.quad(r, ili, ili, -1.0)
                    ineq.lin(r, ili, -2.0 * smax)

            # voltage magnitude window: v_min^2 <= e^2 + f^2 <= v_max^2
            for bidx, b in enumerate(case.buses):
                en, fn = lay.e(s, k, bidx), lay.f(s, k, bidx)
                r = ineq.new_row(f"vlow[{b.id};{tag}]", const=b.v_min ** 2)
                ineq.quad(r, en, en, -1.0)
                ineq.quad(r, fn, fn, -1.0)
                r = ineq.new_row(f"vhigh[{b.id};{tag}]", const=-b.v_max ** 2)
                ineq.quad(r, en, en, 1.0)
                ineq.quad(r, fn, fn, 1.0)

            # flexibility modulation caps grow with the shared FI investment
            for fidx, fx in enumerate(case.flex_providers):
                ifi = lay.fi(fidx)
                for label, idx, b0 in (
                    ("up", lay.p_up(s, k, fidx), fx.p_up_base),
                    ("dn", lay.p_dn(s, k, fidx), fx.p_dn_base),
                    ("qup", lay.q_up(s, k, fidx), fx.q_up_base),
                    ("qdn", lay.q_dn(s, k, fidx), fx.q_dn_base),
                ):
                    r = ineq.new_row(f"flex_{label}[{fx.id};{tag}]", const=-b0 / base)
                    ineq.lin(r, idx, 1.0)
                    ineq.lin(r, ifi, -1.0)

    obj = _compile_objective(case, lay, objective)
    return NlpProblem(case, enabled, objective, lay,
                      lb, ub, ConstraintBlock(eq, lay.n_var), ConstraintBlock(ineq, lay.n_var), obj)


def _compile_objective(case: NetworkCase, lay: VariableLayout, objective: Objective) -> CompiledObjective:
    base = case.base_mva
    lin = np.zeros(lay.n_var)
    q_i: list[int] = []
    q_j: list[int] = []
    q_c: list[float] = []
    const = 0.0
    weights: dict[tuple[int, int], float] = {}

    if objective.tag == "curtailment":
        # total load curtailment over all scenarios, states and buses, in MW
        for s in range(lay.ns):
            for k in range(lay.nk):
                for bidx in range(lay.nb):
                    lin[lay.lc(s, k, bidx)] += base
        return CompiledObjective("curtailment", np.array(q_i), np.array(q_j),
                                 np.array(q_c), lin, const, weights)

    # expected system cost in EUR/h: probability-weighted operation cost
    # plus unweighted levelised investment cost
    for s, scn in enumerate(case.scenarios):
        for k, st in enumerate(case.states):
            w = scn.weight * st.weight
            weights[(scn.id, st.k)] = w
            if w == 0.0:
                continue
            for gidx, g in enumerate(case.generators):
                ipg = lay.pg(s, k, gidx)
                const += w * g.cost_c0
                lin[ipg] += w * g.cost_c1 * base
                if g.cost_c2:
                    q_i.append(ipg)
                    q_j.append(ipg)
                    q_c.append(w * g.cost_c2 * base * base)
            for bidx in range(lay.nb):
                lin[lay.lc(s, k, bidx)] += w * case.c_curt_load * base
                lin[lay.rc(s, k, bidx)] += w * case.c_curt_res * base
            for fidx, fx in enumerate(case.flex_providers):
                lin[lay.p_up(s, k, fidx)] += w * fx.c_flex * base
                lin[lay.p_dn(s, k, fidx)] += w * fx.c_flex * base
    for lidx, ln in enumerate(case.lines):
        lin[lay.li(lidx)] += ln.c_inv * base
    for fidx, fx in enumerate(case.flex_providers):
        lin[lay.fi(fidx)] += fx.c_inv * base
    return CompiledObjective("cost", np.asarray(q_i, dtype=np.int64),
                             np.asarray(q_j, dtype=np.int64), np.asarray(q_c, dtype=float),
                             lin, const, weights)


# ---------------------------------------------------------------------------
# evaluation API

def eval_constraints(problem: NlpProblem, x: np.ndarray) -> np.ndarray:
    """Residuals of all constraints at x, equalities first then inequalities.

    Equality rows are feasible at 0; inequality rows are feasible at <= 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n_var,):
        raise ValueError(f"point has shape {x.shape}, expected ({problem.n_var},)")
    return np.concatenate([problem.eq.values(x), problem.ineq.values(x)])


def eval_objective(problem: NlpProblem, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value (MW or EUR/h) and its exact gradient at x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n_var,):
        raise ValueError(f"point has shape {x.shape}, expected ({problem.n_var},)")
    return problem.obj.value_gradient(x)


def constraint_violation(problem: NlpProblem, x: np.ndarray) -> float:
    """Worst violation: |equality residual| and positive part of inequalities."""
    r = eval_constraints(problem, x)
    v_eq = np.abs(r[:problem.m_eq]).max(initial=0.0)
    v_in = r[problem.m_eq:].max(initial=0.0)
    return float(max(v_eq, v_in, 0.0))


def expected_counts(case: NetworkCase) -> dict[str, int]:
    """Closed-form variable/constraint counts (see module docstring)."""
    nb, nl = len(case.buses), len(case.lines)
    ng, nf = len(case.generators), len(case.flex_providers)
    ns, nk = len(case.scenarios), len(case.states)
    n_cont = sum(1 for st in case.states if st.outaged_line is not None)
    arcs_total = 2 * (nl * nk - n_cont)  # in-service directed arcs over all states
    return {
        "n_var": nl + nf + ns * nk * (4 * nb + 4 * nl + 2 * ng + 4 * nf),
        "m_eq": ns * (2 * nb * nk + 2 * arcs_total),
        "m_ineq": ns * ((2 * nb + 4 * nf) * nk + arcs_total),
    }


def derivative_check(problem: NlpProblem, x: np.ndarray | None = None,
                     step: float = 1e-6, n_hvp: int = 5, seed: int = 0) -> float:
    """Worst relative error of analytic derivatives against central differences.

    Checks the objective gradient, the full constraint Jacobian, and Hessian
    products of the Lagrangian with random multipliers/directions. The point
    should be strictly interior to the bounds; if omitted, a midpoint-ish
    interior point is used.
    """
    rng = np.random.default_rng(seed)
    if x is None:
        lo = np.where(np.isfinite(problem.lb), problem.lb, -1.0)
        hi = np.where(np.isfinite(problem.ub), problem.ub, 1.0)
        x = 0.5 * (lo + hi)
    x = np.asarray(x, dtype=float)
    n = problem.n_var
    worst = 0.0

    val_p = np.empty(n)
    _, grad = eval_objective(problem, x)
    fd_grad = np.empty(n)
    m_total = problem.m_eq + problem.m_ineq
    fd_jac = np.empty((m_total, n))
    for i in range(n):
        xp = x.copy(); xp[i] += step
        xm = x.copy(); xm[i] -= step
        fp, _ = eval_objective(problem, xp)
        fm, _ = eval_objective(problem, xm)
        fd_grad[i] = (fp - fm) / (2 * step)
        fd_jac[:, i] = (eval_constraints(problem, xp) - eval_constraints(problem, xm)) / (2 * step)
    scale_g = max(1.0, float(np.abs(grad).max(initial=0.0)))
    worst = max(worst, float(np.abs(fd_grad - grad).max()) / scale_g)

    J = sp.vstack([problem.eq.jacobian(x), problem.ineq.jacobian(x)]).toarray()
    scale_j = max(1.0, float(np.abs(J).max(initial=0.0)))
    worst = max(worst, float(np.abs(fd_jac - J).max()) / scale_j)

    lam_eq = rng.standard_normal(problem.m_eq)
    lam_in = rng.standard_normal(problem.m_ineq)
    sigma = 1.0
    H = problem.lagrangian_hessian(sigma, lam_eq, lam_in)

    def lag_grad(pt: np.ndarray) -> np.ndarray:
        _, g = eval_objective(problem, pt)
        return (sigma * g + problem.eq.jacobian(pt).T @ lam_eq
                + problem.ineq.jacobian(pt).T @ lam_in)

    for _ in range(n_hvp):
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        hv_fd = (lag_grad(x + step * v) - lag_grad(x - step * v)) / (2 * step)
        hv = H @ v
        scale_h = max(1.0, float(np.abs(hv).max(initial=0.0)))
        worst = max(worst, float(np.abs(hv_fd - hv).max()) / scale_h)
    return worst


def dump_problem_text(problem: NlpProblem) -> str:
    """Plain-text dump of the NLP (variables, bounds, constraint polynomials).

    Format: one VAR line per variable `VAR name lb ub`, then one line per
    constraint `EQ|LE name : polynomial (=0 | <=0)` where the polynomial lists
    `coef*var_i*var_j` and `coef*var` monomials plus the constant.
    """
    lay = problem.layout
    names = lay.var_names
    lines = [f"NLP {problem.case.name} objective={problem.objective.tag} "
             f"options={sorted(problem.enabled_options)}"]
    for i in range(problem.n_var):
        lines.append(f"VAR {names[i]} {problem.lb[i]:.12g} {problem.ub[i]:.12g}")

    def rows(block: ConstraintBlock, sense: str):
        lin = block.lin.tocoo()
        lin_terms: dict[int, list[str]] = {}
        for r, c, v in zip(lin.row, lin.col, lin.data):
            lin_terms.setdefault(int(r), []).append(f"{v:+.12g}*{names[c]}")
        quad_terms: dict[int, list[str]] = {}
        for r, i, j, c in zip(block.q_row, block.q_i, block.q_j, block.q_c):
            quad_terms.setdefault(int(r), []).append(f"{c:+.12g}*{names[i]}*{names[j]}")
        for r in range(block.m):
            terms = quad_terms.get(r, []) + lin_terms.get(r, [])
            if block.const[r] or not terms:
                terms.append(f"{block.const[r]:+.12g}")
            op = "=0" if sense == "EQ" else "<=0"
            lines.append(f"{sense} {block.names[r]} : {' '.join(terms)} {op}")

    rows(problem.eq, "EQ")
    rows(problem.ineq, "LE")
    obj = problem.obj
    terms = [f"{c:+.12g}*{names[i]}*{names[j]}" for i, j, c in zip(obj.q_i, obj.q_j, obj.q_c)]
    terms += [f"{v:+.12g}*{names[i]}" for i, v in enumerate(obj.lin) if v]
    if obj.const:
        terms.append(f"{obj.const:+.12g}")
    lines.append(f"MIN {obj.tag} : {' '.join(terms)}")
    return "\n".join(lines) + "\n"
